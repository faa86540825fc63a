"""Simulation oracles: increment moments, GBM moments, defaults, Girsanov."""

import numpy as np
import pytest

from deepxva import engine as eng

RHO7 = np.array([
    [1.0, 0.9, 0.2, 0.5, 0.1, 0.1, 0.2],
    [0.9, 1.0, 0.4, 0.3, 0.2, 0.3, 0.2],
    [0.2, 0.4, 1.0, 0.2, 0.75, 0.15, 0.25],
    [0.5, 0.3, 0.2, 1.0, 0.35, 0.05, 0.15],
    [0.1, 0.2, 0.75, 0.35, 1.0, 0.15, 0.05],
    [0.1, 0.3, 0.15, 0.05, 0.15, 1.0, 0.25],
    [0.2, 0.2, 0.25, 0.15, 0.05, 0.25, 1.0],
])
SIG7 = np.array([0.2, 0.25, 0.25, 0.25, 0.3, 0.2, 0.3])


def full_model(**kw):
    kw.setdefault("barrier_bank", 0.575)
    kw.setdefault("barrier_cpty", 0.675)
    return eng.ModelParams(rate=0.05, vols=SIG7, x0=np.ones(7), n_assets=5, **kw)


def test_cholesky_identity_and_2x2():
    assert np.array_equal(eng.cholesky(np.eye(4)), np.eye(4))
    L = eng.cholesky(np.array([[1.0, 0.9], [0.9, 1.0]]))
    assert np.allclose(L, [[1.0, 0.0], [0.9, np.sqrt(0.19)]])


def test_cholesky_headline_correlation_positive_definite():
    spec = eng.CorrelationSpec(RHO7)
    assert np.allclose(spec.chol @ spec.chol.T, RHO7, atol=1e-12)


def test_cholesky_failure_names_pivot():
    bad = np.array([[1.0, 0.95, 0.0], [0.95, 1.0, 0.95], [0.0, 0.95, 1.0]])
    with pytest.raises(eng.EngineError, match="pivot 2"):
        eng.cholesky(bad)


def test_cholesky_sub_block_nesting():
    spec = eng.CorrelationSpec(RHO7)
    assert np.allclose(spec.sub(5).chol, spec.chol[:5, :5])


def test_increment_moments_against_mc_oracle():
    grid = eng.TimeGrid(4, 1.0)
    spec = eng.CorrelationSpec(RHO7)
    m = 1 << 16
    dw = eng.sample_increments(7, grid, spec, m)
    flat = dw.reshape(-1, 7)
    n = flat.shape[0]
    # mean within 4 SE of 0
    se_mean = np.sqrt(grid.h) / np.sqrt(n)
    assert np.all(np.abs(flat.mean(axis=0)) < 4 * se_mean)
    # covariance within 4 SE of h*rho (SE of a covariance entry ~ h*sqrt((1+rho^2)/n))
    cov = flat.T @ flat / n
    se_cov = grid.h * np.sqrt((1.0 + RHO7**2) / n)
    assert np.all(np.abs(cov - grid.h * RHO7) < 4 * se_cov)


def test_increments_deterministic_and_chunkable():
    grid = eng.TimeGrid(3, 1.0)
    spec = eng.CorrelationSpec(RHO7)
    a = eng.sample_increments(5, grid, spec, 64)
    b = eng.sample_increments(5, grid, spec, 64)
    c = np.concatenate([eng.sample_increments(5, grid, spec, 20),
                        eng.sample_increments(5, grid, spec, 44, path0=20)])
    assert np.array_equal(a, b)
    assert np.array_equal(a, c)


def test_simulate_deterministic_recursion():
    # sigma=0, q=0, 1-dim: X_n = x0 (1 + r h)^n exactly
    params = eng.ModelParams(rate=0.05, vols=np.array([1e-300]), x0=np.array([2.0]), n_assets=1)
    grid = eng.TimeGrid(10, 1.0)
    dw = np.zeros((3, 10, 1))
    batch = eng.simulate(params, eng.DriftTilt.none(1), dw, grid)
    expect = 2.0 * (1 + 0.05 * 0.1) ** np.arange(11)
    assert np.allclose(batch.states[0, :, 0], expect, rtol=1e-12)


def test_gbm_terminal_mean_oracle():
    params = eng.ModelParams(rate=0.05, vols=np.array([0.2]), x0=np.array([1.0]), n_assets=1)
    grid = eng.TimeGrid(200, 1.0)
    spec = eng.CorrelationSpec(np.eye(1))
    m = 1 << 16
    dw = eng.sample_increments(11, grid, spec, m)
    batch = eng.simulate(params, eng.DriftTilt.none(1), dw, grid)
    xt = batch.states[:, -1, 0]
    se = xt.std() / np.sqrt(m)
    assert abs(xt.mean() - np.exp(0.05)) < 4 * se


def test_tilt_lowers_defaultable_mean_and_locality():
    params = full_model()
    grid = eng.TimeGrid(50, 1.0)
    spec = eng.CorrelationSpec(RHO7)
    dw = eng.sample_increments(3, grid, spec, 4096)
    base = eng.simulate(params, eng.DriftTilt.none(7), dw, grid)
    prev_mean = base.states[:, -1, 6].mean()
    for q in (0.1, 0.2, 0.35):
        tilted = eng.simulate(params, eng.DriftTilt.credit(5, 0.0, q), dw, grid)
        mean = tilted.states[:, -1, 6].mean()
        assert mean < prev_mean
        prev_mean = mean
        # first d components bit-identical under shared increments
        assert np.array_equal(tilted.states[:, :, :5], base.states[:, :, :5])


def test_detect_defaults_sentinels_and_immediate():
    params = full_model(barrier_bank=0.0, barrier_cpty=0.0)
    grid = eng.TimeGrid(20, 1.0)
    spec = eng.CorrelationSpec(RHO7)
    dw = eng.sample_increments(13, grid, spec, 512)
    batch = eng.detect_defaults(eng.simulate(params, eng.DriftTilt.none(7), dw, grid), params, grid)
    assert np.all(batch.n_tau == grid.n_steps + 1)  # positive GBM never hits 0

    high = full_model(barrier_bank=2.0, barrier_cpty=2.0)
    batch2 = eng.detect_defaults(eng.simulate(high, eng.DriftTilt.none(7), dw, grid), high, grid)
    assert np.all(batch2.n_tau == 1)  # barrier at/above x0 crossed at the first step
    assert np.all(batch2.n_tau == np.minimum(batch2.n_tau_b, batch2.n_tau_c))


def test_default_consistency_with_barrier():
    params = full_model()
    grid = eng.TimeGrid(50, 1.0)
    spec = eng.CorrelationSpec(RHO7)
    dw = eng.sample_increments(17, grid, spec, 4096)
    batch = eng.detect_defaults(eng.simulate(params, eng.DriftTilt.none(7), dw, grid), params, grid)
    hit = batch.n_tau_b <= grid.n_steps
    idx = batch.n_tau_b[hit]
    vals = batch.states[hit, idx, 5]
    assert np.all(vals <= 0.575 + 1e-12)


def test_tilted_default_frequency_increases():
    params = full_model()
    grid = eng.TimeGrid(100, 1.0)
    spec = eng.CorrelationSpec(RHO7)
    dw = eng.sample_increments(23, grid, spec, 1 << 14)
    tilt = eng.DriftTilt.credit(5, 0.2, 0.35)
    base = eng.detect_defaults(eng.simulate(params, eng.DriftTilt.none(7), dw, grid), params, grid)
    tilted = eng.detect_defaults(eng.simulate(params, tilt, dw, grid), params, grid)
    f0 = (base.n_tau <= grid.n_steps).mean()
    f1 = (tilted.n_tau <= grid.n_steps).mean()
    assert 0.0 < f0 < f1


def test_girsanov_weight_zero_tilt_and_martingale():
    params = full_model()
    grid = eng.TimeGrid(50, 1.0)
    spec = eng.CorrelationSpec(RHO7)
    m = 1 << 15
    dw = eng.sample_increments(29, grid, spec, m)
    base = eng.simulate(params, eng.DriftTilt.none(7), dw, grid)
    assert np.array_equal(
        eng.girsanov_logweight(base, eng.DriftTilt.none(7), params, spec, grid), np.zeros(m))
    tilt = eng.DriftTilt.credit(5, 0.2, 0.35)
    gamma = np.exp(eng.girsanov_logweight(base, tilt, params, spec, grid))
    se = gamma.std() / np.sqrt(m)
    assert abs(gamma.mean() - 1.0) < 4 * se


def test_girsanov_reweighting_reproduces_tilted_frequency():
    """E[Γ·1_default(X)] on base paths == default frequency of tilted paths."""
    params = full_model()
    grid = eng.TimeGrid(100, 1.0)
    spec = eng.CorrelationSpec(RHO7)
    m = 1 << 15
    tilt = eng.DriftTilt.credit(5, 0.2, 0.35)
    dw = eng.sample_increments(31, grid, spec, m)
    base = eng.detect_defaults(eng.simulate(params, eng.DriftTilt.none(7), dw, grid), params, grid)
    gamma = np.exp(eng.girsanov_logweight(base, tilt, params, spec, grid))
    weighted = gamma * (base.n_tau <= grid.n_steps)
    est = weighted.mean()
    se = weighted.std() / np.sqrt(m)

    dw2 = eng.sample_increments(32, grid, spec, m)
    tilted = eng.detect_defaults(eng.simulate(params, tilt, dw2, grid), params, grid)
    freq = (tilted.n_tau <= grid.n_steps).mean()
    se_f = np.sqrt(freq * (1 - freq) / m)
    assert abs(est - freq) < 4 * np.sqrt(se**2 + se_f**2)


def test_strong_convergence_order():
    """1-D GBM strong error slope vs exact solution over h in {1/25..1/400}."""
    params = eng.ModelParams(rate=0.05, vols=np.array([0.2]), x0=np.array([1.0]), n_assets=1)
    spec = eng.CorrelationSpec(np.eye(1))
    m = 1 << 13
    fine = eng.TimeGrid(400, 1.0)
    dw_fine = eng.sample_increments(37, fine, spec, m)
    w_total = dw_fine.sum(axis=1)[:, 0]
    exact = np.exp((0.05 - 0.5 * 0.2**2) * 1.0 + 0.2 * w_total)
    errs, hs = [], []
    for n in (25, 50, 100, 200, 400):
        grid = eng.TimeGrid(n, 1.0)
        agg = dw_fine.reshape(m, n, 400 // n, 1).sum(axis=2)
        batch = eng.simulate(params, eng.DriftTilt.none(1), agg, grid)
        errs.append(np.abs(batch.states[:, -1, 0] - exact).mean())
        hs.append(grid.h)
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert 0.4 < slope < 0.6


def test_simulate_blowup_reported():
    params = eng.ModelParams(rate=0.05, vols=np.array([1.0]), x0=np.array([1e308]), n_assets=1)
    grid = eng.TimeGrid(5, 1.0)
    dw = np.full((1, 5, 1), 10.0)
    with pytest.raises(eng.EngineError, match="path 0, step"):
        eng.simulate(params, eng.DriftTilt.none(1), dw, grid)


def test_grid_maturity_validation():
    grid = eng.TimeGrid(50, 1.0)
    assert grid.index_of(0.4) == 20
    with pytest.raises(eng.EngineError):
        grid.index_of(0.4123)


def test_tabulated_barrier():
    params = full_model(barrier_bank=np.linspace(2.0, 2.0, 21), barrier_cpty=0.0)
    grid = eng.TimeGrid(20, 1.0)
    spec = eng.CorrelationSpec(RHO7)
    dw = eng.sample_increments(41, grid, spec, 16)
    batch = eng.detect_defaults(eng.simulate(params, eng.DriftTilt.none(7), dw, grid), params, grid)
    assert np.all(batch.n_tau_b == 1)
    assert np.all(batch.n_tau_c == grid.n_steps + 1)
