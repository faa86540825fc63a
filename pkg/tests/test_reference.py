"""Nested MC consistency with closed forms; quantile and rate studies."""

import numpy as np
import pytest

from deepxva import bsde, margin
from deepxva import engine as eng
from deepxva import portfolio as pf
from deepxva import reference as ref
from deepxva import rng


def test_empirical_quantile_conventions():
    assert ref.empirical_quantile(np.arange(1, 101), 0.99) == 99.0
    assert ref.empirical_quantile([5.0, 1.0, 9.0], 1.0) == 9.0
    assert ref.empirical_quantile([5.0, 1.0, 9.0], 1e-9) == 1.0
    with pytest.raises(ref.ReferenceError):
        ref.empirical_quantile([], 0.5)


def test_empirical_quantile_monotone_in_alpha():
    x = np.random.default_rng(1).normal(size=257)
    qs = [ref.empirical_quantile(x, a) for a in np.linspace(0.05, 1.0, 20)]
    assert all(b >= a for a, b in zip(qs, qs[1:]))


def test_normal_quantile_oracle():
    z = rng.normals(9, 6, 0, 1 << 15, 1, 1).ravel()
    q = ref.empirical_quantile(z, 0.99)
    assert abs(q - 2.3263478740408408) < 0.03


def _toy_context(use_analytic=True):
    market = eng.ModelParams(rate=0.05, vols=np.array([0.2, 0.2, 0.3]), x0=np.ones(3),
                             n_assets=1, barrier_bank=0.575, barrier_cpty=0.675)
    corr = eng.CorrelationSpec(np.eye(3))
    grid = eng.TimeGrid(10, 1.0)
    port = pf.Portfolio([pf.Contract(assets=(0,), maturity=1.0, strike=1.0)])
    rates = pf.RatesConfig(0.075, 0.085, 0.05, 0.065, 0.75, 0.65, 0.3, 0.3, 0.5)
    znet_spec = __import__("deepxva.nn", fromlist=["MlpSpec"]).MlpSpec(2, bsde.CLEAN_HIDDEN, 1)
    from deepxva import nn
    clean = bsde.CleanModel(np.array([0.104506]), nn.init_mlp(znet_spec, 0, "toy"), 1.0, 1, 0.05)
    return ref.ReferenceContext(market, corr, grid, port, rates, clean,
                                use_analytic_clean=use_analytic)


def test_clean_reference_matches_black_scholes():
    ctx = _toy_context()
    spec = ref.ReferenceSpec(refine=4, m_ref=1 << 13, seed=3)
    res = ref.nested_mc_value(ctx, spec, "clean", 0, ctx.market.x0)
    bs = 0.10450583572185565
    assert res.se > 0.0
    assert abs(res.value - bs) < 3 * res.se
    assert res.n_ref == 40 and res.m_ref == 1 << 13


def test_cva_reference_zero_lgd_is_exactly_zero():
    ctx = _toy_context()
    ctx.rates = pf.RatesConfig(0.075, 0.085, 0.05, 0.065, 0.75, 0.65, 0.0, 0.0, 0.5)
    spec = ref.ReferenceSpec(refine=2, m_ref=1 << 10, seed=4)
    res = ref.nested_mc_value(ctx, spec, "cva", 0, ctx.market.x0,
                              branch_vhat=np.array([0.104506]))
    assert res.value == 0.0


def test_colva_reference_sign_and_se_scaling():
    ctx = _toy_context()
    spec = ref.ReferenceSpec(refine=2, m_ref=1 << 11, seed=5)
    res = ref.nested_mc_value(ctx, spec, "colva", 0, ctx.market.x0,
                              branch_vhat=np.array([0.104506]))
    assert res.value > 0.0  # bank pays r_c_borrow > r on received margin
    spec2 = ref.ReferenceSpec(refine=2, m_ref=1 << 13, seed=5)
    res2 = ref.nested_mc_value(ctx, spec2, "colva", 0, ctx.market.x0,
                               branch_vhat=np.array([0.104506]))
    ratio = res.se / res2.se
    assert 2.0 * 0.8 < ratio < 2.0 * 1.2  # doubling M twice halves SE within 20%


def test_reference_determinism():
    ctx = _toy_context()
    spec = ref.ReferenceSpec(refine=2, m_ref=1 << 10, seed=6)
    a = ref.nested_mc_value(ctx, spec, "clean", 0, ctx.market.x0)
    b = ref.nested_mc_value(ctx, spec, "clean", 0, ctx.market.x0)
    assert a.value == b.value and a.se == b.se


def test_strong_gbm_rate_window():
    r = ref.convergence_study([25, 50, 100, 200, 400], seeds=[1, 2], m=1 << 12)
    assert 0.4 < r.mean_slope < 0.6
    lo, hi = r.slope_band
    assert lo <= r.mean_slope <= hi


def test_stopped_error_decreases_monotonically():
    r = ref.convergence_study([25, 50, 100, 200], seeds=[3], mode="stopped", m=1 << 13)
    errs = r.errors[0]
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_convergence_study_guards():
    with pytest.raises(ref.ReferenceError):
        ref.convergence_study([25, 50], seeds=[1])
    with pytest.raises(ref.ReferenceError):
        ref.convergence_study([30, 60, 100], seeds=[1])  # 100 not a divisor of 100? levels must divide finest
