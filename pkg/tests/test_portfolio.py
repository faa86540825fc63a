"""Payoffs, the basket reduction and its MC lock-in, close-out, drivers."""

import numpy as np
import pytest

from deepxva import engine as eng
from deepxva import portfolio as pf


def test_payoff_cases():
    c = pf.Contract(assets=(0, 1), maturity=1.0, strike=1.0)
    assert pf.payoff(c, np.array([4.0, 1.0])) == pytest.approx(1.0)
    assert pf.payoff(c, np.array([1.0, 1.0])) == pytest.approx(0.0)
    # permutation symmetry
    assert pf.payoff(c, np.array([0.7, 1.9])) == pf.payoff(c, np.array([1.9, 0.7]))
    with pytest.raises(pf.PortfolioError):
        pf.payoff(c, np.array([-1.0, 1.0]))


def test_cashflow_jump_only_at_maturity():
    grid = eng.TimeGrid(10, 1.0)
    p = pf.Portfolio([
        pf.Contract(assets=(0,), maturity=0.5, strike=1.0),
        pf.Contract(assets=(1,), maturity=0.5, strike=0.5),
        pf.Contract(assets=(0, 1), maturity=1.0, strike=1.0),
    ])
    mat = p.maturity_indices(grid)
    states = np.array([[1.2, 0.9]])
    for n in range(11):
        jump = pf.cashflow_jump(p, n, states, mat)
        if n == 5:
            assert jump[0, 0] == pytest.approx(0.2)
            assert jump[0, 1] == pytest.approx(0.4)  # two contracts jump together
            assert jump[0, 2] == 0.0
        elif n == 10:
            assert jump[0, 2] > 0.0
        else:
            assert np.all(jump == 0.0)


def test_geometric_reduction_degenerate_cases():
    sig = np.array([0.2, 0.2])
    c1 = pf.Contract(assets=(0,), maturity=1.0, strike=1.0)
    s, adj = pf.geometric_reduction(c1, sig, np.eye(2))
    assert s == pytest.approx(0.2) and adj == pytest.approx(0.0)
    # two assets, rho=1, equal sigma: basket collapses
    c2 = pf.Contract(assets=(0, 1), maturity=1.0, strike=1.0)
    rho = np.array([[1.0, 1.0], [1.0, 1.0]])
    s2, adj2 = pf.geometric_reduction(c2, sig, rho)
    assert s2 == pytest.approx(0.2) and adj2 == pytest.approx(0.0)


def test_geometric_reduction_mc_moment_lock_in():
    """Geometric average of simulated GBMs matches the reduced GBM's mean."""
    rho = np.array([[1.0, 0.5, 0.2], [0.5, 1.0, 0.3], [0.2, 0.3, 1.0]])
    sig = np.array([0.2, 0.3, 0.25])
    params = eng.ModelParams(rate=0.05, vols=sig, x0=np.ones(3), n_assets=3)
    grid = eng.TimeGrid(200, 1.0)
    spec = eng.CorrelationSpec(rho)
    m = 1 << 16
    dw = eng.sample_increments(101, grid, spec, m)
    batch = eng.simulate(params, eng.DriftTilt.none(3), dw, grid)
    c = pf.Contract(assets=(0, 1, 2), maturity=1.0, strike=1.0)
    g = np.exp(np.log(batch.states[:, -1, :]).mean(axis=1))
    sigma_g, adj = pf.geometric_reduction(c, sig, rho)
    analytic_mean = np.exp((0.05 + adj) * 1.0)
    se = g.std() / np.sqrt(m)
    assert abs(g.mean() - analytic_mean) < 4 * se


def test_analytic_clean_value_atm_reference():
    c = pf.Contract(assets=(0,), maturity=1.0, strike=1.0)
    v = pf.analytic_clean_value(c, 0.0, np.array([1.0]), 0.05, np.array([0.2]), np.eye(1))
    assert v == pytest.approx(0.104506, abs=5e-7)


def test_analytic_clean_value_limits():
    c = pf.Contract(assets=(0,), maturity=1.0, strike=1.0)
    sig, rho = np.array([0.2]), np.eye(1)
    deep = pf.analytic_clean_value(c, 0.0, np.array([50.0]), 0.05, sig, rho)
    assert deep == pytest.approx(50.0 - np.exp(-0.05), rel=1e-9)
    tiny_k = pf.Contract(assets=(0,), maturity=1.0, strike=1e-12)
    v = pf.analytic_clean_value(tiny_k, 0.0, np.array([2.0]), 0.05, sig, rho)
    assert v == pytest.approx(2.0, rel=1e-9)  # discounted effective forward
    # at maturity: payoff; past maturity: zero
    assert pf.analytic_clean_value(c, 1.0, np.array([1.3]), 0.05, sig, rho) == pytest.approx(0.3)
    assert pf.analytic_clean_value(c, 1.2, np.array([1.3]), 0.05, sig, rho) == 0.0


def test_analytic_value_continuous_at_maturity():
    c = pf.Contract(assets=(0,), maturity=0.5, strike=0.9)
    sig, rho = np.array([0.25]), np.eye(1)
    x = np.array([1.1])
    near = pf.analytic_clean_value(c, 0.5 - 1e-9, x, 0.05, sig, rho)
    at = pf.analytic_clean_value(c, 0.5, x, 0.05, sig, rho)
    assert near == pytest.approx(at, abs=1e-4)


def test_portfolio_linearity():
    p = pf.Portfolio([
        pf.Contract(assets=(0,), maturity=1.0, strike=1.0),
        pf.Contract(assets=(0, 1), maturity=0.5, strike=0.9),
    ])
    sig, rho = np.array([0.2, 0.3]), np.array([[1.0, 0.4], [0.4, 1.0]])
    x = np.array([[1.0, 1.1], [0.9, 1.3]])
    vals = pf.portfolio_analytic_values(p, 0.1, x, 0.05, sig, rho)
    total = vals.sum(axis=-1)
    by_hand = sum(pf.analytic_clean_value(c, 0.1, x, 0.05, sig, rho) for c in p.contracts)
    assert np.allclose(total, by_hand, rtol=1e-14)


def test_block_bookkeeping():
    p = pf.Portfolio([
        pf.Contract(assets=(0, 1, 2), maturity=1.0, strike=1.0),
        pf.Contract(assets=(2,), maturity=1.0, strike=1.0),
        pf.Contract(assets=(0, 4), maturity=1.0, strike=1.0),
    ])
    assert p.total_width == 6
    assert np.array_equal(p.offsets, [0, 3, 4, 6])
    assert p.block(1) == slice(3, 4)
    assert np.array_equal(p.asset_columns, [0, 1, 2, 2, 0, 4])


RATES = pf.RatesConfig(
    r_c_borrow=0.075, r_c_lend=0.085, r_im_borrow=0.05, r_im_lend=0.065,
    r_f_borrow=0.75, r_f_lend=0.65, lgd_bank=0.3, lgd_cpty=0.3,
    collateral_fraction=0.5,
)


def test_close_out_cases():
    z = pf.RatesConfig(0.075, 0.085, 0.05, 0.065, 0.75, 0.65, 0.0, 0.0, 0.5)
    assert pf.close_out(1.0, 0.5, 0.2, 0.0, "cpty", z) == pytest.approx(1.0)
    assert pf.close_out(1.0, 1.5, 0.2, 0.0, "cpty", RATES) == pytest.approx(1.0)  # full protection
    assert pf.close_out(1.0, 0.5, 0.2, 0.0, "cpty", RATES) == pytest.approx(0.91)


def test_close_out_monotonicity():
    ims = np.linspace(0.0, 1.0, 11)
    vals = [pf.close_out(1.0, 0.2, im, -0.1, "cpty", RATES) for im in ims]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    bank_vals = [pf.close_out(1.0, 0.2, im, -0.1, "bank", RATES) for im in ims]
    assert len(set(bank_vals)) == 1


def test_drivers_trivial_anchors():
    r = 0.05
    flat = pf.RatesConfig(r, r, 0.05, 0.065, 0.75, 0.65, 0.3, 0.3, 0.5)
    assert np.all(pf.f_colva(flat, r, np.array([-1.0, 0.0, 2.0])) == 0.0)
    assert pf.f_mva(RATES, r, 0.0, 0.0) == 0.0
    assert pf.f_fva(RATES, r, 1.0, 0.25, 0.5, 0.25) == 0.0  # position at the kink
    # collateral-rate switch by sign
    assert pf.f_colva(RATES, r, 1.0) == pytest.approx((0.05 - 0.075) * 1.0)
    assert pf.f_colva(RATES, r, -1.0) == pytest.approx((0.05 - 0.085) * -1.0)


def test_collateral_fraction_and_linearity():
    zero = pf.RatesConfig(0.075, 0.085, 0.05, 0.065, 0.75, 0.65, 0.3, 0.3, 0.0)
    assert np.all(pf.collateral(zero, np.array([1.0, 2.0])) == 0.0)
    assert pf.collateral(RATES, 2.0) == pytest.approx(1.0)
    v = np.array([0.3, 1.7])
    assert np.allclose(pf.collateral(RATES, 3.0 * v), 3.0 * pf.collateral(RATES, v))


def test_rates_validation():
    with pytest.raises(pf.PortfolioError):
        pf.RatesConfig(0.075, 0.085, 0.05, 0.065, 0.75, 0.65, 1.3, 0.3, 0.5)


def test_load_portfolio_roundtrip(tmp_path):
    f = tmp_path / "p.toml"
    f.write_text(
        '[[contract]]\nassets = [1, 2]\nmaturity = 1.0\nstrike = 1.05\n'
        '[[contract]]\nassets = [2]\nmaturity = 0.5\nstrike = 0.9\n'
    )
    p = pf.load_portfolio(str(f))
    assert p.n_contracts == 2
    assert p.contracts[0].assets == (0, 1)
    assert p.contracts[1].assets == (1,)
    assert p.contracts[1].maturity == 0.5
