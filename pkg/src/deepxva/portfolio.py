"""Contracts, payoffs, the closed-form clean-value oracle, and BSDE drivers.

Every contract is a European call on the geometric mean of its asset
subset. The geometric mean of correlated GBMs is itself a GBM, so each
contract reduces to a Black–Scholes call on a single effective factor:

    σ_G² = (1/d_j²) Σ_{i,k∈I_j} ρ_{ik} σ_i σ_k
    μ_G  = r − (1/(2 d_j)) Σ_{i∈I_j} σ_i² + σ_G²/2

and the price is the discounted Black formula on the effective forward
F = G·e^{μ_G τ}. The drift constants are locked in by a Monte Carlo moment
test before anything downstream trusts the oracle.

Sign convention: cashflow jumps are stored positive (the bank holds the
options), so clean values are positive; verified against the oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class PortfolioError(Exception):
    pass


@dataclass(frozen=True)
class Contract:
    """Geometric-basket call on assets ``assets`` (0-based indices into 1..d)."""

    assets: tuple[int, ...]
    maturity: float
    strike: float

    def __post_init__(self):
        if len(self.assets) == 0:
            raise PortfolioError("contract needs a non-empty asset set")
        if len(set(self.assets)) != len(self.assets):
            raise PortfolioError("duplicate asset in contract index set")
        if self.strike <= 0.0:
            raise PortfolioError("strike must be positive")

    @property
    def width(self) -> int:
        return len(self.assets)


class Portfolio:
    """The P contracts plus block bookkeeping into the aggregate control vector.

    Block j occupies columns [offsets[j], offsets[j+1]) of the width-Σd_j
    control output; ``asset_columns`` maps every control column to its asset.
    """

    def __init__(self, contracts: list[Contract]):
        if not contracts:
            raise PortfolioError("portfolio has no contracts")
        self.contracts = list(contracts)
        widths = [c.width for c in contracts]
        self.offsets = np.concatenate([[0], np.cumsum(widths)]).astype(np.intp)
        self.total_width = int(self.offsets[-1])
        self.asset_columns = np.concatenate([np.asarray(c.assets, dtype=np.intp) for c in contracts])

    @property
    def n_contracts(self) -> int:
        return len(self.contracts)

    @property
    def n_assets(self) -> int:
        return int(max(max(c.assets) for c in self.contracts)) + 1

    def block(self, j: int) -> slice:
        return slice(int(self.offsets[j]), int(self.offsets[j + 1]))

    def maturity_indices(self, grid) -> np.ndarray:
        return np.asarray([grid.index_of(c.maturity) for c in self.contracts], dtype=np.int64)

    def alive(self, n: int, maturity_idx: np.ndarray) -> np.ndarray:
        """0/1 per contract: still accruing at step n (strictly before maturity)."""
        return (n < maturity_idx).astype(np.float64)


def payoff(contract: Contract, x: np.ndarray) -> np.ndarray:
    """((Π_{i∈I} x_i)^{1/d_j} − K)⁺ for x (..., d) with positive components."""
    x = np.asarray(x, dtype=np.float64)
    sub = x[..., list(contract.assets)]
    if np.any(sub <= 0.0):
        raise PortfolioError("geometric mean undefined for non-positive components")
    gmean = np.exp(np.log(sub).mean(axis=-1))
    return np.maximum(gmean - contract.strike, 0.0)


def cashflow_jump(portfolio: Portfolio, n: int, states: np.ndarray, maturity_idx: np.ndarray) -> np.ndarray:
    """Per-contract jump ΔA_n at step n, shape (M, P); zero except at maturities."""
    m = states.shape[0]
    out = np.zeros((m, portfolio.n_contracts))
    for j, c in enumerate(portfolio.contracts):
        if maturity_idx[j] == n:
            out[:, j] = payoff(c, states)
    return out


def geometric_reduction(contract: Contract, sigma: np.ndarray, rho: np.ndarray) -> tuple[float, float]:
    """Effective volatility σ_G and drift adjustment μ_G − r of the basket GBM."""
    idx = list(contract.assets)
    s = np.asarray(sigma, dtype=np.float64)[idx]
    r = np.asarray(rho, dtype=np.float64)[np.ix_(idx, idx)]
    m = len(idx)
    var_g = float(s @ r @ s) / (m * m)
    if var_g < 0.0:
        raise PortfolioError("correlation block not positive semi-definite")
    sigma_g = math.sqrt(var_g)
    drift_adj = 0.5 * var_g - float(np.sum(s * s)) / (2.0 * m)
    return sigma_g, drift_adj


def analytic_clean_value(contract: Contract, t, x: np.ndarray, rate: float,
                         sigma: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Black–Scholes price of the reduced single-factor call at (t, x).

    x has shape (..., d); returns shape (...). At t = maturity this is the
    payoff; past maturity the contract is worth zero.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    tau = contract.maturity - t
    sigma_g, drift_adj = geometric_reduction(contract, sigma, rho)
    sub = x[..., list(contract.assets)]
    if np.any(sub <= 0.0):
        raise PortfolioError("geometric mean undefined for non-positive components")
    g = np.exp(np.log(sub).mean(axis=-1))
    k = contract.strike
    out = np.zeros(np.broadcast_shapes(g.shape, tau.shape))
    tau_b = np.broadcast_to(tau, out.shape)
    g_b = np.broadcast_to(g, out.shape)
    at_exp = np.isclose(tau_b, 0.0, atol=1e-12)
    live = tau_b > 0.0
    out[at_exp] = np.maximum(g_b[at_exp] - k, 0.0)
    if np.any(live):
        tl, gl = tau_b[live], g_b[live]
        fwd = gl * np.exp((rate + drift_adj) * tl)
        sq = sigma_g * np.sqrt(tl)
        d1 = (np.log(fwd / k) + 0.5 * sq * sq) / sq
        d2 = d1 - sq
        out[live] = np.exp(-rate * tl) * (fwd * ndtr(d1) - k * ndtr(d2))
    return out


def portfolio_analytic_values(portfolio: Portfolio, t, states: np.ndarray, rate: float,
                              sigma: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Per-contract oracle prices, shape (..., P); zero past each maturity."""
    vals = [analytic_clean_value(c, t, states, rate, sigma, rho) for c in portfolio.contracts]
    return np.stack(vals, axis=-1)


@dataclass(frozen=True)
class RatesConfig:
    """Collateral / initial-margin / treasury rates, LGDs, collateral fraction."""

    r_c_borrow: float      # variation margin rate when the bank is taker (C ≥ 0)
    r_c_lend: float        # variation margin rate when the bank posts (C < 0)
    r_im_borrow: float     # remuneration on IM received from the counterparty
    r_im_lend: float       # remuneration on IM posted by the bank
    r_f_borrow: float      # unsecured treasury borrowing
    r_f_lend: float        # unsecured treasury lending
    lgd_bank: float
    lgd_cpty: float
    collateral_fraction: float

    def __post_init__(self):
        for name in ("lgd_bank", "lgd_cpty", "collateral_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PortfolioError(f"{name} must lie in [0, 1], got {v}")


def collateral(rates: RatesConfig, vhat) -> np.ndarray:
    """Variation margin: a fixed fraction of the clean portfolio value."""
    return rates.collateral_fraction * np.asarray(vhat, dtype=np.float64)


def collateral_rate(rates: RatesConfig, c) -> np.ndarray:
    return np.where(np.asarray(c) >= 0.0, rates.r_c_borrow, rates.r_c_lend)


def close_out(q, c, im_fc, im_tc, who: str, rates: RatesConfig) -> np.ndarray:
    """Settlement amount θ at default of ``who`` ('bank' or 'cpty')."""
    q = np.asarray(q, dtype=np.float64)
    if who == "cpty":
        return q - rates.lgd_cpty * np.maximum(q - c - im_fc, 0.0)
    if who == "bank":
        return q + rates.lgd_bank * np.maximum(-(q - c - im_tc), 0.0)
    raise PortfolioError(f"unknown defaulting party {who!r}")


def f_colva(rates: RatesConfig, r: float, c) -> np.ndarray:
    """(r − r^c)·c with r^c selected by the collateral sign."""
    return (r - collateral_rate(rates, c)) * np.asarray(c, dtype=np.float64)


def f_mva(rates: RatesConfig, r: float, im_tc, im_fc) -> np.ndarray:
    """(r − r^{IM,l})·IM^TC − r^{IM,b}·IM^FC."""
    return (r - rates.r_im_lend) * np.asarray(im_tc) - rates.r_im_borrow * np.asarray(im_fc)


def f_fva(rates: RatesConfig, r: float, vhat, tva, c, im_tc) -> np.ndarray:
    """Funding driver on the position v̂ − tva − c − IM^TC."""
    pos = np.asarray(vhat) - np.asarray(tva) - np.asarray(c) - np.asarray(im_tc)
    return ((r - rates.r_f_borrow) * np.maximum(pos, 0.0)
            - (r - rates.r_f_lend) * np.maximum(-pos, 0.0))


def load_portfolio(path: str) -> Portfolio:
    """Portfolio definition file: TOML with one [[contract]] table per contract.

    Asset indices in the file are 1-based, as printed in term sheets.
    """
    with open(path, "rb") as f:
        data = tomllib.load(f)
    rows = data.get("contract")
    if not rows:
        raise PortfolioError(f"{path}: no [[contract]] tables")
    contracts = []
    for row in rows:
        assets = tuple(int(i) - 1 for i in row["assets"])
        if any(i < 0 for i in assets):
            raise PortfolioError(f"{path}: asset indices are 1-based")
        contracts.append(Contract(assets=assets, maturity=float(row["maturity"]), strike=float(row["strike"])))
    return Portfolio(contracts)
