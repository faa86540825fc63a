"""Run configuration: one TOML file drives the whole pipeline.

Everything random flows from the single ``seed``; layers derive their
streams from purpose labels. Validation happens before any compute:
correlation must be positive definite, every maturity must sit on the
grid, referenced files must exist.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import bsde
from . import engine as eng
from . import margin
from . import portfolio as pf

SCHEMA_VERSION = 1


class ConfigError(Exception):
    pass


@dataclass
class EvalConfig:
    paths: int = 1 << 13
    representative: int = 3


@dataclass
class RunConfig:
    path: str
    seed: int
    grid: eng.TimeGrid
    market: eng.ModelParams
    corr: eng.CorrelationSpec
    portfolio: pf.Portfolio
    rates: pf.RatesConfig
    risk: margin.RiskMeasureSpec
    tilts: dict                      # kind -> DriftTilt (incl. "fva")
    layer1: bsde.TrainConfig
    layer2: margin.Layer2Config
    layer2_samples: int
    layer3: bsde.TrainConfig
    layer3_split: bool
    layer4: bsde.TrainConfig
    evaluation: EvalConfig
    sha256: str = ""

    @property
    def derived(self) -> dict:
        return {
            "n_contracts": self.portfolio.n_contracts,
            "n_assets": self.market.n_assets,
            "state_dim": self.market.dim,
            "control_width": self.portfolio.total_width,
            "n_steps": self.grid.n_steps,
            "step_size": self.grid.h,
        }


def _req(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"missing key {key!r} in [{where}]")
    return table[key]


def _train_config(table: dict, seed: int) -> bsde.TrainConfig:
    return bsde.TrainConfig(
        n_samples=int(table.get("samples", 1 << 20)),
        batch_size=int(table.get("batch", 1 << 11)),
        epochs=int(table.get("epochs", 1)),
        lr=float(table.get("lr", 3e-3)),
        lr_boundaries=tuple(table.get("lr_boundaries", (0.6, 0.85))),
        lr_factor=float(table.get("lr_factor", 0.1)),
        seed=seed,
        checkpoint_every=int(table.get("checkpoint_every", 0)),
    )


def load_run_config(path: str, seed_override: int | None = None) -> RunConfig:
    """Parse and validate; raises ConfigError with a pointed message."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
        data = tomllib.loads(raw.decode("utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML: {e}")
    if int(data.get("schema_version", -1)) != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}")
    seed = int(data.get("seed", 0)) if seed_override is None else int(seed_override)

    g = data.get("grid", {})
    grid = eng.TimeGrid(int(_req(g, "n_steps", "grid")), float(_req(g, "horizon", "grid")))

    mk = data.get("market", {})
    asset_vols = np.asarray(_req(mk, "asset_vols", "market"), dtype=np.float64)
    credit_vols = np.asarray(_req(mk, "credit_vols", "market"), dtype=np.float64)
    if credit_vols.shape != (2,):
        raise ConfigError("market.credit_vols must have exactly two entries (bank, counterparty)")
    d = asset_vols.size
    x0_raw = mk.get("x0", 1.0)
    x0 = np.full(d + 2, float(x0_raw)) if np.isscalar(x0_raw) else np.asarray(x0_raw, dtype=np.float64)
    if x0.shape != (d + 2,):
        raise ConfigError(f"market.x0 must be scalar or length {d + 2}")
    try:
        market = eng.ModelParams(
            rate=float(_req(mk, "rate", "market")),
            vols=np.concatenate([asset_vols, credit_vols]),
            x0=x0, n_assets=d,
            barrier_bank=_barrier(mk.get("barrier_bank", 0.0), grid),
            barrier_cpty=_barrier(mk.get("barrier_cpty", 0.0), grid),
        )
        corr = eng.CorrelationSpec(np.asarray(_req(mk, "correlation", "market"), dtype=np.float64))
    except eng.EngineError as e:
        raise ConfigError(str(e))
    if corr.dim != d + 2:
        raise ConfigError(f"correlation is {corr.dim}x{corr.dim}, state dimension is {d + 2}")

    port = _load_portfolio_section(data, path)
    if port.n_assets > d:
        raise ConfigError("portfolio references more assets than the market defines")
    try:
        port.maturity_indices(grid)
    except eng.EngineError as e:
        raise ConfigError(str(e))

    rt = data.get("rates", {})
    try:
        rates = pf.RatesConfig(
            r_c_borrow=float(_req(rt, "collateral_borrow", "rates")),
            r_c_lend=float(_req(rt, "collateral_lend", "rates")),
            r_im_borrow=float(_req(rt, "im_borrow", "rates")),
            r_im_lend=float(_req(rt, "im_lend", "rates")),
            r_f_borrow=float(_req(rt, "funding_borrow", "rates")),
            r_f_lend=float(_req(rt, "funding_lend", "rates")),
            lgd_bank=float(_req(rt, "lgd_bank", "rates")),
            lgd_cpty=float(_req(rt, "lgd_cpty", "rates")),
            collateral_fraction=float(_req(rt, "collateral_fraction", "rates")),
        )
    except pf.PortfolioError as e:
        raise ConfigError(str(e))

    rm = data.get("risk_measure", {})
    try:
        risk = margin.RiskMeasureSpec(alpha=float(rm.get("alpha", 0.99)),
                                      mpr=int(rm.get("mpr_steps", 8)))
    except margin.MarginError as e:
        raise ConfigError(str(e))

    tl = data.get("tilts", {})
    tilts = {}
    for kind in (*bsde.XVA_KINDS, "fva"):
        pair = tl.get(kind, [0.0, 0.0])
        if len(pair) != 2:
            raise ConfigError(f"tilts.{kind} must be a [bank, counterparty] pair")
        tilts[kind] = eng.DriftTilt.credit(d, float(pair[0]), float(pair[1]))

    layers = data.get("layers", {})
    l2 = layers.get("margin", {})
    layer2 = margin.Layer2Config(
        max_epochs=int(l2.get("max_epochs", 5000)),
        patience=int(l2.get("patience", 100)),
        min_epochs=int(l2.get("min_epochs", 0)),
        batch_size=int(l2.get("batch", 1 << 12)),
        lr=float(l2.get("lr", 1e-3)),
        lr_boundaries=tuple(l2.get("lr_boundaries", (0.5, 0.8))),
        val_fraction=float(l2.get("val_fraction", 0.2)),
        seed=seed,
    )
    ev = data.get("evaluation", {})
    cfg = RunConfig(
        path=os.path.abspath(path),
        seed=seed,
        grid=grid, market=market, corr=corr, portfolio=port, rates=rates, risk=risk,
        tilts=tilts,
        layer1=_train_config(layers.get("clean", {}), seed),
        layer2=layer2,
        layer2_samples=int(l2.get("samples", 1 << 16)),
        layer3=_train_config(layers.get("xva", {}), seed),
        layer3_split=bool(layers.get("xva", {}).get("split", True)),
        layer4=_train_config(layers.get("fva", {}), seed),
        evaluation=EvalConfig(paths=int(ev.get("paths", 1 << 13)),
                              representative=int(ev.get("representative", 3))),
        sha256=hashlib.sha256(raw).hexdigest(),
    )
    return cfg


def _barrier(value, grid: eng.TimeGrid):
    if np.isscalar(value):
        return float(value)
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (grid.n_steps + 1,):
        raise ConfigError(f"tabulated barrier needs {grid.n_steps + 1} values")
    return arr


def _load_portfolio_section(data: dict, cfg_path: str) -> pf.Portfolio:
    sec = data.get("portfolio", {})
    if "file" in sec:
        rel = sec["file"]
        full = rel if os.path.isabs(rel) else os.path.join(os.path.dirname(os.path.abspath(cfg_path)), rel)
        if not os.path.exists(full):
            raise ConfigError(f"portfolio file not found: {full}")
        try:
            return pf.load_portfolio(full)
        except pf.PortfolioError as e:
            raise ConfigError(str(e))
    rows = sec.get("contract")
    if not rows:
        raise ConfigError("portfolio needs either a 'file' or inline [[portfolio.contract]] tables")
    try:
        contracts = [pf.Contract(assets=tuple(int(i) - 1 for i in row["assets"]),
                                 maturity=float(row["maturity"]), strike=float(row["strike"]))
                     for row in rows]
        return pf.Portfolio(contracts)
    except (KeyError, pf.PortfolioError) as e:
        raise ConfigError(f"bad inline portfolio: {e}")
