"""Forward-shot BSDE recursions and the layer 1/3/4 training loops.

Each BSDE is rewritten as a forward recursion from a trainable initial
value, with the control process parameterized by one network of
(normalized time, state). Training minimizes the mean-square terminal
residual, summed over the original and the tilted measure for the xVA
layers; the drift tilt enters the forward paths while a compensator term
⟨q⊘σ, Z⟩ keeps the BSDE solution unchanged.

Conventions (anchored by the closed-form clean-value oracle):

* cashflow jumps are positive, clean values are positive;
* per-contract clean recursions freeze at their maturity value (wealth
  convention), while collateral / exposure / funding read the live value
  (matured contracts contribute zero, settlement jumps are added back to
  the exposure at their exact index);
* xVA recursion increments are masked to zero from the default step on,
  so the value at the final step equals the value at n_τ∧N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import engine as eng
from . import margin
from . import nn
from . import portfolio as pf
from . import serialize

CLEAN_HIDDEN = (100, 100, 100)
XVA_HIDDEN = (50, 50, 50)
XVA_KINDS = ("colva", "cva", "dva", "mva")
# +1: value compounds at r with the compensator added (credit legs);
# -1: value discounts with driver f and the compensator subtracted.
KIND_SIGN = {"colva": -1.0, "cva": 1.0, "dva": 1.0, "mva": -1.0, "fva": -1.0}


class BsdeError(Exception):
    pass


@dataclass
class TrainConfig:
    n_samples: int = 1 << 20
    batch_size: int = 1 << 11
    epochs: int = 1
    lr: float = 3e-3
    lr_boundaries: tuple[float, ...] = (0.6, 0.85)
    lr_factor: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0
    # degenerate/no-noise runs: scale the control net's initialization
    # (0 freezes Z at zero when combined with train_controls=False)
    control_init_scale: float = 1.0
    train_controls: bool = True

    def __post_init__(self):
        if self.n_samples % self.batch_size:
            raise BsdeError("batch size must divide the sample count")

    @property
    def batches_per_epoch(self) -> int:
        return self.n_samples // self.batch_size

    @property
    def total_steps(self) -> int:
        return self.batches_per_epoch * self.epochs


def _time_feature(t: float, horizon: float, x: np.ndarray) -> np.ndarray:
    return np.concatenate([np.full((x.shape[0], 1), t / horizon), x], axis=1)


def compensator_kernel(q: np.ndarray, sigma_state: np.ndarray) -> np.ndarray:
    """θ = q ⊘ σ(t,x); zero tilt components stay zero regardless of σ."""
    q = np.asarray(q, dtype=np.float64)
    sigma_state = np.asarray(sigma_state, dtype=np.float64)
    if np.any((sigma_state == 0.0) & (q != 0.0)):
        raise BsdeError("zero volatility component with nonzero tilt")
    shape = np.broadcast_shapes(q.shape, sigma_state.shape)
    return np.divide(np.broadcast_to(q, shape), sigma_state,
                     out=np.zeros(shape), where=np.broadcast_to(q, shape) != 0.0)


def compensator(q: np.ndarray, sigma_state: np.ndarray, z: np.ndarray) -> np.ndarray:
    """⟨q ⊘ σ(t,x), z⟩ along the last axis."""
    return (compensator_kernel(q, sigma_state) * np.asarray(z)).sum(axis=-1)


# ---------------------------------------------------------------------------
# Layer 1: clean values.
# ---------------------------------------------------------------------------

@dataclass
class CleanModel:
    """Per-contract initial values plus the shared control network."""

    v0: np.ndarray                 # (P,)
    znet: nn.MlpParams
    horizon: float
    n_assets: int
    rate: float

    def save(self, path: str) -> None:
        header = {
            "kind": "clean-model",
            "horizon": self.horizon,
            "n_assets": self.n_assets,
            "rate": self.rate,
            "hidden": list(self.znet.spec.hidden),
            "output_dim": self.znet.spec.output_dim,
        }
        serialize.save_container(path, header, [self.v0, *self.znet.arrays()])

    @staticmethod
    def load(path: str) -> "CleanModel":
        header, arrays = serialize.load_container(path)
        if header.get("kind") != "clean-model":
            raise BsdeError(f"{path} is not a clean-model container")
        spec = nn.MlpSpec(1 + header["n_assets"], tuple(header["hidden"]), header["output_dim"])
        return CleanModel(arrays[0], nn.MlpParams.from_arrays(spec, arrays[1:]),
                          header["horizon"], header["n_assets"], header["rate"])


def _dw_blocks(portfolio: pf.Portfolio, dwhat: np.ndarray) -> np.ndarray:
    """Expand (M,N,d) asset increments to (M,N,Σd_j) aligned with control blocks."""
    return dwhat[:, :, portfolio.asset_columns]


def clean_values(model: CleanModel, portfolio: pf.Portfolio, grid: eng.TimeGrid,
                 xhat: np.ndarray, dwhat: np.ndarray, jumps=None) -> np.ndarray:
    """Per-contract value paths (M, N+1, P), frozen after each maturity.

    V̂_{n+1} = V̂_n + ΔA_n + r·V̂_n·h + Z_n·ΔŴ_n^{I_j} while alive; ``jumps``
    optionally supplies intermediate cashflow jumps as jumps(n) -> (M,P).
    """
    m = xhat.shape[0]
    p = portfolio.n_contracts
    maturity_idx = portfolio.maturity_indices(grid)
    dwb = _dw_blocks(portfolio, dwhat)
    h, r, horizon = grid.h, model.rate, model.horizon
    out = np.empty((m, grid.n_steps + 1, p))
    v = np.broadcast_to(model.v0, (m, p)).copy()
    out[:, 0, :] = v
    times = grid.times()
    for n in range(grid.n_steps):
        alive = portfolio.alive(n, maturity_idx)
        if alive.any():
            z = nn.mlp_forward(model.znet, _time_feature(times[n], horizon, xhat[:, n, :]))
            zdw = np.add.reduceat(z * dwb[:, n, :], portfolio.offsets[:-1], axis=1)
            incr = r * h * v + zdw
            if jumps is not None:
                incr = incr + jumps(n)
            v = v + alive * incr
            if not np.all(np.isfinite(v)):
                j, i = np.argwhere(~np.isfinite(v))[0][::-1]
                raise BsdeError(f"clean value blow-up: contract {j}, path {i}, step {n + 1}")
        out[:, n + 1, :] = v
    return out


def _clean_terminal_on_tape(tape: ad.Tape, v0_leaf: ad.Tensor, znet: nn.MlpParams,
                            portfolio: pf.Portfolio, grid: eng.TimeGrid, rate: float,
                            xhat: np.ndarray, dwhat: np.ndarray,
                            maturity_idx: np.ndarray) -> ad.Tensor:
    m = xhat.shape[0]
    dwb = _dw_blocks(portfolio, dwhat)
    h = grid.h
    times = grid.times()
    v = ad.broadcast_rows(v0_leaf, m)
    last = int(maturity_idx.max())
    for n in range(last):
        alive = portfolio.alive(n, maturity_idx)
        z = nn.mlp_forward(znet, _time_feature(times[n], grid.horizon, xhat[:, n, :]), tape=tape)
        zdw = ad.block_rowdot_const(z, dwb[:, n, :], portfolio.offsets)
        incr = ad.add(ad.scalar_multiply(v, rate * h), zdw)
        v = ad.add(v, ad.mul_const(incr, alive[None, :]))
    return v


def train_layer1(market: eng.ModelParams, corr: eng.CorrelationSpec, grid: eng.TimeGrid,
                 portfolio: pf.Portfolio, cfg: TrainConfig,
                 curves: list | None = None, ckpt_dir: str | None = None) -> CleanModel:
    """Fit v̂₀ per contract and the shared Z network on base-measure paths.

    All P contracts are trained jointly against their terminal payoffs; the
    per-contract losses land in ``curves`` when a list is supplied.
    """
    d = market.n_assets
    assets = market.assets_only() if market.has_credit else market
    corr_d = eng.CorrelationSpec(corr.rho[:d, :d]) if corr.dim != d else corr
    maturity_idx = portfolio.maturity_indices(grid)
    spec = nn.MlpSpec(1 + d, CLEAN_HIDDEN, portfolio.total_width)
    znet = nn.init_mlp(spec, cfg.seed, "layer1.znet")
    if cfg.control_init_scale != 1.0:
        for w, _ in znet.layers:
            w *= cfg.control_init_scale
    v0 = np.zeros(portfolio.n_contracts)
    arrays = [v0, *znet.arrays()] if cfg.train_controls else [v0]
    state = nn.AdamState(arrays, lr=cfg.lr)
    step = 0
    for _ in range(cfg.epochs):
        for b in range(cfg.batches_per_epoch):
            path0 = b * cfg.batch_size
            dw = eng.sample_increments(cfg.seed, grid, corr_d, cfg.batch_size, path0, stream="layer1")
            batch = eng.simulate(assets, eng.DriftTilt.none(d), dw, grid)
            xhat = batch.states
            targets = _terminal_payoffs(portfolio, xhat, maturity_idx)

            tape = ad.Tape()
            v0_leaf = tape.leaf(v0)
            term = _clean_terminal_on_tape(tape, v0_leaf, znet, portfolio, grid,
                                           assets.rate, xhat, dw, maturity_idx)
            resid = ad.add_const(term, -targets)
            per_contract = ad.mean_reduce(ad.square(resid), axis=0)
            loss = ad.sum_reduce(per_contract)
            if not np.isfinite(loss.value):
                raise BsdeError(f"layer-1 loss diverged at step {step}")
            grads = ad.backward(tape, loss)
            leaves = [v0_leaf]
            if cfg.train_controls:
                leaves += [w for pair in nn.leaf_params(znet, tape) for w in pair]
            lr = nn.piecewise_lr(cfg.lr, step, cfg.total_steps, cfg.lr_boundaries, cfg.lr_factor)
            nn.adam_step(arrays, [grads[w.index] for w in leaves], state, lr=lr)
            if curves is not None:
                curves.append({
                    "layer": 1, "batch": step, "lr": lr, "loss": float(loss.value),
                    **{f"loss_c{j}": float(v) for j, v in enumerate(per_contract.value)},
                    **{f"v0_c{j}": float(v) for j, v in enumerate(v0)},
                })
            step += 1
            if ckpt_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                CleanModel(v0, znet, grid.horizon, d, assets.rate).save(
                    f"{ckpt_dir}/layer1_step{step}.bin")
    return CleanModel(v0, znet, grid.horizon, d, assets.rate)


def _terminal_payoffs(portfolio: pf.Portfolio, xhat: np.ndarray, maturity_idx: np.ndarray) -> np.ndarray:
    m = xhat.shape[0]
    g = np.empty((m, portfolio.n_contracts))
    for j, c in enumerate(portfolio.contracts):
        g[:, j] = pf.payoff(c, xhat[:, maturity_idx[j], :])
    return g


# ---------------------------------------------------------------------------
# Layers 3 and 4: xVA recursions over tilted paths.
# ---------------------------------------------------------------------------

@dataclass
class XvaPathData:
    """Everything the xVA recursions consume along one (possibly tilted) batch."""

    batch: eng.PathBatch
    vhat_contracts: np.ndarray   # (M,N+1,P) frozen per-contract values
    vhat_live: np.ndarray        # (M,N+1) live portfolio value
    coll: np.ndarray             # (M,N+1) variation margin
    im_fc: np.ndarray            # (M,N+1) >= 0
    im_tc: np.ndarray            # (M,N+1) <= 0
    exposure: np.ndarray         # (M,N+1) live value + settling jumps
    alive: np.ndarray            # (M,N) increment mask 1{n < n_tau}
    theta: np.ndarray | None     # (M,N,dim) q ⊘ σ(t_n,X_n) of the path tilt
    terminal: dict               # kind -> (M,) loss targets


def _clean_quantities(clean_model: CleanModel, portfolio: pf.Portfolio, grid: eng.TimeGrid,
                      im_model, xhat: np.ndarray, dwhat: np.ndarray) -> dict:
    """Measure-independent quantities (the first d components are shared)."""
    maturity_idx = portfolio.maturity_indices(grid)
    vhat = clean_values(clean_model, portfolio, grid, xhat, dwhat)
    m, n_plus_1, p = vhat.shape
    live_mask = (np.arange(n_plus_1)[:, None] < maturity_idx[None, :]).astype(np.float64)
    vhat_live = (vhat * live_mask[None, :, :]).sum(axis=2)
    jumps = np.zeros((m, n_plus_1))
    for j, c in enumerate(portfolio.contracts):
        nj = maturity_idx[j]
        jumps[:, nj] += pf.payoff(c, xhat[:, nj, :])
    im_fc = np.zeros((m, n_plus_1))
    im_tc = np.zeros((m, n_plus_1))
    if im_model is not None:
        for n in range(n_plus_1 - 1):
            fc, tc = margin.eval_im(im_model, n, xhat[:, n, :], vhat[:, n, :])
            im_fc[:, n] = fc
            im_tc[:, n] = tc
    return {
        "vhat_contracts": vhat,
        "vhat_live": vhat_live,
        "exposure": vhat_live + jumps,
        "im_fc": im_fc,
        "im_tc": im_tc,
    }


def build_path_data(batch: eng.PathBatch, market: eng.ModelParams, grid: eng.TimeGrid,
                    portfolio: pf.Portfolio, rates: pf.RatesConfig, tilt: eng.DriftTilt,
                    cleanq: dict) -> XvaPathData:
    """Per-measure context: defaults, masks, compensator kernel, loss targets."""
    if batch.n_tau is None:
        eng.detect_defaults(batch, market, grid)
    m, n_steps = batch.n_paths, batch.n_steps
    coll = pf.collateral(rates, cleanq["vhat_live"])
    alive = (np.arange(n_steps)[None, :] < batch.n_tau[:, None]).astype(np.float64)
    theta = None
    if not tilt.is_zero:
        sigma_state = market.vols * batch.states[:, :-1, :]
        theta = compensator_kernel(tilt.vector, sigma_state) * alive[:, :, None]

    stop = np.minimum(batch.n_tau, n_steps)
    rows = np.arange(m)
    q_stop = cleanq["exposure"][rows, stop]
    c_stop = coll[rows, stop]
    fc_stop = cleanq["im_fc"][rows, stop]
    tc_stop = cleanq["im_tc"][rows, stop]
    defaulted = batch.n_tau <= n_steps
    cpty_first = defaulted & (batch.n_tau == batch.n_tau_c)
    bank_first = defaulted & (batch.n_tau == batch.n_tau_b) & (batch.n_tau_b != batch.n_tau_c)
    zeros = np.zeros(m)
    terminal = {
        "colva": zeros,
        "mva": zeros,
        "fva": zeros,
        "cva": np.where(cpty_first, rates.lgd_cpty * np.maximum(q_stop - c_stop - fc_stop, 0.0), 0.0),
        "dva": np.where(bank_first, rates.lgd_bank * np.maximum(-(q_stop - c_stop - tc_stop), 0.0), 0.0),
    }
    return XvaPathData(
        batch=batch, vhat_contracts=cleanq["vhat_contracts"], vhat_live=cleanq["vhat_live"],
        coll=coll, im_fc=cleanq["im_fc"], im_tc=cleanq["im_tc"], exposure=cleanq["exposure"],
        alive=alive, theta=theta, terminal=terminal,
    )


def _driver_series(kind: str, data: XvaPathData, rates: pf.RatesConfig, r: float) -> np.ndarray | None:
    """Precomputable driver values f(t_n, ·), shape (M,N); None if on-tape (fva)."""
    n = data.alive.shape[1]
    if kind == "colva":
        return pf.f_colva(rates, r, data.coll[:, :n])
    if kind == "mva":
        return pf.f_mva(rates, r, data.im_tc[:, :n], data.im_fc[:, :n])
    if kind in ("cva", "dva"):
        return None
    raise BsdeError(f"unknown xva kind {kind!r}")


def xva_values(kind: str, init: float, znet: nn.MlpParams, data: XvaPathData,
               rates: pf.RatesConfig, market: eng.ModelParams, grid: eng.TimeGrid,
               tva_lower: np.ndarray | None = None, net_times: np.ndarray | None = None,
               horizon: float | None = None) -> np.ndarray:
    """Frozen-parameter value paths (M, N+1); constant from n_τ on.

    For ``kind='fva'`` the running value feeds its own driver through the
    total adjustment, so ``tva_lower`` (colva+cva−dva+mva along the same
    paths) is required. ``net_times``/``horizon`` override the time feature
    fed to the network (used by the nested reference engine, whose inner
    grids are offset and refined relative to the training grid).
    """
    m, n_steps = data.alive.shape
    h, r = grid.h, market.rate
    horizon = grid.horizon if horizon is None else horizon
    sgn = KIND_SIGN[kind]
    f = None if kind == "fva" else _driver_series(kind, data, rates, r)
    if kind == "fva" and tva_lower is None:
        raise BsdeError("fva recursion needs the lower-layer tva series")
    times = grid.times() if net_times is None else net_times
    out = np.empty((m, n_steps + 1))
    v = np.full(m, float(init))
    out[:, 0] = v
    for n in range(n_steps):
        z = nn.mlp_forward(znet, _time_feature(times[n], horizon, data.batch.states[:, n, :]))
        cm = (data.theta[:, n, :] * z).sum(axis=1) if data.theta is not None else 0.0
        zdw = (z * data.batch.increments[:, n, :]).sum(axis=1)
        if kind == "fva":
            pos = data.vhat_live[:, n] - (tva_lower[:, n] + v) - data.coll[:, n] - data.im_tc[:, n]
            fn = (r - rates.r_f_borrow) * np.maximum(pos, 0.0) - (r - rates.r_f_lend) * np.maximum(-pos, 0.0)
        else:
            fn = f[:, n] if f is not None else 0.0
        v = v + data.alive[:, n] * ((fn + sgn * (r * v + cm)) * h + sgn * zdw)
        if not np.all(np.isfinite(v)):
            raise BsdeError(f"{kind} value blow-up at step {n + 1}")
        out[:, n + 1] = v
    return out


def _xva_terminal_on_tape(tape: ad.Tape, kind: str, init_leaf: ad.Tensor, znet: nn.MlpParams,
                          data: XvaPathData, rates: pf.RatesConfig, market: eng.ModelParams,
                          grid: eng.TimeGrid, tva_lower: np.ndarray | None = None) -> ad.Tensor:
    """Differentiable value at n_τ∧N, shape (B,1)."""
    m, n_steps = data.alive.shape
    h, r, horizon = grid.h, market.rate, grid.horizon
    sgn = KIND_SIGN[kind]
    f = None if kind == "fva" else _driver_series(kind, data, rates, r)
    times = grid.times()
    v = ad.broadcast_rows(init_leaf, m)  # (B,1)
    for n in range(n_steps):
        alive = data.alive[:, n][:, None]
        feats = _time_feature(times[n], horizon, data.batch.states[:, n, :])
        z = nn.mlp_forward(znet, feats, tape=tape)
        zdw = ad.rowdot_const(z, data.batch.increments[:, n, :])
        rv = ad.scalar_multiply(v, r)
        if data.theta is not None:
            cm = ad.rowdot_const(z, data.theta[:, n, :])
            core = ad.add(rv, cm)
        else:
            core = rv
        drift = ad.scalar_multiply(core, sgn * h)
        if kind == "fva":
            const = (data.vhat_live[:, n] - tva_lower[:, n] - data.coll[:, n] - data.im_tc[:, n])[:, None]
            pos = ad.add_const(ad.scalar_multiply(v, -1.0), const)
            fn = ad.subtract(
                ad.scalar_multiply(ad.positive_part(pos), (r - rates.r_f_borrow) * h),
                ad.scalar_multiply(ad.negative_part(pos), (r - rates.r_f_lend) * h),
            )
            drift = ad.add(drift, fn)
        elif f is not None:
            drift = ad.add_const(drift, f[:, n][:, None] * h)
        incr = ad.add(drift, ad.scalar_multiply(zdw, sgn))
        v = ad.add(v, ad.mul_const(incr, alive))
    return v


@dataclass
class XvaModel:
    """Layer-3 output: initial values and control networks for the four xVAs."""

    x0: dict
    znets: dict
    tilts: dict
    n_assets: int

    def save(self, path: str) -> None:
        kinds = sorted(self.znets)
        header = {
            "kind": "xva-model",
            "kinds": kinds,
            "n_assets": self.n_assets,
            "x0": {k: float(self.x0[k]) for k in kinds},
            "tilts": {k: list(self.tilts[k].shift) for k in kinds},
            "hidden": list(XVA_HIDDEN),
        }
        arrays = [a for k in kinds for a in self.znets[k].arrays()]
        serialize.save_container(path, header, arrays)

    @staticmethod
    def load(path: str) -> "XvaModel":
        header, arrays = serialize.load_container(path)
        if header.get("kind") != "xva-model":
            raise BsdeError(f"{path} is not an xva-model container")
        dim = header["n_assets"] + 2
        spec = nn.MlpSpec(1 + dim, tuple(header["hidden"]), dim)
        per = 2 * (len(spec.hidden) + 1)
        znets, x0, tilts = {}, {}, {}
        for i, k in enumerate(header["kinds"]):
            znets[k] = nn.MlpParams.from_arrays(spec, arrays[i * per:(i + 1) * per])
            x0[k] = header["x0"][k]
            tilts[k] = eng.DriftTilt(tuple(header["tilts"][k]))
        return XvaModel(x0, znets, tilts, header["n_assets"])


@dataclass
class FvaModel:
    fva0: float
    znet: nn.MlpParams
    tilt: eng.DriftTilt
    n_assets: int

    def save(self, path: str) -> None:
        header = {
            "kind": "fva-model",
            "n_assets": self.n_assets,
            "fva0": float(self.fva0),
            "tilt": list(self.tilt.shift),
            "hidden": list(XVA_HIDDEN),
        }
        serialize.save_container(path, header, self.znet.arrays())

    @staticmethod
    def load(path: str) -> "FvaModel":
        header, arrays = serialize.load_container(path)
        if header.get("kind") != "fva-model":
            raise BsdeError(f"{path} is not an fva-model container")
        dim = header["n_assets"] + 2
        spec = nn.MlpSpec(1 + dim, tuple(header["hidden"]), dim)
        return FvaModel(header["fva0"], nn.MlpParams.from_arrays(spec, arrays),
                        eng.DriftTilt(tuple(header["tilt"])), header["n_assets"])


def _measure_batches(market, corr, grid, tilts, cfg, path0, stream):
    """Simulate one increment draw under every requested tilt (shared noise)."""
    dw = eng.sample_increments(cfg.seed, grid, corr, cfg.batch_size, path0, stream=stream)
    out = []
    for tilt in tilts:
        batch = eng.simulate(market, tilt, dw, grid, path0=path0)
        eng.detect_defaults(batch, market, grid)
        out.append(batch)
    return out


def train_layer3(market: eng.ModelParams, corr: eng.CorrelationSpec, grid: eng.TimeGrid,
                 portfolio: pf.Portfolio, rates: pf.RatesConfig, clean_model: CleanModel,
                 im_model, tilts: dict, cfg: TrainConfig, kinds=XVA_KINDS,
                 curves: list | None = None, ckpt_dir: str | None = None) -> XvaModel:
    """Layer 3: ColVA, CVA, DVA, MVA, each under the original + its tilted measure.

    Losses are summed over both measures; the compensator is active only on
    the tilted one. Kinds train independently (split mode) which matches the
    joint objective because the summands share no parameters.
    """
    dim = market.dim
    x0 = {k: np.zeros(1) for k in kinds}
    znets = {k: nn.init_mlp(nn.MlpSpec(1 + dim, XVA_HIDDEN, dim), cfg.seed, f"layer3.{k}") for k in kinds}
    for kind in kinds:
        tilt = tilts[kind]
        arrays = [x0[kind], *znets[kind].arrays()]
        state = nn.AdamState(arrays, lr=cfg.lr)
        step = 0
        for _ in range(cfg.epochs):
            for b in range(cfg.batches_per_epoch):
                path0 = b * cfg.batch_size
                pair = [eng.DriftTilt.none(dim), tilt] if not tilt.is_zero else [eng.DriftTilt.none(dim)]
                batches = _measure_batches(market, corr, grid, pair, cfg, path0, f"layer3.{kind}")
                cleanq = _clean_quantities(clean_model, portfolio, grid, im_model,
                                           batches[0].states[:, :, :market.n_assets],
                                           batches[0].increments[:, :, :market.n_assets])
                tape = ad.Tape()
                leaf = tape.leaf(x0[kind])
                loss = None
                comp_losses = []
                for batch, q in zip(batches, pair):
                    data = build_path_data(batch, market, grid, portfolio, rates, q, cleanq)
                    term = _xva_terminal_on_tape(tape, kind, leaf, znets[kind], data, rates, market, grid)
                    resid = ad.add_const(term, -data.terminal[kind][:, None])
                    part = ad.mean_reduce(ad.square(resid))
                    comp_losses.append(float(part.value))
                    loss = part if loss is None else ad.add(loss, part)
                if not np.isfinite(loss.value):
                    raise BsdeError(f"layer-3 {kind} loss diverged at step {step}")
                grads = ad.backward(tape, loss)
                leaves = [leaf] + [w for pair_ in nn.leaf_params(znets[kind], tape) for w in pair_]
                lr = nn.piecewise_lr(cfg.lr, step, cfg.total_steps, cfg.lr_boundaries, cfg.lr_factor)
                nn.adam_step(arrays, [grads[w.index] for w in leaves], state, lr=lr)
                if curves is not None:
                    row = {"layer": 3, "kind": kind, "batch": step, "lr": lr,
                           "loss": float(loss.value), f"{kind}0": float(x0[kind][0])}
                    for i, cl in enumerate(comp_losses, start=1):
                        row[f"loss_q{i}"] = cl
                    curves.append(row)
                step += 1
                if ckpt_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    XvaModel({k: float(x0[k][0]) for k in kinds}, znets, tilts_dict(tilts, kinds),
                             market.n_assets).save(f"{ckpt_dir}/layer3_{kind}_step{step}.bin")
    return XvaModel({k: float(x0[k][0]) for k in kinds},
                    znets, tilts_dict(tilts, kinds), market.n_assets)


def tilts_dict(tilts: dict, kinds) -> dict:
    return {k: tilts[k] for k in kinds}


def lower_tva_series(xva_model: XvaModel, data: XvaPathData, rates: pf.RatesConfig,
                     market: eng.ModelParams, grid: eng.TimeGrid) -> np.ndarray:
    """colva + cva − dva + mva along the batch (frozen layer-3 parameters)."""
    vals = {k: xva_values(k, xva_model.x0[k], xva_model.znets[k], data, rates, market, grid)
            for k in XVA_KINDS}
    return vals["colva"] + vals["cva"] - vals["dva"] + vals["mva"]


def train_layer4(market: eng.ModelParams, corr: eng.CorrelationSpec, grid: eng.TimeGrid,
                 portfolio: pf.Portfolio, rates: pf.RatesConfig, clean_model: CleanModel,
                 im_model, xva_model: XvaModel, tilt: eng.DriftTilt, cfg: TrainConfig,
                 curves: list | None = None, ckpt_dir: str | None = None) -> FvaModel:
    """Layer 4: FVA over the frozen lower layers, original + tilted measure."""
    dim = market.dim
    fva0 = np.zeros(1)
    znet = nn.init_mlp(nn.MlpSpec(1 + dim, XVA_HIDDEN, dim), cfg.seed, "layer4.fva")
    arrays = [fva0, *znet.arrays()]
    state = nn.AdamState(arrays, lr=cfg.lr)
    step = 0
    for _ in range(cfg.epochs):
        for b in range(cfg.batches_per_epoch):
            path0 = b * cfg.batch_size
            pair = [eng.DriftTilt.none(dim), tilt] if not tilt.is_zero else [eng.DriftTilt.none(dim)]
            batches = _measure_batches(market, corr, grid, pair, cfg, path0, "layer4.fva")
            cleanq = _clean_quantities(clean_model, portfolio, grid, im_model,
                                       batches[0].states[:, :, :market.n_assets],
                                       batches[0].increments[:, :, :market.n_assets])
            tape = ad.Tape()
            leaf = tape.leaf(fva0)
            loss = None
            for batch, q in zip(batches, pair):
                data = build_path_data(batch, market, grid, portfolio, rates, q, cleanq)
                tva_low = lower_tva_series(xva_model, data, rates, market, grid)
                term = _xva_terminal_on_tape(tape, "fva", leaf, znet, data, rates, market, grid,
                                             tva_lower=tva_low)
                part = ad.mean_reduce(ad.square(term))
                loss = part if loss is None else ad.add(loss, part)
            if not np.isfinite(loss.value):
                raise BsdeError(f"layer-4 loss diverged at step {step}")
            grads = ad.backward(tape, loss)
            leaves = [leaf] + [w for pair_ in nn.leaf_params(znet, tape) for w in pair_]
            lr = nn.piecewise_lr(cfg.lr, step, cfg.total_steps, cfg.lr_boundaries, cfg.lr_factor)
            nn.adam_step(arrays, [grads[w.index] for w in leaves], state, lr=lr)
            if curves is not None:
                curves.append({"layer": 4, "kind": "fva", "batch": step, "lr": lr,
                               "loss": float(loss.value), "fva0": float(fva0[0])})
            step += 1
            if ckpt_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                FvaModel(float(fva0[0]), znet, tilt, market.n_assets).save(
                    f"{ckpt_dir}/layer4_step{step}.bin")
    return FvaModel(float(fva0[0]), znet, tilt, market.n_assets)


def tva_decomposition(xva_model: XvaModel, fva_model: FvaModel) -> dict:
    """Initial-value decomposition TVA₀ = CVA₀ − DVA₀ + FVA₀ + ColVA₀ + MVA₀."""
    x0 = xva_model.x0
    tva0 = x0["cva"] - x0["dva"] + fva_model.fva0 + x0["colva"] + x0["mva"]
    return {"colva0": x0["colva"], "cva0": x0["cva"], "dva0": x0["dva"],
            "mva0": x0["mva"], "fva0": fva_model.fva0, "tva0": tva0}
