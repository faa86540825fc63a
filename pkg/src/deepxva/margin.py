"""Quantile-regression initial margin over the margin period of risk.

For every grid step n a small network maps the state and the per-contract
clean values to the two tails (q⁺, q⁻) of the clean-value move over
MPR_n = min(MPR, N−n) steps, trained with the pinball loss at level α for
both the positive and the negative part of the move. IM received from the
counterparty is the (clamped) upper tail; IM posted by the bank is minus
the lower tail, so IM^FC ≥ 0 ≥ IM^TC.

The per-contract value vector enters the networks because the future move
is not a function of the state alone once values are path-recursions; the
portfolio total is appended as an extra feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn, serialize

IM_HIDDEN = (16, 16, 16)


class MarginError(Exception):
    pass


@dataclass(frozen=True)
class RiskMeasureSpec:
    """VaR level and margin period of risk (in grid steps)."""

    alpha: float = 0.99
    mpr: int = 8

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise MarginError(f"alpha must lie in (0,1), got {self.alpha}")
        if self.mpr < 1:
            raise MarginError("margin period must be at least one step")

    def mpr_at(self, n: int, n_steps: int) -> int:
        return min(self.mpr, n_steps - n)


@dataclass
class Layer2Config:
    max_epochs: int = 5000
    patience: int = 100
    min_epochs: int = 0          # early stopping armed only after this many epochs
    batch_size: int = 1 << 12
    lr: float = 1e-3
    lr_boundaries: tuple[float, float] = (0.5, 0.8)
    lr_factor: float = 0.1
    val_fraction: float = 0.2
    seed: int = 0


def pinball(alpha: float, q, x) -> np.ndarray:
    """Check loss κ^α(q; x) = max(α(x−q), (α−1)(x−q)); zero iff q = x."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    return np.maximum(alpha * d, (alpha - 1.0) * d)


def _pinball_on_tape(alpha: float, q: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    """α·(x−q)⁺ + (1−α)·(x−q)⁻, averaged, as a tape scalar."""
    d = ad.add_const(ad.scalar_multiply(q, -1.0), target)  # x − q
    up = ad.scalar_multiply(ad.positive_part(d), alpha)
    dn = ad.scalar_multiply(ad.negative_part(d), 1.0 - alpha)
    return ad.mean_reduce(ad.add(up, dn))


@dataclass
class ImModel:
    """One (q⁺, q⁻) network per time step, evaluated at trained steps only."""

    spec: RiskMeasureSpec
    n_assets: int
    n_contracts: int
    nets: list[nn.MlpParams] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.nets)

    def features(self, xhat_n: np.ndarray, vhat_n: np.ndarray) -> np.ndarray:
        return np.concatenate([xhat_n, vhat_n, vhat_n.sum(axis=1, keepdims=True)], axis=1)

    def raw_quantiles(self, n: int, xhat_n: np.ndarray, vhat_n: np.ndarray) -> np.ndarray:
        if not 0 <= n < self.n_steps:
            raise MarginError(f"step {n} outside trained range [0, {self.n_steps})")
        return nn.mlp_forward(self.nets[n], self.features(xhat_n, vhat_n))

    def save(self, path: str) -> None:
        header = {
            "kind": "im-model",
            "alpha": self.spec.alpha,
            "mpr": self.spec.mpr,
            "n_assets": self.n_assets,
            "n_contracts": self.n_contracts,
            "n_steps": self.n_steps,
            "hidden": list(IM_HIDDEN),
        }
        arrays = [a for net in self.nets for a in net.arrays()]
        serialize.save_container(path, header, arrays)

    @staticmethod
    def load(path: str) -> "ImModel":
        header, arrays = serialize.load_container(path)
        if header.get("kind") != "im-model":
            raise MarginError(f"{path} is not an IM model container")
        spec = RiskMeasureSpec(alpha=header["alpha"], mpr=header["mpr"])
        d, p = header["n_assets"], header["n_contracts"]
        mspec = nn.MlpSpec(d + p + 1, tuple(header["hidden"]), 2)
        per = 2 * (len(mspec.hidden) + 1)
        nets = [nn.MlpParams.from_arrays(mspec, arrays[i * per:(i + 1) * per])
                for i in range(header["n_steps"])]
        return ImModel(spec, d, p, nets)


def eval_im(model: ImModel, n: int, xhat_n: np.ndarray, vhat_n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(IM^FC, IM^TC) at step n: clamped so IM^FC ≥ 0 and IM^TC ≤ 0."""
    q = model.raw_quantiles(n, xhat_n, vhat_n)
    return np.maximum(q[:, 0], 0.0), np.minimum(-q[:, 1], 0.0)


def train_quantile_net(features: np.ndarray, target_up: np.ndarray, target_down: np.ndarray,
                       alpha: float, cfg: Layer2Config, seed: int, label: str) -> nn.MlpParams:
    """Fit one (q⁺, q⁻) net by pinball loss with an 80/20 split and early stopping."""
    m = features.shape[0]
    if m < 2 * cfg.batch_size:
        raise MarginError(f"need at least {2 * cfg.batch_size} samples, got {m}")
    n_val = max(int(round(m * cfg.val_fraction)), 1)
    n_train = m - n_val
    ftr, fva = features[:n_train], features[n_train:]
    up_tr, up_va = target_up[:n_train], target_up[n_train:]
    dn_tr, dn_va = target_down[:n_train], target_down[n_train:]

    params = nn.init_mlp(nn.MlpSpec(features.shape[1], IM_HIDDEN, 2), seed, f"im:{label}")
    arrays = params.arrays()
    state = nn.AdamState(arrays, lr=cfg.lr)
    shuffler = np.random.default_rng(seed ^ 0x5EED)

    def val_loss() -> float:
        q = nn.mlp_forward(params, fva)
        return float(pinball(alpha, q[:, 0], up_va).mean() + pinball(alpha, q[:, 1], dn_va).mean())

    best = val_loss()
    best_arrays = [a.copy() for a in arrays]
    stale = 0
    n_batches = max(n_train // cfg.batch_size, 1)
    for epoch in range(cfg.max_epochs):
        lr = nn.piecewise_lr(cfg.lr, epoch, cfg.max_epochs, cfg.lr_boundaries, cfg.lr_factor)
        perm = shuffler.permutation(n_train)
        for b in range(n_batches):
            sel = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            tape = ad.Tape()
            out = nn.mlp_forward(params, ftr[sel], tape=tape)
            loss = ad.add(
                _pinball_on_tape(alpha, ad.slice_cols(out, 0, 1), up_tr[sel][:, None]),
                _pinball_on_tape(alpha, ad.slice_cols(out, 1, 2), dn_tr[sel][:, None]),
            )
            grads = ad.backward(tape, loss)
            leaves = [w for pair in nn.leaf_params(params, tape) for w in pair]
            nn.adam_step(arrays, [grads[w.index] for w in leaves], state, lr=lr)
        v = val_loss()
        if v < best - 1e-12:
            best = v
            best_arrays = [a.copy() for a in arrays]
            stale = 0
        elif epoch >= cfg.min_epochs:
            stale += 1
            if stale >= cfg.patience:
                break
    for a, b_ in zip(arrays, best_arrays):
        a[...] = b_
    return params


def train_layer2(xhat: np.ndarray, vhat_contracts: np.ndarray, spec: RiskMeasureSpec,
                 cfg: Layer2Config) -> ImModel:
    """Layer 2: one quantile net per step from simulated clean-value paths.

    ``xhat`` is (M, N+1, d) and ``vhat_contracts`` (M, N+1, P), both under
    the base measure; targets are the positive/negative parts of the
    portfolio move over MPR_n.
    """
    m, n_plus_1, d = xhat.shape
    n_steps = n_plus_1 - 1
    p = vhat_contracts.shape[2]
    vhat_total = vhat_contracts.sum(axis=2)
    model = ImModel(spec, d, p)
    for n in range(n_steps):
        mpr = spec.mpr_at(n, n_steps)
        feats = model.features(xhat[:, n, :], vhat_contracts[:, n, :])
        delta = vhat_total[:, n + mpr] - vhat_total[:, n]
        net = train_quantile_net(
            feats, np.maximum(delta, 0.0), np.maximum(-delta, 0.0),
            spec.alpha, cfg, cfg.seed, label=f"step{n}",
        )
        model.nets.append(net)
    return model
