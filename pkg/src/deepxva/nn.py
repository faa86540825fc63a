"""Fully connected networks and the Adam optimizer.

Networks follow the one recipe used everywhere in the engine: an affine
stack with ReLU after every layer except the output, He-scaled weights
(variance 2/fan_in) and zero biases. Forward evaluation runs either on an
autodiff tape (training) or as plain numpy (frozen lower layers); both
paths share the same kernels, so they agree bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class MlpParams:
    """Weights and biases, stored as [(W0, b0), (W1, b1), ...]."""

    spec: MlpSpec
    layers: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, [(w.copy(), b.copy()) for w, b in self.layers])

    @staticmethod
    def from_arrays(spec: MlpSpec, arrays: list[np.ndarray]) -> "MlpParams":
        layers = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(arrays) // 2)]
        params = MlpParams(spec, layers)
        params.validate()
        return params

    def validate(self):
        dims = self.spec.layer_dims
        if len(self.layers) != len(dims):
            raise ValueError(f"expected {len(dims)} layers, got {len(self.layers)}")
        for (w, b), (fan_in, fan_out) in zip(self.layers, dims):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError(f"layer shape {w.shape}/{b.shape} does not chain with spec {self.spec}")


def init_mlp(spec: MlpSpec, seed: int, stream_label: str) -> MlpParams:
    """He-scaled weights, zero biases, deterministic in (seed, label)."""
    stream = rng.stream_id("init:" + stream_label)
    layers = []
    row0 = 0
    for fan_in, fan_out in spec.layer_dims:
        z = rng.normals(seed, stream, path0=row0, n_paths=fan_in, n_steps=fan_out, n_comp=1)
        w = z.reshape(fan_in, fan_out) * np.sqrt(2.0 / fan_in)
        layers.append((w, np.zeros(fan_out)))
        row0 += fan_in
    return MlpParams(spec, layers)


def mlp_forward(params: MlpParams, x, tape: ad.Tape | None = None):
    """Evaluate the network on a (B, input_dim) batch.

    With a tape, ``x`` may be a Tensor or an array (promoted to a constant)
    and the parameters are registered as trainable leaves cached on the
    tape; without one, plain numpy in/out.
    """
    if tape is None:
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != params.spec.input_dim:
            raise ValueError(f"input shape {h.shape} does not match input_dim {params.spec.input_dim}")
        last = len(params.layers) - 1
        for i, (w, b) in enumerate(params.layers):
            h = h @ w + b
            if i < last:
                np.maximum(h, 0.0, out=h)
        return h
    leaves = leaf_params(params, tape)
    h = x if isinstance(x, ad.Tensor) else tape.constant(x)
    if h.value.shape[1] != params.spec.input_dim:
        raise ad.ShapeMismatch(f"input shape {h.value.shape} does not match input_dim {params.spec.input_dim}")
    last = len(leaves) - 1
    for i, (w, b) in enumerate(leaves):
        h = ad.affine(h, w, b)
        if i < last:
            h = ad.relu(h)
    return h


def leaf_params(params: MlpParams, tape: ad.Tape) -> list[tuple[ad.Tensor, ad.Tensor]]:
    """Trainable leaves for the parameter arrays, cached per (tape, params)."""
    cache = getattr(tape, "_mlp_leaves", None)
    if cache is None:
        cache = {}
        tape._mlp_leaves = cache
    key = id(params)
    if key not in cache:
        cache[key] = [(tape.leaf(w), tape.leaf(b)) for w, b in params.layers]
    return cache[key]


class AdamState:
    """First/second moment accumulators for a fixed list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float | None = None) -> None:
    """Standard Adam update with bias correction, in place on the arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.t += 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def piecewise_lr(base_lr: float, step: int, total_steps: int,
                 boundaries=(0.6, 0.85), factor: float = 0.1) -> float:
    """Piecewise-constant decay: base, then ×factor, ×factor² past the boundaries."""
    frac = step / max(total_steps, 1)
    lr = base_lr
    for b in boundaries:
        if frac >= b:
            lr *= factor
    return lr
