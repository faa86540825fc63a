"""Path simulation: correlated increments, Euler scheme, structural defaults.

The state is the concatenation of d non-defaultable asset factors and the
two party asset processes (bank at index d, counterparty at index d+1), all
geometric Brownian motions under the base measure. A drift tilt subtracts a
constant vector q from the drift, raising default frequencies; the matching
Girsanov weight maps expectations back to the base measure.

All randomness flows through :mod:`deepxva.rng`, keyed by (seed, stream,
path, step, component), so partitioned simulation is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng

NO_DEFAULT = np.iinfo(np.int64).max  # sentinel before clipping to N+1


class EngineError(Exception):
    pass


def cholesky(rho: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L Lᵀ = rho; fails naming the first bad pivot.

    Requires a symmetric matrix with unit diagonal (a correlation matrix).
    """
    rho = np.asarray(rho, dtype=np.float64)
    k = rho.shape[0]
    if rho.shape != (k, k):
        raise EngineError(f"correlation matrix must be square, got {rho.shape}")
    if not np.allclose(rho, rho.T, atol=1e-12):
        raise EngineError("correlation matrix is not symmetric")
    if not np.allclose(np.diag(rho), 1.0, atol=1e-12):
        raise EngineError("correlation matrix diagonal is not 1")
    L = np.zeros_like(rho)
    for i in range(k):
        for j in range(i + 1):
            s = rho[i, j] - L[i, :j] @ L[j, :j]
            if i == j:
                if s <= 0.0:
                    raise EngineError(f"correlation matrix is not positive definite: pivot {i} = {s:.3e}")
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    return L


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = T."""

    n_steps: int
    horizon: float

    @property
    def h(self) -> float:
        return self.horizon / self.n_steps

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of a time that must lie on the grid (e.g. a maturity)."""
        idx = round(t / self.h)
        if not (0 <= idx <= self.n_steps) or abs(idx * self.h - t) > 1e-9 * max(1.0, self.horizon):
            raise EngineError(f"time {t} does not lie on the {self.n_steps}-step grid")
        return idx


@dataclass
class CorrelationSpec:
    rho: np.ndarray
    chol: np.ndarray = field(init=False)

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.chol = cholesky(self.rho)
        if not np.allclose(self.chol @ self.chol.T, self.rho, atol=1e-12):
            raise EngineError("Cholesky factor does not reproduce the correlation matrix")

    @property
    def dim(self) -> int:
        return self.rho.shape[0]

    def sub(self, k: int) -> "CorrelationSpec":
        """Leading k×k block; its Cholesky factor is the leading block of ours,
        so sub-simulations reuse the same increments componentwise."""
        return CorrelationSpec(self.rho[:k, :k])


def _barrier_on_grid(xi, grid: TimeGrid) -> np.ndarray:
    """Barrier level at every grid point: constant or tabulated ξ_t."""
    if np.isscalar(xi):
        return np.full(grid.n_steps + 1, float(xi))
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (grid.n_steps + 1,):
        raise EngineError(f"tabulated barrier needs {grid.n_steps + 1} grid values, got {xi.shape}")
    return xi


@dataclass
class ModelParams:
    """GBM market: drift r·x, volatility σ_i·x_i componentwise."""

    rate: float
    vols: np.ndarray            # (dim,) componentwise volatilities
    x0: np.ndarray              # (dim,) initial state
    n_assets: int               # d; components d and d+1 are bank / counterparty
    barrier_bank: float | np.ndarray = 0.0
    barrier_cpty: float | np.ndarray = 0.0

    def __post_init__(self):
        self.vols = np.asarray(self.vols, dtype=np.float64)
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        if self.vols.shape != self.x0.shape:
            raise EngineError("vols and x0 shapes differ")
        if np.any(self.vols <= 0.0):
            raise EngineError("volatilities must be strictly positive")

    @property
    def dim(self) -> int:
        return self.x0.shape[0]

    @property
    def has_credit(self) -> bool:
        return self.dim == self.n_assets + 2

    def assets_only(self) -> "ModelParams":
        d = self.n_assets
        return ModelParams(self.rate, self.vols[:d], self.x0[:d], n_assets=d)


@dataclass(frozen=True)
class DriftTilt:
    """Constant drift shift; nonzero entries only on the defaultable components."""

    shift: tuple[float, ...]

    @staticmethod
    def none(dim: int) -> "DriftTilt":
        return DriftTilt(tuple(0.0 for _ in range(dim)))

    @staticmethod
    def credit(n_assets: int, bank: float, cpty: float) -> "DriftTilt":
        return DriftTilt(tuple([0.0] * n_assets + [float(bank), float(cpty)]))

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.shift, dtype=np.float64)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.vector)

    def label(self) -> str:
        if self.is_zero:
            return "q0"
        return "q(" + ",".join(f"{v:g}" for v in self.shift) + ")"


@dataclass
class PathBatch:
    """A batch of simulated state paths plus the increments that drove them."""

    states: np.ndarray          # (M, N+1, dim)
    increments: np.ndarray      # (M, N, dim) correlated Brownian increments
    measure: str                # tilt identity label
    path0: int = 0              # global index of the first path (RNG bookkeeping)
    n_tau_b: np.ndarray | None = None
    n_tau_c: np.ndarray | None = None
    n_tau: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.states.shape[2]


def sample_increments(seed: int, grid: TimeGrid, corr: CorrelationSpec,
                      n_paths: int, path0: int = 0, stream: str = "paths") -> np.ndarray:
    """Correlated Gaussian increments ΔW ~ N(0, h·ρ), shape (M, N, dim).

    Built as L·(√h·z) with z counter-keyed by (seed, path, step, component);
    a fixed seed gives a bit-identical batch regardless of chunking.
    """
    if n_paths < 1:
        raise EngineError("need at least one path")
    z = rng.normals(seed, rng.stream_id(stream), path0, n_paths, grid.n_steps, corr.dim)
    return np.sqrt(grid.h) * (z @ corr.chol.T)


def simulate(params: ModelParams, tilt: DriftTilt, increments: np.ndarray,
             grid: TimeGrid, path0: int = 0) -> PathBatch:
    """Euler scheme X_{n+1} = X_n + (r·X_n − q)h + σ⊙X_n⊙ΔW_n."""
    m, n, dim = increments.shape
    if dim != params.dim:
        raise EngineError(f"increment dim {dim} does not match model dim {params.dim}")
    if n != grid.n_steps:
        raise EngineError(f"increments have {n} steps, grid has {grid.n_steps}")
    q = tilt.vector
    if q.shape != (dim,):
        raise EngineError(f"tilt dim {q.shape} does not match model dim {dim}")
    h = grid.h
    states = np.empty((m, n + 1, dim))
    states[:, 0, :] = params.x0
    x = np.broadcast_to(params.x0, (m, dim)).copy()
    r, sig = params.rate, params.vols
    for k in range(n):
        with np.errstate(over="ignore", invalid="ignore"):
            x = x + (r * x - q) * h + (sig * x) * increments[:, k, :]
        if not np.all(np.isfinite(x)):
            bad = np.argwhere(~np.isfinite(x))[0]
            raise EngineError(f"state blow-up at path {path0 + int(bad[0])}, step {k + 1}")
        states[:, k + 1, :] = x
    return PathBatch(states=states, increments=increments, measure=tilt.label(), path0=path0)


def detect_defaults(batch: PathBatch, params: ModelParams, grid: TimeGrid) -> PathBatch:
    """First-hitting step indices of the default barriers (checked from step 1).

    Sentinel N+1 means no default on the grid; n_tau = min of the two.
    """
    if not params.has_credit:
        raise EngineError("model has no defaultable components")
    d = params.n_assets
    sentinel = grid.n_steps + 1
    xi_b = _barrier_on_grid(params.barrier_bank, grid)
    xi_c = _barrier_on_grid(params.barrier_cpty, grid)

    def first_hit(comp: int, xi: np.ndarray) -> np.ndarray:
        below = batch.states[:, 1:, comp] <= xi[None, 1:]
        hit_any = below.any(axis=1)
        idx = below.argmax(axis=1) + 1
        return np.where(hit_any, idx, sentinel).astype(np.int64)

    batch.n_tau_b = first_hit(d, xi_b)
    batch.n_tau_c = first_hit(d + 1, xi_c)
    batch.n_tau = np.minimum(batch.n_tau_b, batch.n_tau_c)
    return batch


def girsanov_logweight(batch: PathBatch, tilt: DriftTilt, params: ModelParams,
                       corr: CorrelationSpec, grid: TimeGrid) -> np.ndarray:
    """Discrete log-density log Γ_T of the measure that shifts the drift by −q.

    With kernel θ_n = q ⊘ σ(t_n, X_n) decorrelated through the Cholesky
    factor (ψ = L⁻¹θ, ΔB = L⁻¹ΔW):

        log Γ = −Σ_n ψ_n·ΔB_n − ½ Σ_n |ψ_n|² h.

    Evaluated along base-measure paths, reweighting by Γ reproduces
    tilted-path statistics exactly (per-step normal density shift); on
    tilted paths, the weight for tilt −q maps back to the base measure.
    For independent drivers (ρ = I) this reduces to −Σ θ·ΔW − ½Σ|θ|²h.
    """
    q = tilt.vector
    if tilt.is_zero:
        return np.zeros(batch.n_paths)
    active = np.nonzero(q)[0]
    if np.any(params.vols[active] == 0.0):
        raise EngineError("zero volatility component with nonzero tilt")
    x = batch.states[:, :-1, :]  # kernel uses the pre-step states X_0..X_{N-1}
    theta = q / (params.vols * x)
    linv = np.linalg.inv(corr.chol)
    psi = theta @ linv.T
    db = batch.increments @ linv.T
    return -(np.einsum("mnc,mnc->m", psi, db)
             + 0.5 * grid.h * np.einsum("mnc,mnc->m", psi, psi))
