"""Shared test utilities: finite differences and kink-safe random graphs."""

import numpy as np

from deepxva import autodiff as ad
from deepxva import nn

KINK_KINDS = {"relu", "rectified-linear", "positive-part", "negative-part"}


def fd_gradient(f, arrays, idx, coords, step=1e-5):
    """Central finite differences of scalar f(arrays) w.r.t. arrays[idx] at coords."""
    out = {}
    a = arrays[idx]
    for c in coords:
        orig = a[c]
        a[c] = orig + step
        up = f(arrays)
        a[c] = orig - step
        dn = f(arrays)
        a[c] = orig
        out[c] = (up - dn) / (2.0 * step)
    return out


def kink_margin(tape):
    """Smallest |input| over all kinked ops on the tape (inf if none)."""
    worst = np.inf
    for node in tape.nodes:
        if node.kind in KINK_KINDS:
            worst = min(worst, float(np.min(np.abs(node.parents[0].value))))
    return worst


def random_mlp_graph(seed, margin=1e-3, max_tries=50):
    """A random MLP-composed scalar graph whose kink inputs stay off 0.

    Returns (spec, params, x, build) where build(arrays) -> (tape, scalar node,
    MlpParams); inputs are resampled until every relu/positive-part input is
    at least ``margin`` from its kink, so finite differences stay valid.
    """
    r = np.random.default_rng(seed)
    b, din = int(r.integers(2, 6)), int(r.integers(2, 5))
    hidden = tuple(int(r.integers(3, 9)) for _ in range(int(r.integers(1, 4))))
    dout = int(r.integers(1, 4))
    spec = nn.MlpSpec(din, hidden, dout)

    for attempt in range(max_tries):
        params = nn.init_mlp(spec, int(r.integers(0, 2**31)), f"fd{seed}.{attempt}")
        x = r.normal(size=(b, din))

        def build(arrays, spec=spec, x=x):
            p = nn.MlpParams.from_arrays(spec, arrays)
            t = ad.Tape()
            out = nn.mlp_forward(p, x, tape=t)
            mixed = ad.add(ad.positive_part(out), ad.scalar_multiply(ad.square(out), 0.3))
            red = ad.mean_reduce(ad.multiply(mixed, mixed))
            return t, red, p

        tape, _, _ = build(params.arrays())
        if kink_margin(tape) > margin:
            return spec, params, x, build
    raise RuntimeError(f"could not find kink-safe inputs for seed {seed}")


def max_rel_fd_error(seed, coords_per_leaf=3, step=1e-5):
    """Worst relative error of reverse-mode vs central FD on one random graph."""
    spec, params, x, build = random_mlp_graph(seed)
    arrays = params.arrays()
    tape, loss, p = build(arrays)
    grads = ad.backward(tape, loss)
    leaves = [w for pair in nn.leaf_params(p, tape) for w in pair]
    r = np.random.default_rng(seed + 10_000)
    worst = 0.0

    def f(arrs):
        _, node, _ = build(arrs)
        return float(node.value)

    for k, leaf in enumerate(leaves):
        g_ad = grads[leaf.index]
        scale = max(float(np.max(np.abs(g_ad))), 1e-3)
        coords = [tuple(r.integers(0, s) for s in leaf.value.shape) for _ in range(coords_per_leaf)]
        for c, fd in fd_gradient(f, arrays, k, coords, step=step).items():
            worst = max(worst, abs(g_ad[c] - fd) / max(abs(fd), scale))
    return worst
