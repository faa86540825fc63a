"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records operations in construction order; :func:`backward`
replays them in exact reverse order, accumulating gradients across fan-out.
Values are plain numpy arrays, so the heavy kernels are BLAS while the tape
itself stays small (one node per batched operation, not per element).

Conventions fixed here and relied on by tests:

* everything is float64;
* the subgradient of ``relu`` / ``positive_part`` / ``negative_part`` at
  the kink is 0;
* identical inputs and operation order give bit-identical outputs and
  gradients.
"""

from __future__ import annotations

import weakref
from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    pass


def _as64(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A node in the computation graph.

    Created either as a leaf (:meth:`Tape.leaf` / :meth:`Tape.constant`)
    or as the output of an op. ``parents`` and ``vjps`` drive the backward
    sweep; ``trainable`` marks leaves whose gradients callers want.

    The back-reference to the tape is weak: the tape owns the nodes, so a
    strong link in both directions would make every training step's graph
    a garbage cycle that outlives the step (numpy buffers count for
    nothing in the cyclic collector's heuristics).
    """

    __slots__ = ("value", "parents", "vjps", "trainable", "_tape", "index", "kind")

    def __init__(self, value, tape: "Tape", kind: str, parents=(), vjps=(), trainable=False):
        self.value = _as64(value)
        self._tape = weakref.ref(tape)
        self.kind = kind
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        self.trainable = trainable
        self.index = tape._append(self)

    @property
    def tape(self) -> "Tape":
        t = self._tape()
        if t is None:
            raise AutodiffError("the tape owning this tensor has been freed")
        return t

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(kind={self.kind!r}, shape={self.value.shape}, idx={self.index})"


class Tape:
    """Ordered record of operations; node inputs always precede the node."""

    def __init__(self, check_finite: bool = False):
        self.nodes: list[Tensor] = []
        self.check_finite = check_finite

    def _append(self, node: Tensor) -> int:
        if self.check_finite and not np.all(np.isfinite(node.value)):
            raise AutodiffError(f"non-finite value produced by op {node.kind!r}")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value, trainable: bool = True) -> Tensor:
        return Tensor(value, self, "leaf", trainable=trainable)

    def constant(self, value) -> Tensor:
        return Tensor(value, self, "const", trainable=False)

    def __len__(self):
        return len(self.nodes)


def _require(cond: bool, msg: str):
    if not cond:
        raise ShapeMismatch(msg)


# ---------------------------------------------------------------------------
# Operations. Each returns a new Tensor whose vjps map the output gradient to
# gradients of the corresponding parents.
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with x (B,i), w (i,o), b (o,)."""
    _require(x.value.ndim == 2 and w.value.ndim == 2, "affine expects 2-d x and w")
    _require(x.value.shape[1] == w.value.shape[0], f"affine inner dims {x.shape} vs {w.shape}")
    _require(b.value.shape == (w.value.shape[1],), f"affine bias shape {b.shape} vs {w.shape}")
    out = x.value @ w.value
    out += b.value
    return Tensor(
        out, x.tape, "affine",
        parents=(x, w, b),
        vjps=(
            lambda g: g @ w.value.T,
            lambda g: x.value.T @ g,
            lambda g: g.sum(axis=0),
        ),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0.0
    return Tensor(np.where(mask, x.value, 0.0), x.tape, "relu",
                  parents=(x,), vjps=(lambda g: g * mask,))


def positive_part(x: Tensor) -> Tensor:
    mask = x.value > 0.0
    return Tensor(np.where(mask, x.value, 0.0), x.tape, "positive-part",
                  parents=(x,), vjps=(lambda g: g * mask,))


def negative_part(x: Tensor) -> Tensor:
    """x⁻ = max(-x, 0), so x = x⁺ − x⁻."""
    mask = x.value < 0.0
    return Tensor(np.where(mask, -x.value, 0.0), x.tape, "negative-part",
                  parents=(x,), vjps=(lambda g: -g * mask,))


def add(x: Tensor, y: Tensor) -> Tensor:
    _require(x.value.shape == y.value.shape, f"add shapes {x.shape} vs {y.shape}")
    return Tensor(x.value + y.value, x.tape, "add",
                  parents=(x, y), vjps=(lambda g: g, lambda g: g))


def subtract(x: Tensor, y: Tensor) -> Tensor:
    _require(x.value.shape == y.value.shape, f"subtract shapes {x.shape} vs {y.shape}")
    return Tensor(x.value - y.value, x.tape, "subtract",
                  parents=(x, y), vjps=(lambda g: g, lambda g: -g))


def multiply(x: Tensor, y: Tensor) -> Tensor:
    _require(x.value.shape == y.value.shape, f"multiply shapes {x.shape} vs {y.shape}")
    return Tensor(x.value * y.value, x.tape, "multiply",
                  parents=(x, y), vjps=(lambda g: g * y.value, lambda g: g * x.value))


def scalar_multiply(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(x.value * c, x.tape, "scalar-multiply",
                  parents=(x,), vjps=(lambda g: g * c,))


def add_const(x: Tensor, c) -> Tensor:
    """x + c for a non-differentiated array (broadcastable onto x)."""
    c = _as64(c)
    out = x.value + c
    _require(out.shape == x.value.shape, f"add_const broadcast changed shape {x.shape} -> {out.shape}")
    return Tensor(out, x.tape, "add-const", parents=(x,), vjps=(lambda g: g,))


def mul_const(x: Tensor, c) -> Tensor:
    """x * c for a non-differentiated array (broadcastable onto x)."""
    c = _as64(c)
    out = x.value * c
    _require(out.shape == x.value.shape, f"mul_const broadcast changed shape {x.shape} -> {out.shape}")
    return Tensor(out, x.tape, "mul-const", parents=(x,), vjps=(lambda g: g * c,))


def square(x: Tensor) -> Tensor:
    return Tensor(x.value * x.value, x.tape, "square",
                  parents=(x,), vjps=(lambda g: 2.0 * g * x.value,))


def mean_reduce(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.value.size if axis is None else x.value.shape[axis]
    out = x.value.mean(axis=axis)
    shape = x.value.shape

    def vjp(g):
        if axis is None:
            return np.full(shape, g / n)
        return np.broadcast_to(np.expand_dims(g / n, axis), shape).copy()

    return Tensor(out, x.tape, "mean-reduce", parents=(x,), vjps=(vjp,))


def sum_reduce(x: Tensor, axis: int | None = None) -> Tensor:
    out = x.value.sum(axis=axis)
    shape = x.value.shape

    def vjp(g):
        if axis is None:
            return np.full(shape, g)
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return Tensor(out, x.tape, "sum-reduce", parents=(x,), vjps=(vjp,))


def concatenate(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    _require(len(xs) >= 1, "concatenate needs at least one input")
    out = np.concatenate([x.value for x in xs], axis=axis)
    sizes = [x.value.shape[axis] for x in xs]
    offs = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offs[i], offs[i + 1])
            return g[tuple(sl)]
        return vjp

    return Tensor(out, xs[0].tape, "concatenate",
                  parents=tuple(xs), vjps=tuple(make_vjp(i) for i in range(len(xs))))


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _require(x.value.ndim == 2, "slice_cols expects 2-d input")
    _require(0 <= start <= stop <= x.value.shape[1], f"slice [{start}:{stop}] out of range for {x.shape}")
    width = x.value.shape[1]

    def vjp(g):
        out = np.zeros((g.shape[0], width))
        out[:, start:stop] = g
        return out

    return Tensor(x.value[:, start:stop], x.tape, "slice",
                  parents=(x,), vjps=(vjp,))


def gather_cols(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    _require(x.value.ndim == 2, "gather_cols expects 2-d input")
    width = x.value.shape[1]
    _require(idx.size == 0 or (idx.min() >= 0 and idx.max() < width), f"gather index out of range for {x.shape}")

    def vjp(g):
        out = np.zeros((g.shape[0], width))
        np.add.at(out, (slice(None), idx), g)
        return out

    return Tensor(x.value[:, idx], x.tape, "gather",
                  parents=(x,), vjps=(vjp,))


def inner_product(x: Tensor, y: Tensor) -> Tensor:
    """Row-wise inner product: (B,k)·(B,k) -> (B,1); (k,)·(k,) -> scalar."""
    _require(x.value.shape == y.value.shape, f"inner_product shapes {x.shape} vs {y.shape}")
    if x.value.ndim == 1:
        out = np.dot(x.value, y.value)
        return Tensor(out, x.tape, "inner-product", parents=(x, y),
                      vjps=(lambda g: g * y.value, lambda g: g * x.value))
    _require(x.value.ndim == 2, "inner_product expects 1-d or 2-d inputs")
    out = np.einsum("ij,ij->i", x.value, y.value)[:, None]
    return Tensor(out, x.tape, "inner-product", parents=(x, y),
                  vjps=(lambda g: g * y.value, lambda g: g * x.value))


def rowdot_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Row-wise inner product against a constant matrix: (B,k)·const(B,k) -> (B,1)."""
    c = _as64(c)
    _require(x.value.shape == c.shape, f"rowdot_const shapes {x.shape} vs {c.shape}")
    out = np.einsum("ij,ij->i", x.value, c)[:, None]
    return Tensor(out, x.tape, "rowdot-const", parents=(x,), vjps=(lambda g: g * c,))


def block_rowdot_const(x: Tensor, c: np.ndarray, offsets: np.ndarray) -> Tensor:
    """Per-block row-wise inner products against a constant matrix.

    ``offsets`` are the block starts into the shared column axis (length
    P+1, offsets[-1] == width). Output is (B, P) with column p equal to the
    inner product of the p-th column block of x and c.
    """
    c = _as64(c)
    offsets = np.asarray(offsets, dtype=np.intp)
    _require(x.value.shape == c.shape, f"block_rowdot shapes {x.shape} vs {c.shape}")
    _require(offsets[-1] == x.value.shape[1], "block offsets must cover all columns")
    prod = x.value * c
    out = np.add.reduceat(prod, offsets[:-1], axis=1)
    widths = np.diff(offsets)

    def vjp(g):
        return np.repeat(g, widths, axis=1) * c

    return Tensor(out, x.tape, "block-rowdot", parents=(x,), vjps=(vjp,))


def broadcast_rows(x: Tensor, n_rows: int) -> Tensor:
    """(k,) -> (n_rows, k); gradient sums over rows."""
    _require(x.value.ndim == 1, "broadcast_rows expects 1-d input")
    out = np.broadcast_to(x.value, (n_rows, x.value.shape[0])).copy()
    return Tensor(out, x.tape, "broadcast-rows", parents=(x,), vjps=(lambda g: g.sum(axis=0),))


# ---------------------------------------------------------------------------
# Backward sweep and the kind-string dispatcher.
# ---------------------------------------------------------------------------

def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar root for every trainable leaf.

    Returns a map ``node index -> dE/dnode`` for the trainable leaves (and
    the root). Gradients accumulate across fan-out; nodes are visited in
    exact reverse construction order, and intermediate gradients are freed
    as soon as their node has been processed so the sweep stays within a
    small, reused working set.
    """
    if root.value.shape != ():
        raise AutodiffError(f"backward root must be scalar, got shape {root.value.shape}")
    need = np.zeros(len(tape.nodes), dtype=bool)
    for node in tape.nodes:
        if node.trainable:
            need[node.index] = True
        elif any(need[p.index] for p in node.parents):
            need[node.index] = True
    grads: dict[int, np.ndarray] = {root.index: np.asarray(1.0)}
    # identity-style vjps can hand back the consumer's own gradient buffer,
    # so only accumulate in place once this node owns a private buffer
    owned = np.zeros(len(tape.nodes), dtype=bool)
    out: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes[: root.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        if node.trainable or node.index == root.index:
            out[node.index] = g
        for parent, vjp in zip(node.parents, node.vjps):
            if not need[parent.index]:
                continue
            pg = vjp(g)
            acc = grads.get(parent.index)
            if acc is None:
                grads[parent.index] = pg
            elif owned[parent.index]:
                acc += pg
            else:
                grads[parent.index] = acc + pg
                owned[parent.index] = True
    return out


_KINDS: dict[str, Callable] = {
    "affine": affine,
    "rectified-linear": relu,
    "relu": relu,
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "scalar-multiply": scalar_multiply,
    "square": square,
    "positive-part": positive_part,
    "negative-part": negative_part,
    "mean-reduce": mean_reduce,
    "sum-reduce": sum_reduce,
    "concatenate": lambda *xs, **kw: concatenate(xs, **kw),
    "slice": slice_cols,
    "gather": gather_cols,
    "inner-product": inner_product,
}


def graph_apply(tape: Tape, kind: str, inputs: Iterable[int], **kwargs) -> int:
    """Apply an op by kind name to nodes given by index; returns the new node index.

    This is the uniform entry point the op-level tests exercise; model code
    calls the functions directly. Output finiteness is always checked here.
    """
    if kind not in _KINDS:
        raise AutodiffError(f"unsupported op kind {kind!r}")
    nodes = [tape.nodes[i] for i in inputs]
    out = _KINDS[kind](*nodes, **kwargs)
    if not np.all(np.isfinite(out.value)):
        raise AutodiffError(f"non-finite value produced by op {kind!r}")
    return out.index
