"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately minimal: it provides exactly the operations the
relation classifier needs.  Every operation returns a new `Tensor` whose
node records its operands and a backward rule; calling `backward()` on a
scalar result walks the recorded graph in reverse topological order and
accumulates gradients into every reachable tensor with `requires_grad`.

Graphs are confined to a single thread for the duration of a forward and
backward pass, and backward() must run before any operand's data is
mutated in place (backward rules read operand data live).  There is no
global tape: the graph lives in the result tensors themselves, so
independent graphs never share state.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Sequence

import numpy as np

from .rng import Rng

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12

_debug_numerics = False


def set_debug_numerics(enabled: bool) -> None:
    """Toggle finiteness assertions on every operation output."""
    global _debug_numerics
    _debug_numerics = bool(enabled)


def debug_numerics_enabled() -> bool:
    return _debug_numerics


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class NumericsError(ArithmeticError):
    """Non-finite value detected while debug_numerics is enabled."""


class Tensor:
    """Dense row-major float64 array, optionally tracked for gradients.

    `grad` is populated (as a numpy array of the same shape) by
    `backward()`; it accumulates across calls until reset to None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        # Row-major contiguity is part of the contract (flat views of
        # `data` must alias it, e.g. for finite-difference perturbation).
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode gradient pass from a scalar root."""
        if self.data.ndim != 0:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        order = graph_nodes(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            # grad is None when no gradient reached the node (e.g. past a
            # clamp); propagating zeros would be a no-op.
            if node._backward_fn is None or node.grad is None:
                continue
            node._backward_fn(node.grad)
        # Contract: every requires_grad tensor reachable from the root ends
        # up with a populated gradient, even if it is all zeros.
        for node in order:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)

    # Small conveniences; the module-level functions are the canonical API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def graph_nodes(root: Tensor) -> list[Tensor]:
    """All nodes reachable from `root`, in topological order.

    Iterative post-order traversal; operands always precede the operations
    that consume them.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    out.op = op
    if _debug_numerics and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite output of {op}")
    return out


# ---------------------------------------------------------------------------
# Elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)
    return _result(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)
    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)
    return _result(a.data * c, (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0.0))
    return _result(np.maximum(a.data, 0.0), (a,), backward, "relu")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - out_data * out_data))
    return _result(out_data, (a,), backward, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data * (1.0 - out_data))
    return _result(out_data, (a,), backward, "sigmoid")


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g)))
    return _result(np.asarray(a.data.sum()), (a,), backward, "sum")


# ---------------------------------------------------------------------------
# Structural primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for the 2Dx2D, 2Dx1D and 1Dx2D cases."""
    if a.data.ndim == 2 and b.data.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)
    elif a.data.ndim == 2 and b.data.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(np.outer(g, b.data))
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)
    elif a.data.ndim == 1 and b.data.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(b.data @ g)
            if b.requires_grad:
                b.accumulate_grad(np.outer(a.data, g))
    else:
        raise ShapeError(f"matmul: unsupported ranks {a.data.ndim} and {b.data.ndim}")
    return _result(a.data @ b.data, (a, b), backward, "matmul")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: no operands")
    if axis not in (-1, parts[0].data.ndim - 1):
        raise ShapeError("concat: only the last axis is supported")
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)
    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[..., lo:hi])
    return _result(np.concatenate([p.data for p in parts], axis=-1), parts, backward, "concat")


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix."""
    rows = list(rows)
    if not rows or any(r.data.ndim != 1 for r in rows):
        raise ShapeError("stack_rows: needs a nonempty list of 1-D tensors")
    def backward(g):
        for i, r in enumerate(rows):
            if r.requires_grad:
                r.accumulate_grad(g[i])
    return _result(np.stack([r.data for r in rows]), rows, backward, "stack_rows")


def gather(table: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; gradients scatter-add back.  The
    scatter writes into the table's gradient buffer directly, so embedding
    tables never allocate per-lookup temporaries of their own size."""
    idx = np.asarray(indices, dtype=np.intp)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError("gather: needs a 2-D table and 1-D indices")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("gather: index out of range")
    def backward(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)
    return _result(table.data[idx], (table,), backward, "gather")


def row(a: Tensor, i: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= i < a.shape[0]):
        raise ShapeError(f"row: index {i} into shape {a.shape}")
    def backward(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[i] += g
    return _result(a.data[i].copy(), (a,), backward, "row")


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[-1]):
        raise ShapeError(f"slice_last: [{start}:{stop}] of {a.shape}")
    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            acc[..., start:stop] = g
            a.accumulate_grad(acc)
    return _result(a.data[..., start:stop].copy(), (a,), backward, "slice")


# ---------------------------------------------------------------------------
# Model-level operations


def conv1d_valid(input: Tensor, filters: Tensor, bias: Tensor) -> Tensor:
    """Valid 1-D convolution over the row (time) axis, pre-activation.

    input is (n, d), filters (m, k, d), bias (m,); the output row j, column
    f is sum_h dot(filters[f][h], input[j+h]) + bias[f], shape (n-k+1, m).
    Computed as k slim matrix products over contiguous row slices, which
    avoids materializing an (n-k+1, k*d) window matrix.
    """
    if input.data.ndim != 2 or filters.data.ndim != 3 or bias.data.ndim != 1:
        raise ShapeError("conv1d_valid: expects input (n,d), filters (m,k,d), bias (m,)")
    n, d = input.shape
    m, k, fd = filters.shape
    if fd != d:
        raise ShapeError(f"conv1d_valid: filter width {fd} != input width {d}")
    if bias.shape != (m,):
        raise ShapeError(f"conv1d_valid: bias shape {bias.shape} != ({m},)")
    if k < 1 or n < k:
        raise ShapeError(f"conv1d_valid: need n >= k >= 1, got n={n}, k={k}")
    length = n - k + 1
    out_data = np.broadcast_to(bias.data, (length, m)).copy()
    for h in range(k):
        out_data += input.data[h:h + length] @ filters.data[:, h, :].T

    def backward(g):
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))
        if filters.requires_grad:
            if filters.grad is None:
                filters.grad = np.zeros_like(filters.data)
            for h in range(k):
                filters.grad[:, h, :] += g.T @ input.data[h:h + length]
        if input.requires_grad:
            if input.grad is None:
                input.grad = np.zeros_like(input.data)
            for h in range(k):
                input.grad[h:h + length] += g @ filters.data[:, h, :]

    return _result(out_data, (input, filters, bias), backward, "conv1d_valid")


def max_over_time(feature_map: Tensor) -> Tensor:
    """Column-wise maximum of an (L, m) map; gradient flows to the first
    occurrence of each column's maximum."""
    if feature_map.data.ndim != 2 or feature_map.shape[0] < 1:
        raise ShapeError(f"max_over_time: needs a nonempty (L, m) map, got {feature_map.shape}")
    argmax = feature_map.data.argmax(axis=0)
    cols = np.arange(feature_map.shape[1])
    def backward(g):
        if feature_map.requires_grad:
            acc = np.zeros_like(feature_map.data)
            acc[argmax, cols] = g
            feature_map.accumulate_grad(acc)
    return _result(feature_map.data[argmax, cols], (feature_map,), backward, "max_over_time")


def softmax(logits: Tensor) -> Tensor:
    """Stable exp-normalize of a 1-D logit vector (length >= 2)."""
    if logits.data.ndim != 1 or logits.shape[0] < 2:
        raise ShapeError(f"softmax: needs a 1-D vector of length >= 2, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericsError("softmax: non-finite logits")
    shifted = logits.data - logits.data.max()
    e = np.exp(shifted)
    p = e / e.sum()
    def backward(g):
        if logits.requires_grad:
            logits.accumulate_grad(p * (g - float(g @ p)))
    return _result(p, (logits,), backward, "softmax")


def dropout(z: Tensor, rho: float, rng: Rng, training: bool) -> Tensor:
    """Inverted dropout: components are zeroed with probability rho and the
    survivors scaled by 1/(1-rho), so inference needs no correction.  In
    inference mode the input tensor is returned unchanged."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"dropout: rho must be in [0, 1), got {rho}")
    if not training or rho == 0.0:
        return z
    mask = (rng.fill_uniform(z.shape, 0.0, 1.0) >= rho) / (1.0 - rho)
    def backward(g):
        if z.requires_grad:
            z.accumulate_grad(g * mask)
    return _result(z.data * mask, (z,), backward, "dropout")


def nll_loss(p: Tensor, gold: int, weights: Iterable[Tensor] = (), l2: float = 0.0) -> Tensor:
    """Negative log likelihood of the gold class, plus an optional L2
    penalty l2 * sum ||W||^2 over the given weight tensors.

    p[gold] is clamped at 1e-12 before the log; inside the clamped region
    the gradient is zero, matching what finite differences see.
    """
    if p.data.ndim != 1:
        raise ShapeError(f"nll_loss: p must be 1-D, got {p.shape}")
    if not 0 <= gold < p.shape[0]:
        raise ValueError(f"nll_loss: gold index {gold} outside [0, {p.shape[0]})")
    pg = float(p.data[gold])
    clamped = pg < LOG_CLAMP
    if clamped and _debug_numerics:
        log.warning("nll_loss: p[gold]=%.3e clamped at %.0e", pg, LOG_CLAMP)
    def backward(g):
        if p.requires_grad and not clamped:
            acc = np.zeros_like(p.data)
            acc[gold] = -float(g) / pg
            p.accumulate_grad(acc)
    loss = _result(np.asarray(-np.log(max(pg, LOG_CLAMP))), (p,), backward, "nll")
    if l2 != 0.0:
        for w in weights:
            loss = add(loss, scale(sum_all(mul(w, w)), l2))
    return loss


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Compare analytic gradients of a scalar computation against central
    finite differences, coordinate by coordinate.

    f must be deterministic (run dropout in inference mode) and must read
    the given input tensors so that in-place perturbation is visible.
    Returns the maximum relative error max(|a-n| / max(|a|, |n|, 1e-8)).
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"grad_check: eps must be in [1e-5, 1e-2], got {eps}")
    for t in inputs:
        t.grad = None
    out = f()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = float(f().data)
            flat[i] = saved - eps
            f_minus = float(f().data)
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a_i = float(a.reshape(-1)[i])
            rel = abs(a_i - numeric) / max(abs(a_i), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
