"""Dense float64 tensors with a reverse-mode tape.

Only the operations needed by the noise-prediction network and the
measurement residuals are provided. Every op records one node on the tape
that created its inputs; :meth:`Tape.backward` walks the nodes in reverse
creation order exactly once.

Broadcasting is restricted: a binary elementwise op accepts operands of equal
shape, or one operand whose shape is a trailing suffix of the other's (the
leading extents act as a batch). Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "reshape",
    "transpose",
    "split",
    "concat",
    "expand",
    "softmax",
    "layer_norm",
    "gelu",
    "embedding",
    "mean_square",
    "sum_all",
    "finite_diff_check",
]

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class _Node:
    __slots__ = ("op", "parents", "backward_fn", "requires_grad")

    def __init__(self, op, parents, backward_fn, requires_grad):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad


class Tensor:
    """Immutable value bound to a node on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.index].requires_grad

    # keep ndarray.__sub__ and friends from claiming mixed expressions
    __array_ufunc__ = None

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.tape.nodes[self.index].op!r})"


class Tape:
    """Append-only record of operations, in topological order by construction."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _record(self, op, value, parents, backward_fn) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        requires_grad = any(p.requires_grad for p in parents)
        node = _Node(op, tuple(p.index for p in parents), backward_fn, requires_grad)
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1, value)

    def leaf(self, value, requires_grad: bool = True) -> Tensor:
        value = np.array(value, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), None, requires_grad))
        return Tensor(self, len(self.nodes) - 1, value)

    def constant(self, value) -> Tensor:
        return self.leaf(value, requires_grad=False)

    def backward(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of the scalar ``output`` with respect to each of ``wrt``.

        Leaves that do not influence ``output`` receive a zero gradient.
        """
        if output.tape is not self:
            raise ValueError("output tensor belongs to a different tape")
        if output.value.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        return self.vjp(output, np.ones_like(output.value), wrt)

    def vjp(self, output: Tensor, cotangent, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Vector-Jacobian product ``cotangent^T d(output)/d(wrt)``."""
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if cotangent.shape != output.shape:
            raise ShapeError(
                f"vjp: cotangent shape {cotangent.shape} != output shape {output.shape}"
            )
        for w in wrt:
            if w.tape is not self:
                raise ValueError("wrt tensor belongs to a different tape")
        grads: dict[int, np.ndarray] = {output.index: cotangent}
        keep = {w.index for w in wrt}
        keep.add(output.index)
        lowest = min((w.index for w in wrt), default=output.index)
        for i in range(output.index, lowest - 1, -1):
            g = grads.get(i)
            if g is None:
                continue
            node = self.nodes[i]
            if node.backward_fn is None or not node.requires_grad:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not self.nodes[p].requires_grad:
                    continue
                if p in grads:
                    grads[p] = grads[p] + pg
                else:
                    grads[p] = pg
            # intermediate cotangents are not needed once propagated
            if i not in keep:
                del grads[i]
        out = []
        for w in wrt:
            g = grads.get(w.index)
            out.append(np.zeros_like(w.value) if g is None else g)
        return out


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one operand must be a Tensor")


def _lift(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _check_broadcast(op, a_shape, b_shape):
    if a_shape == b_shape:
        return
    small, big = (a_shape, b_shape) if len(a_shape) < len(b_shape) else (b_shape, a_shape)
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return
    raise ShapeError(f"{op}: incompatible shapes {a_shape} and {b_shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return tape._record(
        "add", a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return tape._record(
        "sub", a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    need_a, need_b = a.requires_grad, b.requires_grad

    def back(g):
        return (
            _unbroadcast(g * bv, av.shape) if need_a else None,
            _unbroadcast(g * av, bv.shape) if need_b else None,
        )

    return tape._record("mul", av * bv, (a, b), back)


def div(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_broadcast("div", a.shape, b.shape)
    av, bv = a.value, b.value
    out = av / bv

    def back(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return tape._record("div", out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return a.tape._record("neg", -a.value, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape._record("scale", a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D (shared weights) or carry exactly the same leading batch
    extents as ``a``.
    """
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    if a.value.ndim < 2 or b.value.ndim < 2 or sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: incompatible shapes {sa} and {sb}")
    if b.value.ndim > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul: batch extents differ in {sa} and {sb}")
    av, bv = a.value, b.value
    need_a, need_b = a.requires_grad, b.requires_grad

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2) if need_a else None
        if not need_b:
            gb = None
        elif bv.ndim == 2:
            gb = av.reshape(-1, sa[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return tape._record("matmul", av @ bv, (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from exc
    return a.tape._record("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.value.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return a.tape._record(
        "transpose", np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),)
    )


def split(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along the last axis into consecutive pieces of the given widths."""
    if sum(sizes) != a.shape[-1]:
        raise ShapeError(f"split: widths {list(sizes)} do not sum to last extent of {a.shape}")
    out = []
    start = 0
    full = a.shape
    for w in sizes:
        lo, hi = start, start + w

        def back(g, lo=lo, hi=hi):
            full_g = np.zeros(full)
            full_g[..., lo:hi] = g
            return (full_g,)

        out.append(a.tape._record("split", a.value[..., lo:hi], (a,), back))
        start = hi
    return out


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    tape = _tape_of(*parts)
    parts = [_lift(tape, p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes differ: {parts[0].shape} vs {p.shape}")
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return tape._record(
        "concat", np.concatenate([p.value for p in parts], axis=-1), tuple(parts), back
    )


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat the value ``n`` times along it."""
    out = np.repeat(np.expand_dims(a.value, axis), n, axis=axis)
    return a.tape._record("expand", out, (a,), lambda g: (g.sum(axis=axis),))


def softmax(a: Tensor) -> Tensor:
    x = a.value
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return a.tape._record("softmax", s, (a,), back)


def layer_norm(a: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, without affine terms.

    A constant row maps to zeros because the variance guard keeps the
    denominator at ``sqrt(eps)``.
    """
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return a.tape._record("layer_norm", xhat, (a,), back)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.value
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
        return (g * d,)

    return a.tape._record("gelu", out, (a,), back)


def embedding(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table of shape {table.shape}")
    shape = table.shape

    def back(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return table.tape._record("embedding", table.value[idx], (table,), back)


def mean_square(a: Tensor) -> Tensor:
    x = a.value
    n = x.size
    return a.tape._record(
        "mean_square", np.mean(x * x), (a,), lambda g: (g * 2.0 * x / n,)
    )


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return a.tape._record(
        "sum", np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def finite_diff_check(
    fn: Callable[[Tape, Tensor], Tensor],
    point,
    step: float = 1e-5,
) -> float:
    """Compare the tape gradient of ``fn`` against central differences.

    ``fn(tape, x)`` must build a scalar on ``tape`` from the leaf ``x``. Returns
    ``max |analytic - numeric| / max(1, |analytic|)`` over all coordinates.
    """
    point = np.array(point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(point)
    out = fn(tape, x)
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError("function value is not finite at the base point")
    (analytic,) = tape.backward(out, [x])

    def value_at(p):
        t = Tape()
        v = float(fn(t, t.leaf(p)).value)
        if not math.isfinite(v):
            raise FloatingPointError("function value is not finite at a perturbed point")
        return v

    numeric = np.empty_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        numeric.reshape(-1)[i] = (
            value_at(hi.reshape(point.shape)) - value_at(lo.reshape(point.shape))
        ) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
