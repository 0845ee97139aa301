"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every backward rule is written in terms of the same differentiable ops it
differentiates, so :func:`grad` with ``create_graph=True`` returns values
that can themselves be differentiated again.

Values are eager: the array is computed when the node is built, and the
node only records how to push a cotangent back to its parents.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, log_expit

__all__ = [
    "Value",
    "ShapeError",
    "RankDeficient",
    "leaf",
    "const",
    "evaluate",
    "grad",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "sigmoid",
    "logsigmoid",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "broadcast_to",
    "sum_to",
    "getitem",
    "concat",
    "solve",
    "copyltu",
    "householder_qr",
    "qr",
    "qr_backward",
]


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = tuple(shapes)
        msg = f"{op}: incompatible shapes {', '.join(map(str, shapes))}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class RankDeficient(ArithmeticError):
    """QR found a (numerically) linearly dependent column."""

    def __init__(self, column: int, batch_index: tuple | None = None):
        self.column = column
        self.batch_index = batch_index
        where = f" at batch index {batch_index}" if batch_index else ""
        super().__init__(f"column {column} is linearly dependent on earlier columns{where}")


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build values without recording history."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Value:
    __slots__ = ("data", "parents", "backward", "op", "requires_grad", "__weakref__")

    # numpy must defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None,
                 op: str = "leaf", requires_grad: bool = False):
        self.data = data
        self.parents = parents
        self.backward = backward
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Value":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Value(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def leaf(data) -> Value:
    """A differentiable input."""
    return Value(np.array(data, dtype=np.float64), requires_grad=True)


def const(data) -> Value:
    """A non-differentiable input (targets, masks, noise)."""
    return Value(np.asarray(data, dtype=np.float64))


def _as_value(x) -> Value:
    if isinstance(x, Value):
        return x
    return Value(np.asarray(x, dtype=np.float64))


def _node(data, parents: tuple, backward: Callable, op: str) -> Value:
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                return Value(data, parents, backward, op, True)
    return Value(data, op=op)


def evaluate(root: Value) -> np.ndarray:
    """Concrete array held by ``root``."""
    return root.numpy()


# ---------------------------------------------------------------- elementwise


def _binary(op: str, fn, a, b):
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(op, (a.shape, b.shape), str(exc)) from None


def add(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    out = _binary("add", np.add, a, b)

    def backward(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None)

    return _node(out, (a, b), backward, "add")


def sub(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    out = _binary("sub", np.subtract, a, b)

    def backward(g, needs):
        return (sum_to(g, a.shape) if needs[0] else None,
                sum_to(neg(g), b.shape) if needs[1] else None)

    return _node(out, (a, b), backward, "sub")


def mul(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    out = _binary("mul", np.multiply, a, b)

    def backward(g, needs):
        return (sum_to(mul(g, b), a.shape) if needs[0] else None,
                sum_to(mul(g, a), b.shape) if needs[1] else None)

    return _node(out, (a, b), backward, "mul")


def div(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    out = _binary("div", np.divide, a, b)

    def backward(g, needs):
        ga = gb = None
        if needs[0]:
            ga = sum_to(div(g, b), a.shape)
        if needs[1]:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _node(out, (a, b), backward, "div")


def neg(a) -> Value:
    a = _as_value(a)
    return _node(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def power(a, p: float) -> Value:
    """Elementwise ``a ** p`` for a constant exponent."""
    a = _as_value(a)
    p = float(p)
    out = a.data ** p

    def backward(g, needs):
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (mul(g, mul(a, 2.0)),)
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _node(out, (a,), backward, "power")


def exp(a) -> Value:
    a = _as_value(a)
    out = _node(np.exp(a.data), (a,), None, "exp")
    if out.requires_grad:
        out.backward = lambda g, needs: (mul(g, out),)
    return out


def log(a) -> Value:
    a = _as_value(a)
    return _node(np.log(a.data), (a,), lambda g, needs: (div(g, a),), "log")


def sigmoid(a) -> Value:
    a = _as_value(a)
    out = _node(expit(a.data), (a,), None, "sigmoid")
    if out.requires_grad:
        out.backward = lambda g, needs: (mul(g, mul(out, sub(1.0, out))),)
    return out


def logsigmoid(a) -> Value:
    """log(1 / (1 + exp(-a))), evaluated as -softplus(-a) without overflow."""
    a = _as_value(a)
    return _node(log_expit(a.data), (a,), lambda g, needs: (mul(g, sigmoid(neg(a))),), "logsigmoid")


# ---------------------------------------------------------------- shape ops


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def transpose(a, axes: Sequence[int] | None = None) -> Value:
    """Permute axes; by default swap the last two."""
    a = _as_value(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", (a.shape,), "need at least 2 dims")
        return _node(_swap_last(a.data), (a,), lambda g, needs: (transpose(g),), "transpose")
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,),
                 lambda g, needs: (transpose(g, inv),), "transpose")


def reshape(a, shape: Sequence[int]) -> Value:
    a = _as_value(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", (a.shape, tuple(shape)), str(exc)) from None
    in_shape = a.shape
    return _node(out, (a,), lambda g, needs: (reshape(g, in_shape),), "reshape")


def sum(a, axis=None, keepdims: bool = False) -> Value:  # noqa: A001
    a = _as_value(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def backward(g, needs):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = sorted(ax % len(in_shape) for ax in axes)
            shape = list(g.shape)
            for ax in axes:
                shape.insert(ax, 1)
            g = reshape(g, shape)
        return (broadcast_to(g, in_shape),)

    return _node(out, (a,), backward, "sum")


def broadcast_to(a, shape: Sequence[int]) -> Value:
    a = _as_value(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError("broadcast_to", (a.shape, shape), str(exc)) from None
    in_shape = a.shape
    return _node(out, (a,), lambda g, needs: (sum_to(g, in_shape),), "broadcast_to")


def _sum_to_np(x: np.ndarray, shape: tuple) -> np.ndarray:
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x


def sum_to(a, shape: Sequence[int]) -> Value:
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""
    a = _as_value(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    out = _sum_to_np(a.data, shape)
    in_shape = a.shape
    return _node(out, (a,), lambda g, needs: (broadcast_to(g, in_shape),), "sum_to")


def getitem(a, idx) -> Value:
    a = _as_value(a)
    try:
        out = a.data[idx]
    except IndexError as exc:
        raise ShapeError("getitem", (a.shape,), str(exc)) from None
    in_shape = a.shape
    return _node(out, (a,), lambda g, needs: (_scatter(g, idx, in_shape),), "getitem")


def _scatter(g: Value, idx, shape: tuple) -> Value:
    """Zeros of ``shape`` with ``g`` placed at ``idx`` (adjoint of getitem)."""
    out = np.zeros(shape)
    if _has_array_index(idx):
        np.add.at(out, idx, g.data)
    else:
        out[idx] = g.data
    return _node(out, (g,), lambda gg, needs: (getitem(gg, idx),), "scatter")


def _has_array_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(values: Sequence, axis: int = -1) -> Value:
    values = [_as_value(v) for v in values]
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", [v.shape for v in values], str(exc)) from None
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def backward(g, needs):
        grads = []
        for k, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
            grads.append(getitem(g, tuple(idx)))
        return tuple(grads)

    return _node(out, tuple(values), backward, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Value:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_value(a), _as_value(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", (a.shape, b.shape), "scalar operand")
    if a.ndim == 1 and b.ndim == 1:
        return sum(mul(a, b))
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    out = _binary("matmul", np.matmul, a, b)

    def backward(g, needs):
        ga = gb = None
        if needs[0]:
            ga = sum_to(matmul(g, transpose(b)), a.shape)
        if needs[1]:
            gb = sum_to(matmul(transpose(a), g), b.shape)
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def solve(a, b) -> Value:
    """X with ``a @ X = b`` for batched square ``a``."""
    a, b = _as_value(a), _as_value(b)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError("solve", (a.shape, b.shape), "matrix must be square")
    try:
        out = np.linalg.solve(a.data, b.data)
    except ValueError as exc:
        raise ShapeError("solve", (a.shape, b.shape), str(exc)) from None
    except np.linalg.LinAlgError:
        raise RankDeficient(column=-1) from None
    node = _node(out, (a, b), None, "solve")
    if node.requires_grad:
        def backward(g, needs):
            gb = solve(transpose(a), g)
            ga = sum_to(neg(matmul(gb, transpose(node))), a.shape) if needs[0] else None
            return ga, (sum_to(gb, b.shape) if needs[1] else None)

        node.backward = backward
    return node


def copyltu(m) -> Value:
    """Copy the lower triangle (diagonal included) onto the upper triangle."""
    m = _as_value(m)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ShapeError("copyltu", (m.shape,), "matrix must be square")
    n = m.shape[-1]
    lower = np.tril(np.ones((n, n)))
    strict = np.tril(np.ones((n, n)), -1)
    return add(mul(m, lower), transpose(mul(m, strict)))


def householder_qr(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduced QR of a (batched) tall matrix by Householder reflections.

    Returns Q of shape (..., n, m) and R of shape (..., m, m) with R's
    diagonal made non-negative so the factorization is unique.
    """
    a = np.asarray(a, dtype=np.float64)
    n, m = a.shape[-2:]
    if n < m:
        raise ShapeError("qr", (a.shape,), "need rows >= cols")
    r = a.copy()
    vs = []
    for j in range(m):
        x = r[..., j:, j]
        normx = np.sqrt(np.sum(x * x, axis=-1))
        alpha = np.where(x[..., 0] >= 0, -normx, normx)
        v = x.copy()
        v[..., 0] -= alpha
        vnorm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
        v = np.divide(v, vnorm, out=np.zeros_like(v), where=vnorm > 0)
        vs.append(v)
        block = r[..., j:, j:]
        block -= 2.0 * v[..., :, None] * np.einsum("...i,...ij->...j", v, block)[..., None, :]
    q = np.zeros(a.shape[:-2] + (n, m))
    q[..., np.arange(m), np.arange(m)] = 1.0
    for j in range(m - 1, -1, -1):
        v = vs[j]
        block = q[..., j:, :]
        block -= 2.0 * v[..., :, None] * np.einsum("...i,...ij->...j", v, block)[..., None, :]
    r = np.triu(r[..., :m, :])
    d = np.where(np.diagonal(r, axis1=-2, axis2=-1) < 0, -1.0, 1.0)
    return q * d[..., None, :], r * d[..., :, None]


def rank_check(r: np.ndarray, a: np.ndarray, rank_tol: float = 1e-10,
               columns: Iterable[int] | None = None) -> None:
    """Raise RankDeficient if a diagonal entry of R is tiny relative to A."""
    scale = np.sqrt(np.max(np.sum(a * a, axis=-2), axis=-1))
    diag = np.abs(np.diagonal(r, axis1=-2, axis2=-1))
    cols = range(r.shape[-1]) if columns is None else columns
    for j in cols:
        bad = diag[..., j] < rank_tol * scale
        if np.any(bad):
            batch = tuple(int(i) for i in np.argwhere(bad)[0]) if bad.ndim else None
            raise RankDeficient(j, batch)


def qr(a, check: bool = True, rank_tol: float = 1e-10) -> tuple[Value, Value]:
    """Differentiable reduced QR, ``a`` of shape (..., n, m) with n >= m."""
    a = _as_value(a)
    if a.ndim < 2:
        raise ShapeError("qr", (a.shape,), "need a matrix")
    n, m = a.shape[-2:]
    q, r = householder_qr(a.data)
    if check:
        rank_check(r, a.data, rank_tol)
    # Q and R are packed into one node so the backward sees both cotangents.
    packed = np.concatenate([q, r], axis=-2)
    node = _node(packed, (a,), None, "qr")
    if not node.requires_grad:
        return Value(q, op="qr.Q"), Value(r, op="qr.R")
    qv = getitem(node, (Ellipsis, slice(0, n), slice(None)))
    rv = getitem(node, (Ellipsis, slice(n, n + m), slice(None)))

    def backward(g, needs):
        gq = getitem(g, (Ellipsis, slice(0, n), slice(None)))
        gr = getitem(g, (Ellipsis, slice(n, n + m), slice(None)))
        return (qr_backward(qv, rv, gq, gr),)

    node.backward = backward
    return qv, rv


def qr_backward(q, r, gq, gr) -> Value:
    """Cotangent of A given cotangents of its reduced QR factors.

    A_bar = (Q_bar + Q copyltu(M)) R^{-T},  M = R R_bar^T - Q_bar^T Q.
    """
    q, r, gq, gr = map(_as_value, (q, r, gq, gr))
    m_ = sub(matmul(r, transpose(gr)), matmul(transpose(gq), q))
    b = add(gq, matmul(q, copyltu(m_)))
    # b R^{-T} = (R^{-1} b^T)^T
    return transpose(solve(r, transpose(b)))


# ---------------------------------------------------------------- differentiation


def _toposort(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Value, wrt: Sequence[Value], create_graph: bool = True,
         seed: Value | None = None) -> list[Value]:
    """Gradients of scalar ``output`` with respect to each value in ``wrt``.

    With ``create_graph`` the results are differentiable values; otherwise
    they are constants. Inputs that ``output`` does not depend on get zeros.
    """
    global _GRAD_ENABLED
    if seed is None and output.shape != ():
        raise ShapeError("grad", (output.shape,), "output must be a scalar")
    targets = {id(w) for w in wrt}
    order = _toposort(output) if output.requires_grad else []

    # only nodes with a path to some target need cotangents
    relevant: set[int] = set()
    for node in order:
        if id(node) in targets or any(id(p) in relevant for p in node.parents):
            relevant.add(id(node))

    prev = _GRAD_ENABLED
    _GRAD_ENABLED = create_graph
    try:
        grads: dict[int, Value] = {}
        if id(output) in relevant:
            grads[id(output)] = seed if seed is not None else Value(np.ones(()))
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.backward is None:
                continue
            needs = tuple(id(p) in relevant for p in node.parents)
            if not any(needs):
                continue
            for p, gp in zip(node.parents, node.backward(g, needs)):
                if gp is None or id(p) not in relevant:
                    continue
                old = grads.get(id(p))
                grads[id(p)] = gp if old is None else add(old, gp)
        out = []
        for w in wrt:
            g = grads.get(id(w))
            if g is None:
                g = Value(np.zeros(w.shape))
            elif g.data.shape != w.shape:
                g = sum_to(g, w.shape)
            out.append(g)
        return out
    finally:
        _GRAD_ENABLED = prev
