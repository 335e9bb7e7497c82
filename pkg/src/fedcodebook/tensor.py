"""Dense float64 tensors with reverse-mode differentiation.

Every operation appends a node to an implicit trace: the output tensor
remembers its parents and a closure mapping the output gradient to parent
gradients.  `backward` walks that trace once, in reverse topological
order, and returns gradients in a dict -- tensors themselves are never
mutated, so a trace can be differentiated repeatedly and shared freely
between threads (one trace per training step).

Includes the two gradient-routing primitives needed by vector
quantization: `stop_gradient` (value passthrough, zero gradient) and
`straight_through` (value of the quantized input, gradient to the
continuous one).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

Array = np.ndarray


class Tensor:
    """Immutable dense tensor node in a computation trace."""

    __slots__ = ("data", "_parents", "_backward", "_op")

    def __init__(self, data, _parents: tuple = (), _op: str = "",
                 _backward: Callable[[Array], tuple] | None = None):
        if _parents:
            arr = np.asarray(data, dtype=np.float64)
        else:
            arr = np.array(data, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ContractError("tensor inputs must be finite (no NaN/Inf)")
        self.data = arr
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    # arithmetic sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return Tensor(out_data, (a, b), "add",
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    return Tensor(out_data, (a, b), "sub",
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return Tensor(out_data, (a, b), "mul",
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.data * c, (a,), "scale", lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")
    return Tensor(a.data @ b.data, (a, b), "matmul",
                  lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")
    return Tensor(a.data.T, (a,), "transpose", lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return Tensor(np.where(keep, a.data, 0.0), (a,), "relu",
                  lambda g: (np.where(keep, g, 0.0),))


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor(s, (a,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return Tensor(e, (a,), "exp", lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out_data = a.data ** p
    return Tensor(out_data, (a,), "power",
                  lambda g: (g * p * a.data ** (p - 1.0),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def _bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor(s, (a,), "softmax", _bwd)


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def _bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.shape).copy(),)

    return Tensor(out_data, (a,), "sum", _bwd)


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of the whole tensor (scalar)."""
    n = float(np.sqrt((a.data ** 2).sum()))

    def _bwd(g):
        if n == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / n,)

    return Tensor(n, (a,), "l2_norm", _bwd)


def row_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of paired rows; a zero row on either side gives 0."""
    if a.shape != b.shape or a.data.ndim != 2:
        raise DimensionError(f"row_cosine needs matching 2-D shapes, got {a.shape}, {b.shape}")
    na = np.sqrt((a.data ** 2).sum(axis=1))
    nb = np.sqrt((b.data ** 2).sum(axis=1))
    dot = (a.data * b.data).sum(axis=1)
    ok = (na > 0.0) & (nb > 0.0)
    denom = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, dot / denom, 0.0)

    def _bwd(g):
        gr = np.where(ok, g, 0.0)
        ga = gr[:, None] * (b.data / denom[:, None]
                            - cos[:, None] * a.data / np.where(ok, na ** 2, 1.0)[:, None])
        gb = gr[:, None] * (a.data / denom[:, None]
                            - cos[:, None] * b.data / np.where(ok, nb ** 2, 1.0)[:, None])
        return (ga, gb)

    return Tensor(cos, (a, b), "row_cosine", _bwd)


def take_rows(a: Tensor, indices) -> Tensor:
    """Select rows by index; gradient scatter-adds back (repeats accumulate)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError("take_rows: index out of range")

    def _bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return Tensor(a.data[idx], (a,), "take_rows", _bwd)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along the column axis."""
    tensors = list(tensors)
    widths = [t.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def _bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return Tensor(np.concatenate([t.data for t in tensors], axis=1),
                  tuple(tensors), "concat_cols", _bwd)


def replace_rows(x: Tensor, indices, row: Tensor) -> Tensor:
    """Replace the selected rows of `x` by the vector `row` (row masking)."""
    idx = np.asarray(indices, dtype=np.intp)
    if x.data.ndim != 2 or row.data.shape != (x.shape[1],):
        raise DimensionError(f"replace_rows: {x.shape} rows vs vector {row.shape}")
    out_data = x.data.copy()
    out_data[idx] = row.data

    def _bwd(g):
        gx = g.copy()
        gx[idx] = 0.0
        grow = g[idx].sum(axis=0) if idx.size else np.zeros_like(row.data)
        return (gx, grow)

    return Tensor(out_data, (x, row), "replace_rows", _bwd)


def stop_gradient(x: Tensor) -> Tensor:
    """Value passthrough (bit-identical) that blocks all gradient flow."""
    out = Tensor.__new__(Tensor)
    out.data = x.data  # shared array; tensors are immutable values
    out._parents = ()
    out._backward = None
    out._op = "stop_gradient"
    return out


def straight_through(z: Tensor, z_q: Tensor) -> Tensor:
    """Forward the quantized value, route the gradient to `z` unchanged."""
    if z.shape != z_q.shape:
        raise DimensionError(f"straight_through: shapes differ, {z.shape} vs {z_q.shape}")
    return Tensor(z_q.data, (z,), "straight_through", lambda g: (g,))


def backward(loss: Tensor, params: Iterable[Tensor]) -> dict[Tensor, Array]:
    """Differentiate a scalar `loss`; returns one gradient per parameter.

    Parameters that do not influence the loss get a zero gradient of
    their own shape.  The same trace can be passed again and produces
    identical results.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params)

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    return {p: grads.get(id(p), np.zeros_like(p.data)).reshape(p.shape) for p in params}
