"""A small reverse-mode autodiff engine over dense float64 numpy arrays.

Every primitive computes its forward value eagerly and, when any input
requires a gradient, records a closure that maps the output gradient to
input gradients. ``backward`` replays those closures in reverse
topological order.

Broadcasting is deliberately narrow: a scalar against any tensor, and a
row vector added to every row of a matrix. Everything else must match
shapes exactly; per-row scaling and gathers are explicit primitives.
"""
from __future__ import annotations

import json
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

COSINE_EPS = 1e-12


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _shape_error(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# ----------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.data.ndim == 0:
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum()), "add")
    if a.data.ndim == 0:
        return add(b, a)
    if a.data.ndim == 2 and b.data.ndim in (1, 2) and b.data.size == a.shape[1] and (b.data.ndim == 1 or b.shape[0] == 1):
        # row vector broadcast over matrix rows
        def backward(g):
            return g, g.sum(axis=0).reshape(b.shape)

        return _result(a.data + b.data.reshape(1, -1), (a, b), backward, "add_row")
    raise _shape_error("add", a.shape, b.shape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")
    if b.data.ndim == 0:
        return _result(a.data - b.data, (a, b), lambda g: (g, -g.sum()), "sub")
    if a.data.ndim == 0:
        return _result(a.data - b.data, (a, b), lambda g: (g.sum(), -g), "sub")
    raise _shape_error("sub", a.shape, b.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    if b.data.ndim == 0:
        return _result(a.data * b.data, (a, b), lambda g: (g * b.data, (g * a.data).sum()), "mul")
    if a.data.ndim == 0:
        return mul(b, a)
    raise _shape_error("mul", a.shape, b.shape)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def sum_rows(a: Tensor) -> Tensor:
    """Sum a matrix over its rows, giving a (1, n) row."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"sum_rows expects a matrix, got shape {a.shape}")
    shape = a.shape
    return _result(a.data.sum(axis=0, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum_rows")


def sum_cols(a: Tensor) -> Tensor:
    """Sum each row of a matrix, giving an (m, 1) column."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"sum_cols expects a matrix, got shape {a.shape}")
    shape = a.shape
    return _result(a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum_cols")


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _result(a.data.sum(), (a,), lambda g: (np.full(shape, float(g)),), "sum_all")


def mean_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return scalar_mul(sum_all(a), 1.0 / a.data.size)


def concat_last_dim(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise _shape_error("concat_last_dim", parts[0].shape, p.shape)
    sizes = np.cumsum([p.shape[-1] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=-1))

    return _result(np.concatenate([p.data for p in parts], axis=-1), parts, backward, "concat")


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _result(a.data[start:stop], (a,), backward, "slice_rows")


def _scatter_matrix(index: np.ndarray, n_out: int) -> sparse.csr_matrix:
    """Sparse (n_out, len(index)) matrix that sums column ``t`` into row ``index[t]``."""
    m = len(index)
    return sparse.csr_matrix((np.ones(m), (index, np.arange(m))), shape=(n_out, m))


def gather_rows(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def backward(g):
        return (_scatter_matrix(index, n) @ g,)

    return _result(a.data[index], (a,), backward, "gather_rows")


def segment_sum(a: Tensor, segment, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets given by ``segment``."""
    a = as_tensor(a)
    segment = np.asarray(segment, dtype=np.int64)
    if a.data.ndim != 2 or segment.shape != (a.shape[0],):
        raise _shape_error("segment_sum", a.shape, segment.shape)
    out = _scatter_matrix(segment, n_segments) @ a.data
    return _result(out, (a,), lambda g: (g[segment],), "segment_sum")


def scale_rows(a: Tensor, w: Tensor) -> Tensor:
    """Multiply row ``k`` of matrix ``a`` by ``w[k, 0]``."""
    a, w = as_tensor(a), as_tensor(w)
    if a.data.ndim != 2 or w.shape != (a.shape[0], 1):
        raise _shape_error("scale_rows", a.shape, w.shape)

    def backward(g):
        return g * w.data, (g * a.data).sum(axis=1, keepdims=True)

    return _result(a.data * w.data, (a, w), backward, "scale_rows")


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of all entries (scalar). Gradient is zero at the origin."""
    a = as_tensor(a)
    n = float(np.sqrt((a.data**2).sum()))

    def backward(g):
        if n == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / n,)

    return _result(n, (a,), backward, "l2_norm")


def dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("dot", a.shape, b.shape)
    return _result((a.data * b.data).sum(), (a, b), lambda g: (g * b.data, g * a.data), "dot")


def row_cosine(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity of matching rows, as an (m, 1) column.

    Rows where either norm is below ``eps`` give 0 with zero gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or a.shape != b.shape:
        raise _shape_error("row_cosine", a.shape, b.shape)
    saa = (a.data**2).sum(axis=1, keepdims=True)
    sbb = (b.data**2).sum(axis=1, keepdims=True)
    ok = (saa >= eps**2) & (sbb >= eps**2)
    saa = np.where(ok, saa, 1.0)
    sbb = np.where(ok, sbb, 1.0)
    # sqrt(fl(s * s)) == s, so identical rows give exactly 1
    denom = np.sqrt(saa * sbb)
    ab = (a.data * b.data).sum(axis=1, keepdims=True)
    cos = np.where(ok, ab / denom, 0.0)

    def backward(g):
        g = np.where(ok, g, 0.0)
        ga = g * (b.data / denom - cos * a.data / saa)
        gb = g * (a.data / denom - cos * b.data / sbb)
        return ga, gb

    return _result(cos, (a, b), backward, "row_cosine")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise _shape_error("cosine_similarity", a.shape, b.shape)
    c = row_cosine(reshape(a, (1, -1)), reshape(b, (1, -1)), eps)
    return reshape(c, ())


def bilinear(x: Tensor, w: Tensor, y: Tensor) -> Tensor:
    """``out[b, m] = x[b] @ w[m] @ y[b]`` for a stack of ``K`` matrices ``w``."""
    x, w, y = as_tensor(x), as_tensor(w), as_tensor(y)
    if x.data.ndim != 2 or y.data.ndim != 2 or w.data.ndim != 3 or x.shape[0] != y.shape[0] \
            or w.shape[1] != x.shape[1] or w.shape[2] != y.shape[1]:
        raise ShapeError(f"bilinear: incompatible shapes {x.shape}, {w.shape}, {y.shape}")
    K, c1, c2 = w.shape
    B = x.shape[0]
    xw = (x.data @ w.data.transpose(1, 0, 2).reshape(c1, K * c2)).reshape(B, K, c2)
    out = (xw * y.data[:, None, :]).sum(axis=2)

    def backward(g):
        wy = (y.data @ w.data.transpose(2, 0, 1).reshape(c2, K * c1)).reshape(B, K, c1)
        gx = (g[:, :, None] * wy).sum(axis=1)
        gx_outer = (g[:, :, None] * x.data[:, None, :]).reshape(B, K * c1)
        gw = (gx_outer.T @ y.data).reshape(K, c1, c2)
        gy = (g[:, :, None] * xw).sum(axis=1)
        return gx, gw, gy

    return _result(out, (x, w, y), backward, "bilinear")


# ----------------------------------------------------------------------------
# backward pass


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ----------------------------------------------------------------------------
# parameter serialization


def params_to_json(params: dict[str, Tensor]) -> dict:
    return {
        name: {"shape": list(t.shape), "values": t.data.ravel().tolist()}
        for name, t in params.items()
    }


def params_from_json(obj: dict) -> dict[str, Tensor]:
    out = {}
    for name, rec in obj.items():
        values = np.asarray(rec["values"], dtype=np.float64)
        out[name] = Tensor(values.reshape(rec["shape"]), requires_grad=True)
    return out


def dump_params(params: dict[str, Tensor]) -> str:
    return json.dumps(params_to_json(params))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
