"""Dense tensors with reverse-mode automatic differentiation.

Storage is a contiguous numpy array (float32 or float64). Every differentiable
operation returns a new :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to parent gradients. :meth:`Tensor.backward` replays
those closures in reverse topological order.

Broadcasting follows the trailing-dimension rule: shapes are aligned from the
right, and each aligned pair must be equal or contain a 1. Missing leading
dimensions count as 1. Any other combination raises :class:`ShapeError`.
"""
import contextlib
import os

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

_GRAD_ENABLED = True
_CHECK_FINITE = os.environ.get("ROMMAMBA_CHECK_FINITE", "0") == "1"


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        # np.ascontiguousarray would promote 0-d data to shape (1,)
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = np.require(arr, requirements="C")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # ------------------------------------------------------------------ operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    # ------------------------------------------------------------------ autodiff
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root):
    """Nodes reachable from ``root``, every node after all of its inputs (the tape)."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------- broadcasting


def broadcast_shape(sa, sb):
    out = []
    for i in range(1, max(len(sa), len(sb)) + 1):
        da = sa[-i] if i <= len(sa) else 1
        db = sb[-i] if i <= len(sb) else 1
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"cannot broadcast shapes {tuple(sa)} and {tuple(sb)}")
        out.append(max(da, db))
    return tuple(reversed(out))


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of trailing-dimension broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_prep(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    broadcast_shape(a.shape, b.shape)
    return a, b


# ---------------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _binary_prep(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _binary_prep(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _binary_prep(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b):
    a, b = _binary_prep(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _make(ad / bd, (a, b), backward, "div")


def neg(x):
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x):
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x):
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(x):
    """x * sigmoid(x)."""
    xd = x.data
    s = _sigmoid(xd)
    return _make(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),), "silu")


SOFTPLUS_THRESHOLD = 20.0


def softplus(x):
    """log(1 + e^x); returns x itself above 20 where the two agree to float precision."""
    xd = x.data
    big = xd > SOFTPLUS_THRESHOLD
    y = np.where(big, xd, np.log1p(np.exp(np.minimum(xd, SOFTPLUS_THRESHOLD))))
    return _make(y.astype(xd.dtype, copy=False), (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def square(x):
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


# ---------------------------------------------------------------------- reductions / shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(y), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return div(sum_(x, axis, keepdims), float(n))


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x, a1, a2):
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def _is_basic_index(key):
    key = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in key)


def getitem(x, key):
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(key)

    def backward(g):
        z = np.zeros(shape, dtype=dtype)
        if basic:
            z[key] = g
        else:
            np.add.at(z, key, g)
        return (z,)

    return _make(np.require(x.data[key], requirements="C"), (x,), backward, "getitem")


def concat(tensors, axis=-1):
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def split(x, sizes, axis=-1):
    """Split along ``axis`` into pieces of the given sizes."""
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    out, start = [], 0
    for size in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + size)
        out.append(getitem(x, tuple(idx)))
        start += size
    return out


# ---------------------------------------------------------------------- linear algebra


def matmul(a, b):
    """``a[..., m, k] @ b[..., k, n]`` with batch dimensions broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, m = ad.shape[-1], g.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


ROW_BLOCK = 16


def row_stable_matmul(a, b):
    """``a[m, k] @ b[k, n]`` whose row ``i`` does not depend on ``m`` or on the other rows.

    BLAS picks edge kernels by row count, so the same row can round differently in
    groups of different sizes. Padding to a multiple of ``ROW_BLOCK`` zero rows keeps
    grouped expert matmuls bitwise independent of how many tokens share the group.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"row_stable_matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    m = a.shape[0]
    pad = -m % ROW_BLOCK
    ad, bd = a.data, b.data
    padded = np.concatenate([ad, np.zeros((pad, ad.shape[1]), dtype=ad.dtype)]) if pad else ad
    out = (padded @ bd)[:m]

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _make(np.ascontiguousarray(out), (a, b), backward, "row_stable_matmul")


# ---------------------------------------------------------------------- normalization / softmax


def softmax(x, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), backward, "log_softmax")


def rmsnorm(x, weight, eps=1e-5):
    """x / sqrt(mean(x^2, -1) + eps) * weight, over the last axis."""
    xd, wd = x.data, weight.data
    if wd.shape != xd.shape[-1:]:
        raise ShapeError(f"rmsnorm weight {wd.shape} does not match last axis of {xd.shape}")
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xn = xd * r
    n = xd.shape[-1]

    def backward(g):
        gw = g * wd
        gx = r * gw - xn * (r / n) * np.sum(gw * xn, axis=-1, keepdims=True)
        gweight = np.sum((g * xn).reshape(-1, n), axis=0)
        return gx, gweight

    return _make((xn * wd).astype(xd.dtype, copy=False), (x, weight), backward, "rmsnorm")


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``logits[..., V]``."""
    targets = np.asarray(targets)
    ld = logits.data
    V = ld.shape[-1]
    flat = ld.reshape(-1, V)
    t = targets.reshape(-1)
    if flat.shape[0] != t.shape[0]:
        raise ShapeError(f"cross_entropy: logits {ld.shape} vs targets {targets.shape}")
    z = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    rows = np.arange(t.shape[0])
    nll = np.log(s[:, 0]) - z[rows, t]
    n = t.shape[0]
    loss = np.asarray(nll.mean(), dtype=ld.dtype)

    def backward(g):
        p = e / s
        p[rows, t] -= 1.0
        return ((p * (g / n)).reshape(ld.shape).astype(ld.dtype, copy=False),)

    return _make(loss, (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------- gather / scatter


def _accumulate_rows(out, idx, values):
    """``out[idx[j]] += values[j]``, a deterministic and much faster stand-in for ``np.add.at``."""
    if idx.size == 0:
        return out
    counts = np.bincount(idx, minlength=out.shape[0])
    if counts.max() <= 1:
        out[idx] += values
        return out
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    out[sidx[starts]] += np.add.reduceat(values[order], starts, axis=0)
    return out


def embedding(weight, ids):
    ids = np.asarray(ids)
    wd = weight.data

    def backward(g):
        z = np.zeros_like(wd)
        _accumulate_rows(z, ids.reshape(-1).astype(np.int64), g.reshape(-1, wd.shape[1]))
        return (z,)

    return _make(wd[ids], (weight,), backward, "embedding")


def gather_rows(x, idx):
    """``x[idx]`` along axis 0; duplicate indices accumulate in the backward pass."""
    idx = np.asarray(idx, dtype=np.int64)
    xd = x.data

    def backward(g):
        z = np.zeros_like(xd)
        _accumulate_rows(z, idx, g)
        return (z,)

    return _make(xd[idx], (x,), backward, "gather_rows")


def scatter_add_rows(values, idx, n_rows):
    """Zero ``[n_rows, ...]`` array with ``values[j]`` added at row ``idx[j]``."""
    idx = np.asarray(idx, dtype=np.int64)
    vd = values.data
    out = np.zeros((n_rows,) + vd.shape[1:], dtype=vd.dtype)
    _accumulate_rows(out, idx, vd)
    return _make(out, (values,), lambda g: (g[idx],), "scatter_add_rows")


def take_along_last(x, idx):
    """``out[..., j] = x[..., idx[..., j]]``; indices must be distinct per row."""
    idx = np.asarray(idx, dtype=np.int64)
    xd = x.data

    def backward(g):
        z = np.zeros_like(xd)
        np.put_along_axis(z, idx, g, axis=-1)
        return (z,)

    return _make(np.take_along_axis(xd, idx, axis=-1), (x,), backward, "take_along_last")


# ---------------------------------------------------------------------- convolution


def depthwise_conv1d_causal(h, w, bias):
    """Causal depthwise convolution over the sequence axis.

    ``h: [..., L, D]``, ``w: [k, D]``, ``bias: [D]``;
    ``out[t, d] = sum_j w[j, d] * h[t - k + 1 + j, d] + bias[d]`` with zero left padding.
    """
    hd, wd, bd = h.data, w.data, bias.data
    if wd.ndim != 2 or wd.shape[1] != hd.shape[-1] or bd.shape != (hd.shape[-1],):
        raise ShapeError(f"conv shapes: input {hd.shape}, kernel {wd.shape}, bias {bd.shape}")
    k = wd.shape[0]
    L = hd.shape[-2]
    pad = [(0, 0)] * hd.ndim
    pad[-2] = (k - 1, 0)
    hp = np.pad(hd, pad)
    out = np.broadcast_to(bd, hd.shape).copy()
    for j in range(k):
        out += wd[j] * hp[..., j:j + L, :]

    def backward(g):
        ghp = np.zeros_like(hp)
        gw = np.empty_like(wd)
        g2 = g.reshape(-1, g.shape[-1])
        for j in range(k):
            ghp[..., j:j + L, :] += wd[j] * g
            gw[j] = np.sum(g2 * hp[..., j:j + L, :].reshape(g2.shape), axis=0)
        return ghp[..., k - 1:, :], gw, g2.sum(axis=0)

    return _make(out, (h, w, bias), backward, "depthwise_conv1d_causal")


# ---------------------------------------------------------------------- custom ops


def custom_op(data, parents, backward, op="custom"):
    """Wrap a forward result computed outside this module into the graph.

    ``backward`` maps the output gradient to a tuple with one entry per parent.
    """
    return _make(data, tuple(parents), backward, op)
