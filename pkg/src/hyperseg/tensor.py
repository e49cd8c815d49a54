"""Dense tensors with reverse-mode differentiation on top of numpy.

All network math in the package flows through this module. A Tensor wraps a
float32/float64 ndarray; every operation that touches a gradient-enabled
input records itself on an implicit tape (the operation graph hanging off its
output). ``backward`` linearizes that graph once, replays it in reverse to
fill gradients, and then releases it -- graphs live for exactly one forward
pass and are never reused.

Layout convention: row-major data, channel-first (C, H, W) for spatial maps.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "Param",
    "Tape",
    "ArgumentError",
    "DimensionError",
    "backward",
    "no_grad",
    "set_finite_checks",
    "matmul",
    "concat",
    "take",
    "reshape",
    "transpose",
    "softmax",
    "log_softmax",
    "relu",
    "gelu",
    "sigmoid",
    "layer_norm",
    "conv2d",
    "conv1d_same",
    "pool_adaptive",
    "interpolate_bilinear",
    "attention_rows",
    "dropout",
    "interp_matrix",
]

FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


class ArgumentError(ValueError):
    """An operation was called with out-of-contract arguments."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def set_finite_checks(enabled):
    """Toggle the NaN/Inf guard on op outputs (on by default)."""
    _state.finite_checks = bool(enabled)


def _finite_checks_on():
    return getattr(_state, "finite_checks", True)


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suppresses tape recording (used for inference)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


def _check_finite(arr, op_name):
    if _finite_checks_on() and not np.isfinite(arr).all():
        raise FloatingPointError(f"{op_name} produced non-finite values")


class Tensor:
    """A dense nd-array value, optionally participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_released")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = _as_float_array(data, dtype)
        if arr.dtype not in FLOAT_DTYPES:
            raise ArgumentError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._vjp = None
        self._released = False

    # -- basic introspection -------------------------------------------------

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

    def item(self):
        return float(self.data)

    def numpy(self):
        """The underlying array (treat as read-only)."""
        return self.data

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def backward(self):
        backward(self)


class Param(Tensor):
    """A named, gradient-enabled tensor holding learnable state."""

    __slots__ = ("name",)

    def __init__(self, name, data, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)
        self.name = str(name)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def _coerce(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _match_dtypes(a, b, op_name):
    if a.dtype != b.dtype:
        raise ArgumentError(f"{op_name}: mixed dtypes {a.dtype} and {b.dtype}")


def _from_op(data, parents, vjp, op_name):
    _check_finite(data, op_name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._released = False
    if _grad_enabled() and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- tape ---------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the operations reachable from a root."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root):
        order = []
        visited = set()
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
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Populate ``grad`` on every gradient-enabled tensor reachable from loss.

    The loss must be scalar. The tape is replayed once and then released:
    attempting a second backward through the same graph raises.
    """
    if not isinstance(loss, Tensor):
        raise ArgumentError("backward expects a Tensor")
    if loss.size != 1:
        raise ArgumentError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise RuntimeError("this graph was already consumed by a previous backward")
    tape = Tape.from_root(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad += g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg
            else:
                acc += pg
    for node in tape.nodes:
        node._parents = ()
        node._vjp = None
        node._released = True
    loss._released = True


# -- elementwise and reduction ops ---------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _match_dtypes(a, b, "add")
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(data, (a, b), vjp, "add")


def sub(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _match_dtypes(a, b, "sub")
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(data, (a, b), vjp, "sub")


def mul(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _match_dtypes(a, b, "mul")
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _from_op(data, (a, b), vjp, "mul")


def div(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _match_dtypes(a, b, "div")
    data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _from_op(data, (a, b), vjp, "div")


def sum_(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, shape).astype(x.dtype, copy=True),)

    return _from_op(np.asarray(data), (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape ops ------------------------------------------------------------------


def reshape(x, shape):
    old = x.shape
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _from_op(data, (x,), vjp, "reshape")


def transpose(x, axes=None):
    data = np.ascontiguousarray(x.data.transpose(axes))
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _from_op(data, (x,), vjp, "transpose")


def concat(tensors, axis=0):
    tensors = list(tensors)
    for t in tensors[1:]:
        _match_dtypes(tensors[0], t, "concat")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _from_op(data, tuple(tensors), vjp, "concat")


def slice_(x, key):
    data = x.data[key]
    if data.base is not None:
        data = data.copy()
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=x.dtype)
        gx[key] += g
        return (gx,)

    return _from_op(data, (x,), vjp, "slice")


def take(x, indices):
    """Gather rows along axis 0; indices may have any shape."""
    idx = np.asarray(indices)
    data = x.data[idx]
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=x.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _from_op(data, (x,), vjp, "take")


# -- linear algebra ---------------------------------------------------------------


def matmul(a, b):
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _match_dtypes(a, b, "matmul")
    if a.ndim < 1 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    data = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _from_op(data, (a, b), vjp, "matmul")


# -- activations ------------------------------------------------------------------


def relu(x):
    data = np.maximum(x.data, 0.0)

    def vjp(g):
        return (g * (x.data > 0),)

    return _from_op(data, (x,), vjp, "relu")


def sigmoid(x):
    data = special.expit(x.data)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _from_op(data, (x,), vjp, "sigmoid")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Gaussian error linear unit, exact erf form."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    data = (x.data * cdf).astype(x.dtype, copy=False)

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return _from_op(data, (x,), vjp, "gelu")


def softmax(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ArgumentError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _from_op(data, (x,), vjp, "softmax")


def log_softmax(x, axis):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _from_op(data, (x,), vjp, "log_softmax")


def layer_norm(x, gamma, beta, axis=-1, eps=1e-5):
    """Normalize over ``axis`` (mean 0, variance 1), then apply affine."""
    _match_dtypes(x, gamma, "layer_norm")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    n = x.shape[axis]

    def vjp(g):
        gxhat = g * gamma.data
        t1 = gxhat.mean(axis=axis, keepdims=True)
        t2 = (gxhat * xhat).mean(axis=axis, keepdims=True)
        gx = inv * (gxhat - t1 - xhat * t2)
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx.astype(x.dtype, copy=False), ggamma, gbeta

    del n
    return _from_op(data.astype(x.dtype, copy=False), (x, gamma, beta), vjp, "layer_norm")


# -- convolutions -------------------------------------------------------------------


def _same_pad(arr, kh, kw):
    ph, pw = kh // 2, kw // 2
    return np.pad(arr, ((0, 0), (ph, ph), (pw, pw))), ph, pw


def _windows(arr, kh, kw):
    # (C, H, W, kh, kw) sliding view over a pre-padded array
    return np.lib.stride_tricks.sliding_window_view(arr, (kh, kw), axis=(1, 2))


def conv2d(x, kernel, mode):
    """2-D correlation with stride 1 and zero-padded `same` output.

    Modes: ``depthwise`` kernel (C, kh, kw), ``pointwise`` kernel (C_out, C_in),
    ``dense`` kernel (C_out, C_in, kh, kw). Input is (C, H, W).
    """
    _match_dtypes(x, kernel, "conv2d")
    if x.ndim != 3:
        raise DimensionError(f"conv2d expects (C, H, W), got {x.shape}")
    c, h, w = x.shape

    if mode == "pointwise":
        if kernel.ndim != 2 or kernel.shape[1] != c:
            raise DimensionError(
                f"pointwise kernel {kernel.shape} incompatible with {c} input channels"
            )
        data = (kernel.data @ x.data.reshape(c, h * w)).reshape(-1, h, w)

        def vjp(g):
            gm = g.reshape(kernel.shape[0], h * w)
            gx = (kernel.data.T @ gm).reshape(c, h, w)
            gk = gm @ x.data.reshape(c, h * w).T
            return gx, gk

        return _from_op(data, (x, kernel), vjp, "conv2d")

    if mode == "depthwise":
        if kernel.ndim != 3 or kernel.shape[0] != c:
            raise DimensionError(
                f"depthwise kernel {kernel.shape} incompatible with {c} input channels"
            )
        kh, kw = kernel.shape[1:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ArgumentError("conv2d requires odd kernel extents for same padding")
        padded, _, _ = _same_pad(x.data, kh, kw)
        win = _windows(padded, kh, kw)
        data = np.einsum("chwkl,ckl->chw", win, kernel.data)

        def vjp(g):
            gk = np.einsum("chwkl,chw->ckl", win, g)
            gpad, _, _ = _same_pad(g, kh, kw)
            gwin = _windows(gpad, kh, kw)
            gx = np.einsum("chwkl,ckl->chw", gwin, kernel.data[:, ::-1, ::-1])
            return gx, gk

        return _from_op(data, (x, kernel), vjp, "conv2d")

    if mode == "dense":
        if kernel.ndim != 4 or kernel.shape[1] != c:
            raise DimensionError(
                f"dense kernel {kernel.shape} incompatible with {c} input channels"
            )
        kh, kw = kernel.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ArgumentError("conv2d requires odd kernel extents for same padding")
        padded, _, _ = _same_pad(x.data, kh, kw)
        win = _windows(padded, kh, kw)
        data = np.einsum("chwkl,ockl->ohw", win, kernel.data)

        def vjp(g):
            gk = np.einsum("chwkl,ohw->ockl", win, g)
            gpad, _, _ = _same_pad(g, kh, kw)
            gwin = _windows(gpad, kh, kw)
            gx = np.einsum("ohwkl,ockl->chw", gwin, kernel.data[:, :, ::-1, ::-1])
            return gx, gk

        return _from_op(data, (x, kernel), vjp, "conv2d")

    raise ArgumentError(f"unknown conv2d mode {mode!r}")


def conv1d_same(x, kernel, bias):
    """1-D correlation along axis -3 of (..., S, H, D) with kernel (3, D, D)."""
    _match_dtypes(x, kernel, "conv1d_same")
    if kernel.shape[0] != 3:
        raise ArgumentError("conv1d_same supports kernel width 3")
    w0, w1, w2 = kernel.data
    data = x.data @ w1
    data[..., 1:, :, :] += x.data[..., :-1, :, :] @ w0
    data[..., :-1, :, :] += x.data[..., 1:, :, :] @ w2
    data += bias.data

    def vjp(g):
        gx = g @ w1.T
        gx[..., :-1, :, :] += g[..., 1:, :, :] @ w0.T
        gx[..., 1:, :, :] += g[..., :-1, :, :] @ w2.T
        flat_axes = tuple(range(g.ndim - 1))
        gk = np.empty_like(kernel.data)
        gk[1] = np.tensordot(x.data, g, axes=(flat_axes, flat_axes))
        gk[0] = np.tensordot(
            x.data[..., :-1, :, :], g[..., 1:, :, :], axes=(flat_axes, flat_axes)
        )
        gk[2] = np.tensordot(
            x.data[..., 1:, :, :], g[..., :-1, :, :], axes=(flat_axes, flat_axes)
        )
        gb = g.sum(axis=flat_axes)
        return gx, gk, gb

    return _from_op(data, (x, kernel, bias), vjp, "conv1d_same")


# -- pooling and resampling ----------------------------------------------------------


def _adaptive_bins(size, out):
    starts = (np.arange(out) * size) // out
    ends = -((-(np.arange(out) + 1) * size) // out)  # ceil division
    return starts, ends


def _avg_pool_matrix(size, out, dtype):
    starts, ends = _adaptive_bins(size, out)
    m = np.zeros((out, size), dtype=dtype)
    for i, (s, e) in enumerate(zip(starts, ends)):
        m[i, s:e] = 1.0 / (e - s)
    return m


def pool_adaptive(x, out_h, out_w, kind="average"):
    """Adaptive pooling of (C, H, W) to (C, out_h, out_w)."""
    if x.ndim != 3:
        raise DimensionError(f"pool_adaptive expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ArgumentError("pool_adaptive output extents must be positive")
    if out_h > h or out_w > w:
        raise ArgumentError(
            f"pool_adaptive cannot upsample: {h}x{w} -> {out_h}x{out_w}"
        )

    if kind == "average":
        mh = _avg_pool_matrix(h, out_h, x.dtype)
        mw = _avg_pool_matrix(w, out_w, x.dtype)
        data = np.einsum("ij,cjk,lk->cil", mh, x.data, mw)

        def vjp(g):
            return (np.einsum("ij,cil,lk->cjk", mh, g, mw),)

        return _from_op(data, (x,), vjp, "pool_adaptive")

    if kind == "max":
        hs, he = _adaptive_bins(h, out_h)
        ws, we = _adaptive_bins(w, out_w)
        data = np.empty((c, out_h, out_w), dtype=x.dtype)
        arg = np.empty((c, out_h, out_w, 2), dtype=np.int64)
        for i in range(out_h):
            for j in range(out_w):
                block = x.data[:, hs[i] : he[i], ws[j] : we[j]]
                flat = block.reshape(c, -1)
                k = flat.argmax(axis=1)
                data[:, i, j] = flat[np.arange(c), k]
                bw = we[j] - ws[j]
                arg[:, i, j, 0] = hs[i] + k // bw
                arg[:, i, j, 1] = ws[j] + k % bw

        def vjp(g):
            gx = np.zeros((c, h, w), dtype=x.dtype)
            ci = np.repeat(np.arange(c), out_h * out_w)
            np.add.at(
                gx,
                (ci, arg[..., 0].ravel(), arg[..., 1].ravel()),
                g.ravel(),
            )
            return (gx,)

        return _from_op(data, (x,), vjp, "pool_adaptive")

    raise ArgumentError(f"unknown pooling kind {kind!r}")


def interp_matrix(in_len, out_len, dtype=np.float64):
    """Row matrix of 1-D bilinear weights (align-corners false)."""
    m = np.zeros((out_len, in_len), dtype=dtype)
    scale = in_len / out_len
    for i in range(out_len):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_len - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, in_len - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    return m


def interpolate_bilinear(x, out_h, out_w):
    """Bilinear resampling of (C, H, W) to (C, out_h, out_w)."""
    if x.ndim != 3:
        raise DimensionError(f"interpolate_bilinear expects (C, H, W), got {x.shape}")
    _, h, w = x.shape
    mh = interp_matrix(h, out_h, x.dtype)
    mw = interp_matrix(w, out_w, x.dtype)
    data = np.einsum("ij,cjk,lk->cil", mh, x.data, mw)

    def vjp(g):
        return (np.einsum("ij,cil,lk->cjk", mh, g, mw),)

    return _from_op(data, (x,), vjp, "interpolate_bilinear")


# -- attention -----------------------------------------------------------------------


def attention_rows(q, k, v, bias):
    """Scaled dot-product attention for one query row per batch element.

    Shapes: q (B, H, D), k and v (B, S, H, D), bias (B, S, 1) added to the
    scores (use large negative values to mask padded slots). Softmax runs
    over S; the result is (B, H, D).
    """
    _match_dtypes(q, k, "attention_rows")
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    scores = np.einsum("bhd,bshd->bsh", q.data, k.data) * scale + bias.data
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=1, keepdims=True)
    data = np.einsum("bsh,bshd->bhd", attn, v.data)

    def vjp(g):
        gv = np.einsum("bsh,bhd->bshd", attn, g)
        ga = np.einsum("bshd,bhd->bsh", v.data, g)
        gs = attn * (ga - (ga * attn).sum(axis=1, keepdims=True))
        gq = np.einsum("bsh,bshd->bhd", gs, k.data) * scale
        gk = np.einsum("bsh,bhd->bshd", gs, q.data) * scale
        gbias = _unbroadcast(gs, bias.shape)
        return gq, gk, gv, gbias

    return _from_op(data, (q, k, v, bias), vjp, "attention_rows")


# -- regularization --------------------------------------------------------------------


def dropout(x, rate, rng):
    """Inverted dropout; pass the training rng explicitly for determinism."""
    if not 0.0 <= rate < 1.0:
        raise ArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))
