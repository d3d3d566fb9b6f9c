"""A small reverse-mode differentiation engine over dense numpy arrays.

Only the operations needed by the segmentation networks and their losses are
provided. Every op records a closure mapping the output gradient to the
gradients of its parents; :meth:`Tensor.backward` walks the graph once in
reverse topological order.
"""

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from . import _kernels

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self.name = name

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

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _lift(b, a.dtype)
    if isinstance(b, Tensor):
        return _lift(a, b.dtype), b
    return _lift(a), _lift(b)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def hadamard(a, b):
    """Elementwise product; one operand may have a single channel (axis 1) broadcast over the other's."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        ok = a.ndim == b.ndim and all(
            x == y or (i == 1 and 1 in (x, y)) for i, (x, y) in enumerate(zip(a.shape, b.shape))
        )
        if not ok:
            raise ValueError(f"hadamard: shapes {a.shape} and {b.shape} differ outside the channel axis")
    return mul(a, b)


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def square(x):
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2 * g * xd,))


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x):
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    # keep outputs strictly inside (0, 1) at the working precision
    fi = np.finfo(x.dtype)
    out = np.clip(out, fi.tiny, 1 - fi.epsneg)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def tsum(x, axis=None):
    shape = x.shape
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def reshape(x, shape):
    orig = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def getitem(x, index):
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def concat_channels(tensors: Sequence[Tensor], axis=1):
    tensors = [_lift(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ValueError(f"concat_channels: shape {t.shape} incompatible with {ref} outside axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def fully_connected(x, weight, bias=None):
    """``x`` (N,F) times ``weight`` (G,F) transposed, plus ``bias`` (G,)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"fully_connected: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ValueError(f"fully_connected: bias shape {bias.shape}, expected ({wd.shape[0]},)")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, backward)


def dropout(x, rate, training, rng=None):
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# convolution, normalization, resampling

_AXES = ("D", "H", "W")


def _triple(v):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 extents, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int, int] = (3, 3, 3)
    stride: Tuple[int, int, int] = (1, 1, 1)
    padding: Tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        for f in ("kernel", "stride", "padding"):
            object.__setattr__(self, f, _triple(getattr(self, f)))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel

    def output_dims(self, dims):
        out = []
        for axis, n, k, s, p in zip(_AXES, dims, self.kernel, self.stride, self.padding):
            if n + 2 * p < k:
                raise ValueError(f"conv3d: axis {axis} extent {n} with padding {p} is smaller than kernel {k}")
            out.append((n + 2 * p - k) // s + 1)
        return tuple(out)


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """3D cross-correlation of ``x`` (N,C,D,H,W) with ``weight`` (O,C,kd,kh,kw)."""
    if x.ndim != 5:
        raise ValueError(f"conv3d: input must be 5-D (N,C,D,H,W), got shape {x.shape}")
    if weight.ndim != 5:
        raise ValueError(f"conv3d: weight must be 5-D (O,C,kd,kh,kw), got shape {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv3d: channel axis (1) has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    spec = ConvSpec(weight.shape[1], weight.shape[0], weight.shape[2:], stride, padding)
    spec.output_dims(x.shape[2:])
    pd, ph, pw = spec.padding
    xd = x.data
    if pd or ph or pw:
        xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    else:
        xp = np.ascontiguousarray(xd)
    wd = weight.data.astype(xd.dtype, copy=False)
    out = _kernels.conv3d_forward(xp, wd, spec.stride)
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (spec.out_channels,):
            raise ValueError(f"conv3d: bias shape {bias.shape}, expected ({spec.out_channels},)")
        out += bias.data.reshape(1, -1, 1, 1, 1)
        parents.append(bias)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = None
        if x.requires_grad:
            gxp = _kernels.conv3d_grad_input(g, wd, xp.shape, spec.stride)
            gx = gxp[:, :, pd:pd + xd.shape[2], ph:ph + xd.shape[3], pw:pw + xd.shape[4]]
        gw = _kernels.conv3d_grad_weight(xp, g, spec.kernel, spec.stride) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return _make(out, parents, backward)


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Normalize each (sample, channel group) to zero mean / unit variance, then scale and shift."""
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    xd = x.data
    xr = xd.reshape(n, groups, -1)
    m = xr.shape[2]
    mean = xr.mean(axis=2, keepdims=True)
    var = xr.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xr - mean) * inv_std).reshape(xd.shape)
    bshape = (1, c) + (1,) * (x.ndim - 2)
    gd, bd = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    out = (xhat * gd + bd).astype(xd.dtype, copy=False)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gxhat = (g * gd).reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        gx = inv_std / m * (m * gxhat - gxhat.sum(axis=2, keepdims=True) - xh * (gxhat * xh).sum(axis=2, keepdims=True))
        return gx.reshape(xd.shape), (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gamma, beta), backward)


def default_groups(channels):
    """min(8, C) groups, falling back to a single group when C is not divisible."""
    g = min(8, channels)
    return g if channels % g == 0 else 1


_UPSAMPLE_CACHE = {}


def _upsample_matrix(n, dtype):
    key = (n, np.dtype(dtype).str)
    mat = _UPSAMPLE_CACHE.get(key)
    if mat is None:
        m = 2 * n
        mat = np.zeros((m, n), dtype=np.float64)
        for i in range(m):
            src = i * (n - 1) / (m - 1) if n > 1 else 0.0
            i0 = min(int(np.floor(src)), n - 1)
            frac = src - i0
            mat[i, i0] += 1 - frac
            if frac > 0:
                mat[i, i0 + 1] += frac
        mat = mat.astype(dtype)
        _UPSAMPLE_CACHE[key] = mat
    return mat


def _apply_axes(a, mats):
    for axis, mat in zip((2, 3, 4), mats):
        a = np.moveaxis(np.tensordot(a, mat, axes=([axis], [1])), -1, axis)
    return a


def trilinear_upsample(x, factor=2):
    """Corner-aligned trilinear interpolation doubling D, H and W."""
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    if x.ndim != 5:
        raise ValueError(f"trilinear_upsample: expected (N,C,D,H,W), got {x.shape}")
    mats = [_upsample_matrix(n, x.dtype) for n in x.shape[2:]]
    out = np.ascontiguousarray(_apply_axes(x.data, mats))
    return _make(out, (x,), lambda g: (_apply_axes(g, [m.T for m in mats]),))


# ---------------------------------------------------------------------------
# finite-difference verification


def numeric_grad(fn, tensor, eps=1e-4):
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``tensor.data`` (perturbed in place)."""
    data = tensor.data
    grad = np.zeros(data.shape, dtype=np.float64)
    flat = data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().data)
        flat[i] = orig - eps
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-5):
    """||a - n|| / max(||a||, ||n||, floor).

    The floor makes structurally zero gradients (e.g. a conv bias feeding a
    per-channel GroupNorm) compare by absolute difference instead of as a
    ratio of round-off terms.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(fn, inputs, eps=1e-4):
    """Compare backprop against central differences for every tensor in ``inputs``.

    ``fn`` must rebuild the graph from scratch on each call and return a scalar
    Tensor. Returns the relative error per input, in order.
    """
    for t in inputs:
        t.zero_grad()
    fn().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    with no_grad():
        return [relative_error(a, numeric_grad(fn, t, eps)) for a, t in zip(analytic, inputs)]
