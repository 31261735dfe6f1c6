"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the denoiser and trainer need are provided. Arrays are
row-major and channel-first; image tensors are ``(C, H, W)`` or batched
``(N, C, H, W)``. All arithmetic is float64.
"""

import contextlib

import numpy as np
from scipy import special

from .exceptions import ConfigError, ContractError, DimensionError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (sampling, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An ndarray plus an optional link into the backward graph.

    Leaves created with ``requires_grad=True`` collect gradients in
    ``.grad``; repeated ``backward()`` calls add to it until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        """Propagate d(self)/d(leaf) into every trainable leaf's ``.grad``."""
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def silu(x):
    """x * sigmoid(x)."""
    x = as_tensor(x)
    sig = special.expit(x.data)

    def backward(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _make(x.data * sig, (x,), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), backward)


def square(x):
    x = as_tensor(x)

    def backward(g):
        return (2.0 * g * x.data,)

    return _make(x.data * x.data, (x,), backward)


def _channel_view(v, x):
    """Reshape a per-channel vector so it broadcasts over the spatial axes of x."""
    v = as_tensor(v)
    if x.ndim == 4:
        n, c = x.shape[:2]
        if v.shape in ((n, c), (1, c)):
            return reshape(v, (v.shape[0], c, 1, 1))
        if v.shape == (c,):
            return reshape(v, (1, c, 1, 1))
    elif x.ndim == 3:
        c = x.shape[0]
        if v.shape == (c,):
            return reshape(v, (c, 1, 1))
    if v.ndim == 0:
        return v
    raise DimensionError(f"cannot broadcast {v.shape} channel-wise over {x.shape}")


def scale_shift(x, scale, shift):
    """x * (1 + scale) + shift with scale/shift given per channel.

    ``scale`` and ``shift`` are ``(C,)`` or ``(N, C)`` vectors, or scalars.
    """
    x = as_tensor(x)
    s = _channel_view(scale, x)
    b = _channel_view(shift, x)
    return add(mul(x, add(s, 1.0)), b)


# ---------------------------------------------------------------- reductions / shape


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward)


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _make(x.data.transpose(axes), (x,), backward)


def getitem(x, index):
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"cannot concatenate shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(out, tuple(tensors), backward)


def split(x, sizes, axis=0):
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    x = as_tensor(x)
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {sizes} do not add up to {x.shape[axis]}")
    bounds = np.cumsum([0] + list(sizes))
    outs = []
    for i in range(len(sizes)):
        index = [slice(None)] * x.ndim
        index[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
        index = tuple(index)

        def backward(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        outs.append(_make(x.data[index], (x,), backward))
    return outs


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product with numpy batching rules on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x, w, b=None):
    """x @ w + b over the last axis of x."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


# ---------------------------------------------------------------- image ops


def _as_batched(x):
    if x.ndim == 4:
        return x.data, True
    if x.ndim == 3:
        return x.data[None], False
    raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")


def _pad_channel_major(x, p):
    """(N, C, H, W) -> zero-padded (C, N, H + 2p, W + 2p)."""
    n, c, h, w = x.shape
    out = np.zeros((c, n, h + 2 * p, w + 2 * p))
    out[:, :, p:p + h, p:p + w] = x.transpose(1, 0, 2, 3)
    return out


def _im2col(xt, k, s, ho, wo):
    """Columns ``(k*k*C, N*Ho*Wo)`` from a channel-major padded array."""
    c, n = xt.shape[:2]
    cols = np.empty((k, k, c, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[i, j] = xt[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    return cols.reshape(k * k * c, n * ho * wo)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation.

    Args:
        x: ``(C_in, H, W)`` or ``(N, C_in, H, W)``.
        w: ``(C_out, C_in, k, k)`` with odd ``k``.
        b: ``(C_out,)`` or None.
        stride: step between output samples.
        padding: zero padding on each border; ``k // 2`` keeps H and W.

    Returns:
        Tensor of shape ``(C_out, H', W')`` (batched if x was),
        ``H' = (H + 2*padding - k) / stride + 1``.
    """
    x, w = as_tensor(x), as_tensor(w)
    xd, batched = _as_batched(x)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"kernel must be (C_out, C_in, k, k), got {w.shape}")
    n, c, h, wd = xd.shape
    co, ci, k, _ = w.shape
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    if ci != c:
        raise DimensionError(f"conv2d input has {c} channels, kernel expects {ci} ({x.shape} vs {w.shape})")
    p, s = int(padding), int(stride)
    if (h + 2 * p - k) % s or (wd + 2 * p - k) % s or h + 2 * p < k or wd + 2 * p < k:
        raise ConfigError(f"conv2d output size not integral for input {h}x{wd}, k={k}, stride={s}, padding={p}")
    ho, wo = (h + 2 * p - k) // s + 1, (wd + 2 * p - k) // s + 1

    if k == 1 and p == 0 and s == 1:
        xt = None
        cols = xd.transpose(1, 0, 2, 3).reshape(c, n * h * wd)
    else:
        xt = _pad_channel_major(xd, p)
        cols = _im2col(xt, k, s, ho, wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(co, k * k * c)
    out = (wmat @ cols).reshape(co, n, ho, wo)
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if not batched:
        out = out[0]

    def backward(g):
        g4 = g if batched else g[None]
        gmat = g4.transpose(1, 0, 2, 3).reshape(co, n * ho * wo)
        gw = (gmat @ cols.T).reshape(co, k, k, c).transpose(0, 3, 1, 2) if w.requires_grad else None
        gb = gmat.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            if k == 1 and p == 0 and s == 1:
                gx = np.ascontiguousarray((wmat.T @ gmat).reshape(c, n, h, wd).transpose(1, 0, 2, 3))
            elif s == 1:
                # correlate the padded output gradient with the flipped kernel
                q = k - 1 - p
                gt = _pad_channel_major(g4, q) if q >= 0 else g4.transpose(1, 0, 2, 3)[:, :, -q:q, -q:q]
                gcols = _im2col(gt, k, 1, h, wd)
                wflip = w.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, k * k * co)
                gx = np.ascontiguousarray((wflip @ gcols).reshape(c, n, h, wd).transpose(1, 0, 2, 3))
            else:
                dcols = (wmat.T @ gmat).reshape(k, k, c, n, ho, wo)
                dxt = np.zeros_like(xt)
                for i in range(k):
                    for j in range(k):
                        dxt[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[i, j]
                gx = np.ascontiguousarray(dxt[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3))
            if not batched:
                gx = gx[0]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, backward)


def group_norm(x, groups, eps=1e-8):
    """Normalize each group of channels to zero mean, unit variance (no affine)."""
    x = as_tensor(x)
    xd, batched = _as_batched(x)
    n, c, h, w = xd.shape
    if groups < 1 or c % groups:
        raise ConfigError(f"{c} channels not divisible into {groups} groups")
    xg = xd.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat.reshape(xd.shape)
    if not batched:
        out = out[0]

    def backward(g):
        gg = (g if batched else g[None]).reshape(n, groups, -1)
        gx = inv * (gg - gg.mean(axis=2, keepdims=True) - xhat * (gg * xhat).mean(axis=2, keepdims=True))
        gx = gx.reshape(xd.shape)
        return (gx if batched else gx[0],)

    return _make(out, (x,), backward)


def avg_pool2d(x, factor=2):
    x = as_tensor(x)
    xd, batched = _as_batched(x)
    n, c, h, w = xd.shape
    f = int(factor)
    if h % f or w % f:
        raise ConfigError(f"spatial size {h}x{w} not divisible by pooling factor {f}")
    out = xd.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
    if not batched:
        out = out[0]

    def backward(g):
        g4 = g if batched else g[None]
        gx = np.repeat(np.repeat(g4, f, axis=2), f, axis=3) / (f * f)
        return (gx if batched else gx[0],)

    return _make(out, (x,), backward)


def upsample_nearest(x, factor=2):
    x = as_tensor(x)
    xd, batched = _as_batched(x)
    n, c, h, w = xd.shape
    f = int(factor)
    out = np.repeat(np.repeat(xd, f, axis=2), f, axis=3)
    if not batched:
        out = out[0]

    def backward(g):
        g4 = g if batched else g[None]
        gx = g4.reshape(n, c, h, f, w, f).sum(axis=(3, 5))
        return (gx if batched else gx[0],)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------- losses


def mse(pred, target):
    """mean((pred - target)^2)."""
    return mean(square(sub(pred, target)))
