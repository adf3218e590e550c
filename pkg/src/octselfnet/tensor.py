"""Float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op records its parents and a closure mapping the output
gradient to parent gradients. ``backward`` walks the recorded graph in a
fixed topological order (depth-first over parents in argument order), so
gradient accumulation is deterministic.
"""

from contextlib import contextmanager
import math

import numpy as np

from . import _kernels
from .errors import ConfigError, ShapeError, UsageError

_GRAD_ENABLED = True
_FLOP_COUNTER = None
_SWITCH_LOG = None


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class FlopCounter:
    """Collects multiply-accumulate counts from matmul and conv2d calls."""

    def __init__(self):
        self.macs = 0

    def add(self, macs):
        self.macs += int(macs)


@contextmanager
def record_switches():
    """Log the branch decisions of relu, max-pool and clamp ops.

    Two forward passes with equal logs stayed on the same smooth piece of a
    piecewise-defined function.
    """
    global _SWITCH_LOG
    prev = _SWITCH_LOG
    log = []
    _SWITCH_LOG = log
    try:
        yield log
    finally:
        _SWITCH_LOG = prev


def _log_switch(decisions):
    if _SWITCH_LOG is not None:
        _SWITCH_LOG.append(np.packbits(decisions).tobytes() if decisions.dtype == bool else decisions.tobytes())


@contextmanager
def count_macs():
    global _FLOP_COUNTER
    prev = _FLOP_COUNTER
    counter = FlopCounter()
    _FLOP_COUNTER = counter
    try:
        yield counter
    finally:
        _FLOP_COUNTER = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    # numpy should defer to Tensor's reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # arithmetic -----------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

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

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    """Wrap an op result, recording the graph edge when gradients are needed."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw)


def power(a, p):
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    _log_switch(pos)
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw)


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ConfigError(f"unknown activation kind {kind!r}")


def clamp_max(a, limit):
    a = as_tensor(a)
    keep = a.data <= limit
    _log_switch(keep)
    return _make(np.minimum(a.data, limit), (a,), lambda g: (g * keep,))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    out = np.where(cond, a.data, b.data)
    return _make(out, (a, b), lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                                         _unbroadcast(np.where(cond, 0.0, g), sb)))


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape
    if isinstance(idx, Tensor):
        raise UsageError("index with numpy arrays, not tensors")

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw)


def gather(a, idx, axis):
    """``np.take_along_axis`` with gradient; ``idx`` is a plain integer array."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        ax = axis % len(shape)
        grids = list(np.meshgrid(*[np.arange(n) for n in g.shape], indexing="ij"))
        grids[ax] = np.broadcast_to(idx, g.shape)
        np.add.at(out, tuple(grids), g)
        return (out,)

    return _make(np.take_along_axis(a.data, idx, axis=axis), (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def roll(a, shifts, axes):
    a = as_tensor(a)
    neg = tuple(-s for s in shifts)
    return _make(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, neg, axes),))


def pad(a, pad_width):
    """Zero padding; ``pad_width`` follows ``np.pad``."""
    a = as_tensor(a)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return _make(np.pad(a.data, pad_width), (a,), lambda g: (g[sl],))


def broadcast_to(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} x {b.shape}") from exc
    if _FLOP_COUNTER is not None:
        _FLOP_COUNTER.add(np.prod(out.shape) * a.shape[-1])
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return _make(out, (a, b), bw)


def linear(x, weight, bias=None):
    """x @ weight.T + bias with weight laid out (out_features, in_features)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear input dim {x.shape[-1]} does not match weight {weight.shape}")
    if x.ndim == 1:
        y = matmul(x.reshape(1, -1), transpose(weight, (1, 0))).reshape(-1)
    else:
        y = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        y = y + bias
    return y


# ---------------------------------------------------------------------------
# normalisation and probability


def softmax(x, axis=-1):
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps=1e-5):
    x = as_tensor(x)
    d = x.shape[-1]
    if gamma.shape[-1] != d or beta.shape[-1] != d:
        raise ShapeError(f"layer_norm affine size {gamma.shape} does not match last dim of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = var + eps
    # constant rows with eps == 0 normalise to zeros instead of nan
    safe = np.where(denom > 0, denom, 1.0)
    rstd = np.where(denom > 0, 1.0 / np.sqrt(safe), 0.0)
    xhat = xc * rstd
    gd = gamma.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = rstd / d * (d * dxhat - dxhat.sum(-1, keepdims=True)
                             - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch norm over (N, H, W) of an NCHW tensor; running stats update in place."""
    x = as_tensor(x)
    shp = (1, -1, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu.reshape(shp)
        var = (xc * xc).mean(axis=(0, 2, 3))
        m = x.size // x.shape[1]
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
        xc = x.data - mu.reshape(shp)
        m = None
    rstd = (1.0 / np.sqrt(var + eps)).reshape(shp)
    xhat = xc * rstd
    gd = gamma.data.reshape(shp)

    def bw(g):
        dxhat = g * gd
        if training:
            gx = rstd / m * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                             - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = dxhat * rstd
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(xhat * gd + beta.data.reshape(shp), (x, gamma, beta), bw)


def l2_normalize(x, axis=-1, eps=1e-12):
    """x / max(||x||, eps); zero vectors map to zero vectors."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    big = n > eps
    d = np.where(big, n, eps)
    out = x.data / d

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(big, (g - out * proj) / d, g / eps),)

    return _make(out, (x,), bw)


def cross_entropy(logits, targets, class_weights=None):
    """Mean (optionally class-weighted) negative log-likelihood of int targets."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(len(targets)), targets))
    if class_weights is None:
        return -mean(picked)
    w = np.asarray(class_weights, dtype=np.float64)[targets]
    return -sum_(picked * w) / w.sum()


def mse(pred, target):
    d = as_tensor(pred) - as_tensor(target)
    return mean(d * d)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of NCHW input with an (O, C, K, K) kernel via im2col."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OCKK kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {weight.shape}")
    if k != k2:
        raise ShapeError("only square kernels are supported")
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {k}, stride {stride}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1:stride, : stride * (wo - 1) + 1:stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if _FLOP_COUNTER is not None:
        _FLOP_COUNTER.add(out.size * c * k * k)
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, weight)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
        parents = (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = _kernels.col2im(dcols, np.zeros((n, c, hp, wp)), stride)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(np.ascontiguousarray(out), parents, bw)


def max_pool2d(x, kernel=3, stride=2, padding=1):
    x = as_tensor(x)
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    out, arg = _kernels.maxpool_fwd(xp, kernel, stride, ho, wo)
    _log_switch(arg)

    def bw(g):
        gxp = _kernels.maxpool_bwd(g, arg, np.zeros((n, c, hp, wp)))
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root):
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate gradients live only for the duration of the call; the
    recorded graph is released afterwards.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        node._parents = ()
        node._backward = None
