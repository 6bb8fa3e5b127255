"""Float64 tensors with a recorded reverse-mode tape.

Only coarse operations are recorded (convolution, linear maps, resizing,
pooling, normalisation, attention, activations, reductions); each one carries
its own vector-Jacobian product.  This is all the networks in this package
need and keeps the tape short.
"""
from contextlib import contextmanager

import numpy as np

from . import kernels

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Run a block without recording the tape (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-d float64 array with an optional gradient buffer.

    ``requires_grad`` marks leaves (parameters or inputs) whose gradient is
    wanted.  Non-leaf tensors keep a reference to their parents and a closure
    that pushes the output gradient back to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs(*ts):
    return _GRAD_ENABLED and any(t.requires_grad for t in ts)


def _make(data, parents, vjp):
    if _needs(*parents):
        return Tensor(data, True, parents, vjp)
    return Tensor(data)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
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
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, s):
    return _make(a.data * s, (a,), lambda g: (g * s,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, sa), _unbroadcast(g * a.data, sb)))


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(x):
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def sigmoid(x):
    # split on sign so neither branch overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), vjp)


def log(x):
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x, lo, hi):
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=1):
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for k in range(len(tensors)):
            idx[axis] = slice(bounds[k], bounds[k + 1])
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _make(a.data @ b.data, (a, b), vjp)


def linear(x, weight, bias=None):
    """``y = x W^T + b`` over the last axis of ``x``; weight is (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight in {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xs = x.shape
    x2 = x.data.reshape(-1, xs[-1])
    y = x2 @ weight.data.T
    if bias is not None:
        y = y + bias.data
    y = y.reshape(xs[:-1] + (weight.shape[0],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(xs)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(y, parents, vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(size, k, stride, padding, dilation):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """2-d cross-correlation with zero padding, NCHW layout.

    ``weight`` is (out_ch, in_ch // groups, kh, kw).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups:
        raise ValueError(f"conv2d: groups={groups} must divide in_ch={c} and out_ch={o}")
    if cg != c // groups:
        raise ValueError(f"conv2d: weight in_ch/groups {cg} != {c // groups}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1, padding >= 0")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: kernel larger than padded input")

    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3))
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = kernels.im2col(np.ascontiguousarray(xp), kh, kw, stride, dilation, ho, wo)
    g, og, kk = groups, o // groups, cg * kh * kw
    cols_g = cols.reshape(g, kk, n * ho * wo)
    w_g = weight.data.reshape(g, og, kk)
    out = (w_g @ cols_g).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(gout):
        go = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(g, og, n * ho * wo)
        gw = (go @ cols_g.transpose(0, 2, 1)).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = w_g.transpose(0, 2, 1) @ go
            if pointwise:
                gx = gcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
            else:
                gcols = np.ascontiguousarray(gcols.reshape(c, kh * kw, n, ho, wo))
                gxp = kernels.col2im(gcols, n, c, h + 2 * padding, w + 2 * padding, kh, kw, stride, dilation)
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gout.sum(axis=(0, 2, 3))

    return _make(out, parents, vjp)


def pad_replicate(x, p):
    """Pad the last two axes by ``p`` pixels copying the border values."""
    if p == 0:
        return x
    h, w = x.shape[-2:]
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    out = np.pad(x.data, width, mode="edge")

    def vjp(g):
        g = g.copy()
        g[..., p, :] += g[..., :p, :].sum(axis=-2)
        g[..., p + h - 1, :] += g[..., p + h:, :].sum(axis=-2)
        g[..., :, p] += g[..., :, :p].sum(axis=-1)
        g[..., :, p + w - 1] += g[..., :, p + w:].sum(axis=-1)
        return (g[..., p:p + h, p:p + w],)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# resizing and pooling
# ---------------------------------------------------------------------------


def _interp_matrix(n_in, n_out):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def bilinear_resize(x, out_h, out_w):
    """Bilinear resize of the last two axes, half-pixel-centre convention."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: target size must be >= 1, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ry = _interp_matrix(h, out_h)
    rx = _interp_matrix(w, out_w)
    out = ry @ (x.data @ rx.T)
    return _make(out, (x,), lambda g: ((ry.T @ g) @ rx,))


def max_pool2x2(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2x2 needs even spatial size, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch normalisation over (N, H, W); running buffers updated in place when training."""
    if training:
        m = x.data.mean(axis=(0, 2, 3))
        v = x.data.var(axis=(0, 2, 3))
        cnt = x.data.size // x.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * m
        running_var *= 1.0 - momentum
        running_var += momentum * v * (cnt / max(cnt - 1, 1))
    else:
        m, v = running_mean, running_var
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def vjp(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            cnt = x.data.size // x.shape[1]
            gx = (inv[None, :, None, None] / cnt) * (
                cnt * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _make(out, (x, gamma, beta), vjp)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis with learnable scale and shift."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gxhat = g * gamma.data
        gx = (inv / d) * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                          - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def attention(q, k, v):
    """``softmax(q k^T / sqrt(M)) v`` with the softmax taken row-wise.

    Shapes (..., T, M), (..., T, M), (..., T, Mv); leading axes broadcast as
    batch axes.
    """
    if q.shape[-1] != k.shape[-1] or q.shape[-1] < 1:
        raise ValueError(f"attention: query/key width mismatch {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention: key/value length mismatch {k.shape} vs {v.shape}")
    s = 1.0 / np.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * s
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    a = e / e.sum(axis=-1, keepdims=True)
    out = a @ v.data

    def vjp(g):
        gv = np.swapaxes(a, -1, -2) @ g
        ga = g @ np.swapaxes(v.data, -1, -2)
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * s
        gq = gs @ k.data
        gk = np.swapaxes(gs, -1, -2) @ q.data
        return gq, gk, gv

    return _make(out, (q, k, v), vjp)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(fn, params, eps=1e-3, n_samples=20, rng=None):
    """Largest relative error between analytic and central-difference gradients.

    ``fn()`` must rebuild the scalar loss from ``params`` (a list of leaf
    tensors with ``requires_grad``) and be deterministic; a non-deterministic
    ``fn`` makes the result meaningless and is not detected.  Up to
    ``n_samples`` coordinates per parameter are checked; the relative error
    of one coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError("eps must lie in [1e-6, 1e-2]")
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.grad = None
    backward(fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("grad_check needs contiguous parameter arrays")
        size = flat.size
        idx = np.arange(size) if size <= n_samples else rng.choice(size, n_samples, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
