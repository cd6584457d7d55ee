"""Minimal reverse-mode autodiff over numpy float64 arrays.

Every differentiable op records its name, parents and a context; the
gradient rule for op ``name`` is looked up in ``BACKWARD[name]`` when
``Tensor.backward`` runs, so rules can be inspected or replaced.

Spatial ops accept either a single ``C x H x W`` tensor or a batch
``N x C x H x W``; the output keeps the rank of the input.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
BACKWARD = {}


class ShapeError(ValueError):
    pass


def _rule(name):
    def register(fn):
        BACKWARD[name] = fn
        return fn
    return register


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_op", "_ctx")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._op = None
        self._ctx = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._op is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            pgrads = BACKWARD[node._op](node._ctx, g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _make(data, parents, op, ctx):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._op = op
        out._ctx = ctx
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _batched(x):
    """View a 3-D or 4-D array as 4-D; returns (array, was_single)."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected C x H x W or N x C x H x W, got rank {x.ndim}")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), "add", (a.shape, b.shape))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


@_rule("add")
def _add_bw(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), "mul", (a.data, b.data))


@_rule("mul")
def _mul_bw(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def scale(x, c):
    return _make(x.data * c, (x,), "scale", c)


@_rule("scale")
def _scale_bw(ctx, g):
    return (g * ctx,)


def relu(x):
    mask = x.data > 0
    return _make(x.data * mask, (x,), "relu", mask)


@_rule("relu")
def _relu_bw(ctx, g):
    return (g * ctx,)


def log(x):
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")
    return _make(np.log(x.data), (x,), "log", x.data)


@_rule("log")
def _log_bw(ctx, g):
    return (g / ctx,)


def sum(x, axis=None):
    return _make(np.sum(x.data, axis=axis), (x,), "sum", (x.shape, axis))


@_rule("sum")
def _sum_bw(ctx, g):
    shape, axis = ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def mean(x, axis=None):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis), 1.0 / n)


def reshape(x, shape):
    return _make(x.data.reshape(shape), (x,), "reshape", x.shape)


@_rule("reshape")
def _reshape_bw(ctx, g):
    return (g.reshape(ctx),)


def take(x, index):
    """Gather ``x[index]`` with numpy fancy indexing (index is a tuple)."""
    return _make(x.data[index], (x,), "take", (x.shape, index))


@_rule("take")
def _take_bw(ctx, g):
    shape, index = ctx
    out = np.zeros(shape)
    np.add.at(out, index, g)
    return (out,)


def concat(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, "concat", (sizes, axis))


@_rule("concat")
def _concat_bw(ctx, g):
    sizes, axis = ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


# ---------------------------------------------------------------- convolution

@dataclass
class LayerParams:
    kernels: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @classmethod
    def init(cls, rng, in_ch, out_ch, k=3, stride=1, padding=1, gain=2.0):
        """He-style init: zero-mean normal kernels with variance gain/fan_in."""
        fan_in = in_ch * k * k
        w = rng.normal((out_ch, in_ch, k, k), scale=np.sqrt(gain / fan_in))
        return cls(parameter(w), parameter(np.zeros(out_ch)), stride, padding)

    @property
    def tensors(self):
        return [self.kernels, self.bias]

    def copy(self):
        return LayerParams(parameter(self.kernels.data.copy()), parameter(self.bias.data.copy()),
                           self.stride, self.padding)


def conv2d(x, params):
    """Cross-correlation; out size (H + 2p - Kh) // stride + 1."""
    w, b = params.kernels, params.bias
    s, p = params.stride, params.padding
    x4, single = _batched(x.data)
    n, c, h, wd = x4.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels (dim 0 of C x H x W) but kernels expect InC={ci}")
    if b.shape != (o,):
        raise ShapeError(f"conv2d: bias has shape {b.shape}, expected ({o},)")
    hp, wp = h + 2 * p, wd + 2 * p
    if hp < kh:
        raise ShapeError(f"conv2d: padded height {hp} smaller than kernel height {kh}")
    if wp < kw:
        raise ShapeError(f"conv2d: padded width {wp} smaller than kernel width {kw}")
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    # channel-major im2col: rows (C, Kh, Kw), columns (N, Ho, Wo)
    xc = x4.transpose(1, 0, 2, 3)
    if p:
        xc = np.pad(xc, ((0, 0), (0, 0), (p, p), (p, p)))
    mat = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            mat[:, i, j] = xc[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    mat = mat.reshape(c * kh * kw, n * ho * wo)
    out = w.data.reshape(o, -1) @ mat + b.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out[0] if single else out)
    ctx = (mat, w.data, (n, c, h, wd), (ho, wo), s, p, single, x.requires_grad)
    return _make(out, (x, w, b), "conv2d", ctx)


@_rule("conv2d")
def _conv2d_bw(ctx, g):
    mat, w, (n, c, h, wd), (ho, wo), s, p, single, need_dx = ctx
    o, _, kh, kw = w.shape
    g4 = g[None] if single else g
    gm = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(o, -1)
    db = gm.sum(axis=1)
    dw = (gm @ mat.T).reshape(w.shape)
    dx = None
    if need_dx:
        dcols = (w.reshape(o, -1).T @ gm).reshape(c, kh, kw, n, ho, wo)
        dxp = np.zeros((c, n, h + 2 * p, wd + 2 * p))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, i, j]
        dx = dxp[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3)
        dx = np.ascontiguousarray(dx[0] if single else dx)
    return dx, dw, db


def conv_out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


# ---------------------------------------------------------------- pooling

_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def max_pool2d(x):
    """2x2 max-pool, stride 2.  Spatial dims must be even; ties go to the first
    window element in row-major order."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2d: spatial size {h}x{w} is not even")
    d = x.data
    q = [d[..., di::2, dj::2] for di, dj in _POOL_OFFSETS]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    win = np.where(q[0] == out, 0, np.where(q[1] == out, 1, np.where(q[2] == out, 2, 3))).astype(np.int8)
    return _make(out, (x,), "max_pool2d", (win, x.shape))


@_rule("max_pool2d")
def _max_pool2d_bw(ctx, g):
    win, shape = ctx
    dx = np.empty(shape)
    for k, (di, dj) in enumerate(_POOL_OFFSETS):
        dx[..., di::2, dj::2] = np.where(win == k, g, 0.0)
    return (dx,)


def global_avg_pool(x):
    """Mean over the two trailing spatial axes: C x H x W -> C, N x C x H x W -> N x C."""
    return mean(x, axis=(-2, -1))


def linear(x, params):
    """Fully connected layer expressed as a 1x1 convolution over a 1x1 grid.

    ``x`` is ``C`` or ``N x C``; kernels are ``OutC x C x 1 x 1``.
    """
    single = x.data.ndim == 1
    n = 1 if single else x.shape[0]
    x4 = reshape(x, (n, x.shape[-1], 1, 1))
    out = conv2d(x4, params)
    return reshape(out, (params.kernels.shape[0],) if single else (n, params.kernels.shape[0]))


# ---------------------------------------------------------------- softmax family

def log_softmax(x):
    """Log-softmax over the last axis."""
    if not np.all(np.isfinite(x.data)):
        raise ValueError("log_softmax: non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return _make(out, (x,), "log_softmax", out)


@_rule("log_softmax")
def _log_softmax_bw(ctx, g):
    p = np.exp(ctx)
    return (g - p * g.sum(axis=-1, keepdims=True),)


def softmax(x):
    """Softmax over the last axis."""
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax: non-finite input")
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)
    return _make(out, (x,), "softmax", out)


@_rule("softmax")
def _softmax_bw(ctx, g):
    p = ctx
    return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


def _spatial_flat(conf):
    if conf.data.ndim == 3 and conf.shape[0] == 1:
        h, w = conf.shape[1:]
        return reshape(conf, (h * w,)), (h, w)
    if conf.data.ndim == 4 and conf.shape[1] == 1:
        n, _, h, w = conf.shape
        return reshape(conf, (n, h * w)), (n, h, w)
    raise ShapeError(f"spatial softmax expects a 1 x H x W (or N x 1 x H x W) map, got {conf.shape}")


def spatial_softmax(conf):
    """Probability grid over all cells of a single-channel map: 1xHxW -> HxW."""
    flat, out_shape = _spatial_flat(conf)
    return reshape(softmax(flat), out_shape)


def log_spatial_softmax(conf):
    flat, out_shape = _spatial_flat(conf)
    return reshape(log_softmax(flat), out_shape)


def softmax_cross_entropy(logits, labels):
    """Mean of -log softmax(logits)[label].  Accepts K logits + int, or N x K + N labels."""
    labels = np.atleast_1d(np.asarray(labels))
    k = logits.shape[-1]
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range for {k} classes: {labels.tolist()}")
    lp = log_softmax(logits)
    if logits.data.ndim == 1:
        return scale(take(lp, (int(labels[0]),)), -1.0)
    picked = take(lp, (np.arange(logits.shape[0]), labels))
    return scale(mean(picked), -1.0)


# ---------------------------------------------------------------- crop / resize

def crop(x, top, left, h, w):
    """Spatial slice of the trailing two axes."""
    H, W = x.shape[-2:]
    if h <= 0 or w <= 0:
        raise ValueError(f"degenerate crop {h}x{w}")
    if top < 0 or left < 0 or top + h > H or left + w > W:
        raise ShapeError(f"crop ({top},{left},{h},{w}) outside {H}x{W}")
    out = x.data[..., top:top + h, left:left + w]
    return _make(out.copy(), (x,), "crop", (x.shape, top, left, h, w))


@_rule("crop")
def _crop_bw(ctx, g):
    shape, top, left, h, w = ctx
    out = np.zeros(shape)
    out[..., top:top + h, left:left + w] = g
    return (out,)


def bilinear_matrix(src, dst):
    """dst x src interpolation matrix, half-pixel centres, edge-clamped."""
    m = np.zeros((dst, src))
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m[np.arange(dst), lo] += 1.0 - frac
    m[np.arange(dst), hi] += frac
    return m


def nearest_matrix(src, dst):
    m = np.zeros((dst, src))
    idx = np.minimum(np.floor((np.arange(dst) + 0.5) * (src / dst)).astype(int), src - 1)
    m[np.arange(dst), idx] = 1.0
    return m


def _resize(x, size, method):
    H, W = x.shape[-2:]
    oh, ow = size
    build = bilinear_matrix if method == "bilinear" else nearest_matrix
    ry, rx = build(H, oh), build(W, ow)
    out = np.einsum("ih,...hw,jw->...ij", ry, x.data, rx, optimize=True)
    return _make(out, (x,), "resize", (ry, rx))


@_rule("resize")
def _resize_bw(ctx, g):
    ry, rx = ctx
    return (np.einsum("ih,...ij,jw->...hw", ry, g, rx, optimize=True),)


def resize_bilinear(x, size):
    return _resize(x, size, "bilinear")


def resize_nearest(x, size):
    return _resize(x, size, "nearest")
