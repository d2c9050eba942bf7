"""Dense tensors with reverse-mode differentiation.

Only the operations the separator uses are provided.  Each op computes its
forward value with numpy and records a closure that maps the output gradient
to one gradient per parent.  ``Tensor.backward`` walks the graph in reverse
topological order and accumulates.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy import special

_GRAD_ENABLED = True
_MAC_COUNTERS = []


class MacCounter:
    """Tally of multiply-accumulates performed by contraction ops."""

    def __init__(self):
        self.total = 0

    def __repr__(self):
        return f"MacCounter(total={self.total})"


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    _MAC_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTERS.remove(counter)


def tally_macs(n):
    for c in _MAC_COUNTERS:
        c.total += int(n)


@contextlib.contextmanager
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


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basic properties ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------
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

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    # -- differentiation -----------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ValueError("tensor does not require grad")
        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _toposort(root):
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


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.asarray(x).dtype if np.issubdtype(np.asarray(x).dtype, np.floating) else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def make_op(data, parents, backward):
    """Wrap ``data`` as the output of an op; record the graph edge if needed.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b):
    a = as_tensor(a, None if not isinstance(b, Tensor) else b.dtype)
    b = as_tensor(b, a.dtype)
    return a, b


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b)
    out = a.data / b.data
    return make_op(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def scale(x, c):
    x = as_tensor(x)
    c = float(c)  # a numpy float64 scalar would promote 32-bit data
    return make_op(x.data * c, (x,), lambda g: (g * c,))


def power(x, p):
    """``x ** p`` for a python scalar exponent."""
    x = as_tensor(x)
    p = float(p)
    out = x.data ** p
    return make_op(out, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make_op(out, (x,), lambda g: (g * 0.5 / out,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return make_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x):
    x = as_tensor(x)
    return make_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def _expit(a):
    # tanh form: overflow-free and faster than scipy's expit on large arrays
    out = np.tanh(0.5 * a)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(x):
    x = as_tensor(x)
    out = _expit(x.data)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def swish(x):
    """x * sigmoid(x)."""
    x = as_tensor(x)
    s = _expit(x.data)
    out = x.data * s
    return make_op(out, (x,), lambda g: (g * (s + out * (1.0 - s)),))


def gelu(x):
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    cdf = special.ndtr(x.data)
    pdf = np.exp(-0.5 * x.data ** 2) / math.sqrt(2 * math.pi)
    return make_op(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return make_op(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,))


def prelu(x, alpha):
    """max(x, 0) + alpha * min(x, 0) with ``alpha`` broadcast over ``x``."""
    x, alpha = _pair(x, alpha)
    _check_broadcast(x, alpha)
    pos = x.data > 0
    out = np.where(pos, x.data, alpha.data * x.data)

    def backward(g):
        gx = np.where(pos, g, g * alpha.data)
        ga = _unbroadcast(np.where(pos, 0.0, g * x.data), alpha.shape)
        return gx, ga

    return make_op(out, (x, alpha), backward)


# --------------------------------------------------------------------------
# contractions


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    tally_macs(out.size * a.shape[-1])

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), backward)


def linear(x, w, b=None):
    """x @ w (+ b) over the last axis of ``x``; ``w`` is [d_in, d_out]."""
    x, w = _pair(x, w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input feature dim {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    tally_macs(out.size * w.shape[0])
    if b is not None:
        b = as_tensor(b, x.dtype)
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_op(out, parents, backward)


def _conv_out(size, k, stride, dil):
    return (size - dil * (k - 1) - 1) // stride + 1


def conv2d(x, w, b=None, stride=(1, 1), dilation=(1, 1), padding=((0, 0), (0, 0)), groups=1):
    """2-D cross-correlation in channels-last layout.

    x: [B, H, W, C_in]; w: [kh, kw, C_in // groups, C_out]; zero padding given
    per side as ((top, bottom), (left, right)).  The tap loop keeps every
    product a BLAS matmul (or an elementwise product when depthwise).
    """
    x, w = _pair(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input and weight, got {x.shape} and {w.shape}")
    bsz, _, _, cin = x.shape
    kh, kw, cig, cout = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"channels in={cin} out={cout} not divisible by groups={groups}")
    if cig != cin // groups:
        raise ValueError(f"weight expects {cig * groups} input channels, input has {cin}")
    (sh, sw), (dh, dw) = stride, dilation
    if min(sh, sw, dh, dw) < 1:
        raise ValueError(f"stride {stride} and dilation {dilation} must be positive")
    pad = ((0, 0), tuple(padding[0]), tuple(padding[1]), (0, 0))
    xp = np.pad(x.data, pad) if any(any(p) for p in padding) else x.data
    hp, wp = xp.shape[1], xp.shape[2]
    ho, wo = _conv_out(hp, kh, sh, dh), _conv_out(wp, kw, sw, dw)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty for padded input {hp}x{wp}, kernel {kh}x{kw}")
    cog = cout // groups
    depthwise = groups > 1 and cig == 1 and cog == 1
    tally_macs(bsz * ho * wo * cout * kh * kw * cig)

    def tap(arr, i, j):
        return arr[:, i * dh: i * dh + sh * (ho - 1) + 1: sh, j * dw: j * dw + sw * (wo - 1) + 1: sw, :]

    out = np.zeros((bsz, ho, wo, cout), dtype=np.result_type(x.dtype, w.dtype))
    for i in range(kh):
        for j in range(kw):
            xs = tap(xp, i, j)
            if depthwise:
                out += xs * w.data[i, j, 0]
            elif groups == 1:
                out += (xs.reshape(-1, cin) @ w.data[i, j]).reshape(out.shape)
            else:
                for gi in range(groups):
                    ci, co = slice(gi * cig, (gi + 1) * cig), slice(gi * cog, (gi + 1) * cog)
                    out[..., co] += (xs[..., ci].reshape(-1, cig) @ w.data[i, j, :, co]).reshape(
                        bsz, ho, wo, cog)
    if b is not None:
        b = as_tensor(b, x.dtype)
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        g2 = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                xs = tap(xp, i, j)
                if depthwise:
                    if gw is not None:
                        gw[i, j, 0] = (xs * g).reshape(-1, cout).sum(axis=0)
                    if gxp is not None:
                        tap(gxp, i, j)[...] += g * w.data[i, j, 0]
                elif groups == 1:
                    if gw is not None:
                        gw[i, j] = xs.reshape(-1, cin).T @ g2
                    if gxp is not None:
                        tap(gxp, i, j)[...] += (g2 @ w.data[i, j].T).reshape(xs.shape)
                else:
                    for gi in range(groups):
                        ci, co = slice(gi * cig, (gi + 1) * cig), slice(gi * cog, (gi + 1) * cog)
                        gg = g[..., co].reshape(-1, cog)
                        if gw is not None:
                            gw[i, j, :, co] = xs[..., ci].reshape(-1, cig).T @ gg
                        if gxp is not None:
                            tap(gxp, i, j)[..., ci] += (gg @ w.data[i, j, :, co].T).reshape(
                                bsz, ho, wo, cig)
        gx = None
        if gxp is not None:
            (pt, _), (pl, _) = padding
            gx = gxp[:, pt: pt + x.shape[1], pl: pl + x.shape[2], :]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_op(out, parents, backward)


# --------------------------------------------------------------------------
# reductions and normalisation


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ValueError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(out)


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(out, (x,), backward)


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    if count == 0:
        raise ValueError("mean over an empty axis")
    return scale(reduce_sum(x, axes, keepdims), 1.0 / count)


def variance(x, axis=None, keepdims=False):
    """Population variance."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    centered = x - reduce_mean(x, axes, keepdims=True)
    return reduce_mean(centered * centered, axes, keepdims)


def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make_op(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x, gamma=None, beta=None, axis=-1, eps=1e-5):
    """Normalise over ``axis`` to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ValueError("layer_norm over an empty axis")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    parents = [x]
    if gamma is not None:
        gamma = as_tensor(gamma, x.dtype)
        out = out * gamma.data
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta, x.dtype)
        out = out + beta.data
        parents.append(beta)

    def backward(g):
        gh = g * gamma.data if gamma is not None else g
        gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return grads

    return make_op(out, parents, backward)


# --------------------------------------------------------------------------
# data movement


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return make_op(out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ValueError(f"{axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of nothing")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    edges = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return [np.take(g, np.arange(edges[i], edges[i + 1]), axis=axis) for i in range(len(tensors))]

    return make_op(out, tensors, backward)


def getitem(x, index):
    """Basic slicing (ints, slices, Ellipsis, None)."""
    x = as_tensor(x)
    if not isinstance(index, tuple):
        index = (index,)
    for part in index:
        if not (part is None or part is Ellipsis or isinstance(part, (int, slice, np.integer))):
            raise TypeError(f"only basic indexing is supported, got {type(part).__name__}")
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_op(out, (x,), backward)


def split(x, sizes, axis=-1):
    """Split along ``axis`` into pieces of the given sizes."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {sizes} do not sum to axis length {x.shape[axis]}")
    pieces, start = [], 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + s)
        pieces.append(getitem(x, tuple(idx)))
        start += s
    return pieces


def pad(x, widths):
    """Zero padding; ``widths`` as in ``np.pad``."""
    x = as_tensor(x)
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim or any(a < 0 or b < 0 for a, b in widths):
        raise ValueError(f"bad pad widths {widths} for shape {x.shape}")
    out = np.pad(x.data, widths)
    index = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))
    return make_op(out, (x,), lambda g: (g[index],))


def pixel_shuffle(x, factor, axis=-2):
    """Sub-pixel upsampling along ``axis`` of a channels-last tensor.

    [..., F, C * r] -> [..., F * r, C] with out[f * r + k, c] = in[f, k * C + c]
    (``axis`` must be the axis just before channels).
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    if axis != x.ndim - 2:
        raise ValueError("pixel_shuffle expects the shuffled axis right before channels")
    c = x.shape[-1]
    if c % factor:
        raise ValueError(f"channels {c} not divisible by shuffle factor {factor}")
    shape = x.shape[:-2] + (x.shape[-2] * factor, c // factor)
    return reshape(x, shape)


def pixel_unshuffle(x, factor, axis=-2):
    """Inverse of :func:`pixel_shuffle`."""
    x = as_tensor(x)
    if x.shape[-2] % factor:
        raise ValueError(f"axis length {x.shape[-2]} not divisible by {factor}")
    shape = x.shape[:-2] + (x.shape[-2] // factor, x.shape[-1] * factor)
    return reshape(x, shape)


def take_rows(table, index):
    """table[index] gathering rows of ``table`` (axis 0); grads scatter-add."""
    table = as_tensor(table)
    index = np.asarray(index)
    out = table.data[index]
    rows = table.shape[0]

    def backward(g):
        flat = index.reshape(-1)
        g2 = g.reshape(flat.size, -1)
        gt = np.empty((rows, g2.shape[1]), dtype=g.dtype)
        for c in range(g2.shape[1]):
            gt[:, c] = np.bincount(flat, weights=g2[:, c], minlength=rows)
        return (gt.reshape(table.shape),)

    return make_op(out, (table,), backward)
