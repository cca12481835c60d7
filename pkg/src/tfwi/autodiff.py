"""Dense float64 tensors with a dynamic reverse-mode tape.

Everything trainable in this package (tokenizers, backbone, diffusion
denoiser) runs on this engine. Arrays are contiguous row-major float64;
broadcasting in elementwise ops is restricted to scalars and trailing-axis
alignment so every backward rule stays auditable.
"""

from __future__ import annotations

import logging
import threading

import numpy as np

log = logging.getLogger(__name__)

# When True, backward() logs parameters that received no gradient.
debug = False


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


_state = threading.local()


def _tape():
    if not hasattr(_state, "tape"):
        _state.tape = []
        _state.grad_enabled = True
    return _state.tape


def _grad_enabled():
    _tape()
    return _state.grad_enabled


class no_grad:
    """Context manager: ops inside are not recorded on the tape."""

    def __enter__(self):
        _tape()
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_leaf")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are lifted to non-recorded tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


def _record(out, parents, backward_fn):
    """Put op on the tape when recording is on and any input needs grad."""
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._leaf = False
        _state.tape.append(_Node(out, parents, backward_fn))
    return out


def _accumulate(t, g):
    if g is None or not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss, params=None):
    """Reverse sweep from a scalar loss; fills .grad, clears the tape.

    If `params` is given, any listed tensor left unreached gets a zero
    gradient (logged when debug mode is on).
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = _tape()
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for p, pg in zip(node.parents, grads):
            if pg is not None:
                _accumulate(p, pg)
        if not node.out._leaf:
            node.out.grad = None  # intermediate; free as soon as consumed
    tape.clear()
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)
                if debug:
                    log.warning("backward: parameter %r not reached by loss", p.shape)


def clear_tape():
    _tape().clear()


# ---------------------------------------------------------------------------
# broadcasting helpers (scalar or trailing-axis only)


def _check_broadcast(op, sa, sb):
    if sa == sb:
        return
    for da, db in zip(sa[::-1], sb[::-1]):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast")


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of trailing-axis broadcast)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for i, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a.shape, b.shape)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                           _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a.shape, b.shape)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                           _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a.shape, b.shape)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a.shape, b.shape)
    out = Tensor(a.data / b.data)

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), back)


def neg(a):
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def power(a, k):
    k = float(k)
    out = Tensor(a.data ** k)
    return _record(out, (a,), lambda g: (g * k * a.data ** (k - 1),))


def exp(a):
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a):
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a):
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * 0.5 / y,))


def tanh(a):
    y = np.tanh(a.data)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    y = np.maximum(a.data, 0.0)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    # tanh approximation; derivative computed for the approximation itself
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dy,)

    return _record(out, (a,), back)


def clamp(a, lo, hi):
    y = np.clip(a.data, lo, hi)
    out = Tensor(y)
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(out, (a,), lambda g: (g * mask,))


def dropout(a, p, rng):
    """Inverted dropout with an explicit Generator; p=0 is a passthrough."""
    if p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * keep)
    return _record(out, (a,), lambda g: (g * keep,))


def stop_gradient(a):
    """Forward identity, no gradient flows back."""
    return Tensor(a.data)


def straight_through(a, value):
    """Forward the given value unchanged; gradient passes to a as identity.

    value must match a's shape exactly so the pass-through is well posed.
    """
    value = np.asarray(value, dtype=np.float64)
    if value.shape != a.shape:
        raise ShapeError(
            f"straight_through: value {value.shape} does not match {a.shape}")
    return _record(Tensor(value), (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    if int(np.prod(shape)) != a.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx):
    out = Tensor(np.ascontiguousarray(a.data[idx]))

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)  # add, not assign: fancy indices may repeat
        return (ga,)

    return _record(out, (a,), back)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), back)


def sum_(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[i] for i in axis]))
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return _record(out, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """a @ b. Supports 2D@2D, ND@2D (shared weight) and ND@ND batched."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need >=2D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and b.ndim != 2 and a.ndim != 2:
        raise ShapeError(f"matmul: rank combination unsupported, {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), back)


# ---------------------------------------------------------------------------
# neural ops


def softmax(a):
    """Softmax over the last axis."""
    x = a.data
    y = np.exp(x - x.max(axis=-1, keepdims=True))
    y /= y.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), back)


def log_softmax(a):
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out = Tensor(x - lse)
    p = np.exp(out.data)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), back)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)
    n = x.shape[-1]

    def back(g):
        gg = g * gain.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _record(out, (a, gain, bias), back)


def embedding(table, idx):
    """Row lookup: table (K, d), idx int array -> (idx.shape, d)."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: index out of range for table {table.shape}")
    out = Tensor(table.data[idx])

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(out, (table,), back)


def cross_entropy_with_logits(logits, targets):
    """Mean token cross entropy. logits (N, K), targets int (N,)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2D, got {logits.shape}")
    targets = np.asarray(targets)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))).reshape(-1)
    picked = x[np.arange(n), targets]
    out = Tensor(np.mean(lse - picked))
    p = np.exp(x - lse[:, None])

    def back(g):
        gl = p.copy()
        gl[np.arange(n), targets] -= 1.0
        return (gl * (g / n),)

    return _record(out, (logits,), back)


def mse_loss(a, b):
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = Tensor(np.mean(diff * diff))
    n = a.size

    def back(g):
        gd = (2.0 / n) * diff * g
        return gd, -gd

    return _record(out, (a, b), back)


# ---------------------------------------------------------------------------
# convolution / resampling


def _pad_forward(x, pads, mode):
    (pt, pb), (pl, pr) = pads
    if pt == pb == pl == pr == 0:
        return x
    spec = ((0, 0), (0, 0), (pt, pb), (pl, pr))
    if mode == "zero":
        return np.pad(x, spec)
    if mode == "reflect":
        return np.pad(x, spec, mode="reflect")
    raise ValueError(f"unknown pad mode {mode!r}")


def _pad_adjoint(g, pads, mode, h, w):
    """Transpose of _pad_forward: crop, folding reflected borders back in."""
    (pt, pb), (pl, pr) = pads
    if pt == pb == pl == pr == 0:
        return g
    if mode == "zero":
        return g[:, :, pt:pt + h, pl:pl + w]
    # reflect: fold rows first, then columns; corner cells pass both folds
    rows = g[:, :, pt:pt + h].copy()
    if pt:
        rows[:, :, 1:pt + 1] += g[:, :, pt - 1::-1]
    if pb:
        rows[:, :, h - 1 - pb:h - 1] += g[:, :, :pt + h - 1:-1]
    out = rows[:, :, :, pl:pl + w].copy()
    if pl:
        out[:, :, :, 1:pl + 1] += rows[:, :, :, pl - 1::-1]
    if pr:
        out[:, :, :, w - 1 - pr:w - 1] += rows[:, :, :, :pl + w - 1:-1]
    return out


def _im2col(xp, kh, kw, stride):
    b, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, oh, ow),
        (s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)
    return view.reshape(b, c * kh * kw, oh * ow), oh, ow


def _col2im(cols, xp_shape, kh, kw, stride, oh, ow):
    b, c, hp, wp = xp_shape
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    out = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += cols[:, :, i, j]
    return out


def same_pads(size, k, stride):
    """Asymmetric 'same' padding so output = ceil(size / stride)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x, w, b=None, stride=1, pads=((0, 0), (0, 0)), pad_mode="zero"):
    """x (B,Cin,H,W) * w (Cout,Cin,kh,kw) + b (Cout,)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4D x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch, {x.shape} vs {w.shape}")
    co, ci, kh, kw = w.shape
    xp = _pad_forward(x.data, pads, pad_mode)
    cols, oh, ow = _im2col(xp, kh, kw, stride)          # (B, ci*kh*kw, oh*ow)
    wmat = w.data.reshape(co, ci * kh * kw)
    y = np.matmul(wmat, cols).reshape(x.shape[0], co, oh, ow)
    if b is not None:
        y += b.data.reshape(1, co, 1, 1)
    out = Tensor(np.ascontiguousarray(y))
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gf = g.reshape(x.shape[0], co, oh * ow)
        gw = np.einsum("bop,bkp->ok", gf, cols).reshape(w.shape)
        gcols = np.matmul(wmat.T, gf)                   # (B, ci*kh*kw, oh*ow)
        gxp = _col2im(gcols, xp.shape, kh, kw, stride, oh, ow)
        gx = _pad_adjoint(gxp, pads, pad_mode, x.shape[2], x.shape[3])
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record(out, parents, back)


def _bilinear_weights(n_in, n_out):
    """Half-pixel-centered source indices and weights for 1D resize."""
    if n_out == n_in:
        idx = np.arange(n_in)
        return idx, idx, np.ones(n_in)
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, 1.0 - frac


def resize2d(x, out_h, out_w, mode="bilinear"):
    """Resize (B,C,H,W) spatially; nearest or half-pixel bilinear."""
    if x.ndim != 4:
        raise ShapeError(f"resize2d: need 4D input, got {x.shape}")
    b, c, h, w = x.shape
    if mode == "nearest":
        ri = np.minimum((np.arange(out_h) * h) // out_h, h - 1).astype(np.int64)
        ci = np.minimum((np.arange(out_w) * w) // out_w, w - 1).astype(np.int64)
        out = Tensor(np.ascontiguousarray(x.data[:, :, ri][:, :, :, ci]))

        def back(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (slice(None), slice(None), ri[:, None], ci[None, :]), g)
            return (gx,)

        return _record(out, (x,), back)

    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    rlo, rhi, rw = _bilinear_weights(h, out_h)
    clo, chi, cw = _bilinear_weights(w, out_w)
    rw_ = rw[:, None]
    cw_ = cw[None, :]
    xd = x.data
    top = xd[:, :, rlo][:, :, :, clo] * cw_ + xd[:, :, rlo][:, :, :, chi] * (1 - cw_)
    bot = xd[:, :, rhi][:, :, :, clo] * cw_ + xd[:, :, rhi][:, :, :, chi] * (1 - cw_)
    out = Tensor(np.ascontiguousarray(top * rw_ + bot * (1 - rw_)))

    def back(g):
        gx = np.zeros_like(xd)
        gtop = g * rw_
        gbot = g * (1 - rw_)
        for rows, gr in ((rlo, gtop), (rhi, gbot)):
            np.add.at(gx, (slice(None), slice(None), rows[:, None], clo[None, :]), gr * cw_)
            np.add.at(gx, (slice(None), slice(None), rows[:, None], chi[None, :]), gr * (1 - cw_))
        return (gx,)

    return _record(out, (x,), back)


# ---------------------------------------------------------------------------
# rotary position rotation


def rope_rotate(x, cos, sin):
    """Rotate feature pairs of x (..., L, D) by per-position angles.

    cos/sin have shape (L, D//2); the first and second halves of the last
    axis form the rotation pairs.
    """
    d = x.shape[-1]
    if d % 2:
        raise ShapeError(f"rope_rotate: last axis must be even, got {x.shape}")
    if cos.shape != (x.shape[-2], d // 2):
        raise ShapeError(
            f"rope_rotate: cos {cos.shape} does not match x {x.shape}")
    c = np.concatenate([cos, cos], axis=-1)
    s = np.concatenate([sin, sin], axis=-1)
    xd = x.data
    x1, x2 = xd[..., :d // 2], xd[..., d // 2:]
    rot = np.concatenate([-x2, x1], axis=-1)
    out = Tensor(xd * c + rot * s)

    def back(g):
        g1, g2 = g[..., :d // 2], g[..., d // 2:]
        rot_t = np.concatenate([g2, -g1], axis=-1)  # transpose of the rotation
        return (g * c + rot_t * s,)

    return _record(out, (x,), back)


def rope_tables(positions, dim, base=10000.0):
    """cos/sin tables for rope_rotate: positions (L,) -> (L, dim//2)."""
    half = dim // 2
    freqs = base ** (-np.arange(half) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang), np.sin(ang)
