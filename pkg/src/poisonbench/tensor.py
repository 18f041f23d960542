"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation appends a backward closure to a per-thread
tape; ``backward(loss)`` replays the tape in reverse execution order,
accumulating gradients into every reachable ``requires_grad`` tensor, then
clears the tape.  Layout is fixed to NCHW row-major throughout.

float32 is the training dtype; float64 is intended for gradient-check mode.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ShapeError

_ALLOWED_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _tape_entries():
    entries = getattr(_state, "entries", None)
    if entries is None:
        entries = []
        _state.entries = entries
    return entries


def tape_length():
    """Number of operations currently recorded on this thread's tape."""
    return len(_tape_entries())


def clear_tape():
    _tape_entries().clear()


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A dense numeric array that can participate in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

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

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic goes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self):
        return tensor_sum(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        if t.grad.shape != t.data.shape:
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


def _record(out, inputs, backward_fn):
    """Mark `out` as tape-resident if recording is on and any input needs grad."""
    if is_grad_enabled() and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        _tape_entries().append((out, backward_fn))


def backward(loss):
    """Accumulate d(loss)/d(tensor) into every reachable requires_grad tensor.

    `loss` must be a scalar recorded on the active tape.  The tape is cleared
    afterwards; entries not upstream of `loss` are skipped (their outputs
    never receive a gradient seed).
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape)
    entries = _tape_entries()
    loss.grad = np.ones_like(loss.data)
    try:
        for out, fn in reversed(entries):
            if out.grad is None:
                continue
            fn(out.grad)
    finally:
        entries.clear()


# --- broadcasting helpers (suffix broadcast over leading batch extents only) ---

def _broadcast_shapes(op, sa, sb):
    if sa == sb:
        return None  # no broadcast
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return "b"
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return "a"
    raise ShapeError(op, sa, sb)


def _reduce_leading(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_dtypes(op, a, b):
    if a.dtype != b.dtype:
        raise ShapeError(op, (str(a.dtype),), (str(b.dtype),))


# --- elementwise and linear ops ---

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_dtypes("add", a, b)
    _broadcast_shapes("add", a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def bw(g):
        _accumulate(a, _reduce_leading(g, a.shape))
        _accumulate(b, _reduce_leading(g, b.shape))

    _record(out, (a, b), bw)
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_dtypes("sub", a, b)
    _broadcast_shapes("sub", a.shape, b.shape)
    out = Tensor(a.data - b.data)

    def bw(g):
        _accumulate(a, _reduce_leading(g, a.shape))
        _accumulate(b, -_reduce_leading(g, b.shape))

    _record(out, (a, b), bw)
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_dtypes("mul", a, b)
    _broadcast_shapes("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)

    def bw(g):
        _accumulate(a, _reduce_leading(g * bd, a.shape))
        _accumulate(b, _reduce_leading(g * ad, b.shape))

    _record(out, (a, b), bw)
    return out


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)
    out = Tensor(a.data * a.dtype.type(s))

    def bw(g):
        _accumulate(a, g * a.dtype.type(s))

    _record(out, (a,), bw)
    return out


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_dtypes("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)

    def bw(g):
        _accumulate(a, g @ bd.T)
        _accumulate(b, ad.T @ g)

    _record(out, (a, b), bw)
    return out


def reshape(a, shape):
    a = _as_tensor(a)
    old_shape = a.shape
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old_shape, (shape,) if isinstance(shape, int) else tuple(shape))
    out = Tensor(out_data)

    def bw(g):
        _accumulate(a, g.reshape(old_shape))

    _record(out, (a,), bw)
    return out


def flatten(a):
    """Collapse all but the leading batch axis."""
    return reshape(a, (a.shape[0], -1))


def transpose2d(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose2d", a.shape)
    out = Tensor(a.data.T.copy())

    def bw(g):
        _accumulate(a, g.T)

    _record(out, (a,), bw)
    return out


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", ())
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    _record(out, tuple(tensors), bw)
    return out


def tensor_sum(a):
    """Sum over all elements, returning a scalar tensor."""
    a = _as_tensor(a)
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))

    def bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    _record(out, (a,), bw)
    return out


def bias_add_nchw(x, b):
    """Add a per-channel bias [C] to a feature map [N,C,H,W]."""
    x, b = _as_tensor(x), _as_tensor(b)
    _check_dtypes("bias_add_nchw", x, b)
    if x.data.ndim != 4 or b.shape != (x.shape[1],):
        raise ShapeError("bias_add_nchw", x.shape, b.shape)
    out = Tensor(x.data + b.data[None, :, None, None])

    def bw(g):
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=(0, 2, 3)))

    _record(out, (x, b), bw)
    return out


def normalize_nchw(x, mean, std):
    """Per-channel (x - mean) / std; differentiable with respect to x only."""
    x = _as_tensor(x)
    mean = np.asarray(mean, dtype=x.dtype).reshape(1, -1, 1, 1)
    inv = (1.0 / np.asarray(std, dtype=np.float64)).astype(x.dtype).reshape(1, -1, 1, 1)
    if x.data.ndim != 4 or mean.shape[1] != x.shape[1]:
        raise ShapeError("normalize_nchw", x.shape, mean.shape)
    out = Tensor((x.data - mean) * inv)

    def bw(g):
        _accumulate(x, g * inv)

    _record(out, (x,), bw)
    return out


# --- convolution ---

def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of NCHW input with OIHW kernel."""
    x, w = _as_tensor(x), _as_tensor(w)
    _check_dtypes("conv2d", x, w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    s, p = int(stride), int(padding)
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d(output)", (oh, ow))

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]  # [N,C,OH,OW,kh,kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out_data = (cols @ wmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    out = Tensor(np.ascontiguousarray(out_data))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, o)
        if w.requires_grad:
            _accumulate(w, (g2.T @ cols).reshape(o, c, kh, kw))
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw)
            gcols = np.ascontiguousarray(gcols.transpose(4, 5, 0, 3, 1, 2))  # [kh,kw,N,C,OH,OW]
            gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += gcols[i, j]
            _accumulate(x, gxp[:, :, p:p + h, p:p + wd] if p else gxp)

    _record(out, (x, w), bw)
    return out


# --- activations, pooling, normalization ---

def relu(a):
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    _record(out, (a,), bw)
    return out


def max_pool2d(x, window=2):
    """Non-overlapping max pooling with floor semantics for ragged edges.

    Gradient routes to the first maximum in each window (lowest flat index);
    pixels cropped by floor division receive zero gradient.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("max_pool2d", x.shape)
    n, c, h, w = x.shape
    k = int(window)
    oh, ow = h // k, w // k
    if oh <= 0 or ow <= 0:
        raise ShapeError("max_pool2d(output)", (oh, ow))
    views = [x.data[:, :, i:oh * k:k, j:ow * k:k] for i in range(k) for j in range(k)]
    out_data = views[0].copy()
    for v in views[1:]:
        np.maximum(out_data, v, out=out_data)
    out = Tensor(out_data)

    def bw(g):
        gx = np.zeros_like(x.data)
        claimed = np.zeros(out_data.shape, dtype=bool)
        for idx, v in enumerate(views):
            i, j = divmod(idx, k)
            sel = (v == out_data) & ~claimed
            dst = gx[:, :, i:oh * k:k, j:ow * k:k]
            dst[sel] = g[sel]
            claimed |= sel
        _accumulate(x, gx)

    _record(out, (x,), bw)
    return out


def global_avg_pool(x):
    """Mean over spatial extents, [N,C,H,W] -> [N,C]."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bw(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / x.dtype.type(h * w), x.shape).astype(x.dtype, copy=False))

    _record(out, (x,), bw)
    return out


def batch_norm2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Channelwise batch normalization over [N,C,H,W].

    Training mode normalizes by batch statistics and updates the running
    buffers in place (momentum 0.1, biased variance); inference mode uses the
    running buffers and is affine in x.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("batch_norm2d", x.shape, gamma.shape)
    axes = (0, 2, 3)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean
        running_var *= (1.0 - momentum)
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor((xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]).astype(x.dtype, copy=False))

    def bw(g):
        _accumulate(gamma, (g * xhat).sum(axis=axes).astype(gamma.dtype, copy=False))
        _accumulate(beta, g.sum(axis=axes).astype(beta.dtype, copy=False))
        if not x.requires_grad:
            return
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            # d/dx through the batch statistics
            sum_g = gxhat.sum(axis=axes)
            sum_gx = (gxhat * xhat).sum(axis=axes)
            gx = (gxhat - (sum_g[None, :, None, None] + xhat * sum_gx[None, :, None, None]) / m) * inv_std[None, :, None, None]
        else:
            gx = gxhat * inv_std[None, :, None, None]
        _accumulate(x, gx.astype(x.dtype, copy=False))

    _record(out, (x, gamma, beta), bw)
    return out


# --- loss ---

def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of [N,C] logits against integer labels.

    Stabilized by max-subtraction.  reduction: "mean" (scalar), "sum"
    (scalar), or "none" ([N] per-sample losses).
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy", logits.shape)
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError("softmax_cross_entropy(labels)", logits.shape, labels.shape)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label out of range [0, {c}): {labels.min()}..{labels.max()}")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    per_sample = lse - z[np.arange(n), labels]
    softmax = np.exp(z - lse[:, None])

    if reduction == "mean":
        out = Tensor(np.asarray(per_sample.mean(), dtype=logits.dtype))
    elif reduction == "sum":
        out = Tensor(np.asarray(per_sample.sum(), dtype=logits.dtype))
    elif reduction == "none":
        out = Tensor(per_sample.astype(logits.dtype, copy=False))
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bw(g):
        delta = softmax.copy()
        delta[np.arange(n), labels] -= 1.0
        if reduction == "mean":
            grad = delta * (g / n)
        elif reduction == "sum":
            grad = delta * g
        else:
            grad = delta * g[:, None]
        _accumulate(logits, grad.astype(logits.dtype, copy=False))

    _record(out, (logits,), bw)
    return out
