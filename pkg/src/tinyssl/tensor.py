"""Dense tensors with tape-based reverse-mode differentiation.

Ops are recorded only while a :class:`Tape` is active and at least one
input requires a gradient. Outside a tape every op is a plain numpy
computation, which is how evaluation and target-network passes run.

Elementwise ops accept equal shapes, or a right-hand operand whose shape
equals the left one minus its leading batch axis. No other broadcasting.
"""
from __future__ import annotations

import threading

import numpy as np

from . import kernels

_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_state = threading.local()


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
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

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of differentiable ops, confined to one thread."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, out, inputs, backward_fn):
        out.requires_grad = True
        out._node = self
        self.records.append((out, inputs, backward_fn))

    def backward(self, loss):
        backward(loss, self)


def active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _emit(data, inputs, backward_fn):
    """Create the output tensor and record it if any input is tracked."""
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss, tape=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss._node
    if tape is None or loss._node is not tape:
        raise ContractError("loss was not produced under this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.records):
        g = grads.get(id(out))
        if g is None:
            continue
        for t, gt in zip(inputs, fn(g)):
            if gt is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gt.copy() if t.grad is None else t.grad + gt
            else:
                key = id(t)
                grads[key] = gt if key not in grads else grads[key] + gt


# --- elementwise ------------------------------------------------------------

def _check_broadcast(a, b, op):
    if a.shape == b.shape:
        return False
    if b.ndim == a.ndim - 1 and a.shape[1:] == b.shape:
        return True
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match "
                     "(only a leading batch axis may broadcast)")


def _check_dtype(a, b, op):
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def add(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim:
            raise ShapeError("add: non-tensor operand must be a scalar")
        return _emit(a.data + c, (a,), lambda g: (g,))
    _check_dtype(a, b, "add")
    bcast = _check_broadcast(a, b, "add")
    return _emit(a.data + b.data, (a, b),
                 lambda g: (g, g.sum(axis=0) if bcast else g))


def sub(a, b):
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_dtype(a, b, "sub")
    bcast = _check_broadcast(a, b, "sub")
    return _emit(a.data - b.data, (a, b),
                 lambda g: (g, -(g.sum(axis=0) if bcast else g)))


def neg(a):
    return _emit(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_dtype(a, b, "mul")
    bcast = _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        gb = g * ad
        return g * bd, (gb.sum(axis=0) if bcast else gb)

    return _emit(ad * bd, (a, b), bw)


def scale(a, c):
    c = float(c)
    return _emit(a.data * a.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def relu(a):
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def relu6(a):
    mask = (a.data > 0) & (a.data < 6)
    return _emit(np.clip(a.data, 0, 6), (a,), lambda g: (g * mask,))


def exp(a):
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def log(a):
    x = a.data
    return _emit(np.log(x), (a,), lambda g: (g / x,))


# --- shape and reductions ---------------------------------------------------

def reshape(a, shape):
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {a.shape}")
    return _emit(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _emit(data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def split(a, sections, axis=0):
    """Equal split along ``axis``; inverse of :func:`concat`."""
    if a.shape[axis] % sections:
        raise ShapeError(f"split: axis of length {a.shape[axis]} not divisible by {sections}")
    n = a.shape[axis] // sections
    outs = []
    for k in range(sections):
        index = [slice(None)] * a.ndim
        index[axis] = slice(k * n, (k + 1) * n)
        index = tuple(index)

        def bw(g, index=index):
            full = np.zeros(a.shape, dtype=a.dtype)
            full[index] = g
            return (full,)

        outs.append(_emit(np.ascontiguousarray(a.data[index]), (a,), bw))
    return outs


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    shape = a.shape
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(y, dtype=a.dtype), (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --- linear algebra / convolution ------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _check_dtype(a, b, "matmul")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b),
                 lambda g: (g @ bd.T if a.requires_grad else None,
                            ad.T @ g if b.requires_grad else None))


def linear(x, w):
    """x @ w.T for a (out, in) weight, without materialising the transpose."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    _check_dtype(x, w, "linear")
    xd, wd = x.data, w.data
    return _emit(xd @ wd.T, (x, w),
                 lambda g: (g @ wd if x.requires_grad else None,
                            g.T @ xd if w.requires_grad else None))


def conv2d(x, w, stride=1, pad=0, depthwise=False):
    """Cross-correlation. Dense weight (O, C, k, k) or depthwise (C, 1, k, k)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    _check_dtype(x, w, "conv2d")
    B, C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d: non-square kernel {w.shape}")
    if k > H + 2 * pad or k > W + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    if depthwise:
        if Cw != 1 or O != C:
            raise ShapeError(f"depthwise conv2d: weight {w.shape} does not fit input {x.shape}")
        return _depthwise(x, w, stride, pad)
    if Cw != C:
        raise ShapeError(f"conv2d: weight {w.shape} expects {Cw} channels, input {x.shape} has {C}")
    if k == 1 and stride == 1 and pad == 0:
        return _pointwise(x, w)
    Ho, Wo = kernels.out_size(H, k, stride, pad), kernels.out_size(W, k, stride, pad)
    cols = kernels.im2col(x.data, k, stride, pad)
    w2 = w.data.reshape(O, C * k * k)
    y = np.matmul(w2, cols).reshape(B, O, Ho, Wo)

    def bw(g):
        g3 = g.reshape(B, O, Ho * Wo)
        dw = np.einsum("bop,bkp->ok", g3, cols).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dx = kernels.col2im(np.matmul(w2.T, g3), x.shape, k, stride, pad)
        return dx, dw

    return _emit(y, (x, w), bw)


def _pointwise(x, w):
    B, C, H, W = x.shape
    O = w.shape[0]
    x3 = x.data.reshape(B, C, H * W)
    w2 = w.data.reshape(O, C)
    y = np.matmul(w2, x3).reshape(B, O, H, W)

    def bw(g):
        g3 = g.reshape(B, O, H * W)
        dx = np.matmul(w2.T, g3).reshape(x.shape) if x.requires_grad else None
        dw = None
        if w.requires_grad:
            # fold batch into the contraction so BLAS sees one large product
            gt = g3.transpose(1, 0, 2).reshape(O, B * H * W)
            xt = x3.transpose(1, 0, 2).reshape(C, B * H * W)
            dw = (gt @ xt.T).reshape(w.shape)
        return dx, dw

    return _emit(y, (x, w), bw)


def _depthwise(x, w, stride, pad):
    C, k = w.shape[0], w.shape[-1]
    w3 = np.ascontiguousarray(w.data.reshape(C, k, k))
    y = kernels.depthwise_forward(x.data, w3, stride, pad)

    def bw(g):
        dx, dw = kernels.depthwise_backward(x.data, w3, np.ascontiguousarray(g), stride, pad)
        return dx, dw.reshape(w.shape)

    return _emit(y, (x, w), bw)


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel batch norm over axis 1 for (B, C) or (B, C, H, W) inputs.

    In training mode the running buffers (plain numpy arrays) are updated
    in place with the unbiased batch variance.
    """
    if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} vs affine {gamma.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    xd = x.data
    if training:
        n = xd.size // xd.shape[1]
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * (var * n / (n - 1) if n > 1 else var)
    else:
        n = None
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * invstd.reshape(bshape)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = (dxhat - dxhat.mean(axis=axes, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)) * invstd.reshape(bshape)
        else:
            dx = dxhat * invstd.reshape(bshape)
        return dx, dgamma, dbeta

    return _emit(y.astype(xd.dtype), (x, gamma, beta), bw)


def global_avg_pool(x):
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D, got {x.shape}")
    B, C, H, W = x.shape
    y = x.data.mean(axis=(2, 3))
    inv = x.dtype.type(1.0 / (H * W))
    return _emit(y, (x,), lambda g: (np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),))


# --- normalisation and softmax family ---------------------------------------

def l2_normalize(x, axis=-1, eps=1e-12):
    """Divide each slice along ``axis`` by max(||slice||, eps)."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"l2_normalize: axis {axis} invalid for shape {x.shape}")
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    clipped = norm > eps
    denom = np.where(clipped, norm, eps).astype(xd.dtype)
    y = xd / denom

    def bw(g):
        # inside the eps clamp the map is linear, so the projection term drops
        proj = (g * y).sum(axis=axis, keepdims=True)
        return ((g - np.where(clipped, y * proj, 0)) / denom,)

    return _emit(y, (x,), bw)


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def log_softmax(x):
    y = _log_softmax(x.data)
    p = np.exp(y)
    return _emit(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def softmax(x):
    """Numerically stable softmax along the last axis (no gradient; targets only)."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.exp(_log_softmax(xd))


def softmax_cross_entropy(logits, labels):
    """Mean over rows of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"label out of range [0, {C}): {labels.min()}..{labels.max()}")
    lsm = _log_softmax(logits.data)
    rows = np.arange(B)
    loss = -lsm[rows, labels].mean()

    def bw(g):
        d = np.exp(lsm)
        d[rows, labels] -= 1
        return (d * (g / B),)

    return _emit(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def soft_cross_entropy(logits, targets):
    """Mean over rows of -sum_j targets_j * log softmax(logits)_j; targets are constants."""
    targets = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if targets.shape != logits.shape:
        raise ShapeError(f"soft_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    B = logits.shape[0]
    lsm = _log_softmax(logits.data)
    loss = -(targets * lsm).sum(axis=-1).mean()

    def bw(g):
        p = np.exp(lsm)
        tsum = targets.sum(axis=-1, keepdims=True)
        return ((p * tsum - targets) * (g / B),)

    return _emit(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# --- constructors -------------------------------------------------------------

def zeros(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)


def ones(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)


def tensor(data, dtype=np.float32, requires_grad=False):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, dtype=dtype)
