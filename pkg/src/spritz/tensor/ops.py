"""Differentiable ops for the fixed layer set. Images are NHWC float64."""
import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, make_result


def _same_out(size, stride):
    return -(-size // stride)


def _same_pad_before(size, stride):
    out = _same_out(size, stride)
    total = max((out - 1) * stride + 3 - size, 0)
    return total // 2


def conv2d(x, w, b, stride=1):
    """3x3 convolution with "same" zero padding.

    ``w`` has shape ``(3, 3, c_in, c_out)``; output spatial size is
    ``ceil(in / stride)``.
    """
    n, h, wd, c = x.shape
    if w.shape[:3] != (3, 3, c):
        raise ShapeError(f"conv2d expects {c} input channels for kernel {w.shape}, got input {x.shape}")
    c_out = w.shape[3]
    ho, wo = _same_out(h, stride), _same_out(wd, stride)
    pt, pl = _same_pad_before(h, stride), _same_pad_before(wd, stride)
    cols = kernels.im2col3x3(np.ascontiguousarray(x.data), stride, pt, pl, ho, wo)
    wmat = w.data.reshape(9 * c, c_out)
    out = (cols @ wmat + b.data).reshape(n, ho, wo, c_out)

    def backward(g):
        g2 = g.reshape(n * ho * wo, c_out)
        if w.requires_grad:
            w._accumulate((cols.T @ g2).reshape(w.shape))
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = np.ascontiguousarray(g2 @ wmat.T)
            x._accumulate(kernels.col2im3x3(dcols, n, h, wd, c, stride, pt, pl, ho, wo))

    return make_result(out, (x, w, b), backward)


def conv_transpose2d(x, w, b, stride=2):
    """3x3 transposed convolution, the adjoint of a stride-``stride`` "same" conv.

    ``w`` has shape ``(3, 3, c_out, c_in)``; output spatial size is
    ``in * stride``.
    """
    n, h, wd, c = x.shape
    if w.shape[3] != c or w.shape[:2] != (3, 3):
        raise ShapeError(f"conv_transpose2d expects {w.shape[3]} input channels, got input {x.shape}")
    c_out = w.shape[2]
    ho, wo = h * stride, wd * stride
    pt, pl = _same_pad_before(ho, stride), _same_pad_before(wo, stride)
    wmat = w.data.reshape(9 * c_out, c)
    x2 = x.data.reshape(n * h * wd, c)
    cols = np.ascontiguousarray(x2 @ wmat.T)
    out = kernels.col2im3x3(cols, n, ho, wo, c_out, stride, pt, pl, h, wd) + b.data

    def backward(g):
        gcols = kernels.im2col3x3(np.ascontiguousarray(g), stride, pt, pl, h, wd)
        if w.requires_grad:
            w._accumulate((gcols.T @ x2).reshape(w.shape))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            x._accumulate((gcols @ wmat).reshape(x.shape))

    return make_result(out, (x, w, b), backward)


def dense(x, w, b):
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense expects (n, {w.shape[0]}), got {x.shape}")
    out = x.data @ w.data + b.data

    def backward(g):
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g @ w.data.T)

    return make_result(out, (x, w, b), backward)


def maxpool2x2(x, record=None):
    """2x2 stride-2 max pool; the first maximal element (row-major) takes the gradient."""
    n, h, wd, c = x.shape
    if h % 2 or wd % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    out, idx, tie = kernels.maxpool2x2_forward(np.ascontiguousarray(x.data))
    if record is not None:
        record.append(("maxpool", idx, tie))

    def backward(g):
        x._accumulate(kernels.maxpool2x2_backward(np.ascontiguousarray(g), idx, h, wd))

    return make_result(out, (x,), backward)


def relu(x, record=None):
    mask = x.data > 0
    if record is not None:
        record.append(("relu", mask, None))

    def backward(g):
        x._accumulate(g * mask)

    return make_result(x.data * mask, (x,), backward)


def _sigmoid(z):
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    s = _sigmoid(x.data)

    def backward(g):
        x._accumulate(g * s * (1.0 - s))

    return make_result(s, (x,), backward)


def scale(x, factor, offset=0.0):
    """Affine map ``x * factor + offset`` with constant coefficients."""
    def backward(g):
        x._accumulate(g * factor)

    return make_result(x.data * factor + offset, (x,), backward)


def batchnorm(x, gamma, beta, state, training, momentum=0.9, eps=1e-5):
    """Per-channel batch normalization over every axis but the last.

    ``state`` holds ``mean``/``var`` running statistics; in training mode they
    are blended as ``momentum * running + (1 - momentum) * batch``.
    """
    axes = tuple(range(x.data.ndim - 1))
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm expects {gamma.shape[0]} channels, got {x.shape}")
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state["mean"] = momentum * state["mean"] + (1.0 - momentum) * mean
        state["var"] = momentum * state["var"] + (1.0 - momentum) * var
    else:
        mean, var = state["mean"], state["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = xhat * gamma.data + beta.data
    m = x.data.size // x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data
            if training:
                dx = inv / m * (m * gx - gx.sum(axis=axes) - xhat * (gx * xhat).sum(axis=axes))
            else:
                dx = gx * inv
            x._accumulate(dx)

    return make_result(out, (x, gamma, beta), backward)


def flatten(x):
    shape = x.shape

    def backward(g):
        x._accumulate(g.reshape(shape))

    return make_result(x.data.reshape(shape[0], -1), (x,), backward)


def reshape(x, shape):
    orig = x.shape

    def backward(g):
        x._accumulate(g.reshape(orig))

    return make_result(x.data.reshape((orig[0],) + tuple(shape)), (x,), backward)


def concat(tensors, axis=1):
    """Concatenate along ``axis`` keeping argument order."""
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return make_result(out, tuple(tensors), backward)


def softmax(logits):
    """Row-wise softmax of a plain array (inference only)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _reduce(values, reduction):
    if reduction == "mean":
        return values.mean(), 1.0 / values.shape[0]
    if reduction == "sum":
        return values.sum(), 1.0
    raise ValueError(f"unknown reduction {reduction!r}")


def softmax_cross_entropy(logits, labels, reduction="mean"):
    labels = np.asarray(labels, dtype=np.intp)
    logp = _log_softmax(logits.data)
    per = -logp[np.arange(labels.size), labels]
    total, k = _reduce(per, reduction)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(labels.size), labels] -= 1.0
        logits._accumulate(g * k * p)

    return make_result(np.array(total), (logits,), backward)


def binary_cross_entropy(logits, labels, reduction="mean"):
    """BCE on pre-sigmoid logits of shape (n, 1) or (n,)."""
    z = logits.data.reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    # log(1 + e^{-|z|}) form keeps both tails finite
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    total, k = _reduce(per, reduction)

    def backward(g):
        # sigma(z) - y, written so the y=1 branch never cancels to zero
        d = (1.0 - y) * _sigmoid(z) - y * _sigmoid(-z)
        logits._accumulate((g * k * d).reshape(logits.shape))

    return make_result(np.array(total), (logits,), backward)


def mse(x, target, reduction="mean"):
    """Mean squared error averaged per example, then reduced over the batch."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    diff = x.data - t
    n = x.shape[0] if x.data.ndim else 1
    per = (diff.reshape(n, -1) ** 2).mean(axis=1)
    total, k = _reduce(per, reduction)
    per_elem = diff.size // n

    def backward(g):
        x._accumulate(g * k * 2.0 * diff / per_elem)

    return make_result(np.array(total), (x,), backward)


def dot(x, weights):
    """Sum of ``x * weights`` for a constant array (linear probe loss)."""
    wts = np.asarray(weights, dtype=np.float64)

    def backward(g):
        x._accumulate(g * wts)

    return make_result(np.array((x.data * wts).sum()), (x,), backward)


def select(x, column):
    """Column ``column`` of a 2-d tensor, as a 1-d tensor."""
    def backward(g):
        full = np.zeros_like(x.data)
        full[:, column] = g
        x._accumulate(full)

    return make_result(x.data[:, column].copy(), (x,), backward)


def add(a, b):
    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b):
    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return make_result(a.data - b.data, (a, b), backward)
