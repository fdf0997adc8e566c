"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and results match the compiled module exactly; these run
whenever the extension is unavailable (or ``SPRITZ_PURE_PYTHON=1``).
"""
import numpy as np


def _pad_for(x, stride, pad_top, pad_left, ho, wo):
    n, h, w, c = x.shape
    need_h = (ho - 1) * stride + 3
    need_w = (wo - 1) * stride + 3
    pad_bottom = max(need_h - h - pad_top, 0)
    pad_right = max(need_w - w - pad_left, 0)
    return np.pad(x, ((0, 0), (pad_top, pad_bottom), (pad_left, pad_right), (0, 0)))


def im2col3x3(x, stride, pad_top, pad_left, ho, wo):
    n, _, _, c = x.shape
    xp = _pad_for(np.ascontiguousarray(x, dtype=np.float64), stride, pad_top, pad_left, ho, wo)
    cols = np.empty((n, ho, wo, 3, 3, c))
    span_h = (ho - 1) * stride + 1
    span_w = (wo - 1) * stride + 1
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky, kx, :] = xp[:, ky:ky + span_h:stride, kx:kx + span_w:stride, :]
    return cols.reshape(n * ho * wo, 9 * c)


def col2im3x3(cols, n, h, w, c, stride, pad_top, pad_left, ho, wo):
    need_h = (ho - 1) * stride + 3
    need_w = (wo - 1) * stride + 3
    hp = max(need_h, h + pad_top)
    wp = max(need_w, w + pad_left)
    out = np.zeros((n, hp, wp, c))
    patches = np.asarray(cols).reshape(n, ho, wo, 3, 3, c)
    span_h = (ho - 1) * stride + 1
    span_w = (wo - 1) * stride + 1
    for ky in range(3):
        for kx in range(3):
            out[:, ky:ky + span_h:stride, kx:kx + span_w:stride, :] += patches[:, :, :, ky, kx, :]
    return np.ascontiguousarray(out[:, pad_top:pad_top + h, pad_left:pad_left + w, :])


def maxpool2x2_forward(x):
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c)
    # window element k = 2*dy + dx, row-major
    stacked = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    idx = np.argmax(stacked, axis=-1).astype(np.int8)
    out = np.take_along_axis(stacked, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    tie = ((stacked == out[..., None]).sum(axis=-1) > 1).astype(np.uint8)
    return np.ascontiguousarray(out), idx, tie


def maxpool2x2_backward(dout, idx, h, w):
    n, ho, wo, c = dout.shape
    onehot = (np.arange(4, dtype=np.int8) == idx[..., None]) * dout[..., None]
    win = onehot.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros((n, h, w, c))
    dx[:, :2 * ho, :2 * wo, :] = win.reshape(n, 2 * ho, 2 * wo, c)
    return dx
