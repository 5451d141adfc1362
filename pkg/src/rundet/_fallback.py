"""Pure numpy versions of the compiled kernels.

Used when the extension is not built or ``RUNDET_PURE_PYTHON=1`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, pad):
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (B, C, Ho, Wo, k, k) -> rows (C, k, k), cols (B, Ho, Wo)
    Ho, Wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * k * k, B * Ho * Wo)


def col2im(cols, B, C, H, W, k, stride, pad):
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    c6 = cols.reshape(C, k, k, B, Ho, Wo)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride] += (
                c6[:, ki, kj].transpose(1, 0, 2, 3)
            )
    if pad == 0:
        return xp
    return np.ascontiguousarray(xp[:, :, pad:pad + H, pad:pad + W])


def maxpool_forward(x, window, stride):
    B, C, H, W = x.shape
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(B, C, Ho, Wo, window * window)
    local = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, window)
    rows = np.arange(Ho)[:, None] * stride + di
    cols = np.arange(Wo)[None, :] * stride + dj
    return np.ascontiguousarray(out), (rows * W + cols).astype(np.int64)


def maxpool_backward(dout, arg, H, W):
    B, C = dout.shape[:2]
    plane = (np.arange(B * C, dtype=np.int64) * (H * W))[:, None]
    gidx = (arg.reshape(B * C, -1) + plane).ravel()
    dx = np.bincount(gidx, weights=dout.ravel(), minlength=B * C * H * W)
    return dx.astype(dout.dtype, copy=False).reshape(B, C, H, W)


def iou_matrix(a, b):
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    valid = (iw > 0) & (ih > 0)
    inter = np.where(valid, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(valid & (union > 0), inter / union, 0.0)
    return out


def nms(boxes, scores, iou_thresh, top_k):
    order = np.argsort(-scores, kind="stable")
    limit = min(len(order), top_k) if top_k > 0 else len(order)
    keep = []
    while order.size and len(keep) < limit:
        i = order[0]
        keep.append(i)
        ov = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ov <= iou_thresh]
    return np.asarray(keep, dtype=np.int64)
