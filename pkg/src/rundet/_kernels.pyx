# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: patch extraction, pooling, box overlap and greedy NMS.

Every function here has a numpy twin in ``_fallback`` with identical
semantics; the accumulation order of ``col2im`` matches the fallback so both
backends produce bitwise-equal results.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((C * k * k, B * Ho * Wo), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t c, ki, kj, b, i, j, wj, hi, j_lo, j_hi
    cdef floating* dst
    cdef floating* src
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                dst = &out[(c * k + ki) * k + kj, 0]
                # valid output columns j satisfy 0 <= j*stride + kj - pad < W
                j_lo = 0
                while j_lo < Wo and j_lo * stride + kj - pad < 0:
                    j_lo += 1
                j_hi = Wo
                while j_hi > j_lo and (j_hi - 1) * stride + kj - pad >= W:
                    j_hi -= 1
                for b in range(B):
                    for i in range(Ho):
                        hi = i * stride + ki - pad
                        if hi < 0 or hi >= H:
                            for j in range(Wo):
                                dst[j] = 0
                        else:
                            src = &x[b, c, hi, 0]
                            for j in range(j_lo):
                                dst[j] = 0
                            wj = j_lo * stride + kj - pad
                            for j in range(j_lo, j_hi):
                                dst[j] = src[wj]
                                wj += stride
                            for j in range(j_hi, Wo):
                                dst[j] = 0
                        dst += Wo
    return out_arr


def col2im(floating[:, ::1] cols, int B, int C, int H, int W, int k, int stride, int pad):
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    dtype = np.float64 if floating is double else np.float32
    # Accumulate into a padded buffer in (ki, kj) order, like the fallback.
    xp_arr = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=dtype)
    cdef floating[:, :, :, ::1] xp = xp_arr
    cdef Py_ssize_t c, ki, kj, b, i, j, row, col
    for ki in range(k):
        for kj in range(k):
            for c in range(C):
                row = (c * k + ki) * k + kj
                col = 0
                for b in range(B):
                    for i in range(Ho):
                        for j in range(Wo):
                            xp[b, c, i * stride + ki, j * stride + kj] += cols[row, col]
                            col += 1
    if pad == 0:
        return xp_arr
    return np.ascontiguousarray(xp_arr[:, :, pad:pad + H, pad:pad + W])


def maxpool_forward(floating[:, :, :, ::1] x, int window, int stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H - window) // stride + 1
    cdef Py_ssize_t Wo = (W - window) // stride + 1
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((B, C, Ho, Wo), dtype=dtype)
    arg_arr = np.empty((B, C, Ho, Wo), dtype=np.int64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, c, i, j, di, dj, hi, wj
    cdef floating best, v
    cdef cnp.int64_t besti
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    hi = i * stride
                    wj = j * stride
                    best = x[b, c, hi, wj]
                    besti = hi * W + wj
                    for di in range(window):
                        for dj in range(window):
                            v = x[b, c, hi + di, wj + dj]
                            if v > best:
                                best = v
                                besti = (hi + di) * W + wj + dj
                    out[b, c, i, j] = best
                    arg[b, c, i, j] = besti
    return out_arr, arg_arr


def maxpool_backward(floating[:, :, :, ::1] dout, cnp.int64_t[:, :, :, ::1] arg, int H, int W):
    cdef Py_ssize_t B = dout.shape[0], C = dout.shape[1], Ho = dout.shape[2], Wo = dout.shape[3]
    dtype = np.float64 if floating is double else np.float32
    dx_arr = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, c, i, j, a
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    a = arg[b, c, i, j]
                    dx[b, c, a // W, a % W] += dout[b, c, i, j]
    return dx_arr


cdef inline double _iou(double ax1, double ay1, double ax2, double ay2,
                        double bx1, double by1, double bx2, double by2) nogil:
    cdef double iw = min(ax2, bx2) - max(ax1, bx1)
    cdef double ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    cdef double inter = iw * ih
    cdef double union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        for j in range(m):
            out[i, j] = _iou(a[i, 0], a[i, 1], a[i, 2], a[i, 3],
                             b[j, 0], b[j, 1], b[j, 2], b[j, 3])
    return out_arr


def nms(double[:, ::1] boxes, double[::1] scores, double iou_thresh, int top_k):
    """Greedy NMS; returns kept indices in descending score order."""
    cdef Py_ssize_t n = boxes.shape[0]
    order_arr = np.argsort(-np.asarray(scores), kind="stable")
    cdef cnp.int64_t[::1] order = order_arr
    keep_arr = np.empty(min(n, top_k) if top_k > 0 else n, dtype=np.int64)
    cdef cnp.int64_t[::1] keep = keep_arr
    cdef unsigned char[::1] dead = np.zeros(n, dtype=np.uint8)
    cdef Py_ssize_t nkeep = 0, limit = keep_arr.shape[0], oi, oj, i, j
    for oi in range(n):
        if nkeep >= limit:
            break
        i = order[oi]
        if dead[i]:
            continue
        keep[nkeep] = i
        nkeep += 1
        for oj in range(oi + 1, n):
            j = order[oj]
            if dead[j]:
                continue
            if _iou(boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3],
                    boxes[j, 0], boxes[j, 1], boxes[j, 2], boxes[j, 3]) > iou_thresh:
                dead[j] = 1
    return keep_arr[:nkeep].copy()
