"""Numba-jitted kernels, signature-compatible with ``numpy_impl``.

All kernels are serial @njit (no fastmath, no prange) so results are
run-to-run deterministic.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(x, k, stride, pad):
    C, H, W = x.shape
    OH = (H + 2 * pad - k) // stride + 1
    OW = (W + 2 * pad - k) // stride + 1
    cols = np.zeros((C * k * k, OH * OW), dtype=x.dtype)
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for oh in range(OH):
                    ih = oh * stride + ki - pad
                    if ih < 0 or ih >= H:
                        continue
                    base = oh * OW
                    for ow in range(OW):
                        iw = ow * stride + kj - pad
                        if 0 <= iw < W:
                            cols[row, base + ow] = x[c, ih, iw]
    return cols


@njit(cache=True)
def col2im(cols, C, H, W, k, stride, pad):
    OH = (H + 2 * pad - k) // stride + 1
    OW = (W + 2 * pad - k) // stride + 1
    out = np.zeros((C, H, W), dtype=cols.dtype)
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for oh in range(OH):
                    ih = oh * stride + ki - pad
                    if ih < 0 or ih >= H:
                        continue
                    base = oh * OW
                    for ow in range(OW):
                        iw = ow * stride + kj - pad
                        if 0 <= iw < W:
                            out[c, ih, iw] += cols[row, base + ow]
    return out


@njit(cache=True, inline="always")
def _bilinear_corner(p, size):
    u = p - 0.5
    i0 = int(np.floor(u))
    f = u - i0
    i1 = i0 + 1
    if i0 < 0:
        i0 = 0
    elif i0 > size - 1:
        i0 = size - 1
    if i1 < 0:
        i1 = 0
    elif i1 > size - 1:
        i1 = size - 1
    return i0, i1, f


@njit(cache=True)
def roi_align_forward(feat, rois, pool, sampling):
    C, H, W = feat.shape
    n = rois.shape[0]
    out = np.zeros((n, C, pool, pool), dtype=feat.dtype)
    inv = 1.0 / (sampling * sampling)
    for r in range(n):
        x1 = rois[r, 0]
        y1 = rois[r, 1]
        bw = (rois[r, 2] - x1) / pool
        bh = (rois[r, 3] - y1) / pool
        for i in range(pool):
            for j in range(pool):
                for si in range(sampling):
                    py = y1 + (i + (si + 0.5) / sampling) * bh
                    r0, r1, fy = _bilinear_corner(py, H)
                    for sj in range(sampling):
                        px = x1 + (j + (sj + 0.5) / sampling) * bw
                        c0, c1, fx = _bilinear_corner(px, W)
                        w00 = (1.0 - fy) * (1.0 - fx)
                        w01 = (1.0 - fy) * fx
                        w10 = fy * (1.0 - fx)
                        w11 = fy * fx
                        for c in range(C):
                            v = (
                                feat[c, r0, c0] * w00
                                + feat[c, r0, c1] * w01
                                + feat[c, r1, c0] * w10
                                + feat[c, r1, c1] * w11
                            )
                            out[r, c, i, j] += v * inv
    return out


@njit(cache=True)
def roi_align_backward(dout, C, H, W, rois, pool, sampling):
    dfeat = np.zeros((C, H, W), dtype=dout.dtype)
    n = rois.shape[0]
    inv = 1.0 / (sampling * sampling)
    for r in range(n):
        x1 = rois[r, 0]
        y1 = rois[r, 1]
        bw = (rois[r, 2] - x1) / pool
        bh = (rois[r, 3] - y1) / pool
        for i in range(pool):
            for j in range(pool):
                for si in range(sampling):
                    py = y1 + (i + (si + 0.5) / sampling) * bh
                    r0, r1, fy = _bilinear_corner(py, H)
                    for sj in range(sampling):
                        px = x1 + (j + (sj + 0.5) / sampling) * bw
                        c0, c1, fx = _bilinear_corner(px, W)
                        w00 = (1.0 - fy) * (1.0 - fx)
                        w01 = (1.0 - fy) * fx
                        w10 = fy * (1.0 - fx)
                        w11 = fy * fx
                        for c in range(C):
                            g = dout[r, c, i, j] * inv
                            dfeat[c, r0, c0] += g * w00
                            dfeat[c, r0, c1] += g * w01
                            dfeat[c, r1, c0] += g * w10
                            dfeat[c, r1, c1] += g * w11
    return dfeat


@njit(cache=True)
def pairwise_iou(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        ax1 = a[i, 0]
        ay1 = a[i, 1]
        ax2 = ax1 + a[i, 2]
        ay2 = ay1 + a[i, 3]
        area_a = (ax2 - ax1) * (ay2 - ay1)
        for j in range(m):
            bx1 = b[j, 0]
            by1 = b[j, 1]
            bx2 = bx1 + b[j, 2]
            by2 = by1 + b[j, 3]
            iw = min(ax2, bx2) - max(ax1, bx1)
            if iw <= 0.0:
                continue
            ih = min(ay2, by2) - max(ay1, by1)
            if ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (bx2 - bx1) * (by2 - by1)
            out[i, j] = inter / (area_a + area_b - inter)
    return out


@njit(cache=True)
def nms_keep(boxes, order, iou_threshold):
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    nkeep = 0
    for oi in range(n):
        i = order[oi]
        if suppressed[i]:
            continue
        keep[nkeep] = i
        nkeep += 1
        ix1 = boxes[i, 0]
        iy1 = boxes[i, 1]
        ix2 = ix1 + boxes[i, 2]
        iy2 = iy1 + boxes[i, 3]
        iarea = boxes[i, 2] * boxes[i, 3]
        for oj in range(oi + 1, n):
            j = order[oj]
            if suppressed[j]:
                continue
            iw = min(ix2, boxes[j, 0] + boxes[j, 2]) - max(ix1, boxes[j, 0])
            if iw <= 0.0:
                continue
            ih = min(iy2, boxes[j, 1] + boxes[j, 3]) - max(iy1, boxes[j, 1])
            if ih <= 0.0:
                continue
            inter = iw * ih
            iou = inter / (iarea + boxes[j, 2] * boxes[j, 3] - inter)
            if iou >= iou_threshold:
                suppressed[j] = True
    return keep[:nkeep]
