"""Pure-numpy reference implementations of the hot kernels.

Every function here has a numba twin in ``numba_impl`` with the same
signature and semantics; this module is the fallback and the ground truth
the numba versions are tested against.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (C,H,W) into (C*k*k, OH*OW) patch columns."""
    C, H, W = x.shape
    OH = (H + 2 * pad - k) // stride + 1
    OW = (W + 2 * pad - k) // stride + 1
    if pad > 0:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2 = x.strides
    windows = as_strided(
        x,
        shape=(C, k, k, OH, OW),
        strides=(s0, s1, s2, s1 * stride, s2 * stride),
    )
    return np.ascontiguousarray(windows).reshape(C * k * k, OH * OW)


def col2im(cols: np.ndarray, C: int, H: int, W: int, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add columns back onto a (C,H,W) grid."""
    OH = (H + 2 * pad - k) // stride + 1
    OW = (W + 2 * pad - k) // stride + 1
    out = np.zeros((C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(C, k, k, OH, OW)
    for ki in range(k):
        for kj in range(k):
            out[:, ki : ki + stride * OH : stride, kj : kj + stride * OW : stride] += cols6[:, ki, kj]
    if pad > 0:
        out = out[:, pad : pad + H, pad : pad + W]
    return np.ascontiguousarray(out)


def _sample_coords(rois: np.ndarray, pool: int, sampling: int):
    # sample point grid per roi: (N, pool, sampling) along each axis
    n = rois.shape[0]
    x1, y1, x2, y2 = rois[:, 0], rois[:, 1], rois[:, 2], rois[:, 3]
    bw = (x2 - x1) / pool
    bh = (y2 - y1) / pool
    frac = (np.arange(sampling) + 0.5) / sampling
    jj = np.arange(pool)
    # px[n, j, s] = x1[n] + (j + frac[s]) * bw[n]
    px = x1[:, None, None] + (jj[None, :, None] + frac[None, None, :]) * bw[:, None, None]
    py = y1[:, None, None] + (jj[None, :, None] + frac[None, None, :]) * bh[:, None, None]
    return px, py


def _bilinear_indices(p: np.ndarray, size: int):
    u = p - 0.5
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    i1 = i0 + 1
    i0c = np.clip(i0, 0, size - 1)
    i1c = np.clip(i1, 0, size - 1)
    return i0c, i1c, f


def roi_align_forward(feat: np.ndarray, rois: np.ndarray, pool: int, sampling: int) -> np.ndarray:
    """Average bilinear samples over a pool x pool grid per roi.

    feat: (C,H,W); rois: (N,4) as x1,y1,x2,y2 in feature coordinates.
    Returns (N,C,pool,pool).
    """
    C, H, W = feat.shape
    n = rois.shape[0]
    if n == 0:
        return np.zeros((0, C, pool, pool), dtype=feat.dtype)
    px, py = _sample_coords(rois, pool, sampling)  # (N, pool, S)
    c0, c1, fx = _bilinear_indices(px, W)
    r0, r1, fy = _bilinear_indices(py, H)
    # broadcast rows against cols: indices (N, pool_i, pool_j, S_i, S_j)
    r0 = r0[:, :, None, :, None]
    r1 = r1[:, :, None, :, None]
    fy = fy[:, :, None, :, None]
    c0 = c0[:, None, :, None, :]
    c1 = c1[:, None, :, None, :]
    fx = fx[:, None, :, None, :]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    flat = feat.reshape(C, H * W)
    out = (
        flat[:, r0 * W + c0] * w00
        + flat[:, r0 * W + c1] * w01
        + flat[:, r1 * W + c0] * w10
        + flat[:, r1 * W + c1] * w11
    )
    # (C, N, pool, pool, S, S) -> mean over samples -> (N, C, pool, pool)
    out = out.mean(axis=(4, 5)).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out.astype(feat.dtype, copy=False))


def roi_align_backward(
    dout: np.ndarray, C: int, H: int, W: int, rois: np.ndarray, pool: int, sampling: int
) -> np.ndarray:
    """Gradient of roi_align_forward w.r.t. the feature map."""
    dfeat = np.zeros((C, H * W), dtype=dout.dtype)
    n = rois.shape[0]
    if n == 0:
        return dfeat.reshape(C, H, W)
    px, py = _sample_coords(rois, pool, sampling)
    c0, c1, fx = _bilinear_indices(px, W)
    r0, r1, fy = _bilinear_indices(py, H)
    r0 = r0[:, :, None, :, None]
    r1 = r1[:, :, None, :, None]
    fy = fy[:, :, None, :, None]
    c0 = c0[:, None, :, None, :]
    c1 = c1[:, None, :, None, :]
    fx = fx[:, None, :, None, :]
    g = dout.transpose(1, 0, 2, 3)[:, :, :, :, None, None] / (sampling * sampling)
    for idx, wgt in (
        (r0 * W + c0, (1 - fy) * (1 - fx)),
        (r0 * W + c1, (1 - fy) * fx),
        (r1 * W + c0, fy * (1 - fx)),
        (r1 * W + c1, fy * fx),
    ):
        contrib = g * wgt  # (C, N, pool, pool, S, S)
        flat_idx = np.broadcast_to(idx, contrib.shape[1:]).reshape(-1)
        for c in range(C):
            np.add.at(dfeat[c], flat_idx, contrib[c].reshape(-1))
    return dfeat.reshape(C, H, W)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between (N,4) and (M,4) boxes in x,y,w,h form.

    Areas are recomputed from the same edge differences the intersection
    uses, so the diagonal of pairwise_iou(x, x) is exactly 1.
    """
    ax1, ay1 = a[:, 0], a[:, 1]
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :])
    iw = np.clip(iw, 0.0, None)
    ih = np.clip(ih, 0.0, None)
    inter = iw * ih
    area_a = ((ax2 - ax1) * (ay2 - ay1))[:, None]
    area_b = ((bx2 - bx1) * (by2 - by1))[None, :]
    return inter / (area_a + area_b - inter)


def nms_keep(boxes: np.ndarray, order: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression over (N,4) x,y,w,h boxes visited in ``order``.

    Returns kept indices (into boxes) in visit order. Survivor pairs all
    have IoU strictly below the threshold.
    """
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    x1 = boxes[:, 0]
    y1 = boxes[:, 1]
    x2 = boxes[:, 0] + boxes[:, 2]
    y2 = boxes[:, 1] + boxes[:, 3]
    areas = boxes[:, 2] * boxes[:, 3]
    keep = []
    for oi in range(n):
        i = order[oi]
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[oi + 1 :]
        rest = rest[~suppressed[rest]]
        if rest.size == 0:
            continue
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0.0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0.0, None)
        inter = iw * ih
        iou = inter / (areas[i] + areas[rest] - inter)
        suppressed[rest[iou >= iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)
