"""Differentiable ops used by the detector.

Convolution goes through im2col + BLAS matmul; the patch gather/scatter,
roi-align and box kernels come from the active kernel backend.
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from .autodiff import Tensor, from_op


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """x: (C,H,W), w: (O,C,k,k), b: (O,). Returns (O,OH,OW)."""
    K = kernels.active()
    C, H, W = x.data.shape
    O, _, k, _ = w.data.shape
    OH = (H + 2 * pad - k) // stride + 1
    OW = (W + 2 * pad - k) // stride + 1
    cols = K.im2col(x.data, k, stride, pad)
    w_mat = w.data.reshape(O, C * k * k)
    y = (w_mat @ cols + b.data[:, None]).reshape(O, OH, OW)

    def backward(g):
        g_mat = g.reshape(O, OH * OW)
        if w.requires_grad:
            w.accumulate_grad((g_mat @ cols.T).reshape(w.data.shape))
        if b.requires_grad:
            b.accumulate_grad(g_mat.sum(axis=1))
        if x.requires_grad:
            dcols = w_mat.T @ g_mat
            x.accumulate_grad(K.col2im(dcols, C, H, W, k, stride, pad))

    return from_op(y, (x, w, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x: (N,F), w: (F,O), b: (O,)."""
    y = x.data @ w.data + b.data

    def backward(g):
        if w.requires_grad:
            w.accumulate_grad(x.data.T @ g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))
        if x.requires_grad:
            x.accumulate_grad(g @ w.data.T)

    return from_op(y, (x, w, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return from_op(np.where(mask, x.data, 0), (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"elementwise add needs equal shapes, got {a.data.shape} vs {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return from_op(a.data + b.data, (a, b), backward)


def add_n(ts: list[Tensor]) -> Tensor:
    """Sum of scalar tensors."""
    total = ts[0].data.copy()
    for t in ts[1:]:
        total = total + t.data

    def backward(g):
        for t in ts:
            if t.requires_grad:
                t.accumulate_grad(g)

    return from_op(total, tuple(ts), backward)


def scale(x: Tensor, s: float) -> Tensor:
    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * s)

    return from_op(x.data * s, (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """(C,H,W) -> (C,2H,2W) by pixel duplication."""
    y = x.data.repeat(2, axis=1).repeat(2, axis=2)
    C, H, W = x.data.shape

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(C, H, 2, W, 2).sum(axis=(2, 4)))

    return from_op(y, (x,), backward)


def roi_align(feat: Tensor, rois_xyxy: np.ndarray, pool: int, sampling: int = 2) -> Tensor:
    """feat: (C,H,W); rois_xyxy: (N,4) in feature coordinates, no grad through boxes."""
    K = kernels.active()
    C, H, W = feat.data.shape
    rois = np.ascontiguousarray(rois_xyxy, dtype=np.float64)
    y = K.roi_align_forward(feat.data, rois, pool, sampling)

    def backward(g):
        if feat.requires_grad:
            feat.accumulate_grad(
                K.roi_align_backward(np.ascontiguousarray(g), C, H, W, rois, pool, sampling)
            )

    return from_op(y, (feat,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(orig))

    return from_op(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a (N, ...) tensor; duplicate indices accumulate on backward."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x.accumulate_grad(gx)

    return from_op(x.data[idx], (x,), backward)


def concat0(ts: list[Tensor]) -> Tensor:
    sizes = [t.data.shape[0] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate_grad(g[lo:hi])

    return from_op(np.concatenate([t.data for t in ts], axis=0), tuple(ts), backward)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def zero_scalar(dtype=np.float32) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def bce_with_logits_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over a 1-D logit vector; targets in {0,1}."""
    if logits.data.size == 0:
        return zero_scalar(logits.data.dtype)
    z = np.asarray(targets, dtype=logits.data.dtype)
    x = logits.data
    loss = np.maximum(x, 0) - x * z + np.log1p(np.exp(-np.abs(x)))
    n = max(1, x.size)

    def backward(g):
        if logits.requires_grad:
            logits.accumulate_grad(g * (sigmoid(x) - z) / n)

    return from_op(np.asarray(loss.mean(), dtype=x.dtype), (logits,), backward)


def softmax_cross_entropy_mean(logits: Tensor, labels: np.ndarray) -> Tensor:
    """logits: (N,K); labels: (N,) int. Mean CE over rows."""
    if logits.data.shape[0] == 0:
        return zero_scalar(logits.data.dtype)
    x = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    m = x.max(axis=1, keepdims=True)
    ex = np.exp(x - m)
    probs = ex / ex.sum(axis=1, keepdims=True)
    n = x.shape[0]
    # log-sum-exp form: finite for any finite logits, unlike log(prob)
    lse = np.log(ex.sum(axis=1)) + m[:, 0]
    nll = lse - x[np.arange(n), labels]

    def backward(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(n), labels] -= 1.0
            logits.accumulate_grad(g * d / n)

    return from_op(np.asarray(nll.mean(), dtype=x.dtype), (logits,), backward)


def smooth_l1_mean(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 over all elements; quadratic inside |d| < beta."""
    if pred.data.size == 0:
        return zero_scalar(pred.data.dtype)
    t = np.asarray(target, dtype=pred.data.dtype)
    d = pred.data - t
    ad = np.abs(d)
    quad = ad < beta
    loss = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = max(1, d.size)

    def backward(g):
        if pred.requires_grad:
            grad = np.where(quad, d / beta, np.sign(d))
            pred.accumulate_grad(g * grad / n)

    return from_op(np.asarray(loss.mean(), dtype=pred.data.dtype), (pred,), backward)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    ex = np.exp(x - m)
    return ex / ex.sum(axis=axis, keepdims=True)
