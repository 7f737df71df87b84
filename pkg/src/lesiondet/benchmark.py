"""Benchmark the numba kernels against the pure-numpy fallback."""
from __future__ import annotations

import time

import numpy as np

from . import kernels


def _time(fn, repeats: int = 5) -> float:
    fn()  # warm-up (JIT compile on the numba path)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(rng):
    x = rng.standard_normal((32, 128, 128)).astype(np.float32)
    cols = kernels.numpy_impl.im2col(x, 3, 1, 1)
    feat = rng.standard_normal((32, 128, 128)).astype(np.float32)
    rois = np.stack(
        [
            rng.uniform(0, 100, 128),
            rng.uniform(0, 100, 128),
            np.zeros(128),
            np.zeros(128),
        ],
        axis=1,
    )
    rois[:, 2] = rois[:, 0] + rng.uniform(4, 28, 128)
    rois[:, 3] = rois[:, 1] + rng.uniform(4, 28, 128)
    dout = rng.standard_normal((128, 32, 7, 7)).astype(np.float32)
    boxes_a = np.concatenate(
        [rng.uniform(0, 120, (20000, 2)), rng.uniform(2, 30, (20000, 2))], axis=1
    )
    boxes_b = boxes_a[:20].copy()
    nms_scores = rng.uniform(0, 1, 4000)
    nms_boxes = boxes_a[:4000]
    order = np.argsort(-nms_scores, kind="stable").astype(np.int64)
    return {
        "im2col 32x128x128 k3": lambda k: k.im2col(x, 3, 1, 1),
        "col2im 32x128x128 k3": lambda k: k.col2im(cols, 32, 128, 128, 3, 1, 1),
        "roi_align fwd 128 rois": lambda k: k.roi_align_forward(feat, rois, 7, 2),
        "roi_align bwd 128 rois": lambda k: k.roi_align_backward(dout, 32, 128, 128, rois, 7, 2),
        "pairwise_iou 20000x20": lambda k: k.pairwise_iou(boxes_a, boxes_b),
        "nms 4000 boxes": lambda k: k.nms_keep(nms_boxes, order, 0.5),
    }


def run_benchmark(out=print) -> list[dict]:
    rng = np.random.default_rng(7)
    cases = _cases(rng)
    rows = []
    out(f"kernel backends available: {sorted(['numpy'] + (['numba'] if kernels.HAVE_NUMBA else []))}")
    out(f"{'kernel':<28}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, fn in cases.items():
        t_np = _time(lambda: fn(kernels.numpy_impl)) * 1e3
        if kernels.HAVE_NUMBA:
            t_nb = _time(lambda: fn(kernels.numba_impl)) * 1e3
            speed = t_np / t_nb if t_nb > 0 else float("inf")
            out(f"{name:<28}{t_np:>12.3f}{t_nb:>12.3f}{speed:>9.2f}x")
            rows.append({"kernel": name, "numpy_ms": t_np, "numba_ms": t_nb, "speedup": speed})
        else:
            out(f"{name:<28}{t_np:>12.3f}{'n/a':>12}{'n/a':>10}")
            rows.append({"kernel": name, "numpy_ms": t_np, "numba_ms": None, "speedup": None})
    return rows
