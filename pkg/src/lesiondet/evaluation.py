"""Matching detections to ground truth and sensitivity reporting.

Two match criteria: plain IoU at a threshold, and the center-focus rule
that also accepts a detection whose IoU clears a small floor while its box
contains the ground-truth center (a high-IoU detection is accepted either
way, so center-focus matches are always a superset of IoU@0.5 matches).
Sensitivity (TP/GT) is the headline metric; false positives are counted
but never scored, and cross-category confusion is summarized separately.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Annotation, Box, CATEGORIES, CATEGORY_NAMES, box_center, contains_point, iou
from .head import Detection

DEFAULT_CURVE_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass(frozen=True)
class MatchCriterion:
    kind: str = "cf"
    iou_threshold: float | None = None  # defaults: 0.1 for cf, 0.5 for iou
    plain_accept_iou: float = 0.5  # cf also accepts plain high-IoU matches

    def __post_init__(self):
        if self.kind not in ("cf", "iou"):
            raise ValueError(f"criterion kind must be 'cf' or 'iou', got {self.kind!r}")
        thr = self.threshold
        if not 0 <= thr <= 1:
            raise ValueError(f"iou threshold must be in [0,1], got {thr}")

    @property
    def threshold(self) -> float:
        if self.iou_threshold is not None:
            return self.iou_threshold
        return 0.1 if self.kind == "cf" else 0.5

    def accepts(self, det_box: Box, gt_box: Box) -> bool:
        v = iou(det_box, gt_box)
        if self.kind == "iou":
            return v >= self.threshold
        if v >= self.plain_accept_iou:
            return True
        return v > self.threshold and contains_point(det_box, box_center(gt_box))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "iou_threshold": self.threshold,
                "plain_accept_iou": self.plain_accept_iou}


@dataclass
class MatchResult:
    gt_to_det: np.ndarray  # per-gt detection index or -1
    det_to_gt: np.ndarray  # per-detection gt index or -1

    @property
    def n_matched(self) -> int:
        return int((self.gt_to_det >= 0).sum())


def _validate_categories(detections: list[Detection], gts: list[Annotation]) -> None:
    for d in detections:
        if d.category not in CATEGORIES:
            raise ValueError(f"detection category {d.category} outside {CATEGORIES}")
    for g in gts:
        if g.category not in CATEGORIES:
            raise ValueError(f"ground-truth category {g.category} outside {CATEGORIES}")


def match(detections: list[Detection], gts: list[Annotation],
          criterion: MatchCriterion) -> MatchResult:
    """Greedy one-to-one matching in descending detection score.

    A detection claims the unmatched same-category gt with the highest IoU
    among those passing the criterion; IoU ties go to the lowest gt index.
    """
    _validate_categories(detections, gts)
    gt_to_det = np.full(len(gts), -1, dtype=np.int64)
    det_to_gt = np.full(len(detections), -1, dtype=np.int64)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    for di in order:
        det = detections[di]
        best_gt = -1
        best_iou = -1.0
        for gi, gt in enumerate(gts):
            if gt_to_det[gi] >= 0 or gt.category != det.category:
                continue
            if not criterion.accepts(det.box, gt.box):
                continue
            v = iou(det.box, gt.box)
            if v > best_iou:
                best_iou = v
                best_gt = gi
        if best_gt >= 0:
            gt_to_det[best_gt] = di
            det_to_gt[di] = best_gt
    return MatchResult(gt_to_det=gt_to_det, det_to_gt=det_to_gt)


def sensitivity(result: MatchResult, gts: list[Annotation]) -> dict:
    """Per-category TP/GT plus the micro average; None when a category has no gt."""
    per_cat: dict[int, float | None] = {}
    tp_total = 0
    gt_total = 0
    for cat in CATEGORIES:
        idx = [i for i, g in enumerate(gts) if g.category == cat]
        if not idx:
            per_cat[cat] = None
            continue
        tp = int((result.gt_to_det[idx] >= 0).sum())
        per_cat[cat] = tp / len(idx)
        tp_total += tp
        gt_total += len(idx)
    overall = tp_total / gt_total if gt_total else None
    return {"per_category": per_cat, "overall": overall}


def recall_vs_iou(detections: list[Detection], gts: list[Annotation],
                  thresholds=DEFAULT_CURVE_THRESHOLDS) -> list[tuple[float, float]]:
    """Recall at each plain-IoU threshold, re-matching per point."""
    out = []
    for thr in thresholds:
        res = match(detections, gts, MatchCriterion(kind="iou", iou_threshold=thr))
        recall = res.n_matched / len(gts) if gts else 0.0
        out.append((float(thr), recall))
    return out


@dataclass
class EvalReport:
    method: str
    criterion: dict
    per_category: dict[int, dict]
    overall_sensitivity: float | None
    curve_thresholds: list[float]
    curve_recall: list[float]
    confusion: dict[str, int]
    n_images: int
    n_detections: int
    false_positives: int
    config_echo: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "criterion": self.criterion,
            "per_category": {
                str(cat): dict(stats) for cat, stats in self.per_category.items()
            },
            "overall_sensitivity": self.overall_sensitivity,
            "curve": {"thresholds": self.curve_thresholds, "recall": self.curve_recall},
            "confusion": self.confusion,
            "n_images": self.n_images,
            "n_detections": self.n_detections,
            "false_positives": self.false_positives,
            "config_echo": self.config_echo,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            method=d["method"],
            criterion=d["criterion"],
            per_category={int(c): dict(v) for c, v in d["per_category"].items()},
            overall_sensitivity=d["overall_sensitivity"],
            curve_thresholds=list(d["curve"]["thresholds"]),
            curve_recall=list(d["curve"]["recall"]),
            confusion=dict(d["confusion"]),
            n_images=d["n_images"],
            n_detections=d["n_detections"],
            false_positives=d["false_positives"],
            config_echo=d.get("config_echo", {}),
        )


def evaluate_dataset(
    per_image: list[tuple[list[Detection], list[Annotation]]],
    criterion: MatchCriterion,
    curve_thresholds=DEFAULT_CURVE_THRESHOLDS,
    method: str = "model",
    config_echo: dict | None = None,
) -> EvalReport:
    """Aggregate matching, sensitivity, confusion and the recall curve."""
    tp = {c: 0 for c in CATEGORIES}
    gt_n = {c: 0 for c in CATEGORIES}
    det_n = {c: 0 for c in CATEGORIES}
    confusion: dict[str, int] = {}
    false_pos = 0
    curve_tp = np.zeros(len(curve_thresholds), dtype=np.int64)
    gt_total = 0

    for dets, gts in per_image:
        res = match(dets, gts, criterion)
        for cat in CATEGORIES:
            idx = [i for i, g in enumerate(gts) if g.category == cat]
            gt_n[cat] += len(idx)
            tp[cat] += int((res.gt_to_det[idx] >= 0).sum())
            det_n[cat] += sum(1 for d in dets if d.category == cat)
        false_pos += int((res.det_to_gt < 0).sum())
        _accumulate_confusion(dets, gts, res, criterion, confusion)
        gt_total += len(gts)
        for k, thr in enumerate(curve_thresholds):
            r = match(dets, gts, MatchCriterion(kind="iou", iou_threshold=thr))
            curve_tp[k] += r.n_matched

    per_category = {}
    tp_total = 0
    gt_sum = 0
    for cat in CATEGORIES:
        sens = tp[cat] / gt_n[cat] if gt_n[cat] else None
        per_category[cat] = {
            "name": CATEGORY_NAMES[cat],
            "gt": gt_n[cat],
            "tp": tp[cat],
            "fn": gt_n[cat] - tp[cat],
            "detections": det_n[cat],
            "sensitivity": sens,
        }
        tp_total += tp[cat]
        gt_sum += gt_n[cat]
    return EvalReport(
        method=method,
        criterion=criterion.to_dict(),
        per_category=per_category,
        overall_sensitivity=tp_total / gt_sum if gt_sum else None,
        curve_thresholds=[float(t) for t in curve_thresholds],
        curve_recall=(curve_tp / gt_total).tolist() if gt_total else [0.0] * len(curve_thresholds),
        confusion=confusion,
        n_images=len(per_image),
        n_detections=int(sum(len(d) for d, _ in per_image)),
        false_positives=false_pos,
        config_echo=config_echo or {},
    )


def _accumulate_confusion(dets, gts, res: MatchResult, criterion: MatchCriterion,
                          confusion: dict[str, int]) -> None:
    # unmatched detections that would have matched a gt of another category:
    # classifier confusion rather than localization failure
    free_gts = [i for i in range(len(gts)) if res.gt_to_det[i] < 0]
    for di in np.flatnonzero(res.det_to_gt < 0):
        det = dets[di]
        best = None
        best_iou = -1.0
        for gi in free_gts:
            gt = gts[gi]
            if gt.category == det.category:
                continue
            if criterion.accepts(det.box, gt.box):
                v = iou(det.box, gt.box)
                if v > best_iou:
                    best_iou = v
                    best = gi
        if best is not None:
            key = f"{det.category}->{gts[best].category}"
            confusion[key] = confusion.get(key, 0) + 1


# ---- report emission ----


def format_sensitivity(v: float | None) -> str:
    return "n/a" if v is None else f"{100.0 * v:.2f}%"


def emit_report(reports, out_dir, stem: str = "report") -> dict[str, str]:
    """Write the CSV table, machine-readable JSON and recall-curve SVG.

    Accepts one report or a list (one CSV row / polyline per report).
    Returns the written paths keyed by format.
    """
    from pathlib import Path

    if isinstance(reports, EvalReport):
        reports = [reports]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out / f"{stem}.csv",
        "json": out / f"{stem}.json",
        "svg": out / "recall_curve.svg",
    }
    write_report_csv(paths["csv"], reports)
    write_report_json(paths["json"], reports)
    write_recall_svg(paths["svg"], reports)
    return {k: str(p) for k, p in paths.items()}


def write_report_csv(path, reports: list[EvalReport]) -> None:
    cols = [CATEGORY_NAMES[c] for c in CATEGORIES]
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write("method," + ",".join(cols) + ",overall\n")
            for r in reports:
                cells = [format_sensitivity(r.per_category[c]["sensitivity"]) for c in CATEGORIES]
                f.write(f"{r.method}," + ",".join(cells)
                        + f",{format_sensitivity(r.overall_sensitivity)}\n")
    except OSError as e:
        raise OSError(f"cannot write report CSV to {path}: {e}") from e


def write_report_json(path, reports: list[EvalReport]) -> None:
    payload = [r.to_dict() for r in reports]
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload[0] if len(payload) == 1 else payload, f, indent=2)
    except OSError as e:
        raise OSError(f"cannot write report JSON to {path}: {e}") from e


def read_reports_json(path) -> list[EvalReport]:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    if isinstance(payload, dict):
        payload = [payload]
    return [EvalReport.from_dict(d) for d in payload]


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def write_recall_svg(path, reports: list[EvalReport]) -> None:
    """Overlayed recall-vs-IoU polylines with axes and a legend."""
    if not reports:
        raise ValueError("no reports to plot")
    grid = reports[0].curve_thresholds
    for r in reports[1:]:
        if r.curve_thresholds != grid:
            raise ValueError(
                f"threshold grids differ across reports: {grid} vs {r.curve_thresholds}"
            )
    wpx, hpx = 640, 460
    ml, mr, mt, mb = 60, 20, 20, 50
    plot_w, plot_h = wpx - ml - mr, hpx - mt - mb
    x_lo, x_hi = min(grid), max(grid)
    span = (x_hi - x_lo) or 1.0

    def sx(t):
        return ml + (t - x_lo) / span * plot_w

    def sy(v):
        return mt + (1.0 - v) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{wpx}" height="{hpx}" '
        f'viewBox="0 0 {wpx} {hpx}">',
        f'<rect width="{wpx}" height="{hpx}" fill="white"/>',
    ]
    for k in range(11):
        v = k / 10.0
        y = sy(v)
        parts.append(
            f'<line x1="{ml}" y1="{y:.1f}" x2="{ml + plot_w}" y2="{y:.1f}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{ml - 8}" y="{y + 4:.1f}" text-anchor="end" font-size="11">{v:.1f}</text>'
        )
    for t in grid:
        x = sx(t)
        parts.append(
            f'<text x="{x:.1f}" y="{mt + plot_h + 18}" text-anchor="middle" '
            f'font-size="11">{t:g}</text>'
        )
    parts.append(
        f'<rect x="{ml}" y="{mt}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="#333333"/>'
    )
    parts.append(
        f'<text x="{ml + plot_w / 2}" y="{hpx - 12}" text-anchor="middle" '
        f'font-size="13">IoU threshold</text>'
    )
    parts.append(
        f'<text x="16" y="{mt + plot_h / 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {mt + plot_h / 2})">recall</text>'
    )
    for i, r in enumerate(reports):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts = " ".join(f"{sx(t):.1f},{sy(v):.1f}" for t, v in zip(grid, r.curve_recall))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        ly = mt + 16 + 16 * i
        parts.append(
            f'<line x1="{ml + plot_w - 150}" y1="{ly}" x2="{ml + plot_w - 120}" y2="{ly}" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{ml + plot_w - 114}" y="{ly + 4}" font-size="12">{r.method}</text>'
        )
    parts.append("</svg>")
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(parts) + "\n")
    except OSError as e:
        raise OSError(f"cannot write SVG to {path}: {e}") from e
