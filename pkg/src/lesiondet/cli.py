"""Command-line entry point: data generation, training, evaluation,
plotting, the architecture/proposal-rule comparison grid, and the kernel
benchmark. Every run writes a run_manifest.json next to its outputs.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .benchmark import run_benchmark
from .config import build_train_config, merge_options, parse_config_file
from .evaluation import (
    DEFAULT_CURVE_THRESHOLDS,
    EvalReport,
    MatchCriterion,
    emit_report,
    evaluate_dataset,
    format_sensitivity,
    read_reports_json,
    write_recall_svg,
    write_report_csv,
    write_report_json,
)
from .geometry import CATEGORIES, CATEGORY_NAMES
from .head import write_detections
from .model import load_detector, save_detector
from .nn.checkpoint import file_sha256
from .synthdata import (
    SynthConfig,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .training import to_chw_float, train, write_metrics_csv

TREND_CATEGORIES = (1, 2)  # smallest area-ratio categories
ARCH_ORDER = ("plain", "fpn", "lfpn")

# desk-scale defaults for the comparison grid (the library defaults are
# slow on CPU at 250 images; all of these remain overridable)
COMPARE_DEFAULTS = {
    "pyramid_channels": "32",
    "epochs": "24",
    "base_lr": "0.002",
    "post_nms_total": "200",
    "pre_nms_per_level": "400",
}


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


def write_run_manifest(out_dir: Path, command: str, args: dict, config: dict,
                       inputs: list, outputs: list, started: float,
                       extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "args": {k: v for k, v in args.items() if k != "func"},
        "config": config,
        "seed": config.get("seed"),
        "started": _iso(started),
        "finished": _iso(time.time()),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
    }
    if extra:
        manifest.update(extra)
    with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)


def _iso(t: float) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(t)) + "Z"


def _parse_counts(text: str) -> tuple[tuple[int, int], ...]:
    parts = text.split(",")
    if len(parts) != 4:
        raise ValueError("--counts needs 4 comma-separated lo:hi ranges")
    out = []
    for p in parts:
        lo, _, hi = p.partition(":")
        out.append((int(lo), int(hi or lo)))
    return tuple(out)


def _collect_set_options(pairs: list[str]) -> dict[str, str]:
    options = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        options[k.strip()] = v.strip()
    return options


def _split_records(records, which: str, split_seed: int):
    if which == "all":
        return records
    train_recs, val_recs = split_dataset(records, (4, 1), seed=split_seed)
    return train_recs if which == "train" else val_recs


# ---- subcommands ----


def cmd_gen_data(args) -> int:
    started = time.time()
    cfg = SynthConfig(
        image_size=args.size,
        seed=args.seed,
        area_ratios=tuple(float(x) for x in args.ratios.split(",")) if args.ratios
        else SynthConfig().area_ratios,
        box_context_factor=args.context_factor,
        count_ranges=_parse_counts(args.counts) if args.counts
        else SynthConfig().count_ranges,
    )
    out = Path(args.out)
    records = generate_dataset(cfg, args.images)
    save_dataset(out, records, cfg)
    n_ann = sum(len(r.annotations) for r in records)
    _info(f"wrote {len(records)} images ({n_ann} annotations) to {out}")
    write_run_manifest(
        out, "gen-data", vars(args), cfg.to_dict(),
        inputs=[], outputs=[out / "annotations.jsonl", out / "manifest.json"],
        started=started,
    )
    return 0


def _resolve_train_options(args) -> dict[str, str]:
    file_opts = parse_config_file(args.config) if args.config else {}
    cli_opts: dict[str, str] = {}
    if getattr(args, "arch", None):
        cli_opts["arch"] = args.arch
    if getattr(args, "cf_proposal", None):
        cli_opts["cf_proposal"] = args.cf_proposal
    if getattr(args, "epochs", None) is not None:
        cli_opts["epochs"] = str(args.epochs)
    if getattr(args, "seed", None) is not None:
        cli_opts["seed"] = str(args.seed)
    cli_opts.update(_collect_set_options(getattr(args, "set", None)))
    return merge_options(file_opts, cli_opts)


def cmd_train(args) -> int:
    started = time.time()
    records, _ = load_dataset(args.data)
    subset = _split_records(records, args.split, args.split_seed)
    if not subset:
        raise ValueError(f"no images in split {args.split!r} of {args.data}")
    options = _resolve_train_options(args)
    cfg = build_train_config(options)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _info(
        f"training arch={cfg.detector.pyramid.mode} cf={cfg.detector.assignment.cf_enabled} "
        f"on {len(subset)} images for {cfg.epochs} epochs"
    )
    result = train(
        subset, cfg,
        log=lambda row: _info(
            "epoch {epoch}: total {total:.4f} (rpn {rpn_cls:.4f}/{rpn_reg:.4f}, "
            "head {head_cls:.4f}/{head_reg:.4f})".format(**row)
        ),
    )
    ckpt = out / "checkpoint.npz"
    save_detector(ckpt, result.model, extra={"train_config": cfg.to_dict()})
    write_metrics_csv(out / "metrics.csv", result.metrics)
    write_run_manifest(
        out, "train", vars(args),
        cfg.to_dict(), inputs=[args.data],
        outputs=[ckpt, out / "metrics.csv"], started=started,
        extra={"checkpoint_sha256": file_sha256(ckpt)},
    )
    _info(f"checkpoint written to {ckpt}")
    return 0


def _evaluate_model(detector, records, criterion: MatchCriterion, method: str,
                    config_echo: dict) -> tuple[EvalReport, dict]:
    per_image = []
    detections_by_image = {}
    for rec in records:
        dets = detector.forward_infer(to_chw_float(rec.image))
        detections_by_image[rec.image_id] = dets
        per_image.append((dets, rec.annotations))
    report = evaluate_dataset(per_image, criterion, DEFAULT_CURVE_THRESHOLDS,
                              method=method, config_echo=config_echo)
    return report, detections_by_image


def cmd_eval(args) -> int:
    started = time.time()
    detector, ckpt_manifest = load_detector(args.model)
    detector.cfg = replace(
        detector.cfg,
        head=replace(detector.cfg.head, score_threshold=args.score_thresh,
                     max_detections=args.max_dets),
    )
    records, _ = load_dataset(args.data)
    subset = _split_records(records, args.split, args.split_seed)
    criterion = MatchCriterion(kind=args.criterion)
    method = args.method or ckpt_manifest.get("pyramid", {}).get("mode", "model")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report, dets = _evaluate_model(
        detector, subset, criterion, method,
        config_echo={"checkpoint": str(args.model), "criterion": criterion.to_dict()},
    )
    write_detections(out / "detections.jsonl", dets)
    emit_report(report, out)
    for cat in CATEGORIES:
        stats = report.per_category[cat]
        _info(f"{CATEGORY_NAMES[cat]}: sensitivity "
              f"{format_sensitivity(stats['sensitivity'])} ({stats['tp']}/{stats['gt']})")
    _info(f"overall: {format_sensitivity(report.overall_sensitivity)}")
    write_run_manifest(
        out, "eval", vars(args),
        {"criterion": criterion.to_dict(), "seed": args.split_seed},
        inputs=[args.model, args.data],
        outputs=[out / "detections.jsonl", out / "report.json", out / "report.csv",
                 out / "recall_curve.svg"],
        started=started, extra={"checkpoint_sha256": file_sha256(args.model)},
    )
    return 0


def cmd_plot(args) -> int:
    reports = []
    for path in args.reports:
        reports.extend(read_reports_json(path))
    write_recall_svg(args.out, reports)
    _info(f"wrote {args.out} with {len(reports)} curve(s)")
    return 0


def _average_reports(reports: list[EvalReport], method: str) -> EvalReport:
    per_category = {}
    for cat in CATEGORIES:
        stats = [r.per_category[cat] for r in reports]
        gt = sum(s["gt"] for s in stats)
        tp = sum(s["tp"] for s in stats)
        per_category[cat] = {
            "name": CATEGORY_NAMES[cat],
            "gt": gt,
            "tp": tp,
            "fn": gt - tp,
            "detections": sum(s["detections"] for s in stats),
            "sensitivity": (tp / gt) if gt else None,
        }
    gt_all = sum(v["gt"] for v in per_category.values())
    tp_all = sum(v["tp"] for v in per_category.values())
    confusion: dict[str, int] = {}
    for r in reports:
        for k, v in r.confusion.items():
            confusion[k] = confusion.get(k, 0) + v
    curve = np.mean([r.curve_recall for r in reports], axis=0).tolist()
    return EvalReport(
        method=method,
        criterion=reports[0].criterion,
        per_category=per_category,
        overall_sensitivity=tp_all / gt_all if gt_all else None,
        curve_thresholds=reports[0].curve_thresholds,
        curve_recall=curve,
        confusion=confusion,
        n_images=reports[0].n_images,
        n_detections=sum(r.n_detections for r in reports),
        false_positives=sum(r.false_positives for r in reports),
        config_echo={"seeds": [r.config_echo.get("seed") for r in reports]},
    )


def check_trend(by_method: dict[str, EvalReport]) -> list[str]:
    """Expected ordering lfpn >= fpn >= plain on the two smallest categories."""
    violations = []
    for suffix in ("", "+cf"):
        for cat in TREND_CATEGORIES:
            sens = {}
            for arch in ARCH_ORDER:
                rep = by_method.get(arch + suffix)
                if rep is None:
                    continue
                v = rep.per_category[cat]["sensitivity"]
                sens[arch] = -1.0 if v is None else v
            for lo, hi in (("plain", "fpn"), ("fpn", "lfpn")):
                if lo in sens and hi in sens and sens[hi] < sens[lo] - 1e-9:
                    violations.append(
                        f"category {cat} ({CATEGORY_NAMES[cat]}), cf={'on' if suffix else 'off'}: "
                        f"{hi}={sens[hi]:.4f} < {lo}={sens[lo]:.4f}"
                    )
    return violations


def high_iou_retention(report: EvalReport, lo: float = 0.5, hi: float = 0.6) -> float | None:
    """recall(hi)/recall(lo) from the report's curve; None when undefined."""
    try:
        i_lo = report.curve_thresholds.index(lo)
        i_hi = report.curve_thresholds.index(hi)
    except ValueError:
        return None
    r_lo = report.curve_recall[i_lo]
    if r_lo == 0:
        return None
    return report.curve_recall[i_hi] / r_lo


def cmd_compare(args) -> int:
    started = time.time()
    records, _ = load_dataset(args.data)
    train_recs, val_recs = split_dataset(records, (4, 1), seed=args.split_seed)
    _info(f"split: {len(train_recs)} train / {len(val_recs)} validation images")
    seeds = [int(s) for s in args.seeds.split(",")]
    file_opts = parse_config_file(args.config) if args.config else {}
    base_opts = merge_options(COMPARE_DEFAULTS, file_opts,
                              _collect_set_options(args.set))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    by_method: dict[str, EvalReport] = {}
    for arch in ARCH_ORDER:
        for cf in ("off", "on"):
            method = arch + ("+cf" if cf == "on" else "")
            seed_reports = []
            for seed in seeds:
                opts = merge_options(base_opts, {"arch": arch, "cf_proposal": cf,
                                                 "seed": str(seed)})
                cfg = build_train_config(opts)
                t0 = time.time()
                result = train(train_recs, cfg)
                report, _ = _evaluate_model(
                    result.model, val_recs, MatchCriterion(kind="cf"), method,
                    config_echo={"seed": seed, "arch": arch, "cf_proposal": cf},
                )
                seed_reports.append(report)
                _info(f"{method} seed {seed}: overall "
                      f"{format_sensitivity(report.overall_sensitivity)} "
                      f"({time.time() - t0:.1f}s)")
            by_method[method] = _average_reports(seed_reports, method)

    reports = [by_method[m] for m in
               [a + s for a in ARCH_ORDER for s in ("", "+cf")]]
    write_report_csv(out / "comparison.csv", reports)
    write_report_json(out / "reports.json", reports)
    write_recall_svg(out / "recall_curves.svg", reports)
    write_recall_svg(out / "recall_lfpn_pair.svg", [by_method["lfpn"], by_method["lfpn+cf"]])

    violations = check_trend(by_method)
    retention = high_iou_retention(by_method["lfpn+cf"])
    trend = {
        "expected": "lfpn >= fpn >= plain on categories 1 and 2",
        "violations": violations,
        "lfpn_cf_recall_retention_0.5_to_0.6": retention,
        "retention_within_10pct": None if retention is None else bool(retention >= 0.9),
    }
    with open(out / "trend.json", "w", encoding="utf-8") as f:
        json.dump(trend, f, indent=2)
    if violations:
        _info("TREND VIOLATIONS (reported, not fatal):")
        for v in violations:
            _info(f"  - {v}")
    else:
        _info("trend check passed: lfpn >= fpn >= plain on categories 1 and 2")
    if retention is not None:
        _info(f"lfpn+cf recall retention 0.5->0.6: {retention:.3f} "
              f"({'within' if retention >= 0.9 else 'outside'} 10%)")
    write_run_manifest(
        out, "compare", vars(args),
        dict(base_opts, seeds=args.seeds), inputs=[args.data],
        outputs=[out / "comparison.csv", out / "reports.json",
                 out / "recall_curves.svg", out / "recall_lfpn_pair.svg",
                 out / "trend.json"],
        started=started,
    )
    return 0


def cmd_bench(args) -> int:
    run_benchmark()
    return 0


# ---- parser ----


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lesiondet",
        description="Mini-lesion detector: synthetic data, training, evaluation.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--images", type=int, required=True)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ratios", help="4 comma-separated lesion area ratios")
    g.add_argument("--context-factor", type=float, default=2.0,
                   help="ground-truth box area = factor x blob area")
    g.add_argument("--counts", help="per-category lesion counts, e.g. 1:8,1:8,1:8,1:8")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--arch", choices=["plain", "fpn", "lfpn"])
    t.add_argument("--cf-proposal", choices=["on", "off"])
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--split", choices=["all", "train", "val"], default="all")
    t.add_argument("--split-seed", type=int, default=0)
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--criterion", choices=["cf", "iou"], default="cf")
    e.add_argument("--max-dets", type=int, default=100)
    e.add_argument("--score-thresh", type=float, default=0.1)
    e.add_argument("--split", choices=["all", "train", "val"], default="all")
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--method", help="label used in reports")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="overlay recall-vs-IoU curves from reports")
    pl.add_argument("--reports", nargs="+", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    c = sub.add_parser("compare", help="run the 2x3 architecture/proposal grid")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seeds", default="0,1,2")
    c.add_argument("--split-seed", type=int, default=0)
    c.add_argument("--config")
    c.add_argument("--set", action="append", metavar="KEY=VALUE")
    c.set_defaults(func=cmd_compare)

    b = sub.add_parser("bench", help="benchmark numba kernels vs the numpy fallback")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as e:
        _err(str(e))
        return 2


if __name__ == "__main__":
    sys.exit(main())
