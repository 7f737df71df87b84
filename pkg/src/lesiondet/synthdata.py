"""Deterministic synthetic fundus-like scenes with mini-lesion annotations.

Each scene is a dark circular disk with a radial gradient, procedural
vessel curves and a bright optic-disk blob, plus four kinds of small
elliptical lesions whose blob-to-image area ratios are calibrated per
category. Ground-truth boxes are deliberately loose (box area = context
factor x blob area), which is exactly the regime center-focus assignment
is built for.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Annotation, Box, CATEGORIES
from .pyramid import check_input_size

# mean lesion-to-image area ratio per category 1..4
DEFAULT_AREA_RATIOS = (0.0007244, 0.0005390, 0.0031672, 0.0023976)

_LESION_COLORS = {
    1: (0.30, 0.05, 0.04),  # blot hemorrhage: mid-size dark red, soft edge
    2: (0.35, 0.06, 0.05),  # micro-aneurysm: tiny dark red dot
    3: (0.95, 0.87, 0.35),  # hard exudate: bright yellow, sharp edge
    4: (0.88, 0.86, 0.80),  # cotton-wool spot: pale fuzzy blob
}
_PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    count_ranges: tuple[tuple[int, int], ...] = ((1, 8), (1, 8), (1, 8), (1, 8))
    area_ratios: tuple[float, ...] = DEFAULT_AREA_RATIOS
    box_context_factor: float = 2.0
    seed: int = 0

    def __post_init__(self):
        check_input_size(self.image_size, self.image_size)
        if len(self.count_ranges) != 4 or len(self.area_ratios) != 4:
            raise ValueError("need count range and area ratio for each of the 4 categories")
        if any(not (0 < r < 1) for r in self.area_ratios):
            raise ValueError("area ratios must be in (0, 1)")
        if any(lo < 0 or hi < lo for lo, hi in self.count_ranges):
            raise ValueError("bad lesion count range")
        if self.box_context_factor < 1.0:
            raise ValueError("box_context_factor must be >= 1")

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "count_ranges": [list(cr) for cr in self.count_ranges],
            "area_ratios": list(self.area_ratios),
            "box_context_factor": self.box_context_factor,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(
            image_size=d["image_size"],
            count_ranges=tuple(tuple(cr) for cr in d["count_ranges"]),
            area_ratios=tuple(d["area_ratios"]),
            box_context_factor=d["box_context_factor"],
            seed=d["seed"],
        )


@dataclass
class SceneRecord:
    image_id: str
    image: np.ndarray  # (H,W,3) uint8
    annotations: list[Annotation]


def _stamp_ellipse(canvas, cx, cy, a, b, theta, color, profile):
    """Alpha-blend an ellipse; d is the normalized elliptical distance."""
    h, w, _ = canvas.shape
    reach = max(a, b) * (1.6 if profile == "fuzzy" else 1.1) + 2.0
    x0, x1 = max(0, int(cx - reach)), min(w, int(np.ceil(cx + reach)) + 1)
    y0, y1 = max(0, int(cy - reach)), min(h, int(np.ceil(cy + reach)) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx = (xs + 0.5) - cx
    dy = (ys + 0.5) - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    d = np.sqrt(u * u + v * v)
    if profile == "soft":
        alpha = np.clip(2.0 * (1.0 - d), 0.0, 1.0)
    elif profile == "sharp":
        alpha = np.clip(6.0 * (1.05 - d), 0.0, 1.0)
    else:  # fuzzy
        alpha = np.exp(-(d * d) / 0.45) * (d < 1.6)
    patch = canvas[y0:y1, x0:x1]
    patch *= (1.0 - alpha)[..., None]
    patch += alpha[..., None] * np.asarray(color)


def _render_background(size: int, rng) -> tuple[np.ndarray, float, float, float]:
    canvas = np.full((size, size, 3), 0.02, dtype=np.float64)
    cx = cy = size / 2.0
    radius = 0.47 * size
    ys, xs = np.mgrid[0:size, 0:size]
    r = np.sqrt((xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2) / radius
    disk = r <= 1.0
    shade = np.clip(1.15 - 0.35 * r * r, 0.0, None)
    base = np.array([0.45, 0.17, 0.05])
    canvas[disk] = shade[disk][:, None] * base[None, :]

    # optic disk: bright blob off-center
    ang = rng.uniform(0, 2 * np.pi)
    od_r = rng.uniform(0.35, 0.55) * radius
    odx, ody = cx + od_r * np.cos(ang), cy + od_r * np.sin(ang)
    _stamp_ellipse(canvas, odx, ody, 0.11 * radius, 0.10 * radius, rng.uniform(0, np.pi),
                   (0.95, 0.75, 0.45), "soft")

    # vessels: darkened quadratic curves from the optic disk to the rim
    for _ in range(rng.integers(4, 8)):
        phi = rng.uniform(0, 2 * np.pi)
        end = np.array([cx + 0.95 * radius * np.cos(phi), cy + 0.95 * radius * np.sin(phi)])
        start = np.array([odx, ody])
        mid = (start + end) / 2.0
        perp = np.array([-(end - start)[1], (end - start)[0]])
        norm = np.linalg.norm(perp)
        if norm > 0:
            mid = mid + perp / norm * rng.uniform(-0.25, 0.25) * radius
        width0 = rng.uniform(0.010, 0.018) * size
        for t in np.linspace(0.0, 1.0, 160):
            p = (1 - t) ** 2 * start + 2 * (1 - t) * t * mid + t * t * end
            if (p[0] - cx) ** 2 + (p[1] - cy) ** 2 > (0.97 * radius) ** 2:
                continue
            vw = width0 * (1.0 - 0.55 * t)
            x0, x1 = int(p[0] - vw - 1), int(np.ceil(p[0] + vw + 1)) + 1
            y0, y1 = int(p[1] - vw - 1), int(np.ceil(p[1] + vw + 1)) + 1
            x0, y0 = max(0, x0), max(0, y0)
            x1, y1 = min(size, x1), min(size, y1)
            if x0 >= x1 or y0 >= y1:
                continue
            yy, xx = np.mgrid[y0:y1, x0:x1]
            dd = np.sqrt((xx + 0.5 - p[0]) ** 2 + (yy + 0.5 - p[1]) ** 2)
            fall = np.clip(1.0 - dd / max(vw, 0.5), 0.0, 1.0)
            canvas[y0:y1, x0:x1] *= (1.0 - 0.5 * fall)[..., None]

    canvas += rng.normal(0.0, 0.01, size=canvas.shape)
    np.clip(canvas, 0.0, 1.0, out=canvas)
    return canvas, cx, cy, radius


def _boxes_overlap(b: np.ndarray, others: list[np.ndarray], margin: float) -> bool:
    for o in others:
        if (
            b[0] - margin < o[0] + o[2]
            and o[0] - margin < b[0] + b[2]
            and b[1] - margin < o[1] + o[3]
            and o[1] - margin < b[1] + b[3]
        ):
            return True
    return False


def generate_scene(cfg: SynthConfig, index: int) -> SceneRecord:
    """Render scene ``index``; a pure function of (config, index)."""
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    canvas, cx, cy, radius = _render_background(size, rng)
    image_id = f"{index:06d}"

    counts = [int(rng.integers(lo, hi + 1)) for lo, hi in cfg.count_ranges]
    placed_boxes: list[np.ndarray] = []
    annotations: list[Annotation] = []
    area_img = float(size * size)

    for cat, count in zip(CATEGORIES, counts):
        ratio = cfg.area_ratios[cat - 1]
        for _ in range(count):
            for attempt in range(_PLACEMENT_ATTEMPTS):
                blob_area = ratio * area_img * rng.uniform(0.8, 1.2)
                q = rng.uniform(0.55, 0.95)
                a = np.sqrt(blob_area / (np.pi * q))
                b = a * q
                theta = rng.uniform(0.0, np.pi)
                ex = 2.0 * np.sqrt((a * np.cos(theta)) ** 2 + (b * np.sin(theta)) ** 2)
                ey = 2.0 * np.sqrt((a * np.sin(theta)) ** 2 + (b * np.cos(theta)) ** 2)
                s = np.sqrt(cfg.box_context_factor * blob_area / (ex * ey))
                bw, bh = s * ex, s * ey
                # keep the whole box inside the fundus disk
                reach = np.hypot(bw, bh) / 2.0 + 1.5
                max_r = radius - reach
                if max_r <= 0:
                    continue
                rr = np.sqrt(rng.uniform(0.0, 1.0)) * max_r
                ang = rng.uniform(0.0, 2 * np.pi)
                bx, by = cx + rr * np.cos(ang), cy + rr * np.sin(ang)
                box = np.array([bx - bw / 2.0, by - bh / 2.0, bw, bh])
                if _boxes_overlap(box, placed_boxes, margin=2.0):
                    continue
                placed_boxes.append(box)
                profile = {1: "soft", 2: "soft", 3: "sharp", 4: "fuzzy"}[cat]
                _stamp_ellipse(canvas, bx, by, a, b, theta, _LESION_COLORS[cat], profile)
                annotations.append(Annotation(image_id=image_id, box=Box(*box), category=cat))
                break
            else:
                raise ValueError(
                    f"could not place a category-{cat} lesion after "
                    f"{_PLACEMENT_ATTEMPTS} attempts; lower counts or grow the image"
                )

    img8 = (np.clip(canvas, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return SceneRecord(image_id=image_id, image=img8, annotations=annotations)


def generate_dataset(cfg: SynthConfig, n_images: int) -> list[SceneRecord]:
    return [generate_scene(cfg, i) for i in range(n_images)]


# ---- annotation and dataset I/O ----


def write_annotations(path, annotations: list[Annotation]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for a in annotations:
            rec = {"image": a.image_id, "x": a.box.x, "y": a.box.y,
                   "w": a.box.w, "h": a.box.h, "c": a.category}
            f.write(json.dumps(rec) + "\n")


def read_annotations(path) -> list[Annotation]:
    out: list[Annotation] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                ann = Annotation(
                    image_id=str(rec["image"]),
                    box=Box(rec["x"], rec["y"], rec["w"], rec["h"]),
                    category=int(rec["c"]),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
                raise ValueError(f"{path}:{lineno}: bad annotation record: {e}") from e
            out.append(ann)
    return out


def save_dataset(out_dir, records: list[SceneRecord], cfg: SynthConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        Image.fromarray(rec.image).save(out / f"{rec.image_id}.png")
    write_annotations(out / "annotations.jsonl", [a for r in records for a in r.annotations])
    manifest = {
        "image_ids": [r.image_id for r in records],
        "image_size": cfg.image_size,
        "config": cfg.to_dict(),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)


def load_dataset(data_dir) -> tuple[list[SceneRecord], dict]:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{root}: no manifest.json; not a dataset directory")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    by_image: dict[str, list[Annotation]] = {i: [] for i in manifest["image_ids"]}
    for ann in read_annotations(root / "annotations.jsonl"):
        by_image.setdefault(ann.image_id, []).append(ann)
    records = []
    for image_id in manifest["image_ids"]:
        img = np.asarray(Image.open(root / f"{image_id}.png").convert("RGB"))
        records.append(SceneRecord(image_id=image_id, image=img,
                                   annotations=by_image.get(image_id, [])))
    return records, manifest


def split_dataset(records: list[SceneRecord], ratio: tuple[int, int] = (4, 1),
                  seed: int = 0) -> tuple[list[SceneRecord], list[SceneRecord]]:
    """Shuffled split by image; |train|:|val| within one image of the ratio."""
    t, v = ratio
    if t <= 0 or v <= 0:
        raise ValueError("split ratio parts must be positive")
    n = len(records)
    if n < t + v:
        raise ValueError(f"need at least {t + v} images for a {t}:{v} split, got {n}")
    order = np.random.default_rng([seed, 999]).permutation(n)
    n_train = int(round(n * t / (t + v)))
    train_idx = set(order[:n_train].tolist())
    train = [records[i] for i in range(n) if i in train_idx]
    val = [records[i] for i in range(n) if i not in train_idx]
    return train, val
