"""Evaluation metrics and the retrieval-to-box comparison protocol."""

from __future__ import annotations

import json

from .head import BBox

AREA_SMALL = 300 * 300
AREA_LARGE = 512 * 512
BUCKETS = ("small", "medium", "large")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union with continuous rectangle areas."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def miou(ious: list[float]) -> float:
    if not ious:
        raise ValueError("mIoU undefined for an empty sample set")
    return sum(ious) / len(ious)


def acc_at_t(ious: list[float], t: float) -> float:
    """Fraction of samples with IoU strictly greater than t."""
    if not 0 < t < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    if not ious:
        raise ValueError("accuracy undefined for an empty sample set")
    return sum(1 for v in ious if v > t) / len(ious)


def retrieval_to_bbox(center: tuple[float, float], gt: BBox, image_hw: tuple[int, int]) -> BBox:
    """Map a retrieval-style matched-region center to an object box.

    The predicted box copies the ground-truth width/height, is centered on
    the matched center, and is clamped to the image bounds.
    """
    cx, cy = center
    box = BBox(
        cx - gt.width / 2.0, cy - gt.height / 2.0, cx + gt.width / 2.0, cy + gt.height / 2.0
    )
    return box.clamped(image_hw[1], image_hw[0])


def scale_bucket(gt: BBox, small: float = AREA_SMALL, large: float = AREA_LARGE) -> str:
    """Region-scale band by box area: < small^0.5-side, in between, or beyond large."""
    if gt.area < small:
        return "small"
    if gt.area > large:
        return "large"
    return "medium"


def build_report(ious: list[float], buckets: list[str]) -> dict:
    """Overall + per-scale-bucket mIoU / acc@0.25 / acc@0.5."""
    if len(ious) != len(buckets):
        raise ValueError("ious and buckets must align")
    report = {
        "miou": miou(ious),
        "acc25": acc_at_t(ious, 0.25),
        "acc50": acc_at_t(ious, 0.5),
        "per_bucket": {},
    }
    for name in BUCKETS:
        sub = [v for v, b in zip(ious, buckets) if b == name]
        if sub:
            report["per_bucket"][name] = {
                "count": len(sub),
                "miou": miou(sub),
                "acc25": acc_at_t(sub, 0.25),
                "acc50": acc_at_t(sub, 0.5),
            }
        else:
            report["per_bucket"][name] = {"count": 0, "miou": None, "acc25": None, "acc50": None}
    return report


def format_report(report: dict) -> str:
    """Plain-text table for logs and the CLI."""
    rows = [("overall", report["miou"], report["acc25"], report["acc50"], None)]
    for name in BUCKETS:
        b = report["per_bucket"][name]
        rows.append((name, b["miou"], b["acc25"], b["acc50"], b["count"]))
    lines = [f"{'split':<10} {'mIoU':>8} {'acc@0.25':>10} {'acc@0.5':>10} {'n':>6}"]
    for name, m, a25, a50, n in rows:
        fmt = lambda v: "   --- " if v is None else f"{v:7.4f}"
        lines.append(f"{name:<10} {fmt(m):>8} {fmt(a25):>10} {fmt(a50):>10} {'' if n is None else n:>6}")
    return "\n".join(lines)


def write_report(report: dict, json_path, text_path=None) -> None:
    with open(json_path, "w") as f:
        json.dump(report, f, indent=2)
    if text_path is not None:
        with open(text_path, "w") as f:
            f.write(format_report(report) + "\n")
