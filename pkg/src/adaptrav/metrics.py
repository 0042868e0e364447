"""Class discretization, gap filling, region masks and mean-IoU evaluation.

Continuous costs map to three classes with half-open boundaries:
[0, 2.5) low, [2.5, 7.5) medium, [7.5, 10] high; missing values are
UNKNOWN. mIoU averages per-class IoU over the classes present in the
ground truth; predicted UNKNOWN pixels count against the union only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOW = 0
MEDIUM = 1
HIGH = 2
UNKNOWN = 255
CLASS_NAMES = {LOW: "low", MEDIUM: "medium", HIGH: "high"}

THRESH_LOW_MED = 2.5
THRESH_MED_HIGH = 7.5


def discretize(cost):
    """Continuous cost image -> class mask (uint8), NaN -> UNKNOWN."""
    c = np.asarray(cost, dtype=np.float64)
    out = np.full(c.shape, UNKNOWN, dtype=np.uint8)
    known = np.isfinite(c)
    out[known & (c < THRESH_LOW_MED)] = LOW
    out[known & (c >= THRESH_LOW_MED) & (c < THRESH_MED_HIGH)] = MEDIUM
    out[known & (c >= THRESH_MED_HIGH)] = HIGH
    return out


def _axis_fill(vals, known):
    """Per-row linear interpolation between nearest known columns.

    Returns (filled, ok) where ok marks pixels with known values on both
    sides along this axis.
    """
    n, m = vals.shape
    col = np.arange(m)
    left = np.where(known, col[None, :], -1)
    left = np.maximum.accumulate(left, axis=1)
    right = np.where(known, col[None, :], m)
    right = np.minimum.accumulate(right[:, ::-1], axis=1)[:, ::-1]
    ok = (left >= 0) & (right < m)
    li = np.clip(left, 0, m - 1)
    ri = np.clip(right, 0, m - 1)
    rows = np.arange(n)[:, None]
    lv = vals[rows, li]
    rv = vals[rows, ri]
    span = np.maximum(ri - li, 1)
    w = (ri - col[None, :]) / span
    filled = w * lv + (1.0 - w) * rv
    return np.where(known, vals, filled), ok


def fill_lidar_gaps(cost):
    """Fill unknown pixels interior to the known hull by per-axis bilinear
    interpolation (average of the horizontal and vertical interpolants);
    pixels with no straddling known pixels on either axis stay unknown."""
    c = np.asarray(cost, dtype=np.float64)
    known = np.isfinite(c)
    if known.sum() < 4:
        return c.copy()
    safe = np.where(known, c, 0.0)
    h_fill, h_ok = _axis_fill(safe, known)
    v_fill_t, v_ok_t = _axis_fill(safe.T, known.T)
    v_fill, v_ok = v_fill_t.T, v_ok_t.T
    num = np.where(h_ok, h_fill, 0.0) + np.where(v_ok, v_fill, 0.0)
    den = h_ok.astype(np.float64) + v_ok.astype(np.float64)
    out = np.where(den > 0, num / np.maximum(den, 1.0), np.nan)
    return np.where(known, c, out)


@dataclass
class IoUReport:
    per_class: dict           # class id -> IoU, only classes present in gt
    miou: float
    region_tag: str
    pixel_count: int
    confusion: np.ndarray     # (3, 4) gt x pred(+unknown) counts

    def to_dict(self):
        return {
            "per_class": {CLASS_NAMES[c]: v for c, v in self.per_class.items()},
            "miou": self.miou,
            "region": self.region_tag,
            "pixels": self.pixel_count,
        }


_PRED_COLS = {LOW: 0, MEDIUM: 1, HIGH: 2, UNKNOWN: 3}


def confusion_counts(pred, gt, region):
    """3x4 confusion matrix (gt class x predicted class incl. unknown)
    over region pixels with known ground truth."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    region = np.asarray(region, dtype=bool)
    sel = region & (gt != UNKNOWN)
    g = gt[sel].astype(np.int64)
    p = pred[sel].astype(np.int64)
    p = np.where(p == UNKNOWN, 3, p)
    counts = np.bincount(g * 4 + p, minlength=12)
    return counts.reshape(3, 4)


def iou_from_confusion(confusion, region_tag="region"):
    conf = np.asarray(confusion, dtype=np.int64)
    per_class = {}
    for c in (LOW, MEDIUM, HIGH):
        gt_total = conf[c, :].sum()
        if gt_total == 0:
            continue
        tp = conf[c, c]
        union = gt_total + conf[:, c].sum() - tp
        per_class[c] = float(tp / union) if union > 0 else 0.0
    miou = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return IoUReport(per_class, miou, region_tag, int(conf.sum()), conf)


def miou(pred, gt, region, region_tag="region"):
    """Mean IoU of a class-mask prediction against ground truth in a region."""
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ValueError("empty evaluation region")
    return iou_from_confusion(confusion_counts(pred, gt, region), region_tag)


def region_masks(range_image, sky, method_label_masks, min_range=10.0):
    """The two evaluation regions.

    miou10: pixels farther than min_range where every compared method has a
    label. miouH: top-half rows excluding sky.
    """
    rng = np.asarray(range_image, dtype=np.float64)
    sky = np.asarray(sky, dtype=bool)
    h = rng.shape[0]
    with np.errstate(invalid="ignore"):
        far = np.isfinite(rng) & (rng > min_range)
    inter = np.ones_like(sky)
    for m in method_label_masks.values():
        inter &= np.asarray(m, dtype=bool)
    top = np.zeros_like(sky)
    top[: h // 2, :] = True
    return {
        "miou10": far & inter,
        "miouH": top & ~sky,
    }
