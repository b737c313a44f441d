"""Oracle detection and layout-fidelity metrics for generated images.

The detector segments pixels by distance to the dataset's three object
colors, groups them into 8-connected components, and classifies each
component's shape from the fraction of its tight bounding box it fills
(square fills ~1.0, an inscribed circle ~pi/4, an inscribed upward triangle
~0.5).  Confidence is closeness of that fill ratio to the class template.

Average precision follows the 11-point interpolation convention at IOU 0.5,
sweeping the detector's confidence threshold.  Contrast and saturation
statistics are computed in 8-bit units to match common image-tooling
conventions bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataset import COLOR_VALUES
from .images import to_uint8

FILL_TEMPLATES = {"square": 1.0, "circle": np.pi / 4.0, "triangle": 0.5}
SQUARE_MIN_FILL = 0.90
CIRCLE_MIN_FILL = 0.68
CONF_THRESHOLDS = np.round(np.arange(0.15, 0.951, 0.05), 10)
RECALL_GRID = np.linspace(0.0, 1.0, 11)


def iou(box_a, box_b) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) boxes."""
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = max(ax1 - ax0, 0.0) * max(ay1 - ay0, 0.0)
    area_b = max(bx1 - bx0, 0.0) * max(by1 - by0, 0.0)
    union = area_a + area_b - inter
    return float(inter / union) if union > 0 else 0.0


@dataclass(frozen=True)
class Detection:
    color: str
    shape: str
    box: tuple[float, float, float, float]
    confidence: float
    fill_ratio: float
    area: int

    @property
    def label(self) -> str:
        return f"{self.color}-{self.shape}"


@dataclass(frozen=True)
class GroundTruth:
    color: str
    shape: str
    box: tuple[float, float, float, float]

    @property
    def label(self) -> str:
        return f"{self.color}-{self.shape}"


def classify_fill(fill: float) -> tuple[str, float]:
    """Map a bounding-box fill ratio to (shape, confidence)."""
    if fill >= SQUARE_MIN_FILL:
        shape = "square"
    elif fill >= CIRCLE_MIN_FILL:
        shape = "circle"
    else:
        shape = "triangle"
    template = FILL_TEMPLATES[shape]
    confidence = 1.0 - abs(fill - template) / template
    return shape, float(np.clip(confidence, 0.0, 1.0))


def oracle_detect(img: np.ndarray, color_threshold: float = 0.35,
                  min_area: int = 4) -> list[Detection]:
    """Detect flat-colored shapes in an (H, W, 3) image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    detections: list[Detection] = []
    eight = np.ones((3, 3), dtype=bool)
    for color, value in COLOR_VALUES.items():
        dist = np.sqrt(((img - value.reshape(1, 1, 3)) ** 2).sum(axis=2))
        mask = dist < color_threshold
        labels, count = ndimage.label(mask, structure=eight)
        for comp in range(1, count + 1):
            inside = labels == comp
            area = int(inside.sum())
            if area < min_area:
                continue
            rows = np.flatnonzero(inside.any(axis=1))
            cols = np.flatnonzero(inside.any(axis=0))
            box = (float(cols[0]), float(rows[0]),
                   float(cols[-1] + 1), float(rows[-1] + 1))
            fill = area / ((box[2] - box[0]) * (box[3] - box[1]))
            shape, conf = classify_fill(fill)
            detections.append(Detection(color, shape, box, conf, fill, area))
    return detections


def count_matches(detections, truths, iou_threshold: float = 0.5,
                  confidence_threshold: float = 0.0) -> tuple[int, int, int]:
    """Greedy per-class one-to-one matching; returns (tp, fp, fn).

    Detections below the confidence threshold are discarded before any
    matching happens.  A matched pair at or above the IOU threshold is a
    true positive; a matched pair below it costs both a false positive and
    a false negative; every remaining ground truth is a false negative and
    every remaining detection a false positive.  Hence tp + fn always
    equals len(truths).
    """
    detections = [d for d in detections
                  if d.confidence >= confidence_threshold]
    tp = fp = fn = 0
    labels = {d.label for d in detections} | {t.label for t in truths}
    for label in sorted(labels):
        dets = [d for d in detections if d.label == label]
        gts = [t for t in truths if t.label == label]
        pairs = sorted(
            ((iou(d.box, t.box), di, ti)
             for di, d in enumerate(dets) for ti, t in enumerate(gts)),
            key=lambda p: (-p[0], p[1], p[2]))
        used_d: set[int] = set()
        used_t: set[int] = set()
        for value, di, ti in pairs:
            if value <= 0.0 or di in used_d or ti in used_t:
                continue
            used_d.add(di)
            used_t.add(ti)
            if value >= iou_threshold:
                tp += 1
            else:
                fp += 1
                fn += 1
        fn += len(gts) - len(used_t)
        fp += len(dets) - len(used_d)
    return tp, fp, fn


def eleven_point_ap(points) -> float:
    """11-point interpolated AP from (recall, precision) pairs.

    Interpolated precision at recall r is the maximum precision among points
    with recall >= r, and zero beyond the largest achieved recall.
    """
    total = 0.0
    for r in RECALL_GRID:
        candidates = [p for rec, p in points if rec >= r - 1e-9]
        total += max(candidates) if candidates else 0.0
    return total / len(RECALL_GRID)


def ap_at_50(detections_per_image, truths_per_image,
             thresholds=CONF_THRESHOLDS, iou_threshold: float = 0.5
             ) -> tuple[float, list[dict]]:
    """Average precision at IOU 0.5 over a confidence-threshold sweep.

    Counts are pooled over the image set at each threshold.  A threshold
    that filters out every detection yields the conventional (precision 1,
    recall 0) point, flagged ``degenerate`` in the returned table.

    Returns:
        (ap, table) where table rows record threshold, tp/fp/fn, precision,
        recall, and the degenerate flag.
    """
    if len(detections_per_image) != len(truths_per_image):
        raise ValueError("ap_at_50: detection/truth image counts differ")
    n_truth = sum(len(ts) for ts in truths_per_image)
    if n_truth == 0:
        raise ValueError("ap_at_50: no ground-truth objects")
    table = []
    points = []
    for thr in thresholds:
        tp = fp = fn = 0
        for dets, gts in zip(detections_per_image, truths_per_image):
            a, b, c = count_matches(dets, gts, iou_threshold, thr)
            tp, fp, fn = tp + a, fp + b, fn + c
        assert tp + fn == n_truth, "counting invariant violated"
        degenerate = (tp + fp) == 0
        precision = 1.0 if degenerate else tp / (tp + fp)
        recall = tp / n_truth
        table.append({"threshold": float(thr), "tp": tp, "fp": fp, "fn": fn,
                      "precision": precision, "recall": recall,
                      "degenerate": degenerate})
        points.append((recall, precision))
    return eleven_point_ap(points), table


def _as_u8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return to_uint8(img)


def luma_u8(img: np.ndarray) -> np.ndarray:
    """8-bit BT.601 greyscale of an RGB image."""
    u8 = _as_u8(img).astype(np.float64)
    y = 0.299 * u8[..., 0] + 0.587 * u8[..., 1] + 0.114 * u8[..., 2]
    return np.rint(y).astype(np.uint8)


def rms_contrast(img: np.ndarray) -> float:
    """Population standard deviation of the 8-bit greyscale image."""
    return float(luma_u8(img).astype(np.float64).std())


def mean_saturation(img: np.ndarray) -> float:
    """Mean of the 8-bit HSV saturation channel (S = 0 where max = 0)."""
    u8 = _as_u8(img).astype(np.float64)
    mx = u8.max(axis=-1)
    mn = u8.min(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(mx > 0, 255.0 * (mx - mn) / mx, 0.0)
    return float(np.rint(s).mean())


def image_statistics(img: np.ndarray) -> dict:
    return {"rms_contrast": rms_contrast(img),
            "mean_saturation": mean_saturation(img)}
