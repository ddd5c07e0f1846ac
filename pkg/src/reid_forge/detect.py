"""Box post-processing (IoU, NMS, top-k selection), the local-variance baseline
part detector, detection file I/O, and pooled detection metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import BoundingBox
from .errors import ManifestParseError, ValidationError


@dataclass(frozen=True)
class Detection:
    """One candidate part box with a confidence in [0, 1]."""

    box: BoundingBox
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0) or not np.isfinite(self.score):
            raise ValidationError(f"score {self.score} outside [0, 1]")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def nms(detections: list[Detection], nms_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-score detection (ties broken by lower
    original index) and drops the rest whose IoU with it exceeds the
    threshold. Output is sorted by descending score.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    kept: list[Detection] = []
    suppressed = [False] * len(detections)
    for rank, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(detections[i])
        for j in order[rank + 1 :]:
            if not suppressed[j] and iou(detections[i].box, detections[j].box) > nms_threshold:
                suppressed[j] = True
    return kept


def select_parts(
    detections: list[Detection], confidence_threshold: float, k: int = 3
) -> list[BoundingBox]:
    """Drop detections below the confidence threshold, keep the top k by score."""
    eligible = [
        (i, d) for i, d in enumerate(detections) if d.score >= confidence_threshold
    ]
    eligible.sort(key=lambda pair: (-pair[1].score, pair[0]))
    return [d.box for _, d in eligible[:k]]


def baseline_part_detector(
    image: np.ndarray, window: int = 9, rel_threshold: float = 0.5
) -> list[Detection]:
    """Find high-frequency regions by thresholding local variance.

    The channel-mean image is scanned with a window x window variance
    filter; pixels above rel_threshold of the global maximum are grouped
    into connected components, and each component becomes one detection
    whose score is its peak variance normalized by the global peak. A flat
    image yields no detections. Fully deterministic.
    """
    gray = image.mean(axis=0) if image.ndim == 3 else image
    m = ndimage.uniform_filter(gray, size=window)
    m2 = ndimage.uniform_filter(gray * gray, size=window)
    var = np.maximum(m2 - m * m, 0.0)
    vmax = float(var.max())
    if vmax <= 1e-12:
        return []

    mask = var >= rel_threshold * vmax
    labels, count = ndimage.label(mask)
    height, width = gray.shape
    detections = []
    for index, slices in enumerate(ndimage.find_objects(labels), start=1):
        sl_y, sl_x = slices
        region = var[slices] * (labels[slices] == index)
        score = float(region.max() / vmax)
        box = BoundingBox(
            float(max(sl_x.start, 0)),
            float(max(sl_y.start, 0)),
            float(min(sl_x.stop, width)),
            float(min(sl_y.stop, height)),
        )
        detections.append(Detection(box=box, score=min(score, 1.0)))
    return detections


def detect_parts(
    image: np.ndarray,
    conf_thr: float = 0.25,
    nms_thr: float = 0.4,
    k: int = 3,
    window: int = 9,
) -> list[BoundingBox]:
    """Full post-processing chain: detector -> NMS -> confidence/top-k selection."""
    return select_parts(nms(baseline_part_detector(image, window), nms_thr), conf_thr, k)


def save_detections(detections: dict[str, list[Detection]], path: str | Path) -> None:
    """JSON-lines detections file: {image_id, boxes: [{box, score}, ...]}."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_id in sorted(detections):
            row = {
                "image_id": image_id,
                "boxes": [
                    {"box": d.box.as_list(), "score": d.score}
                    for d in detections[image_id]
                ],
            }
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")


def load_detections(path: str | Path) -> dict[str, list[Detection]]:
    detections: dict[str, list[Detection]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"invalid JSON ({exc.msg})", line_number) from exc
            detections[row["image_id"]] = [
                Detection(box=BoundingBox(*entry["box"]), score=float(entry["score"]))
                for entry in row["boxes"]
            ]
    return detections


@dataclass
class DetectionMetrics:
    """Pooled precision/recall/F over a whole image set, plus per-image counts."""

    precision: float
    recall: float
    f_score: float
    tp: int
    fp: int
    fn: int
    per_image: list[dict] = field(default_factory=list)


def _match_one_image(
    predictions: list[Detection],
    ground_truths: list[BoundingBox],
    conf_thr: float,
    iou_thr: float,
) -> tuple[int, int, int]:
    preds = [(i, d) for i, d in enumerate(predictions) if d.score >= conf_thr]
    preds.sort(key=lambda pair: (-pair[1].score, pair[0]))
    matched = [False] * len(ground_truths)
    tp = 0
    for _, det in preds:
        best_iou = 0.0
        best_gt = -1
        for gi, gt in enumerate(ground_truths):
            if matched[gi]:
                continue
            value = iou(det.box, gt)
            if value > best_iou:
                best_iou = value
                best_gt = gi
        if best_gt >= 0 and best_iou >= iou_thr:
            matched[best_gt] = True
            tp += 1
    fp = len(preds) - tp
    fn = len(ground_truths) - tp
    return tp, fp, fn


def detection_metrics(
    predictions: dict[str, list[Detection]],
    ground_truths: dict[str, list[BoundingBox]],
    conf_thr: float = 0.25,
    iou_thr: float = 0.5,
) -> DetectionMetrics:
    """Greedy per-image matching pooled into one precision/recall/F triple.

    Per image, predictions at or above the confidence threshold are taken
    in descending score order; each claims the unmatched ground-truth box
    with the highest IoU if that IoU reaches iou_thr. Counts are pooled
    over all images; 0/0 ratios are defined as 0.
    """
    tp = fp = fn = 0
    rows = []
    for image_id in sorted(set(predictions) | set(ground_truths)):
        t, p, n = _match_one_image(
            predictions.get(image_id, []), ground_truths.get(image_id, []), conf_thr, iou_thr
        )
        tp, fp, fn = tp + t, fp + p, fn + n
        rows.append({"image_id": image_id, "tp": t, "fp": p, "fn": n})

    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f_score = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return DetectionMetrics(
        precision=precision,
        recall=recall,
        f_score=f_score,
        tp=tp,
        fp=fp,
        fn=fn,
        per_image=rows,
    )
