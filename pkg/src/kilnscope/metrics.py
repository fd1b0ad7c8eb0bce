"""Object-level detection matching and node-classification metrics."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import LengthMismatch

log = logging.getLogger(__name__)

DEFAULT_IOU_THRESHOLD = 0.3


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel-edge coordinates; a single pixel (c, r) is [c, r, c+1, r+1]."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"inverted box {self}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_list(self) -> list:
        return [self.x0, self.y0, self.x1, self.y1]


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list = field(default_factory=list)  # (pred_index, gt_index, iou)


def match_detections(preds: Sequence[BBox], gts: Sequence[BBox],
                     iou_threshold: float = DEFAULT_IOU_THRESHOLD,
                     scores: Optional[Sequence[float]] = None) -> MatchResult:
    """Greedy one-to-one matching in descending IoU order, IoU >= threshold.

    Ties in IoU go to the lower prediction index, then the lower ground-truth
    index. ``scores`` are accepted for interface symmetry but do not affect
    the matching.
    """
    candidates = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            v = iou(p, g)
            if v >= iou_threshold and v > 0:
                candidates.append((-v, i, j))
    candidates.sort()
    used_p, used_g, pairs = set(), set(), []
    for neg_v, i, j in candidates:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j, -neg_v))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(preds) - tp, fn=len(gts) - tp, pairs=pairs)


def detection_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    per_class: list
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    tp: Optional[int] = None
    fp: Optional[int] = None
    fn: Optional[int] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.tp is None:
            for k in ("tp", "fp", "fn"):
                d.pop(k)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = [("class", "precision", "recall", "f1", "support")]
        for c, m in enumerate(self.per_class):
            rows.append((str(c), f"{m.precision:.4f}", f"{m.recall:.4f}", f"{m.f1:.4f}", str(m.support)))
        rows.append(("macro", f"{self.macro_precision:.4f}", f"{self.macro_recall:.4f}",
                     f"{self.macro_f1:.4f}", str(sum(m.support for m in self.per_class))))
        widths = [max(len(r[k]) for r in rows) for k in range(5)]
        lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows]
        lines.append(f"accuracy {self.accuracy:.4f}")
        return "\n".join(lines)


def detection_report(result: MatchResult) -> MetricsReport:
    p, r, f1 = detection_f1(result.tp, result.fp, result.fn)
    kiln = ClassMetrics(p, r, f1, result.tp + result.fn)
    denom = result.tp + result.fp + result.fn
    return MetricsReport([kiln], p, r, f1, result.tp / denom if denom else 0.0,
                         tp=result.tp, fp=result.fp, fn=result.fn)


def node_classification_report(pred_labels, true_labels, num_classes: int) -> MetricsReport:
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise LengthMismatch(f"{pred.size} predictions vs {true.size} labels")
    if pred.size == 0:
        raise LengthMismatch("no labels to evaluate")
    per_class = []
    for c in range(num_classes):
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        support = tp + fn
        if support == 0:
            log.warning("class %d is absent from the ground truth; it contributes 0 to macro scores", c)
        p, r, f1 = detection_f1(tp, fp, fn)
        per_class.append(ClassMetrics(p, r, f1, support))
    return MetricsReport(
        per_class=per_class,
        macro_precision=float(np.mean([m.precision for m in per_class])),
        macro_recall=float(np.mean([m.recall for m in per_class])),
        macro_f1=float(np.mean([m.f1 for m in per_class])),
        accuracy=float(np.mean(pred == true)),
    )


def macro_f1(pred_labels, true_labels, num_classes: int) -> float:
    """Quiet variant used inside training loops."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    scores = []
    for c in range(num_classes):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        scores.append(detection_f1(int(tp), int(fp), int(fn))[2])
    return float(np.mean(scores))


# --- box loading ---------------------------------------------------------------

def ring_bounds(rings) -> tuple[float, float, float, float]:
    outer = np.asarray(rings[0], dtype=np.float64)
    return (float(outer[:, 0].min()), float(outer[:, 1].min()),
            float(outer[:, 0].max()), float(outer[:, 1].max()))


def boxes_from_polygons(polygons, transform=None) -> list[BBox]:
    """Bounding boxes of polygon outer rings.

    Without a transform the boxes live in the polygons' own (lon/lat) space;
    with one they are mapped to pixel-edge coordinates.
    """
    boxes = []
    for rings in polygons:
        x0, y0, x1, y1 = ring_bounds(rings)
        if transform is not None:
            cx0 = (x0 - transform.origin_lon) / transform.pixel_width + 0.5
            cx1 = (x1 - transform.origin_lon) / transform.pixel_width + 0.5
            ry0 = (y0 - transform.origin_lat) / transform.pixel_height + 0.5
            ry1 = (y1 - transform.origin_lat) / transform.pixel_height + 0.5
            x0, x1 = sorted((round(cx0, 9), round(cx1, 9)))
            y0, y1 = sorted((round(ry0, 9), round(ry1, 9)))
        boxes.append(BBox(x0, y0, x1, y1))
    return boxes


def read_box_csv(path) -> list[BBox]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"x0", "y0", "x1", "y1"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [BBox(float(r["x0"]), float(r["y0"]), float(r["x1"]), float(r["y1"])) for r in reader]


def load_boxes(path, transform=None) -> list[BBox]:
    from .raster import read_geojson_polygons

    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_box_csv(path)
    return boxes_from_polygons(read_geojson_polygons(path), transform)
