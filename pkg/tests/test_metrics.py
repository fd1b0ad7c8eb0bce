import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kilnscope.errors import LengthMismatch
from kilnscope.geo import GeoTransform
from kilnscope.metrics import (BBox, boxes_from_polygons, detection_f1, iou, macro_f1, match_detections,
                               node_classification_report)


def test_iou_hand_cases():
    assert iou(BBox(0, 0, 10, 10), BBox(0, 0, 10, 10)) == 1.0
    assert iou(BBox(0, 0, 1, 1), BBox(2, 2, 3, 3)) == 0.0
    assert iou(BBox(0, 0, 10, 10), BBox(5, 0, 15, 10)) == 1 / 3


def test_iou_touching_edges_is_zero():
    assert iou(BBox(0, 0, 1, 1), BBox(1, 0, 2, 1)) == 0.0


boxes = st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 10), st.integers(1, 10)).map(
    lambda t: BBox(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


def _brute_iou(a: BBox, b: BBox) -> float:
    # count unit cells on the integer lattice
    cells_a = {(x, y) for x in range(int(a.x0), int(a.x1)) for y in range(int(a.y0), int(a.y1))}
    cells_b = {(x, y) for x in range(int(b.x0), int(b.x1)) for y in range(int(b.y0), int(b.y1))}
    return len(cells_a & cells_b) / len(cells_a | cells_b)


@given(boxes, boxes)
def test_iou_matches_cell_counting(a, b):
    assert iou(a, b) == pytest.approx(_brute_iou(a, b), abs=1e-12)


def test_match_identity():
    gts = [BBox(0, 0, 5, 5), BBox(10, 10, 15, 15), BBox(20, 0, 30, 4)]
    m = match_detections(list(gts), gts)
    assert (m.tp, m.fp, m.fn) == (3, 0, 0)
    assert sorted(p[:2] for p in m.pairs) == [(0, 0), (1, 1), (2, 2)]


def test_match_prefers_higher_iou():
    pred = BBox(0, 0, 10, 10)
    g_half = BBox(0, 0, 10, 5)        # IoU 0.5
    g_04 = BBox(0, 0, 4, 10)          # IoU 0.4
    assert iou(pred, g_half) == 0.5 and iou(pred, g_04) == pytest.approx(0.4)
    m = match_detections([pred], [g_04, g_half])
    assert (m.tp, m.fp, m.fn) == (1, 0, 1)
    assert m.pairs[0][:2] == (0, 1)


def test_match_threshold_boundary():
    gt = BBox(0, 0, 100, 1)
    below = BBox(0, 0, 29, 1)         # IoU 0.29
    at = BBox(0, 0, 30, 1)            # IoU exactly 0.3
    m = match_detections([below], [gt])
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)
    m = match_detections([at], [gt])
    assert (m.tp, m.fp, m.fn) == (1, 0, 0)


def _optimal_tp(preds, gts, thr):
    best = 0
    if len(preds) >= len(gts):
        for perm in itertools.permutations(range(len(preds)), len(gts)):
            best = max(best, sum(iou(preds[i], gts[j]) >= thr for j, i in enumerate(perm)))
    else:
        for perm in itertools.permutations(range(len(gts)), len(preds)):
            best = max(best, sum(iou(preds[i], gts[j]) >= thr for i, j in enumerate(perm)))
    return best


@given(st.lists(boxes, max_size=4), st.lists(boxes, max_size=4))
def test_match_is_one_to_one_and_consistent(preds, gts):
    m = match_detections(preds, gts)
    assert m.tp + m.fp == len(preds)
    assert m.tp + m.fn == len(gts)
    ps = [p for p, g, *_ in m.pairs]
    gs = [g for p, g, *_ in m.pairs]
    assert len(set(ps)) == len(ps) and len(set(gs)) == len(gs)
    assert all(iou(preds[p], gts[g]) >= 0.3 for p, g in zip(ps, gs))
    assert m.tp <= _optimal_tp(preds, gts, 0.3)


def test_detection_f1_hand_cases():
    assert detection_f1(10, 0, 0) == (1.0, 1.0, 1.0)
    assert detection_f1(1, 1, 3) == (0.5, 0.25, 1 / 3)
    assert detection_f1(0, 4, 2) == (0.0, 0.0, 0.0)
    assert detection_f1(0, 0, 0) == (0.0, 0.0, 0.0)


def test_node_report_hand_confusion():
    rep = node_classification_report([1, 0, 0, 0], [1, 1, 0, 0], 2)
    c0, c1 = rep.per_class
    assert (c1.precision, c1.recall) == (1.0, 0.5)
    assert c1.f1 == pytest.approx(2 / 3, abs=1e-12)
    assert c0.precision == pytest.approx(2 / 3, abs=1e-12)
    assert c0.recall == 1.0 and c0.f1 == pytest.approx(0.8, abs=1e-12)
    assert rep.macro_f1 == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-12)
    assert rep.accuracy == 0.75


def test_node_report_perfect_and_constant():
    rep = node_classification_report([0, 1, 2], [0, 1, 2], 3)
    assert rep.macro_f1 == rep.macro_precision == rep.macro_recall == rep.accuracy == 1.0
    rep = node_classification_report([1, 1, 1, 1], [0, 0, 1, 1], 2)
    assert rep.accuracy == 0.5


def test_node_report_length_mismatch():
    with pytest.raises(LengthMismatch):
        node_classification_report([0, 1], [0], 2)


def test_macro_f1_against_confusion_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        t, p = rng.integers(0, 3, 50), rng.integers(0, 3, 50)
        f1s = []
        for c in range(3):
            tp = np.sum((p == c) & (t == c))
            fp = np.sum((p == c) & (t != c))
            fn = np.sum((p != c) & (t == c))
            f1s.append(2 * tp / (2 * tp + fp + fn) if tp else 0.0)
        assert macro_f1(p, t, 3) == pytest.approx(np.mean(f1s), abs=1e-12)


def test_report_serialisation():
    rep = node_classification_report([0, 1], [0, 1], 2)
    assert '"macro_f1": 1.0' in rep.to_json()
    assert "macro" in rep.to_table()


def test_boxes_from_polygons_to_pixel_edges():
    gt = GeoTransform(74.0, 31.5, 0.001, -0.001)
    # the outer edges of pixels (2..4, 1..2) in lon/lat
    x0, y0 = gt.corner_to_geo(2, 1)
    x1, y1 = gt.corner_to_geo(5, 3)
    ring = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
    (box,) = boxes_from_polygons([[ring]], gt)
    assert box.as_list() == [2, 1, 5, 3]
