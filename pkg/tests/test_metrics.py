import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ditdesk.metrics import (
    MAP_THRESHOLDS,
    WF1Inputs,
    accuracy,
    average_precision,
    iou,
    map_range,
    match_detections,
    prf1,
    weighted_f1,
    wf1_report,
)

# -- IoU -------------------------------------------------------------------------


def test_iou_identical():
    assert iou((3, 4, 10, 12), (3, 4, 10, 12)) == 1.0


def test_iou_disjoint():
    assert iou((0, 0, 5, 5), (10, 10, 5, 5)) == 0.0


def test_iou_one_seventh():
    assert iou((0, 0, 2, 2), (1, 1, 2, 2)) == pytest.approx(1.0 / 7.0)


def test_iou_zero_union():
    assert iou((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.floats(0, 50) for _ in range(4)]), st.tuples(*[st.floats(0, 50) for _ in range(4)]))
def test_iou_symmetric_and_bounded(a, b):
    v1, v2 = iou(a, b), iou(b, a)
    assert v1 == pytest.approx(v2)
    assert 0.0 <= v1 <= 1.0 + 1e-9


# -- matching ---------------------------------------------------------------------


def test_match_perfect_predictions():
    gts = [(0, 0, 10, 10), (20, 20, 5, 5)]
    preds = [((0, 0, 10, 10), 0.9), ((20, 20, 5, 5), 0.8)]
    m = match_detections(preds, gts, 0.5)
    assert (m.tp, m.fp, m.fn) == (2, 0, 0)


def test_match_no_predictions():
    m = match_detections([], [(0, 0, 1, 1)] * 3, 0.5)
    assert (m.tp, m.fp, m.fn) == (0, 0, 3)


def test_match_two_preds_one_gt():
    gts = [(0, 0, 10, 10)]
    preds = [((0, 0, 10, 10), 0.9), ((1, 1, 10, 10), 0.8)]
    m = match_detections(preds, gts, 0.5)
    assert (m.tp, m.fp, m.fn) == (1, 1, 0)


def test_match_count_conservation_random():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n_p, n_g = int(rng.integers(0, 6)), int(rng.integers(0, 5))
        preds = [(tuple(rng.random(4) * 20 + [0, 0, 1, 1]), float(rng.random())) for _ in range(n_p)]
        gts = [tuple(rng.random(4) * 20 + [0, 0, 1, 1]) for _ in range(n_g)]
        m = match_detections(preds, gts, 0.3)
        assert m.tp + m.fp == n_p
        assert m.tp + m.fn == n_g


def test_match_score_order_not_input_order():
    gts = [(0, 0, 10, 10)]
    # Lower-index prediction has the lower score; the higher-score one wins the gt.
    preds = [((2, 2, 10, 10), 0.1), ((0, 0, 10, 10), 0.9)]
    m = match_detections(preds, gts, 0.3)
    assert m.pairs == [(1, 0)]


# -- P/R/F1 -----------------------------------------------------------------------


def test_prf1_perfect():
    assert prf1(10, 0, 0) == (1.0, 1.0, 1.0)


def test_prf1_all_wrong():
    assert prf1(0, 5, 5) == (0.0, 0.0, 0.0)


def test_prf1_mixed():
    p, r, f1 = prf1(3, 1, 2)
    assert p == pytest.approx(0.75)
    assert r == pytest.approx(0.6)
    assert f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)


def test_prf1_rejects_negative():
    with pytest.raises(ValueError):
        prf1(-1, 0, 0)


# -- weighted F1 --------------------------------------------------------------------


def test_wf1_table_first_place_row():
    assert weighted_f1((96.97, 95.99, 95.14, 90.22)) == pytest.approx(94.23, abs=0.01)


def test_wf1_large_model_row():
    assert weighted_f1((97.83, 97.41, 96.29, 92.93)) == pytest.approx(95.85, abs=0.01)


def test_wf1_all_ones():
    assert weighted_f1(WF1Inputs(1.0, 1.0, 1.0, 1.0)) == pytest.approx(1.0)


def test_wf1_mixed_scales_rejected():
    with pytest.raises(ValueError):
        weighted_f1((0.9, 90.0, 0.9, 0.9))


def test_wf1_wrong_arity():
    with pytest.raises(ValueError):
        weighted_f1((1.0, 1.0, 1.0))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.integers(0, 3), st.floats(0, 1))
def test_wf1_monotone_and_fixed_point(vals, idx, bump):
    base = weighted_f1(tuple(vals))
    bumped = list(vals)
    bumped[idx] = min(1.0, bumped[idx] + bump)
    assert weighted_f1(tuple(bumped)) >= base - 1e-12
    x = vals[0]
    assert weighted_f1((x, x, x, x)) == pytest.approx(x, abs=1e-12)


# -- average precision ---------------------------------------------------------------


def test_ap_all_correct():
    gts = {0: [(0, 0, 10, 10)], 1: [(5, 5, 8, 8)]}
    preds = {0: [((0, 0, 10, 10), 0.9)], 1: [((5, 5, 8, 8), 0.8)]}
    assert average_precision(preds, gts, 0.5) == pytest.approx(1.0)


def test_ap_none_correct():
    gts = {0: [(0, 0, 10, 10)]}
    preds = {0: [((50, 50, 5, 5), 0.9)]}
    assert average_precision(preds, gts, 0.5) == 0.0


def test_ap_correct_then_wrong_is_one():
    gts = {0: [(0, 0, 10, 10)]}
    preds = {0: [((0, 0, 10, 10), 0.9), ((50, 50, 5, 5), 0.8)]}
    assert average_precision(preds, gts, 0.5) == pytest.approx(1.0)


def test_ap_lowest_score_false_positive_never_increases():
    rng = np.random.default_rng(1)
    gts = {0: [(0, 0, 10, 10), (30, 30, 10, 10)]}
    preds = {0: [((0, 0, 10, 10), 0.9), ((100, 100, 4, 4), 0.5)]}
    base = average_precision(preds, gts, 0.5)
    worse = {0: preds[0] + [((200, 200, 4, 4), 0.1)]}
    assert average_precision(worse, gts, 0.5) <= base + 1e-12
    assert 0.0 <= base <= 1.0


# -- brute-force oracle for the mAP sweep -----------------------------------------------


def oracle_ap(preds_by_image, gts_by_image, thr):
    """Enumerate the score-order sweep directly: re-match every prefix from scratch."""
    flat = []
    for img_id, preds in preds_by_image.items():
        for k, (box, score) in enumerate(preds):
            flat.append((score, img_id, k, box))
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    total_gt = sum(len(g) for g in gts_by_image.values())
    if total_gt == 0:
        return 0.0
    points = []
    for prefix in range(1, len(flat) + 1):
        subset = {}
        for score, img_id, k, box in flat[:prefix]:
            subset.setdefault(img_id, []).append((box, score))
        tp = 0
        for img_id, preds in subset.items():
            tp += match_detections(preds, gts_by_image.get(img_id, []), thr).tp
        points.append((tp / total_gt, tp / prefix))
    ap = 0.0
    for r in np.linspace(0, 1, 101):
        candidates = [p for rec, p in points if rec >= r - 1e-12]
        ap += max(candidates) if candidates else 0.0
    return ap / 101.0


def _scenario_cases():
    # Hand-built scenarios with <= 4 predictions and <= 3 ground truths.
    g1, g2, g3 = (0, 0, 10, 10), (20, 0, 10, 10), (40, 0, 10, 10)
    near_g1 = (1, 1, 10, 10)  # IoU ~0.68 with g1
    off_g2 = (22, 2, 10, 10)  # IoU ~0.51 with g2
    wrong = (100, 100, 5, 5)
    yield {0: [(g1, 0.9)]}, {0: [g1]}
    yield {0: [(g1, 0.9), (wrong, 0.8)]}, {0: [g1, g2]}
    yield {0: [(near_g1, 0.7), (off_g2, 0.9), (wrong, 0.8), (g3, 0.6)]}, {0: [g1, g2, g3]}
    yield {0: [(g1, 0.5), (g1, 0.5), (wrong, 0.5)]}, {0: [g1]}  # score ties
    yield {0: [(g1, 0.9)], 1: [(g2, 0.8), (wrong, 0.7)]}, {0: [g1], 1: [g2, g3]}  # two images
    yield {0: [(wrong, 0.9), (wrong, 0.8)]}, {0: [g1]}
    yield {0: []}, {0: [g1, g2]}


@pytest.mark.parametrize("thr", [0.5, 0.75])
def test_ap_matches_bruteforce_oracle(thr):
    for preds, gts in _scenario_cases():
        fast = average_precision(preds, gts, thr)
        slow = oracle_ap(preds, gts, thr)
        assert fast == pytest.approx(slow, abs=1e-9), (preds, gts, thr)


def test_map_range_perfect_single_category():
    preds = [{"image_id": 0, "category_id": 1, "bbox": [0, 0, 10, 10], "score": 0.9}]
    images = [{"id": 0}]
    annotations = [{"image_id": 0, "category_id": 1, "bbox": [0, 0, 10, 10]}]
    out = map_range(preds, images, annotations)
    assert out["map"] == pytest.approx(1.0)
    assert len(out["per_category"][1]["by_thr"]) == 10


def test_map_range_excludes_absent_categories():
    preds = [
        {"image_id": 0, "category_id": 1, "bbox": [0, 0, 10, 10], "score": 0.9},
        {"image_id": 0, "category_id": 2, "bbox": [50, 50, 4, 4], "score": 0.8},  # no gt of class 2
    ]
    images = [{"id": 0}]
    annotations = [{"image_id": 0, "category_id": 1, "bbox": [0, 0, 10, 10]}]
    out = map_range(preds, images, annotations)
    assert list(out["per_category"]) == [1]
    assert out["map"] == pytest.approx(1.0)


def test_map_thresholds_are_coco_range():
    assert MAP_THRESHOLDS[0] == 0.5 and MAP_THRESHOLDS[-1] == 0.95 and len(MAP_THRESHOLDS) == 10


# -- accuracy ---------------------------------------------------------------------------


def test_accuracy_cases():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([1, 1], [2, 2]) == 0.0
    assert accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75
    with pytest.raises(ValueError):
        accuracy([1], [1, 2])


# -- report helpers -----------------------------------------------------------------------


def test_wf1_report_from_coco_rows():
    gts = [{"image_id": i, "category_id": 4, "bbox": [0, 0, 10, 10]} for i in range(4)]
    preds = [
        {"image_id": 0, "category_id": 4, "bbox": [0, 0, 10, 10], "score": 0.9},  # IoU 1.0
        {"image_id": 1, "category_id": 4, "bbox": [0, 0, 10, 8.24], "score": 0.9},  # IoU 0.824
        {"image_id": 2, "category_id": 4, "bbox": [0, 0, 10, 6.5], "score": 0.9},  # IoU 0.65
        {"image_id": 3, "category_id": 4, "bbox": [50, 0, 10, 10], "score": 0.9},  # miss
    ]
    report = wf1_report(preds, gts, category_id=4)
    assert report["f1_by_iou"]["0.6"] == pytest.approx(0.75)
    assert report["f1_by_iou"]["0.9"] == pytest.approx(0.25)
    expected = weighted_f1((0.75, 0.5, 0.5, 0.25))
    assert report["wf1"] == pytest.approx(expected)
    assert report["wf1_percent"] == pytest.approx(100 * expected)
