import numpy as np
import pytest

from ditdesk import detect as det
from ditdesk.detect import (
    ANCHOR_PRESETS,
    DetectConfig,
    Detection,
    DetHead,
    Detector,
    FpnAdapter,
    all_anchors,
    assign_targets,
    decode_boxes,
    detect,
    detection_loss,
    encode_boxes,
    gen_anchors,
    nms,
    seq_to_grid,
)
from ditdesk.imaging import Image
from ditdesk.nn import Tensor, grad_check
from ditdesk.nn.optim import LrSchedule
from ditdesk.synthdoc import LayoutElement
from ditdesk.vit import VitConfig, VitEncoder


def _cfg(**kwargs):
    return DetectConfig(num_classes=6, fpn_channels=kwargs.pop("fpn_channels", 16), **kwargs)


# -- FPN adapter -----------------------------------------------------------------


def test_fpn_shapes_from_14x14():
    rng = np.random.default_rng(0)
    adapter = FpnAdapter(rng, hidden=8, channels=16)
    taps = [Tensor(np.random.default_rng(i).standard_normal((1, 14, 14, 8)).astype(np.float32)) for i in range(4)]
    pyramid = adapter(taps)
    assert [p.shape for p in pyramid] == [(1, 56, 56, 16), (1, 28, 28, 16), (1, 14, 14, 16), (1, 7, 7, 16)]


def test_fpn_zero_weights_zero_pyramid():
    adapter = FpnAdapter(np.random.default_rng(1), hidden=4, channels=8)
    for p in adapter.parameters():
        p.data = np.zeros_like(p.data)
    taps = [Tensor(np.ones((1, 4, 4, 4), dtype=np.float32)) for _ in range(4)]
    for level in adapter(taps):
        np.testing.assert_array_equal(level.data, np.zeros_like(level.data))


def test_fpn_rejects_mismatched_taps():
    adapter = FpnAdapter(np.random.default_rng(2), hidden=4, channels=8)
    taps = [Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32)) for _ in range(3)]
    taps.append(Tensor(np.zeros((1, 5, 5, 4), dtype=np.float32)))
    with pytest.raises(ValueError):
        adapter(taps)
    with pytest.raises(ValueError):
        adapter(taps[:2])


def test_seq_to_grid():
    states = Tensor(np.arange(2 * 16 * 3, dtype=np.float32).reshape(2, 16, 3))
    grid = seq_to_grid(states, (4, 4))
    assert grid.shape == (2, 4, 4, 3)
    with pytest.raises(ValueError):
        seq_to_grid(states, (3, 4))


# -- anchors ---------------------------------------------------------------------


def test_anchor_counts_stride4():
    anchors = gen_anchors(0, 224, 224, _cfg())
    assert anchors.shape == (56 * 56 * 3, 4)


def test_anchor_square_at_aspect_one():
    cfg = _cfg()
    anchors = gen_anchors(0, 224, 224, cfg).reshape(56, 56, 3, 4)
    square = anchors[0, 0, 1]  # aspect ratios (0.5, 1, 2) -> index 1 is square
    assert square[2] == pytest.approx(32.0) and square[3] == pytest.approx(32.0)


def test_anchor_center_convention():
    anchors = gen_anchors(0, 224, 224, _cfg()).reshape(56, 56, 3, 4)
    a = anchors[0, 0, 1]
    cx, cy = a[0] + a[2] / 2, a[1] + a[3] / 2
    assert (cx, cy) == (pytest.approx(2.0), pytest.approx(2.0))  # stride 4 / 2


def test_anchor_areas_match_size():
    cfg = _cfg()
    for level, size in enumerate(cfg.anchor_sizes):
        anchors = gen_anchors(level, 256, 256, cfg)
        areas = anchors[:, 2] * anchors[:, 3]
        np.testing.assert_allclose(areas, size**2, rtol=1e-5)


def test_anchor_level_bounds():
    with pytest.raises(ValueError):
        gen_anchors(5, 224, 224, _cfg())


def test_anchor_presets():
    assert ANCHOR_PRESETS["layout"] == (32, 64, 128, 256, 512)
    assert ANCHOR_PRESETS["text"] == (4, 8, 16, 32, 64)
    with pytest.raises(ValueError):
        DetectConfig(num_classes=2, anchor_sizes=(64, 32, 128, 256, 512))


# -- assignment and box coding ------------------------------------------------------


def test_assign_exact_anchor_is_positive_zero_deltas():
    anchors = np.array([[10, 10, 20, 30], [100, 100, 5, 5]], dtype=np.float64)
    labels, deltas = assign_targets(anchors, np.array([[10, 10, 20, 30.0]]), np.array([4]))
    assert labels[0] == 4
    np.testing.assert_allclose(deltas[0], np.zeros(4), atol=1e-7)


def test_assign_disjoint_is_negative():
    anchors = np.array([[0, 0, 10, 10], [200, 200, 10, 10]], dtype=np.float64)
    labels, _ = assign_targets(anchors, np.array([[50, 50, 10, 10.0]]), np.array([1]))
    # The second anchor is farther, the first is best-for-gt but IoU 0: both
    # disjoint -> rescue requires nonzero overlap, so both stay negative.
    assert labels.tolist() == [0, 0]


def test_assign_best_anchor_rescue():
    # Low-IoU anchor becomes positive when it is the best for a gt...
    anchors = np.array([[0, 0, 2, 2]], dtype=np.float64)
    gt = np.array([[1, 1, 3, 3.0]])
    labels, _ = assign_targets(anchors, gt, np.array([2]))
    assert labels[0] == 2
    # ...but stays negative when another anchor matches the gt better.
    anchors2 = np.array([[0, 0, 2, 2], [1, 1, 3, 3]], dtype=np.float64)
    labels2, _ = assign_targets(anchors2, gt, np.array([2]))
    assert labels2.tolist() == [0, 2]


def test_assign_ignore_band():
    # IoU between neg (0.4) and pos (0.5) thresholds -> ignore label (-1).
    anchors = np.array([[0, 0, 10, 10], [300, 0, 10, 10]], dtype=np.float64)
    gt = np.array([[0, 0, 10, 22.0]])  # IoU = 100/220 = 0.4545
    labels, _ = assign_targets(anchors, gt, np.array([3]), pos_iou=0.5, neg_iou=0.4)
    assert labels[1] == 0
    # anchor 0 is best-for-gt so the rescue promotes it; disable by adding a better anchor
    anchors3 = np.array([[0, 0, 10, 10], [0, 0, 10, 22], [300, 0, 10, 10]], dtype=np.float64)
    labels3, _ = assign_targets(anchors3, gt, np.array([3]), pos_iou=0.5, neg_iou=0.4)
    assert labels3.tolist() == [-1, 3, 0]


def test_decode_zero_deltas_identity():
    anchors = np.array([[5, 6, 10, 12]], dtype=np.float64)
    out = decode_boxes(anchors, np.zeros((1, 4), dtype=np.float32))
    np.testing.assert_allclose(out, anchors, atol=1e-5)


def test_decode_log_scale_doubles_extent():
    anchors = np.array([[0, 0, 10, 10]], dtype=np.float64)
    deltas = np.array([[0, 0, np.log(2.0), np.log(2.0)]], dtype=np.float32)
    out = decode_boxes(anchors, deltas)[0]
    assert out[2] == pytest.approx(20.0, rel=1e-5) and out[3] == pytest.approx(20.0, rel=1e-5)
    # center preserved
    assert out[0] + out[2] / 2 == pytest.approx(5.0, abs=1e-4)


def test_encode_decode_roundtrip():
    rng = np.random.default_rng(0)
    anchors = np.abs(rng.standard_normal((20, 4))) * 30 + np.array([50, 50, 20, 20])
    boxes = np.abs(rng.standard_normal((20, 4))) * 25 + np.array([60, 60, 15, 15])
    back = decode_boxes(anchors, encode_boxes(anchors, boxes))
    np.testing.assert_allclose(back, boxes, atol=1e-4)


def test_decode_rejects_non_finite():
    with pytest.raises(ValueError):
        decode_boxes(np.ones((1, 4)), np.array([[np.nan, 0, 0, 0]], dtype=np.float32))


# -- NMS --------------------------------------------------------------------------


def test_nms_identical_boxes_keeps_higher_score():
    dets = [
        Detection((0, 0, 10, 10), 1, 0.8),
        Detection((0, 0, 10, 10), 1, 0.9),
    ]
    kept = nms(dets, 0.5)
    assert len(kept) == 1 and kept[0].score == 0.9


def test_nms_disjoint_boxes_both_kept():
    dets = [Detection((0, 0, 5, 5), 1, 0.9), Detection((50, 50, 5, 5), 1, 0.8)]
    assert len(nms(dets, 0.5)) == 2


def test_nms_chain_keeps_first_and_third():
    # A suppresses B (IoU 0.6); C overlaps B (0.54) but not A enough (0.29):
    # greedy keeps {A, C} because suppression only compares against kept boxes.
    a = Detection((0, 0, 10, 10), 1, 0.9)
    b = Detection((0, 2.5, 10, 10), 1, 0.8)
    c = Detection((0, 5.5, 10, 10), 1, 0.7)
    kept = nms([a, b, c], 0.5)
    assert [d.score for d in kept] == [0.9, 0.7]


def test_nms_categories_do_not_suppress_each_other():
    dets = [Detection((0, 0, 10, 10), 1, 0.9), Detection((0, 0, 10, 10), 2, 0.8)]
    assert len(nms(dets, 0.5)) == 2


def test_nms_scores_non_increasing_and_sparse():
    rng = np.random.default_rng(0)
    dets = [
        Detection(tuple(np.abs(rng.standard_normal(4)) * 20 + 5), int(rng.integers(1, 3)), float(rng.random()))
        for _ in range(40)
    ]
    kept = nms(dets, 0.5)
    scores = [d.score for d in kept]
    assert scores == sorted(scores, reverse=True)
    from ditdesk.metrics import iou

    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            if kept[i].category_id == kept[j].category_id:
                assert iou(kept[i].bbox, kept[j].bbox) < 0.5


def test_nms_rejects_non_finite_scores():
    with pytest.raises(ValueError):
        nms([Detection((0, 0, 1, 1), 1, float("nan"))], 0.5)


# -- head -------------------------------------------------------------------------


def test_head_logit_shapes():
    head = DetHead(np.random.default_rng(0), channels=8, num_classes=6, num_anchors=3)
    level = Tensor(np.random.default_rng(1).standard_normal((1, 14, 14, 8)).astype(np.float32))
    logits, deltas = head([level])
    # one pyramid level plus its pooled stride-2 extension
    assert logits.shape == (1, (14 * 14 + 7 * 7) * 3, 7)
    assert deltas.shape == (1, (14 * 14 + 7 * 7) * 3, 4)


def test_head_zero_tower_constant_bias_logits():
    head = DetHead(np.random.default_rng(2), channels=4, num_classes=2, num_anchors=1)
    for p in head.parameters():
        p.data = np.zeros_like(p.data)
    head.cls_head.bias.data = np.array([0.5, -1.0, 2.0], dtype=np.float32)
    level = Tensor(np.random.default_rng(3).standard_normal((1, 4, 4, 4)).astype(np.float32))
    logits, _ = head([level])
    np.testing.assert_allclose(logits.data[0], np.tile([0.5, -1.0, 2.0], ((16 + 4) * 1, 1)), atol=1e-6)


def test_batch_images_independent():
    rng = np.random.default_rng(4)
    head = DetHead(rng, channels=4, num_classes=2, num_anchors=3)
    x1 = np.random.default_rng(5).standard_normal((1, 4, 4, 4)).astype(np.float32)
    x2 = np.random.default_rng(6).standard_normal((1, 4, 4, 4)).astype(np.float32)
    both_logits, both_deltas = head([Tensor(np.concatenate([x1, x2]))])
    solo1 = head([Tensor(x1)])[0]
    solo2 = head([Tensor(x2)])[0]
    np.testing.assert_allclose(both_logits.data[0], solo1.data[0], atol=1e-5)
    np.testing.assert_allclose(both_logits.data[1], solo2.data[0], atol=1e-5)


# -- loss gradient ------------------------------------------------------------------


def test_detection_loss_gradcheck():
    rng = np.random.default_rng(0)
    cfg = _cfg(fpn_channels=4)
    head = DetHead(rng, channels=4, num_classes=6, num_anchors=3)
    n_anchors = (4 * 4 + 2 * 2) * 3
    labels = np.zeros(n_anchors, dtype=np.int64)
    labels[[3, 20]] = [2, 5]
    gt_deltas = np.zeros((n_anchors, 4), dtype=np.float32)
    gt_deltas[[3, 20]] = rng.standard_normal((2, 4)) * 0.2

    def f(t):
        logits, deltas = head([t])
        return detection_loss(logits[0], deltas[0], labels, gt_deltas, cfg, np.random.default_rng(1))

    x = rng.standard_normal((1, 4, 4, 4)).astype(np.float32) * 0.5
    assert grad_check(f, x, eps=1e-2) < 1e-2


# -- full pipeline --------------------------------------------------------------------


def _tiny_detector(seed=0, score_thr=0.05):
    rng = np.random.default_rng(seed)
    vcfg = VitConfig(depth=4, hidden=32, heads=4, ffn=64, pos_grid=(4, 4))
    encoder = VitEncoder(vcfg, rng)
    cfg = _cfg(fpn_channels=8)
    cfg.score_thr = score_thr
    adapter = FpnAdapter(rng, vcfg.hidden, cfg.fpn_channels)
    head = DetHead(rng, cfg.fpn_channels, cfg.num_classes, len(cfg.aspect_ratios))
    return Detector(encoder, adapter, head, cfg)


def test_detect_zero_class_weights_empty_above_uniform():
    detector = _tiny_detector()
    detector.head.cls_head.weight.data = np.zeros_like(detector.head.cls_head.weight.data)
    detector.head.cls_head.bias.data = np.zeros_like(detector.head.cls_head.bias.data)
    img = Image(np.random.default_rng(0).integers(0, 256, (64, 64, 1), dtype=np.uint8))
    # Uniform softmax over 7 classes puts every score at 1/7 < 0.2.
    assert detect(img, detector, score_thr=0.2) == []


def test_detect_deterministic():
    detector = _tiny_detector(seed=3, score_thr=0.01)
    img = Image(np.random.default_rng(1).integers(0, 256, (64, 64, 1), dtype=np.uint8))
    a = detect(img, detector)
    b = detect(img, detector)
    assert [(d.bbox, d.category_id, d.score) for d in a] == [(d.bbox, d.category_id, d.score) for d in b]


def test_detect_pads_odd_sizes_and_clips():
    detector = _tiny_detector(seed=4, score_thr=0.0)
    img = Image(np.random.default_rng(2).integers(0, 256, (70, 90, 1), dtype=np.uint8))
    dets = detect(img, detector)
    for d in dets:
        x, y, w, h = d.bbox
        assert 0 <= x and 0 <= y
        assert x + w <= 90 + 1e-3 and y + h <= 70 + 1e-3


def test_anchor_grid_matches_head_for_224():
    detector = _tiny_detector()
    pixels = np.zeros((1, 224, 224, 1), dtype=np.float32)
    logits, deltas = detector.forward_image_batch(pixels)
    anchors = all_anchors(224, 224, detector.cfg)
    assert logits.shape[1] == len(anchors)
    assert deltas.shape[1] == len(anchors)


def test_detector_rejects_tiny_grid():
    detector = _tiny_detector()
    with pytest.raises(ValueError, match="grid"):
        detector.forward_image_batch(np.zeros((1, 48, 48, 1), dtype=np.float32))


def test_train_detector_loss_decreases():
    rng = np.random.default_rng(0)
    images, elements = [], []
    for i in range(4):
        arr = np.full((64, 64, 1), 255, dtype=np.uint8)
        x, y = 8 + 4 * i, 12
        arr[y : y + 20, x : x + 24] = 40
        images.append(Image(arr))
        elements.append([LayoutElement("table", (float(x), float(y), 24.0, 20.0))])
    detector = _tiny_detector(seed=1)
    schedule = LrSchedule(peak_lr=1e-3, warmup_steps=2, total_steps=20)
    log = det.train_detector(images, elements, detector, epochs=5, batch_size=2, schedule=schedule, seed=0)
    assert log.step_loss[-1] < log.step_loss[0]
