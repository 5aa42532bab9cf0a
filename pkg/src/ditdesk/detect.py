"""Multi-scale detection on top of the ViT backbone.

Four tapped transformer blocks are resampled into a feature pyramid at
strides 4/8/16/32 (x4 via two stride-two 2x2 transposed convolutions, x2 via
one, x1 untouched, x0.5 via stride-two 2x2 max pooling), each projected to a
common width by a 1x1 convolution.  A lightweight single-stage anchor head
(shared conv tower, softmax class logits with background, box deltas) stands
in for the heavier two-stage frameworks while exercising the same adapter
interface.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import Image, normalize, patchify
from .nn import ops
from .nn.module import Conv2d, ConvTranspose2d, LayerNorm, Linear, Module, ModuleList
from .nn.optim import AdamW, LrSchedule, lr_at
from .nn.tensor import Tensor, concat, reshape
from .synthdoc import CATEGORY_IDS, LayoutElement
from .vit import DEFAULT_MEAN, DEFAULT_STD, VitEncoder, default_taps

logger = logging.getLogger(__name__)

ANCHOR_PRESETS = {
    "layout": (32, 64, 128, 256, 512),  # paragraph-level regions
    "text": (4, 8, 16, 32, 64),  # word-level boxes
}
PYRAMID_STRIDES = (4, 8, 16, 32)
HEAD_STRIDES = (4, 8, 16, 32, 64)  # fifth level: maxpool of the stride-32 map


@dataclass
class DetectConfig:
    num_classes: int
    fpn_channels: int = 256
    anchor_sizes: tuple[int, ...] = ANCHOR_PRESETS["layout"]
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    score_thr: float = 0.05
    nms_iou: float = 0.5
    pre_nms_topk: int = 1000  # per-class candidate cap before suppression
    smooth_l1_beta: float = 1.0 / 9.0
    neg_pos_ratio: int = 3

    def __post_init__(self):
        if len(self.anchor_sizes) != len(HEAD_STRIDES):
            raise ValueError(f"need {len(HEAD_STRIDES)} anchor sizes, got {len(self.anchor_sizes)}")
        if list(self.anchor_sizes) != sorted(self.anchor_sizes):
            raise ValueError(f"anchor sizes must be strictly increasing, got {self.anchor_sizes}")
        if not (0.0 <= self.neg_iou <= self.pos_iou <= 1.0):
            raise ValueError(f"need 0 <= neg_iou <= pos_iou <= 1, got {self.neg_iou}, {self.pos_iou}")


@dataclass
class Detection:
    bbox: tuple[float, float, float, float]  # (x, y, w, h)
    category_id: int
    score: float


# -- FPN adapter -----------------------------------------------------------------


class FpnAdapter(Module):
    """Resample four same-size tap maps into strides {4, 8, 16, 32}."""

    def __init__(self, rng: np.random.Generator, hidden: int, channels: int = 256):
        super().__init__()
        self.up4_a = ConvTranspose2d(rng, hidden, hidden)
        self.up4_norm = LayerNorm(hidden)
        self.up4_b = ConvTranspose2d(rng, hidden, hidden)
        self.up2 = ConvTranspose2d(rng, hidden, hidden)
        self.proj = ModuleList([Conv2d(rng, hidden, channels, 1) for _ in range(4)])
        self.channels = channels

    def __call__(self, taps: list[Tensor]) -> list[Tensor]:
        """taps: four (B, gh, gw, hidden) maps -> pyramid at strides 4/8/16/32."""
        if len(taps) != 4:
            raise ValueError(f"expected 4 taps, got {len(taps)}")
        shapes = {t.shape for t in taps}
        if len(shapes) != 1:
            raise ValueError(f"tap grids disagree: {sorted(shapes)}")
        x4 = self.up4_b(ops.gelu(self.up4_norm(self.up4_a(taps[0]))))
        x2 = self.up2(taps[1])
        x1 = taps[2]
        x05 = ops.maxpool2d(taps[3])
        return [proj(x) for proj, x in zip(self.proj, (x4, x2, x1, x05))]


def seq_to_grid(states: Tensor, grid: tuple[int, int]) -> Tensor:
    """(B, N, h) sequence states -> (B, gh, gw, h) spatial map."""
    b, n, h = states.shape
    if n != grid[0] * grid[1]:
        raise ValueError(f"{n} positions but grid is {grid}")
    return reshape(states, (b, grid[0], grid[1], h))


# -- anchors and box coding ---------------------------------------------------------


def gen_anchors(level: int, image_w: int, image_h: int, cfg: DetectConfig) -> np.ndarray:
    """Anchors for one pyramid level, (grid_h * grid_w * A, 4) xywh.

    Centered on cell centers; per cell one size (area size^2) at each aspect
    ratio, where aspect = h/w.
    """
    if not (0 <= level < len(HEAD_STRIDES)):
        raise ValueError(f"level {level} outside [0, {len(HEAD_STRIDES)})")
    stride = HEAD_STRIDES[level]
    size = cfg.anchor_sizes[level]
    gw = max(1, image_w // stride)
    gh = max(1, image_h // stride)
    cx = (np.arange(gw) + 0.5) * stride
    cy = (np.arange(gh) + 0.5) * stride
    ratios = np.asarray(cfg.aspect_ratios, dtype=np.float64)
    ws = size / np.sqrt(ratios)
    hs = size * np.sqrt(ratios)
    cxg, cyg = np.meshgrid(cx, cy)  # (gh, gw)
    anchors = np.empty((gh, gw, len(ratios), 4), dtype=np.float32)
    anchors[..., 0] = cxg[..., None] - ws / 2.0
    anchors[..., 1] = cyg[..., None] - hs / 2.0
    anchors[..., 2] = ws
    anchors[..., 3] = hs
    return anchors.reshape(-1, 4)


def all_anchors(image_w: int, image_h: int, cfg: DetectConfig) -> np.ndarray:
    return np.concatenate([gen_anchors(lv, image_w, image_h, cfg) for lv in range(len(HEAD_STRIDES))])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of xywh boxes, (len(a), len(b))."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    ax1, ay1 = a[:, 0], a[:, 1]
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    ix = np.clip(np.minimum(ax2[:, None], bx2) - np.maximum(ax1[:, None], bx1), 0.0, None)
    iy = np.clip(np.minimum(ay2[:, None], by2) - np.maximum(ay1[:, None], by1), 0.0, None)
    inter = ix * iy
    union = (a[:, 2] * a[:, 3])[:, None] + b[:, 2] * b[:, 3] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Box -> anchor-relative deltas (dx/wa, dy/ha, ln(w/wa), ln(h/ha))."""
    acx = anchors[:, 0] + anchors[:, 2] / 2.0
    acy = anchors[:, 1] + anchors[:, 3] / 2.0
    bcx = boxes[:, 0] + boxes[:, 2] / 2.0
    bcy = boxes[:, 1] + boxes[:, 3] / 2.0
    return np.stack(
        [
            (bcx - acx) / anchors[:, 2],
            (bcy - acy) / anchors[:, 3],
            np.log(boxes[:, 2] / anchors[:, 2]),
            np.log(boxes[:, 3] / anchors[:, 3]),
        ],
        axis=1,
    ).astype(np.float32)


def decode_boxes(
    anchors: np.ndarray,
    deltas: np.ndarray,
    image_w: int | None = None,
    image_h: int | None = None,
) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; optionally clips to image bounds."""
    if not np.isfinite(deltas).all():
        raise ValueError("non-finite box delta")
    cx = anchors[:, 0] + anchors[:, 2] / 2.0 + deltas[:, 0] * anchors[:, 2]
    cy = anchors[:, 1] + anchors[:, 3] / 2.0 + deltas[:, 1] * anchors[:, 3]
    w = anchors[:, 2] * np.exp(deltas[:, 2])
    h = anchors[:, 3] * np.exp(deltas[:, 3])
    x1, y1 = cx - w / 2.0, cy - h / 2.0
    x2, y2 = cx + w / 2.0, cy + h / 2.0
    if image_w is not None:
        x1, x2 = np.clip(x1, 0, image_w), np.clip(x2, 0, image_w)
        y1, y2 = np.clip(y1, 0, image_h), np.clip(y2, 0, image_h)
    return np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)


def assign_targets(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    pos_iou: float = 0.5,
    neg_iou: float = 0.4,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor labels and regression deltas.

    Labels: class id (> 0) for positives, 0 for background, -1 for ignore.
    An anchor is positive if its best gt IoU >= pos_iou, or if it is the
    best anchor for some gt (rescue); negative below neg_iou; ignored between.
    """
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, 4), dtype=np.float32)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, deltas
    ious = iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou < neg_iou] = 0
    pos = best_iou >= pos_iou
    # Rescue: the highest-IoU anchor of each gt is positive even below pos_iou.
    for g in range(len(gt_boxes)):
        if ious[:, g].max() > 0:
            a = int(ious[:, g].argmax())
            pos[a] = True
            best_gt[a] = g
    labels[pos] = gt_classes[best_gt[pos]]
    deltas[pos] = encode_boxes(anchors[pos], gt_boxes[best_gt[pos]])
    return labels, deltas


# -- detection head ------------------------------------------------------------------


class DetHead(Module):
    """Shared 3x3 conv tower, then 1x1 class and box heads per anchor."""

    def __init__(self, rng: np.random.Generator, channels: int, num_classes: int, num_anchors: int):
        super().__init__()
        self.tower1 = Conv2d(rng, channels, channels, 3, pad=1)
        self.tower2 = Conv2d(rng, channels, channels, 3, pad=1)
        self.cls_head = Conv2d(rng, channels, num_anchors * (num_classes + 1), 1)
        self.box_head = Conv2d(rng, channels, num_anchors * 4, 1)
        self.num_classes = num_classes
        self.num_anchors = num_anchors

    def __call__(self, pyramid: list[Tensor]) -> tuple[Tensor, Tensor]:
        """Pyramid (+ implicit stride-64 level) -> per-anchor (logits, deltas).

        Returns logits (B, total_anchors, num_classes + 1) and deltas
        (B, total_anchors, 4), concatenated over levels in order.
        """
        levels = list(pyramid) + [ops.maxpool2d(pyramid[-1])]
        logits_all, deltas_all = [], []
        for level in levels:
            feat = ops.gelu(self.tower2(ops.gelu(self.tower1(level))))
            b, gh, gw, _ = feat.shape
            cls = reshape(self.cls_head(feat), (b, gh * gw * self.num_anchors, self.num_classes + 1))
            box = reshape(self.box_head(feat), (b, gh * gw * self.num_anchors, 4))
            logits_all.append(cls)
            deltas_all.append(box)
        return concat(logits_all, axis=1), concat(deltas_all, axis=1)


def _nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> list[int]:
    """Greedy keep-list over one category, descending score, index tie-break."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    kept: list[int] = []
    kept_boxes = np.empty((0, 4))
    for i in order:
        if len(kept) == 0:
            kept.append(int(i))
            kept_boxes = boxes[i : i + 1]
            continue
        ious = iou_matrix(boxes[i : i + 1], kept_boxes)[0]
        if (ious < iou_thr).all():
            kept.append(int(i))
            kept_boxes = np.concatenate([kept_boxes, boxes[i : i + 1]])
    return kept


def nms(dets: list[Detection], iou_thr: float = 0.5) -> list[Detection]:
    """Greedy per-category suppression by descending score.

    Ties break by original list index; a detection is dropped when its IoU
    with an already kept same-category detection reaches the threshold.
    """
    for d in dets:
        if not math.isfinite(d.score):
            raise ValueError(f"non-finite score {d.score}")
    kept_all: list[int] = []
    by_cat: dict[int, list[int]] = {}
    for i, d in enumerate(dets):
        by_cat.setdefault(d.category_id, []).append(i)
    for cat_indices in by_cat.values():
        boxes = np.array([dets[i].bbox for i in cat_indices], dtype=np.float64)
        scores = np.array([dets[i].score for i in cat_indices], dtype=np.float64)
        kept_all.extend(cat_indices[k] for k in _nms_indices(boxes, scores, iou_thr))
    kept_all.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in kept_all]


# -- full pipeline ---------------------------------------------------------------------


class Detector(Module):
    """Backbone + FPN adapter + anchor head bundle."""

    def __init__(self, encoder: VitEncoder, adapter: FpnAdapter, head: DetHead, cfg: DetectConfig):
        super().__init__()
        self.encoder = encoder
        self.adapter = adapter
        self.head = head
        self.cfg = cfg
        self.taps = default_taps(encoder.cfg.depth)

    def forward_image_batch(
        self, pixels: np.ndarray, rng: np.random.Generator | None = None
    ) -> tuple[Tensor, Tensor]:
        """(B, H, W, C) normalized pixels -> per-anchor logits and deltas."""
        b, h, w, c = pixels.shape
        patch = self.encoder.cfg.patch
        grid = (h // patch, w // patch)
        if min(grid) < 4:
            # Below this the stride-64 anchor grid and the pooled map disagree.
            raise ValueError(f"detection needs a patch grid of at least 4x4, got {grid}")
        flat = (
            pixels.reshape(b, grid[0], patch, grid[1], patch, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, grid[0] * grid[1], patch * patch * c)
        )
        emb = self.encoder.embed(flat, grid)
        _, tapped = self.encoder.forward(emb, taps=self.taps, rng=rng)
        maps = [seq_to_grid(tapped[t], grid) for t in self.taps]
        pyramid = self.adapter(maps)
        return self.head(pyramid)


def _pad_to_multiple(img: Image, multiple: int) -> tuple[np.ndarray, int, int]:
    """Pad right/bottom with background (white) to a multiple of ``multiple``."""
    h, w = img.height, img.width
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    data = img.data
    if ph or pw:
        data = np.pad(data, ((0, ph), (0, pw), (0, 0)), constant_values=255)
    return data, w, h


def detect(img: Image, detector: Detector, score_thr: float | None = None) -> list[Detection]:
    """Run the full pipeline on one image; returns NMS-filtered detections.

    The image is padded to a multiple of the patch size with background;
    predicted boxes are clipped back to the original extent.
    """
    cfg = detector.cfg
    thr = cfg.score_thr if score_thr is None else score_thr
    padded, orig_w, orig_h = _pad_to_multiple(img, detector.encoder.cfg.patch)
    normed = normalize(Image(padded), DEFAULT_MEAN, DEFAULT_STD)
    detector.eval()
    logits, deltas = detector.forward_image_batch(normed.data[None])
    probs = ops.softmax(logits, axis=-1).data[0]  # (A, C+1)
    anchors = all_anchors(padded.shape[1], padded.shape[0], cfg)
    boxes = decode_boxes(anchors, deltas.data[0], image_w=orig_w, image_h=orig_h)
    dets: list[Detection] = []
    for cls in range(1, cfg.num_classes + 1):
        scores = probs[:, cls]
        candidates = np.flatnonzero(scores > thr)
        if len(candidates) > cfg.pre_nms_topk:
            top = np.argsort(-scores[candidates], kind="stable")[: cfg.pre_nms_topk]
            candidates = candidates[top]
        for a in candidates:
            x, y, w, h = boxes[a]
            if w <= 0 or h <= 0:
                continue
            dets.append(Detection(bbox=(float(x), float(y), float(w), float(h)), category_id=cls, score=float(scores[a])))
    dets = nms(dets, cfg.nms_iou)
    dets.sort(key=lambda d: -d.score)
    return dets


# -- training ---------------------------------------------------------------------------


def detection_loss(
    logits: Tensor,
    deltas: Tensor,
    anchor_labels: np.ndarray,
    anchor_deltas: np.ndarray,
    cfg: DetectConfig,
    rng: np.random.Generator,
) -> Tensor:
    """Sampled softmax cross-entropy + smooth-L1 on positives, for one image.

    Negatives are subsampled at ``neg_pos_ratio`` per positive (minimum a
    handful so an all-background image still trains the classifier).
    """
    pos_idx = np.flatnonzero(anchor_labels > 0)
    neg_idx = np.flatnonzero(anchor_labels == 0)
    n_neg = min(len(neg_idx), max(cfg.neg_pos_ratio * max(1, len(pos_idx)), 8))
    if len(neg_idx) > n_neg:
        neg_idx = rng.choice(neg_idx, size=n_neg, replace=False)
    sample = np.sort(np.concatenate([pos_idx, neg_idx]))
    sel = np.zeros(len(anchor_labels), dtype=bool)
    sel[sample] = True
    cls_loss = ops.cross_entropy(ops.masked_select_rows(logits, sel), anchor_labels[sample])
    if len(pos_idx):
        pos_mask = np.zeros(len(anchor_labels), dtype=bool)
        pos_mask[pos_idx] = True
        pred = ops.masked_select_rows(deltas, pos_mask)
        box_loss = ops.smooth_l1(pred, anchor_deltas[pos_idx], beta=cfg.smooth_l1_beta, reduction="sum") * (
            1.0 / len(pos_idx)
        )
        return cls_loss + box_loss
    return cls_loss


@dataclass
class DetectTrainLog:
    step_loss: list[float] = field(default_factory=list)


def train_detector(
    images: list[Image],
    elements: list[list[LayoutElement]],
    detector: Detector,
    epochs: int,
    batch_size: int,
    schedule: LrSchedule,
    weight_decay: float = 0.05,
    seed: int = 0,
) -> DetectTrainLog:
    """Overfit-style fine-tuning on fixed-size images (no multi-scale jitter)."""
    if len(images) != len(elements):
        raise ValueError(f"{len(images)} images vs {len(elements)} annotation lists")
    sizes = {(im.width, im.height) for im in images}
    if len(sizes) != 1:
        raise ValueError(f"train_detector expects uniform image sizes, got {sorted(sizes)}")
    w, h = next(iter(sizes))
    if w % detector.encoder.cfg.patch or h % detector.encoder.cfg.patch:
        raise ValueError(f"image size {w}x{h} not divisible by patch {detector.encoder.cfg.patch}")
    cfg = detector.cfg
    rng = np.random.default_rng(seed)
    anchors = all_anchors(w, h, cfg)
    targets = []
    for els in elements:
        boxes = np.array([el.bbox for el in els], dtype=np.float64).reshape(-1, 4)
        classes = np.array([CATEGORY_IDS[el.category] for el in els], dtype=np.int64)
        targets.append(assign_targets(anchors, boxes, classes, cfg.pos_iou, cfg.neg_iou))
    pixels = np.stack([normalize(im, DEFAULT_MEAN, DEFAULT_STD).data for im in images])

    optimizer = AdamW(detector, weight_decay=weight_decay)
    detector.train()
    log = DetectTrainLog()
    step = 0
    n = len(images)
    for _ in range(epochs):
        order = rng.permutation(n)
        for b in range(0, n, batch_size):
            idx = order[b : b + batch_size]
            logits, deltas = detector.forward_image_batch(pixels[idx], rng=rng)
            loss = None
            for row, i in enumerate(idx):
                labels_i, deltas_i = targets[i]
                li = detection_loss(logits[row], deltas[row], labels_i, deltas_i, cfg, rng)
                loss = li if loss is None else loss + li
            loss = loss * (1.0 / len(idx))
            detector.zero_grad()
            loss.backward()
            optimizer.step(lr_at(schedule, min(step, schedule.total_steps)))
            log.step_loss.append(loss.item())
            step += 1
    return log


def detections_to_json(dets_per_image: dict[int, list[Detection]], path: str | Path) -> None:
    """COCO results schema subset: [{image_id, category_id, bbox, score}]."""
    rows = []
    for image_id in sorted(dets_per_image):
        for d in dets_per_image[image_id]:
            rows.append(
                {
                    "image_id": image_id,
                    "category_id": d.category_id,
                    "bbox": [round(v, 3) for v in d.bbox],
                    "score": round(d.score, 6),
                }
            )
    Path(path).write_text(json.dumps(rows, indent=1))
