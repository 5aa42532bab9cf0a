"""Deterministic synthetic document corpus with exact layout annotations.

Pages are rendered as bars and grids on a white background: text lines are
thin dark bars, titles thicker bars, lists are bullet-and-bar stacks, tables
are line grids, figures filled or hatched rectangles, words short bars.  No
fonts, no noise models; every element's bounding box is exact by
construction.  One of 16 layout templates determines the page composition
and doubles as the classification label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import Image, save_image

CATEGORIES = ("text", "title", "list", "table", "figure", "word")
CATEGORY_IDS = {name: i + 1 for i, name in enumerate(CATEGORIES)}
NUM_TEMPLATES = 16

_MARGIN = 8
_GAP = 4  # minimum clearance between element boxes, keeps the 1-px ring clean


class PageTooSmallError(ValueError):
    """Raised when a template's mandatory elements cannot be placed."""


@dataclass
class LayoutElement:
    category: str
    bbox: tuple[float, float, float, float]  # (x, y, w, h) pixels

    def __post_init__(self):
        if self.category not in CATEGORY_IDS:
            raise ValueError(f"unknown category {self.category!r}")
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"degenerate bbox {self.bbox}")


@dataclass
class SynthDocument:
    image: Image
    elements: list[LayoutElement]
    class_id: int


# -- placement ----------------------------------------------------------------


def _fits(x, y, w, h, occupied):
    for ox, oy, ow, oh in occupied:
        if x < ox + ow + _GAP and ox < x + w + _GAP and y < oy + oh + _GAP and oy < y + h + _GAP:
            return False
    return True


def _place(rng, page_w, page_h, w, h, occupied, tries=40):
    lo_x, hi_x = _MARGIN, page_w - _MARGIN - w
    lo_y, hi_y = _MARGIN, page_h - _MARGIN - h
    if hi_x < lo_x or hi_y < lo_y:
        return None
    for _ in range(tries):
        x = int(rng.integers(lo_x, hi_x + 1))
        y = int(rng.integers(lo_y, hi_y + 1))
        if _fits(x, y, w, h, occupied):
            occupied.append((x, y, w, h))
            return x, y
    return None


# -- drawing ------------------------------------------------------------------


def _draw_bar(canvas, x, y, w, h, shade):
    canvas[y : y + h, x : x + w] = shade


def _draw_table(canvas, rng, x, y, w, h, shade):
    rows = int(rng.integers(2, 6))
    cols = int(rng.integers(2, 6))
    lw = max(1, round(min(w, h) / 60))
    canvas[y : y + lw, x : x + w] = shade
    canvas[y + h - lw : y + h, x : x + w] = shade
    canvas[y : y + h, x : x + lw] = shade
    canvas[y : y + h, x + w - lw : x + w] = shade
    for r in range(1, rows):
        yy = y + round(r * (h - lw) / rows)
        canvas[yy : yy + lw, x : x + w] = shade
    for c in range(1, cols):
        xx = x + round(c * (w - lw) / cols)
        canvas[y : y + h, xx : xx + lw] = shade


def _draw_figure(canvas, rng, x, y, w, h, shade):
    if rng.random() < 0.5:
        canvas[y : y + h, x : x + w] = shade
    else:
        lw = max(1, round(min(w, h) / 40))
        canvas[y : y + lw, x : x + w] = shade
        canvas[y + h - lw : y + h, x : x + w] = shade
        canvas[y : y + h, x : x + lw] = shade
        canvas[y : y + h, x + w - lw : x + w] = shade
        step = max(4, round(min(w, h) / 6))
        for off in range(step, w + h, step):  # diagonal hatching, clipped to the rect
            for t in range(max(0, off - h + 1), min(off + 1, w)):
                yy = y + off - t
                if y <= yy < y + h:
                    canvas[yy, x + t] = shade


def _draw_list(canvas, rng, x, y, w, h, shade):
    n = max(2, h // 12)
    line_h = max(2, round(h / (2 * n)))
    for i in range(n):
        yy = y + round(i * (h - line_h) / max(1, n - 1))
        bullet = line_h
        canvas[yy : yy + line_h, x : x + bullet] = shade
        bar_w = round((w - 2 * bullet) * float(rng.uniform(0.6, 1.0)))
        canvas[yy : yy + line_h, x + 2 * bullet : x + 2 * bullet + bar_w] = shade


# -- element recipes ------------------------------------------------------------

# Per-category size samplers as fractions of page dimensions.
def _size(rng, page_w, page_h, category):
    if category == "text":
        w = rng.uniform(0.35, 0.72) * (page_w - 2 * _MARGIN)
        h = rng.uniform(0.014, 0.03) * page_h
    elif category == "title":
        w = rng.uniform(0.3, 0.6) * (page_w - 2 * _MARGIN)
        h = rng.uniform(0.035, 0.06) * page_h
    elif category == "list":
        w = rng.uniform(0.3, 0.5) * (page_w - 2 * _MARGIN)
        h = rng.uniform(0.18, 0.32) * page_h
    elif category == "table":
        w = rng.uniform(0.34, 0.6) * (page_w - 2 * _MARGIN)
        h = rng.uniform(0.2, 0.38) * page_h
    elif category == "figure":
        w = rng.uniform(0.22, 0.42) * (page_w - 2 * _MARGIN)
        h = rng.uniform(0.18, 0.36) * page_h
    else:  # word
        w = rng.uniform(0.05, 0.12) * page_w
        h = rng.uniform(0.016, 0.03) * page_h
    return max(3, round(w)), max(2, round(h))


# template id -> list of (category, min_count, max_count, required)
_TEMPLATES: dict[int, list[tuple[str, int, int, bool]]] = {
    0: [("title", 1, 1, True), ("text", 4, 7, False)],
    1: [("word", 8, 14, True), ("text", 1, 2, False)],
    2: [("title", 1, 1, True), ("text", 3, 5, False), ("word", 2, 4, False)],
    3: [("table", 1, 2, True)],
    4: [("figure", 1, 2, True)],
    5: [("table", 1, 1, True), ("figure", 1, 1, True), ("text", 1, 3, False)],
    6: [("title", 1, 1, True), ("text", 5, 8, False), ("figure", 1, 1, False)],
    7: [("list", 1, 1, True), ("text", 2, 4, False)],
    8: [("title", 1, 1, True), ("word", 1, 2, False)],
    9: [("title", 1, 1, True), ("text", 7, 10, False)],
    10: [("table", 1, 1, True), ("word", 4, 8, False), ("text", 1, 2, False)],
    11: [("title", 1, 1, True), ("figure", 1, 1, True), ("list", 1, 1, False)],
    12: [("list", 1, 1, True), ("word", 4, 8, False)],
    13: [("title", 1, 1, True), ("list", 1, 1, True), ("text", 2, 4, False)],
    14: [("title", 1, 1, True), ("text", 3, 5, False)],
    15: [("figure", 1, 1, True), ("text", 4, 6, False), ("word", 2, 4, False)],
}

_DRAWERS = {
    "text": lambda canvas, rng, x, y, w, h, shade: _draw_bar(canvas, x, y, w, h, shade),
    "title": lambda canvas, rng, x, y, w, h, shade: _draw_bar(canvas, x, y, w, h, shade),
    "word": lambda canvas, rng, x, y, w, h, shade: _draw_bar(canvas, x, y, w, h, shade),
    "table": _draw_table,
    "figure": _draw_figure,
    "list": _draw_list,
}


def generate_document(
    rng: np.random.Generator,
    template_id: int,
    page: tuple[int, int] = (448, 448),
) -> SynthDocument:
    """Render one page from a layout template; class_id equals the template id."""
    if not (0 <= template_id < NUM_TEMPLATES):
        raise ValueError(f"template id must be in [0, {NUM_TEMPLATES}), got {template_id}")
    page_w, page_h = page
    canvas = np.full((page_h, page_w), 255, dtype=np.uint8)
    occupied: list[tuple[int, int, int, int]] = []
    elements: list[LayoutElement] = []
    for category, lo, hi, required in _TEMPLATES[template_id]:
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            w, h = _size(rng, page_w, page_h, category)
            spot = _place(rng, page_w, page_h, w, h, occupied)
            if spot is None:
                if required and not any(e.category == category for e in elements):
                    raise PageTooSmallError(
                        f"page {page_w}x{page_h} too small for required {category!r} of template {template_id}"
                    )
                continue
            x, y = spot
            shade = int(rng.integers(30, 90))
            _DRAWERS[category](canvas, rng, x, y, w, h, shade)
            elements.append(LayoutElement(category, (float(x), float(y), float(w), float(h))))
    return SynthDocument(image=Image(canvas[:, :, None]), elements=elements, class_id=template_id)


def generate_corpus(
    n: int,
    seed: int,
    out_dir: str | Path,
    mix_weights=None,
    page: tuple[int, int] = (448, 448),
) -> dict:
    """Write ``n`` PNG pages plus COCO-style annotations and a manifest.

    Each document uses an independent generator seeded with ``seed XOR index``
    so any page can be regenerated in isolation, byte-identically.
    """
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if mix_weights is None:
        weights = np.full(NUM_TEMPLATES, 1.0 / NUM_TEMPLATES)
    else:
        weights = np.asarray(mix_weights, dtype=np.float64)
        if weights.shape != (NUM_TEMPLATES,) or weights.sum() <= 0:
            raise ValueError(f"mix weights must be {NUM_TEMPLATES} non-negative values")
        weights = weights / weights.sum()

    images, annotations, manifest_docs = [], [], []
    ann_id = 1
    for index in range(n):
        doc = generate_document_at(seed, index, weights, page)
        file_name = f"doc_{index:05d}.png"
        save_image(doc.image, out_dir / file_name)
        images.append(
            {
                "id": index,
                "file_name": file_name,
                "width": doc.image.width,
                "height": doc.image.height,
                "class_id": doc.class_id,
            }
        )
        for el in doc.elements:
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": index,
                    "category_id": CATEGORY_IDS[el.category],
                    "bbox": list(el.bbox),
                }
            )
            ann_id += 1
        manifest_docs.append({"file_name": file_name, "class_id": doc.class_id, "elements": len(doc.elements)})

    coco = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": cid, "name": name} for name, cid in CATEGORY_IDS.items()],
    }
    (out_dir / "annotations.json").write_text(json.dumps(coco, indent=1))
    manifest = {"seed": seed, "count": n, "page": list(page), "documents": manifest_docs}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def generate_document_at(
    seed: int,
    index: int,
    weights=None,
    page: tuple[int, int] = (448, 448),
) -> SynthDocument:
    """Regenerate corpus document ``index`` in isolation (seed XOR index)."""
    rng = np.random.default_rng(seed ^ index)
    if weights is None:
        weights = np.full(NUM_TEMPLATES, 1.0 / NUM_TEMPLATES)
    template_id = int(rng.choice(NUM_TEMPLATES, p=np.asarray(weights)))
    return generate_document(rng, template_id, page)
