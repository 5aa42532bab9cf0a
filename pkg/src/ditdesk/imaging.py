"""Image I/O, resizing, augmentation, binarization, and patchification.

Images are (H, W, C) numpy arrays wrapped in :class:`Image`; uint8 on disk,
float32 after :func:`normalize`.  All random operations take an explicit
``numpy.random.Generator`` and are bit-reproducible given the same seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

logger = logging.getLogger(__name__)

DEFAULT_CROP_AREA = (0.7, 1.0)
DEFAULT_CROP_ASPECT = (3.0 / 4.0, 4.0 / 3.0)
MULTISCALE_SHORT_SIDES = tuple(range(480, 801, 32))
MULTISCALE_MAX_LONG = 1333


class ImageDecodeError(ValueError):
    """File exists but cannot be decoded as a supported raster."""


@dataclass
class Image:
    """Pixel raster with explicit channel count (1 = grayscale, 3 = RGB)."""

    data: np.ndarray  # (H, W, C)

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3:
            raise ValueError(f"image data must be (H, W, C), got shape {self.data.shape}")
        h, w, c = self.data.shape
        if h < 1 or w < 1:
            raise ValueError(f"image dimensions must be >= 1, got {w}x{h}")
        if c not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {c}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class PatchSequence:
    """Row-major sequence of flattened non-overlapping patches."""

    patch_size: int
    grid_h: int
    grid_w: int
    channels: int
    patches: np.ndarray  # (grid_h * grid_w, P * P * C), float32

    def __post_init__(self):
        n, d = self.patches.shape
        if n != self.grid_h * self.grid_w:
            raise ValueError(f"{n} patches but grid is {self.grid_h}x{self.grid_w}")
        if d != self.patch_size * self.patch_size * self.channels:
            raise ValueError(f"patch vector length {d} != P*P*C")


# -- file I/O -----------------------------------------------------------------


def load_image(path: str | Path) -> Image:
    """Decode a PNG or PGM file; grayscale files yield channels=1."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with PILImage.open(path) as pil:
            pil.load()
            if pil.mode in ("1", "I;16", "I", "LA"):
                pil = pil.convert("L")
            elif pil.mode not in ("L", "RGB"):
                pil = pil.convert("RGB")
            arr = np.asarray(pil, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
    if arr.size == 0:
        raise ImageDecodeError(f"zero-dimension image: {path}")
    return Image(arr)


def save_image(img: Image, path: str | Path) -> None:
    """Write uint8 pixels as PNG or binary PGM, chosen by file suffix."""
    path = Path(path)
    data = img.data
    if data.dtype != np.uint8:
        data = np.clip(np.rint(data), 0, 255).astype(np.uint8)
    arr = data[:, :, 0] if data.shape[2] == 1 else data
    pil = PILImage.fromarray(arr)
    if path.suffix.lower() == ".pgm":
        if data.shape[2] != 1:
            raise ValueError("PGM output requires a grayscale image")
        pil.save(path, format="PPM")
    else:
        pil.save(path, format="PNG")


# -- resampling ------------------------------------------------------------------


def _resize_axis(data: np.ndarray, out_size: int, axis: int) -> np.ndarray:
    in_size = data.shape[axis]
    if in_size == out_size:
        return data
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = (src - lo).astype(np.float32)
    shape = [1] * data.ndim
    shape[axis] = out_size
    frac = frac.reshape(shape)
    take_lo = np.take(data, lo, axis=axis)
    take_hi = np.take(data, hi, axis=axis)
    return take_lo * (1.0 - frac) + take_hi * frac


def resize(img: Image, w: int, h: int) -> Image:
    """Bilinear resize (align-corners-false convention) to exactly (w, h)."""
    if w < 1 or h < 1:
        raise ValueError(f"target size must be >= 1, got {w}x{h}")
    src = img.data
    if src.shape[0] == h and src.shape[1] == w:
        return Image(src.copy())
    out = src.astype(np.float32)
    out = _resize_axis(out, h, axis=0)
    out = _resize_axis(out, w, axis=1)
    if img.data.dtype == np.uint8:
        out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return Image(out)


def sample_crop_rect(
    rng: np.random.Generator,
    width: int,
    height: int,
    area_range: tuple[float, float],
    aspect_range: tuple[float, float],
    attempts: int = 10,
) -> tuple[int, int, int, int]:
    """Sample an (x, y, w, h) crop; falls back to a center crop after ``attempts``."""
    area = width * height
    log_aspect = (math.log(aspect_range[0]), math.log(aspect_range[1]))
    for _ in range(attempts):
        target_area = rng.uniform(area_range[0], area_range[1]) * area
        aspect = math.exp(rng.uniform(*log_aspect))
        cw = int(round(math.sqrt(target_area * aspect)))
        ch = int(round(math.sqrt(target_area / aspect)))
        if 0 < cw <= width and 0 < ch <= height:
            x = int(rng.integers(0, width - cw + 1))
            y = int(rng.integers(0, height - ch + 1))
            return x, y, cw, ch
    side = min(width, height)
    return (width - side) // 2, (height - side) // 2, side, side


def random_resized_crop(
    img: Image,
    rng: np.random.Generator,
    area_range: tuple[float, float] = DEFAULT_CROP_AREA,
    aspect_range: tuple[float, float] = DEFAULT_CROP_ASPECT,
    out: int = 224,
) -> Image:
    """Crop a random area/aspect rectangle, then resize to ``out`` x ``out``."""
    if not (0.0 < area_range[0] <= area_range[1] <= 1.0):
        raise ValueError(f"invalid area range {area_range}")
    x, y, cw, ch = sample_crop_rect(rng, img.width, img.height, area_range, aspect_range)
    logger.debug("random_resized_crop rect x=%d y=%d w=%d h=%d", x, y, cw, ch)
    crop = Image(img.data[y : y + ch, x : x + cw])
    return resize(crop, out, out)


def multiscale_dims(width: int, height: int, short_target: int) -> tuple[int, int]:
    """Scale so the short side hits ``short_target`` unless the long side would
    exceed the cap, in which case the cap wins and aspect is preserved."""
    short, long = min(width, height), max(width, height)
    scale = min(short_target / short, MULTISCALE_MAX_LONG / long)
    return max(1, int(round(width * scale))), max(1, int(round(height * scale)))


def multiscale_resize(img: Image, rng: np.random.Generator) -> Image:
    """Detection-style augmentation: optional random crop, then rescale so the
    shortest side lands in {480, 512, ..., 800} with the longest side <= 1333."""
    out = img
    if rng.random() < 0.5:
        fw = rng.uniform(0.5, 1.0)
        fh = rng.uniform(0.5, 1.0)
        cw = max(1, int(round(img.width * fw)))
        ch = max(1, int(round(img.height * fh)))
        x = int(rng.integers(0, img.width - cw + 1))
        y = int(rng.integers(0, img.height - ch + 1))
        out = Image(img.data[y : y + ch, x : x + cw])
    short_target = int(rng.choice(MULTISCALE_SHORT_SIDES))
    w2, h2 = multiscale_dims(out.width, out.height, short_target)
    return resize(out, w2, h2)


# -- binarization ------------------------------------------------------------------


def _gaussian_kernel(window: int) -> np.ndarray:
    # Matches the common auto-sigma convention for a given window size.
    sigma = 0.3 * ((window - 1) * 0.5 - 1) + 0.8
    r = (window - 1) / 2.0
    xs = np.arange(window, dtype=np.float64) - r
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_local_mean(gray: np.ndarray, window: int) -> np.ndarray:
    """Gaussian-weighted mean over a window x window neighborhood, replicate border."""
    k = _gaussian_kernel(window)
    r = window // 2
    padded = np.pad(gray.astype(np.float64), ((r, r), (r, r)), mode="edge")
    rows = np.zeros((gray.shape[0], padded.shape[1]), dtype=np.float64)
    for i in range(window):
        rows += k[i] * padded[i : i + gray.shape[0], :]
    out = np.zeros(gray.shape, dtype=np.float64)
    for j in range(window):
        out += k[j] * rows[:, j : j + gray.shape[1]]
    return out


def adaptive_binarize(img: Image, window: int = 31, offset: float = 10.0) -> Image:
    """Threshold each pixel against its Gaussian local mean minus ``offset``.

    Output pixels are 255 where pixel > mean - offset, else 0.
    """
    if img.channels != 1:
        raise ValueError(f"adaptive_binarize requires a grayscale image, got {img.channels} channels")
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    gray = img.data[:, :, 0].astype(np.float64)
    local_mean = gaussian_local_mean(gray, window)
    out = np.where(gray > local_mean - offset, 255, 0).astype(np.uint8)
    return Image(out[:, :, None])


# -- patch tiling ------------------------------------------------------------------


def patchify(img: Image, patch: int) -> PatchSequence:
    """Split into non-overlapping patch x patch tiles, row-major order."""
    h, w, c = img.data.shape
    if h % patch != 0 or w % patch != 0:
        raise ValueError(f"image {w}x{h} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    tiles = (
        img.data.astype(np.float32)
        .reshape(gh, patch, gw, patch, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch * patch * c)
    )
    return PatchSequence(patch_size=patch, grid_h=gh, grid_w=gw, channels=c, patches=tiles)


def unpatchify(seq: PatchSequence) -> Image:
    """Inverse tiling; restores the exact pixel layout of :func:`patchify`."""
    p, gh, gw, c = seq.patch_size, seq.grid_h, seq.grid_w, seq.channels
    data = (
        seq.patches.reshape(gh, gw, p, p, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * p, gw * p, c)
    )
    return Image(data)


def normalize(img: Image, mean, std) -> Image:
    """Map uint8 pixels to float32 via (pixel/255 - mean) / std per channel."""
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float32), (img.channels,))
    std = np.broadcast_to(np.asarray(std, dtype=np.float32), (img.channels,))
    if np.any(std <= 0):
        raise ValueError(f"std must be positive, got {std}")
    out = (img.data.astype(np.float32) / 255.0 - mean) / std
    return Image(out)
