"""Masked image modeling: blockwise masks, token-prediction head, training loop.

Each step the augmented crop is viewed twice: patchified at full resolution
for the encoder, and resized to half resolution for the tokenizer so the
token grid aligns 1:1 with the patch grid.  The loss is cross-entropy on
the tokenizer's indices at masked positions only; the tokenizer always sees
the clean (unmasked) crop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dvae import DOWNSAMPLE_FACTOR, Dvae, tokenize_batch
from .imaging import Image, normalize, patchify, random_resized_crop, resize
from .nn import ops
from .nn.checkpoint import save_modules
from .nn.module import Linear, Module
from .nn.optim import AdamW, LrSchedule, lr_at
from .nn.tensor import Tensor
from .vit import DEFAULT_MEAN, DEFAULT_STD, VitEncoder

logger = logging.getLogger(__name__)

ASPECT_LOW = 0.3  # block aspect sampled log-uniformly in [0.3, 1/0.3]
MAX_BLOCK_FRACTION = 0.25  # single mask block capped at 25% of the grid


@dataclass
class PretrainConfig:
    steps: int
    batch: int
    mask_ratio: float = 0.40
    min_block: int = 16
    peak_lr: float = 1e-3
    warmup_steps: int = 10_000
    weight_decay: float = 0.05
    image_size: int = 224
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final only
    augment: bool = True

    def __post_init__(self):
        if not (0.0 < self.mask_ratio < 1.0):
            raise ValueError(f"mask ratio must be in (0, 1), got {self.mask_ratio}")
        if self.min_block < 1:
            raise ValueError(f"min block must be >= 1, got {self.min_block}")


def blockwise_mask(
    rng: np.random.Generator,
    grid_h: int,
    grid_w: int,
    ratio: float,
    min_block: int = 16,
) -> np.ndarray:
    """Union random rectangles of patches until at least ceil(ratio * N) are masked.

    Each rectangle covers between ``min_block`` and 25% of the grid, with
    aspect ratio in [0.3, 1/0.3]; the overshoot past the target is therefore
    bounded by the largest single block.
    """
    n = grid_h * grid_w
    if ratio * n < 1:
        raise ValueError(f"ratio {ratio} masks no patches on a {grid_h}x{grid_w} grid")
    target = math.ceil(ratio * n)
    max_block = max(min_block, int(MAX_BLOCK_FRACTION * n))
    mask = np.zeros((grid_h, grid_w), dtype=bool)
    masked = 0
    attempts = 0
    while masked < target:
        attempts += 1
        if attempts > 1000:  # mathematically unreachable escape hatch
            flat = mask.reshape(-1)
            need = target - masked
            flat[np.flatnonzero(~flat)[:need]] = True
            break
        area = rng.uniform(min_block, max_block)
        aspect = math.exp(rng.uniform(math.log(ASPECT_LOW), math.log(1.0 / ASPECT_LOW)))
        bh = min(grid_h, max(1, int(round(math.sqrt(area * aspect)))))
        bw = min(grid_w, max(1, int(round(math.sqrt(area / aspect)))))
        while bh * bw > max_block:
            if bh >= bw:
                bh -= 1
            else:
                bw -= 1
        top = int(rng.integers(0, grid_h - bh + 1))
        left = int(rng.integers(0, grid_w - bw + 1))
        block = mask[top : top + bh, left : left + bw]
        masked += bh * bw - int(block.sum())
        block[:] = True
    return mask


class MimHead(Module):
    """Single linear layer mapping encoder states to codebook logits."""

    def __init__(self, rng: np.random.Generator, hidden: int, codebook_size: int):
        super().__init__()
        self.fc = Linear(rng, hidden, codebook_size)

    def __call__(self, states: Tensor) -> Tensor:
        return self.fc(states)


def mim_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over masked positions."""
    return ops.cross_entropy(logits, targets)


@dataclass
class PretrainResult:
    checkpoint_path: Path
    log_path: Path
    losses: list[float] = field(default_factory=list)


def pretrain(
    corpus: list[Image],
    tokenizer: Dvae,
    encoder: VitEncoder,
    head: MimHead,
    cfg: PretrainConfig,
    out_dir: str | Path,
) -> PretrainResult:
    """Run MIM pre-training, appending a CSV loss log and checkpointing atomically."""
    if not corpus:
        raise ValueError("cannot pretrain on an empty corpus")
    patch = encoder.cfg.patch
    if patch != 2 * DOWNSAMPLE_FACTOR:
        raise ValueError(
            f"patch size {patch} does not align with tokenizer grid "
            f"(needs patch = 2 * downsample factor = {2 * DOWNSAMPLE_FACTOR})"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "pretrain.ditc"
    log_path = out_dir / "pretrain_loss.csv"

    rng = np.random.default_rng(cfg.seed)
    wrapper = Module()
    wrapper.encoder = encoder
    wrapper.head = head
    optimizer = AdamW(wrapper, weight_decay=cfg.weight_decay)
    schedule = LrSchedule(cfg.peak_lr, min(cfg.warmup_steps, cfg.steps), max(cfg.steps, 1))
    encoder.train()
    head.train()

    grid = cfg.image_size // patch
    n_patches = grid * grid
    half = cfg.image_size // 2
    losses: list[float] = []
    with open(log_path, "w") as log_file:
        log_file.write("step,lr,loss\n")
        for step in range(cfg.steps):
            idx = rng.integers(0, len(corpus), size=cfg.batch)
            enc_patches = np.empty((cfg.batch, n_patches, patch * patch * encoder.cfg.channels), np.float32)
            tok_pixels = np.empty((cfg.batch, half, half, encoder.cfg.channels), np.float32)
            masks = np.empty((cfg.batch, n_patches), dtype=bool)
            for b, i in enumerate(idx):
                crop = (
                    random_resized_crop(corpus[i], rng, out=cfg.image_size)
                    if cfg.augment
                    else resize(corpus[i], cfg.image_size, cfg.image_size)
                )
                enc_patches[b] = patchify(normalize(crop, DEFAULT_MEAN, DEFAULT_STD), patch).patches
                tok_pixels[b] = resize(crop, half, half).data.astype(np.float32) / 255.0
                masks[b] = blockwise_mask(rng, grid, grid, cfg.mask_ratio, cfg.min_block).reshape(-1)

            tokens = tokenize_batch(tok_pixels, tokenizer)  # (B, grid, grid), clean image
            if tokens.shape[1] != grid or tokens.shape[2] != grid:
                raise ValueError(f"token grid {tokens.shape[1:]} != patch grid ({grid}, {grid})")
            targets = tokens.reshape(cfg.batch, -1)[masks]

            emb = encoder.embed(enc_patches, (grid, grid))
            emb = encoder.substitute_masked(emb, masks, (grid, grid))
            states, _ = encoder.forward(emb, rng=rng)
            masked_states = ops.masked_select_rows(states, masks)
            logits = head(masked_states)
            loss = mim_loss(logits, targets)

            lr = lr_at(schedule, min(step, schedule.total_steps))
            wrapper.zero_grad()
            loss.backward()
            optimizer.step(lr)

            loss_value = loss.item()
            losses.append(loss_value)
            log_file.write(f"{step},{lr:.10e},{loss_value:.10e}\n")
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_modules(ckpt_path, {"vit": encoder, "mim_head": head})
            if step % 50 == 0:
                logger.info("pretrain step %d: lr=%.3e loss=%.4f", step, lr, loss_value)

    save_modules(ckpt_path, {"vit": encoder, "mim_head": head})
    return PretrainResult(checkpoint_path=ckpt_path, log_path=log_path, losses=losses)
