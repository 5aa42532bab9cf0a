"""Vision Transformer encoder for document images.

Patch embedding with learned 1-D positions, optional mask-token substitution,
a pre-norm Transformer stack with per-block stochastic depth, tapped
intermediate block outputs for the detection adapter, and an
average-pooling linear classifier.  No [CLS] token: classification pools
over patch positions and masked-patch prediction reads per-position outputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .imaging import Image, normalize, patchify, random_resized_crop, resize
from .nn import ops
from .nn.module import LayerNorm, Linear, Module, ModuleList, Parameter, normal_init
from .nn.optim import AdamW, LrSchedule, lr_at
from .nn.tensor import Tensor, matmul

logger = logging.getLogger(__name__)

DEFAULT_MEAN = 0.5
DEFAULT_STD = 0.5


@dataclass(frozen=True)
class VitConfig:
    depth: int
    hidden: int
    heads: int
    ffn: int
    patch: int = 16
    channels: int = 1
    drop_path: float = 0.0
    dropout: float = 0.0  # kept at 0 to match the pre-training recipe
    pos_grid: tuple[int, int] = (14, 14)  # learned position table, 196 entries

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by {self.heads} heads")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")

    @property
    def num_positions(self) -> int:
        return self.pos_grid[0] * self.pos_grid[1]


DIT_B = VitConfig(depth=12, hidden=768, heads=12, ffn=3072, drop_path=0.1)
DIT_L = VitConfig(depth=24, hidden=1024, heads=16, ffn=4096, drop_path=0.1)
DIT_TINY = VitConfig(depth=4, hidden=64, heads=4, ffn=128)

PRESETS = {"dit-b": DIT_B, "dit-l": DIT_L, "dit-tiny": DIT_TINY}


def config_from_preset(name: str, **overrides) -> VitConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides) if overrides else PRESETS[name]


class TransformerBlock(Module):
    def __init__(self, rng, cfg: VitConfig, drop_path_rate: float):
        super().__init__()
        h = cfg.hidden
        self.norm1 = LayerNorm(h)
        self.qkv = Linear(rng, h, 3 * h)
        self.proj = Linear(rng, h, h)
        self.norm2 = LayerNorm(h)
        self.fc1 = Linear(rng, h, cfg.ffn)
        self.fc2 = Linear(rng, cfg.ffn, h)
        self.heads = cfg.heads
        self.drop_path_rate = drop_path_rate
        self.dropout = cfg.dropout

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        training = self.training and rng is not None
        y = self.norm1(x)
        y = ops.multi_head_attention(y, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias, self.heads)
        if training and self.dropout > 0:
            y = ops.dropout(y, self.dropout, training, rng)
        x = x + ops.stochastic_depth(y, self.drop_path_rate, training, rng)
        y = self.fc2(ops.gelu(self.fc1(self.norm2(x))))
        if training and self.dropout > 0:
            y = ops.dropout(y, self.dropout, training, rng)
        return x + ops.stochastic_depth(y, self.drop_path_rate, training, rng)


class VitEncoder(Module):
    """Patch projection + positions + Transformer stack + final norm."""

    def __init__(self, cfg: VitConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.patch * cfg.patch * cfg.channels
        self.patch_proj = Linear(rng, patch_dim, cfg.hidden)
        self.pos_emb = Parameter(normal_init(rng, (cfg.num_positions, cfg.hidden)))
        self.mask_token = Parameter(normal_init(rng, (cfg.hidden,)))
        # Drop-path rates scale linearly from 0 at the first block to the
        # configured rate at the last.
        denom = max(1, cfg.depth - 1)
        self.blocks = ModuleList(
            [TransformerBlock(rng, cfg, cfg.drop_path * i / denom) for i in range(cfg.depth)]
        )
        self.norm = LayerNorm(cfg.hidden)
        self._pos_cache: dict[tuple[int, int], np.ndarray] = {}

    # -- positions -----------------------------------------------------------

    def _pos_matrix(self, grid: tuple[int, int]) -> np.ndarray | None:
        """Bilinear interpolation matrix from the native position grid to ``grid``."""
        if grid == self.cfg.pos_grid:
            return None
        if grid not in self._pos_cache:
            src_h, src_w = self.cfg.pos_grid
            dst_h, dst_w = grid
            wy = _axis_weights(src_h, dst_h)
            wx = _axis_weights(src_w, dst_w)
            mat = np.einsum("ys,xt->yxst", wy, wx).reshape(dst_h * dst_w, src_h * src_w)
            self._pos_cache[grid] = mat.astype(np.float32)
        return self._pos_cache[grid]

    def positions(self, grid: tuple[int, int]) -> Tensor:
        mat = self._pos_matrix(grid)
        if mat is None:
            return self.pos_emb
        return matmul(Tensor(mat), self.pos_emb)

    # -- forward -----------------------------------------------------------

    def embed(self, patches: np.ndarray | Tensor, grid: tuple[int, int]) -> Tensor:
        """(B, N, P*P*C) patch vectors -> (B, N, hidden) with positions added."""
        x = patches if isinstance(patches, Tensor) else Tensor(patches)
        if x.shape[-1] != self.cfg.patch * self.cfg.patch * self.cfg.channels:
            raise ValueError(
                f"patch vector length {x.shape[-1]} != P*P*C = {self.cfg.patch ** 2 * self.cfg.channels}"
            )
        if x.shape[-2] != grid[0] * grid[1]:
            raise ValueError(f"{x.shape[-2]} patches but grid is {grid}")
        return self.patch_proj(x) + self.positions(grid)

    def substitute_masked(self, emb: Tensor, mask: np.ndarray, grid: tuple[int, int]) -> Tensor:
        """Replace masked rows with mask_token + positional embedding.

        ``mask`` is boolean (B, N) or (N,); unmasked rows pass through
        bit-exactly.
        """
        m = np.asarray(mask, dtype=bool)
        if m.ndim == 1:
            m = m[None]
        if m.shape[-1] != emb.shape[-2]:
            raise ValueError(f"mask length {m.shape[-1]} != sequence length {emb.shape[-2]}")
        keep = Tensor(1.0 - m.astype(np.float32)[..., None])
        fill = Tensor(m.astype(np.float32)[..., None])
        replacement = self.mask_token + self.positions(grid)
        return emb * keep + replacement * fill

    def forward(
        self,
        emb: Tensor,
        taps: tuple[int, ...] = (),
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, dict[int, Tensor]]:
        """Run the block stack; returns (normed final states, tapped post-block states).

        Tap indices are 1-based block numbers.
        """
        for t in taps:
            if not (1 <= t <= self.cfg.depth):
                raise ValueError(f"tap {t} outside [1, {self.cfg.depth}]")
        x = emb
        tapped: dict[int, Tensor] = {}
        for i, block in enumerate(self.blocks, start=1):
            x = block(x, rng)
            if i in taps:
                tapped[i] = x
        return self.norm(x), tapped


def _axis_weights(src: int, dst: int) -> np.ndarray:
    """Row-stochastic (dst, src) bilinear weights, align-corners-false."""
    w = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for d in range(dst):
        s = min(max((d + 0.5) * scale - 0.5, 0.0), src - 1)
        lo = int(np.floor(s))
        hi = min(lo + 1, src - 1)
        frac = s - lo
        w[d, lo] += 1.0 - frac
        w[d, hi] += frac
    return w


class ClassifierHead(Module):
    """Average pooling over the sequence followed by a linear classifier."""

    def __init__(self, rng, hidden: int, num_classes: int):
        super().__init__()
        self.fc = Linear(rng, hidden, num_classes)

    def __call__(self, states: Tensor) -> Tensor:
        return self.fc(states.mean(axis=-2))


def classify(states: Tensor, head: ClassifierHead) -> Tensor:
    """(..., N, h) encoder states -> (..., num_classes) logits."""
    if states.shape[-2] < 1:
        raise ValueError("classify needs at least one sequence position")
    return head(states)


# -- parameter accounting ------------------------------------------------------


def param_count(cfg: VitConfig) -> int:
    """Exact number of learned scalars in the encoder (heads excluded)."""
    h, f = cfg.hidden, cfg.ffn
    patch_dim = cfg.patch * cfg.patch * cfg.channels
    per_block = (
        2 * h  # norm1
        + h * 3 * h + 3 * h  # qkv
        + h * h + h  # attention projection
        + 2 * h  # norm2
        + h * f + f  # fc1
        + f * h + h  # fc2
    )
    return (
        patch_dim * h + h  # patch projection
        + cfg.num_positions * h  # positions
        + h  # mask token
        + cfg.depth * per_block
        + 2 * h  # final norm
    )


def default_taps(depth: int) -> tuple[int, int, int, int]:
    """Four strictly increasing block indices at roughly d/3, d/2, 2d/3, d."""
    t1 = max(1, depth // 3)
    t2 = max(t1 + 1, depth // 2)
    t3 = max(t2 + 1, (2 * depth) // 3)
    t4 = max(t3 + 1, depth)
    if t4 > depth:
        raise ValueError(f"depth {depth} too shallow for four distinct taps")
    return t1, t2, t3, t4


# -- classification fine-tuning --------------------------------------------------


@dataclass
class ClassifyTrainLog:
    step_loss: list[float]
    train_accuracy: float


def _prepare_batch(images: list[Image], out_size: int, rng: np.random.Generator | None):
    """Augment (or plain-resize) and normalize a batch into patch vectors."""
    arrs = []
    patch = None
    for img in images:
        if rng is not None:
            img = random_resized_crop(img, rng, out=out_size)
        elif img.width != out_size or img.height != out_size:
            img = resize(img, out_size, out_size)
        arrs.append(normalize(img, DEFAULT_MEAN, DEFAULT_STD))
    seqs = [patchify(a, 16) for a in arrs]
    patch = np.stack([s.patches for s in seqs])
    return patch, (seqs[0].grid_h, seqs[0].grid_w)


def train_classifier(
    images: list[Image],
    labels: np.ndarray,
    encoder: VitEncoder,
    head: ClassifierHead,
    epochs: int,
    batch_size: int,
    schedule: LrSchedule,
    weight_decay: float = 0.05,
    seed: int = 0,
    image_size: int = 224,
    augment: bool = True,
) -> ClassifyTrainLog:
    """Cross-entropy fine-tuning of encoder + linear head."""
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images vs {len(labels)} labels")
    rng = np.random.default_rng(seed)
    wrapper = Module()
    wrapper.encoder = encoder
    wrapper.head = head
    optimizer = AdamW(wrapper, weight_decay=weight_decay)
    encoder.train()
    head.train()
    labels = np.asarray(labels, dtype=np.int64)

    n = len(images)
    step = 0
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for b in range(0, n, batch_size):
            idx = order[b : b + batch_size]
            batch, grid = _prepare_batch([images[i] for i in idx], image_size, rng if augment else None)
            emb = encoder.embed(batch, grid)
            states, _ = encoder.forward(emb, rng=rng)
            logits = classify(states, head)
            loss = ops.cross_entropy(logits, labels[idx])
            wrapper.zero_grad()
            loss.backward()
            optimizer.step(lr_at(schedule, min(step, schedule.total_steps)))
            losses.append(loss.item())
            step += 1
    acc = evaluate_classifier(images, labels, encoder, head, image_size=image_size)
    logger.info("classifier fine-tune done: final loss %.4f train accuracy %.3f", losses[-1] if losses else 0.0, acc)
    return ClassifyTrainLog(step_loss=losses, train_accuracy=acc)


def evaluate_classifier(
    images: list[Image],
    labels: np.ndarray,
    encoder: VitEncoder,
    head: ClassifierHead,
    image_size: int = 224,
    batch_size: int = 16,
) -> float:
    encoder.eval()
    head.eval()
    labels = np.asarray(labels, dtype=np.int64)
    correct = 0
    for b in range(0, len(images), batch_size):
        chunk = images[b : b + batch_size]
        batch, grid = _prepare_batch(chunk, image_size, None)
        emb = encoder.embed(batch, grid)
        states, _ = encoder.forward(emb)
        logits = classify(states, head)
        correct += int((logits.data.argmax(axis=-1) == labels[b : b + len(chunk)]).sum())
    encoder.train()
    head.train()
    return correct / len(images)
