"""Discrete VAE image tokenizer: pixels to codebook indices and back.

Encoder: three stages of stride-2 convolution + residual block (downsampling
factor 8), then a 1x1 projection to per-cell codebook logits.  Quantization
is Gumbel-softmax with optional straight-through hard sampling; the decoder
mirrors the encoder with stride-2 transposed convolutions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import Image
from .nn import ops
from .nn.module import Conv2d, ConvTranspose2d, Module, ModuleList, Parameter, normal_init
from .nn.optim import AdamW
from .nn.tensor import Tensor, log as tensor_log, matmul, reshape

logger = logging.getLogger(__name__)

DOWNSAMPLE_FACTOR = 8  # 2^3 stride-2 stages


@dataclass
class DvaeConfig:
    codebook_size: int = 8192
    code_dim: int = 128
    hidden: int = 64  # width of the first stage; doubles per stage
    channels: int = 1
    temperature_floor: float = 1e-10
    perplexity_weight: float = 0.1

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError(f"codebook needs >= 2 entries, got {self.codebook_size}")


@dataclass
class TokenMap:
    """Grid of discrete codebook indices for one image."""

    grid_h: int
    grid_w: int
    indices: np.ndarray  # (grid_h, grid_w) integer indices in [0, K)

    def __post_init__(self):
        if self.indices.shape != (self.grid_h, self.grid_w):
            raise ValueError(f"token grid {self.indices.shape} != ({self.grid_h}, {self.grid_w})")

    def flat(self) -> np.ndarray:
        return self.indices.reshape(-1)


class ResBlock(Module):
    def __init__(self, rng, channels):
        super().__init__()
        self.conv1 = Conv2d(rng, channels, channels, 3, pad=1)
        self.conv2 = Conv2d(rng, channels, channels, 3, pad=1)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv2(ops.gelu(self.conv1(ops.gelu(x))))
        return x + y


class Dvae(Module):
    """Encoder + codebook + decoder; fully convolutional in the spatial dims."""

    def __init__(self, cfg: DvaeConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        widths = (h, 2 * h, 4 * h)
        self.enc_downs = ModuleList(
            [
                Conv2d(rng, cfg.channels if i == 0 else widths[i - 1], widths[i], 4, stride=2, pad=1)
                for i in range(3)
            ]
        )
        self.enc_res = ModuleList([ResBlock(rng, w) for w in widths])
        self.to_logits = Conv2d(rng, widths[-1], cfg.codebook_size, 1)
        self.codebook = Parameter(normal_init(rng, (cfg.codebook_size, cfg.code_dim), std=0.02))
        self.from_codes = Conv2d(rng, cfg.code_dim, widths[-1], 1)
        self.dec_ups = ModuleList(
            [ConvTranspose2d(rng, widths[2 - i], widths[max(0, 1 - i)]) for i in range(3)]
        )
        self.dec_res = ModuleList([ResBlock(rng, widths[max(0, 1 - i)]) for i in range(3)])
        self.out_conv = Conv2d(rng, widths[0], cfg.channels, 3, pad=1)
        self.loaded = False

    # -- halves ------------------------------------------------------------

    def encode_batch(self, x: Tensor) -> Tensor:
        """(B, H, W, C) pixels in [0,1] -> (B, H/8, W/8, K) logits."""
        if x.shape[1] % DOWNSAMPLE_FACTOR or x.shape[2] % DOWNSAMPLE_FACTOR:
            raise ValueError(f"input dims {x.shape[1:3]} not divisible by {DOWNSAMPLE_FACTOR}")
        for down, res in zip(self.enc_downs, self.enc_res):
            x = res(down(x))
        return self.to_logits(x)  # (B, Hg, Wg, K)

    def decode_batch(self, weights: Tensor) -> Tensor:
        """(B, Hg, Wg, K) code weights -> (B, 8*Hg, 8*Wg, C) pixels."""
        b, gh, gw, k = weights.shape
        if k != self.cfg.codebook_size:
            raise ValueError(f"weights last dim {k} != codebook size {self.cfg.codebook_size}")
        codes = matmul(reshape(weights, (b * gh * gw, k)), self.codebook)
        x = self.from_codes(reshape(codes, (b, gh, gw, self.cfg.code_dim)))
        for up, res in zip(self.dec_ups, self.dec_res):
            x = res(up(x))
        return self.out_conv(x)

    def load_state_dict(self, state, strict=True):
        super().load_state_dict(state, strict=strict)
        self.loaded = True


# -- spec-surface operations ------------------------------------------------


def _to_unit_batch(img: Image) -> Tensor:
    arr = img.data.astype(np.float32)
    if img.data.dtype == np.uint8:
        arr = arr / 255.0
    return Tensor(arr[None])


def encode(img: Image, model: Dvae) -> np.ndarray:
    """Per-cell codebook logits for one image, shape (H/8, W/8, K)."""
    return model.encode_batch(_to_unit_batch(img)).data[0]


def quantize_gumbel(
    logits: Tensor,
    temperature: float,
    rng: np.random.Generator | None,
    hard: bool = False,
) -> tuple[Tensor, np.ndarray]:
    """Relaxed categorical sample per cell over the last axis.

    Adds Gumbel noise (skipped when ``rng`` is None, the deterministic test
    hook), softmaxes at ``temperature``; ``hard`` swaps in the argmax one-hot
    on the forward pass while keeping the soft gradient (straight-through).
    Returns (weights, argmax indices).
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if rng is not None:
        u = rng.random(logits.shape, dtype=np.float64)
        gumbel = -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12))).astype(logits.dtype)
        noisy = logits + Tensor(gumbel)
    else:
        noisy = logits
    soft = ops.softmax(noisy * (1.0 / temperature), axis=-1)
    indices = noisy.data.argmax(axis=-1)
    if not hard:
        return soft, indices
    one_hot = np.zeros_like(soft.data)
    np.put_along_axis(one_hot, indices[..., None], 1.0, axis=-1)
    # Straight-through: forward carries the one-hot, gradient follows the soft path.
    hard_weights = soft + Tensor(one_hot - soft.data)
    return hard_weights, indices


def decode(weights: Tensor | np.ndarray, model: Dvae) -> np.ndarray:
    """Code weights (Hg, Wg, K) -> reconstructed pixels (H, W, C), floats."""
    w = weights if isinstance(weights, Tensor) else Tensor(weights)
    out = model.decode_batch(reshape(w, (1, *w.shape)))
    return out.data[0]


def dvae_loss(
    recon: Tensor,
    target: np.ndarray | Tensor,
    mean_code_probs: Tensor,
    weight: float,
) -> tuple[Tensor, Tensor, Tensor]:
    """(mse, perplexity_loss, total).

    mse is the mean squared pixel error; perplexity_loss is the normalized
    entropy gap (ln K - H(p)) / ln K of mean codebook usage, 0 for uniform
    usage and 1 for a collapsed codebook; total = mse + weight * perplexity_loss.
    """
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=recon.dtype)
    if target_data.shape != recon.shape:
        raise ValueError(f"recon shape {recon.shape} != target shape {target_data.shape}")
    psum = float(mean_code_probs.data.sum())
    if abs(psum - 1.0) > 1e-4:
        raise ValueError(f"mean code probabilities sum to {psum}, expected 1")
    diff = recon - Tensor(target_data)
    mse = (diff * diff).mean()
    k = mean_code_probs.size
    entropy = -(mean_code_probs * tensor_log(mean_code_probs + 1e-12)).sum()
    perplexity_loss = (math.log(k) - entropy) * (1.0 / math.log(k))
    total = mse + weight * perplexity_loss
    return mse, perplexity_loss, total


def tokenize(img: Image, model: Dvae) -> TokenMap:
    """Deterministic visual tokens: argmax of encoder logits, no sampling."""
    if not model.loaded:
        raise RuntimeError("tokenizer weights not loaded; train or load a checkpoint first")
    logits = encode(img, model)
    return TokenMap(grid_h=logits.shape[0], grid_w=logits.shape[1], indices=logits.argmax(axis=-1))


def tokenize_batch(batch: np.ndarray, model: Dvae) -> np.ndarray:
    """(B, H, W, C) unit-scale pixels -> (B, H/8, W/8) index grids."""
    if not model.loaded:
        raise RuntimeError("tokenizer weights not loaded; train or load a checkpoint first")
    logits = model.encode_batch(Tensor(batch))
    return logits.data.argmax(axis=-1)


def anneal_temperature(step: int, total_steps: int, floor: float) -> float:
    """Exponential decay exp(-5 t / T), clamped at the floor."""
    if total_steps <= 0:
        return max(floor, 1.0)
    return max(floor, math.exp(-5.0 * step / total_steps))


@dataclass
class TokenizerTrainLog:
    epoch_mse: list[float] = field(default_factory=list)
    epoch_perplexity: list[float] = field(default_factory=list)
    step_mse: list[float] = field(default_factory=list)


def train_tokenizer(
    corpus: list[Image],
    cfg: DvaeConfig,
    epochs: int,
    batch_size: int = 8,
    lr: float = 5e-4,
    seed: int = 0,
    hard: bool = False,
    model: Dvae | None = None,
) -> tuple[Dvae, TokenizerTrainLog]:
    """Fit the dVAE by MSE reconstruction plus the codebook-usage penalty.

    Temperature anneals from 1.0 toward the configured floor over all steps.
    """
    if not corpus:
        raise ValueError("cannot train a tokenizer on an empty corpus")
    rng = np.random.default_rng(seed)
    if model is None:
        model = Dvae(cfg, rng)
    optimizer = AdamW(model, weight_decay=0.0)
    pixels = np.stack([_to_unit_batch(img).data[0] for img in corpus])

    n = len(corpus)
    steps_per_epoch = max(1, (n + batch_size - 1) // batch_size)
    total_steps = max(1, epochs * steps_per_epoch)
    log = TokenizerTrainLog()
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_mse, epoch_perp = [], []
        for b in range(steps_per_epoch):
            idx = order[b * batch_size : (b + 1) * batch_size]
            if idx.size == 0:
                continue
            batch = Tensor(pixels[idx])
            tau = anneal_temperature(step, total_steps, cfg.temperature_floor)
            logits = model.encode_batch(batch)
            weights, _ = quantize_gumbel(logits, tau, rng, hard=hard)
            recon = model.decode_batch(weights)
            gh, gw = weights.shape[1], weights.shape[2]
            mean_probs = weights.reshape(idx.size * gh * gw, cfg.codebook_size).mean(axis=0)
            mse, perplexity_loss, total = dvae_loss(recon, batch, mean_probs, cfg.perplexity_weight)
            model.zero_grad()
            total.backward()
            optimizer.step(lr)
            step += 1
            epoch_mse.append(mse.item())
            epoch_perp.append(math.exp((1.0 - perplexity_loss.item()) * math.log(cfg.codebook_size)))
            log.step_mse.append(mse.item())
        if epoch_mse:
            log.epoch_mse.append(float(np.mean(epoch_mse)))
            log.epoch_perplexity.append(float(np.mean(epoch_perp)))
            logger.info(
                "tokenizer epoch %d: mse=%.5f perplexity=%.1f", epoch, log.epoch_mse[-1], log.epoch_perplexity[-1]
            )
    model.loaded = True
    return model, log
