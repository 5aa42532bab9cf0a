import math

import numpy as np
import pytest

from ditdesk import mim
from ditdesk.dvae import Dvae, DvaeConfig
from ditdesk.imaging import Image
from ditdesk.mim import MimHead, PretrainConfig, blockwise_mask, mim_loss, pretrain
from ditdesk.nn import Tensor, ops
from ditdesk.nn.checkpoint import load_checkpoint
from ditdesk.vit import VitConfig, VitEncoder


# -- blockwise masking -------------------------------------------------------------


def test_mask_count_bounds_14x14():
    n = 196
    target = math.ceil(0.4 * n)  # 79
    cap = int(mim.MAX_BLOCK_FRACTION * n)  # 49
    for seed in range(100):
        mask = blockwise_mask(np.random.default_rng(seed), 14, 14, 0.4)
        count = int(mask.sum())
        assert target <= count <= target + cap
        assert mask.shape == (14, 14)


def test_mask_minimum_one_patch():
    mask = blockwise_mask(np.random.default_rng(0), 4, 4, ratio=1.0 / 16.0, min_block=1)
    assert mask.sum() >= 1


def test_mask_deterministic():
    a = blockwise_mask(np.random.default_rng(9), 14, 14, 0.4)
    b = blockwise_mask(np.random.default_rng(9), 14, 14, 0.4)
    np.testing.assert_array_equal(a, b)


def test_mask_rejects_degenerate_ratio():
    with pytest.raises(ValueError):
        blockwise_mask(np.random.default_rng(0), 2, 2, ratio=0.01)


def test_mask_blocks_are_rectangles_unioned():
    # With a ratio low enough for a single block, the mask is one rectangle.
    mask = blockwise_mask(np.random.default_rng(3), 14, 14, ratio=0.09, min_block=16)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    block = mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    assert block.all()


# -- head and loss ------------------------------------------------------------------


def test_head_shape_79_by_8192():
    head = MimHead(np.random.default_rng(0), 16, 8192)
    out = head(Tensor(np.zeros((79, 16), dtype=np.float32)))
    assert out.shape == (79, 8192)


def test_head_zero_weights_zero_logits():
    head = MimHead(np.random.default_rng(1), 8, 64)
    head.fc.weight.data = np.zeros_like(head.fc.weight.data)
    out = head(Tensor(np.ones((5, 8), dtype=np.float32)))
    np.testing.assert_array_equal(out.data, np.zeros((5, 64), dtype=np.float32))


def test_loss_uniform_logits_is_log_k():
    for k, expected in [(8192, 13 * math.log(2)), (64, 6 * math.log(2))]:
        loss = mim_loss(Tensor(np.zeros((7, k), dtype=np.float32)), np.zeros(7, dtype=np.int64))
        assert loss.item() == pytest.approx(expected, abs=1e-4)


def test_loss_perfect_prediction_near_zero():
    logits = np.full((4, 16), -40.0, dtype=np.float32)
    targets = np.array([3, 1, 0, 15])
    logits[np.arange(4), targets] = 40.0
    assert mim_loss(Tensor(logits), targets).item() < 1e-6


def test_loss_rejects_out_of_range_target():
    with pytest.raises(IndexError):
        mim_loss(Tensor(np.zeros((2, 8), dtype=np.float32)), np.array([8, 0]))


# -- pretraining loop -----------------------------------------------------------------


def _tiny_setup(seed=0):
    rng = np.random.default_rng(seed)
    vcfg = VitConfig(depth=2, hidden=32, heads=4, ffn=64, pos_grid=(4, 4))
    encoder = VitEncoder(vcfg, rng)
    head = MimHead(rng, 32, 16)
    tokenizer = Dvae(DvaeConfig(codebook_size=16, code_dim=8, hidden=4), np.random.default_rng(1))
    tokenizer.loaded = True
    corpus = [
        Image(np.random.default_rng(10 + i).integers(0, 256, (64, 64, 1), dtype=np.uint8)) for i in range(6)
    ]
    return corpus, tokenizer, encoder, head


def test_zero_steps_checkpoint_equals_init(tmp_path):
    corpus, tokenizer, encoder, head = _tiny_setup()
    init_state = {f"vit/{k}": v for k, v in encoder.state_dict().items()}
    init_state.update({f"mim_head/{k}": v for k, v in head.state_dict().items()})
    cfg = PretrainConfig(steps=0, batch=2, image_size=64, min_block=2, seed=0)
    result = pretrain(corpus, tokenizer, encoder, head, cfg, tmp_path)
    saved = load_checkpoint(result.checkpoint_path)
    assert set(saved) == set(init_state)
    for k in saved:
        np.testing.assert_array_equal(saved[k], init_state[k])
    assert result.log_path.read_text() == "step,lr,loss\n"


def test_pretrain_deterministic_logs_and_checkpoints(tmp_path):
    outs = []
    for run in ("a", "b"):
        corpus, tokenizer, encoder, head = _tiny_setup(seed=0)
        cfg = PretrainConfig(steps=4, batch=2, image_size=64, min_block=2, warmup_steps=2, seed=5)
        result = pretrain(corpus, tokenizer, encoder, head, cfg, tmp_path / run)
        outs.append(result)
    assert outs[0].log_path.read_bytes() == outs[1].log_path.read_bytes()
    assert outs[0].checkpoint_path.read_bytes() == outs[1].checkpoint_path.read_bytes()
    assert len(outs[0].losses) == 4


def test_loss_invariant_to_masked_pixel_content():
    """Masked rows are fully replaced, so their input pixels cannot matter."""
    _, _, encoder, head = _tiny_setup()
    rng = np.random.default_rng(0)
    patches = rng.standard_normal((1, 16, 256)).astype(np.float32)
    mask = np.zeros(16, dtype=bool)
    mask[[1, 5, 6]] = True
    targets = np.array([3, 0, 9])

    def run(p):
        emb = encoder.substitute_masked(encoder.embed(p, (4, 4)), mask, (4, 4))
        states, _ = encoder.forward(emb)
        return mim_loss(head(ops.masked_select_rows(states, mask[None])), targets).item()

    tampered = patches.copy()
    tampered[0, mask] = rng.standard_normal((3, 256)).astype(np.float32) * 10
    assert run(patches) == run(tampered)


def test_context_gradient_flows_targets_from_clean_image():
    _, _, encoder, head = _tiny_setup()
    rng = np.random.default_rng(2)
    patches = Tensor(rng.standard_normal((1, 16, 256)).astype(np.float32), requires_grad=True)
    mask = np.zeros(16, dtype=bool)
    mask[:4] = True
    emb = encoder.substitute_masked(encoder.embed(patches, (4, 4)), mask, (4, 4))
    states, _ = encoder.forward(emb)
    loss = mim_loss(head(ops.masked_select_rows(states, mask[None])), np.zeros(4, dtype=np.int64))
    loss.backward()
    # Unmasked (context) patches receive gradient; masked ones do not.
    assert np.abs(patches.grad[0, ~mask]).max() > 0
    np.testing.assert_array_equal(patches.grad[0, mask], np.zeros((4, 256), dtype=np.float32))


def test_pretrain_rejects_empty_corpus(tmp_path):
    _, tokenizer, encoder, head = _tiny_setup()
    cfg = PretrainConfig(steps=1, batch=1, image_size=64)
    with pytest.raises(ValueError):
        pretrain([], tokenizer, encoder, head, cfg, tmp_path)


def test_pretrain_loss_log_format(tmp_path):
    corpus, tokenizer, encoder, head = _tiny_setup()
    cfg = PretrainConfig(steps=2, batch=2, image_size=64, min_block=2, warmup_steps=1, seed=0)
    result = pretrain(corpus, tokenizer, encoder, head, cfg, tmp_path)
    lines = result.log_path.read_text().strip().split("\n")
    assert lines[0] == "step,lr,loss"
    assert len(lines) == 3
    step, lr, loss = lines[1].split(",")
    assert step == "0"
    float(lr), float(loss)
