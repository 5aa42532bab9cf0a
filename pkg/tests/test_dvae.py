import math

import numpy as np
import pytest

from ditdesk import dvae
from ditdesk.dvae import (
    Dvae,
    DvaeConfig,
    TokenMap,
    anneal_temperature,
    decode,
    dvae_loss,
    encode,
    quantize_gumbel,
    tokenize,
    train_tokenizer,
)
from ditdesk.imaging import Image
from ditdesk.nn import Tensor, grad_check


@pytest.fixture(scope="module")
def tiny_model():
    return Dvae(DvaeConfig(codebook_size=16, code_dim=8, hidden=4), np.random.default_rng(0))


def _gray(h, w, seed=0):
    return Image(np.random.default_rng(seed).integers(0, 256, (h, w, 1), dtype=np.uint8))


# -- encode / decode shapes ------------------------------------------------------


def test_encode_112_gives_14_grid(tiny_model):
    assert encode(_gray(112, 112), tiny_model).shape == (14, 14, 16)


def test_encode_minimal_and_224(tiny_model):
    assert encode(_gray(8, 8), tiny_model).shape == (1, 1, 16)
    assert encode(_gray(224, 224), tiny_model).shape == (28, 28, 16)


def test_encode_non_divisible_rejected(tiny_model):
    with pytest.raises(ValueError):
        encode(_gray(100, 112), tiny_model)


def test_decode_shapes(tiny_model):
    w = np.zeros((14, 14, 16), dtype=np.float32)
    w[..., 0] = 1.0
    assert decode(w, tiny_model).shape == (112, 112, 1)
    w1 = np.zeros((1, 1, 16), dtype=np.float32)
    w1[..., 0] = 1.0
    assert decode(w1, tiny_model).shape == (8, 8, 1)


def test_roundtrip_restores_dims(tiny_model):
    img = _gray(48, 64)
    logits = encode(img, tiny_model)
    weights, _ = quantize_gumbel(Tensor(logits), 1.0, np.random.default_rng(0), hard=True)
    recon = decode(weights, tiny_model)
    assert recon.shape == (48, 64, 1)


def test_decode_rejects_wrong_codebook(tiny_model):
    with pytest.raises(ValueError):
        decode(np.zeros((2, 2, 99), dtype=np.float32), tiny_model)


# -- quantization ------------------------------------------------------------------


def test_low_temperature_is_argmax_one_hot():
    logits = Tensor(np.array([[0.3, 2.0, -1.0, 0.9]], dtype=np.float32))
    weights, idx = quantize_gumbel(logits, temperature=1e-10, rng=None)
    np.testing.assert_allclose(weights.data, [[0.0, 1.0, 0.0, 0.0]], atol=1e-12)
    assert idx.tolist() == [1]


def test_tie_breaks_to_lowest_index():
    logits = Tensor(np.array([[1.0, 1.0, 0.0]], dtype=np.float32))
    _, idx = quantize_gumbel(logits, temperature=1e-10, rng=None)
    assert idx.tolist() == [0]


def test_uniform_logits_unit_temperature_noise_free():
    k = 8
    weights, _ = quantize_gumbel(Tensor(np.zeros((3, k), dtype=np.float32)), 1.0, rng=None)
    np.testing.assert_allclose(weights.data, np.full((3, k), 1.0 / k), atol=1e-7)


def test_fixed_seed_identical_indices():
    logits = Tensor(np.random.default_rng(5).standard_normal((6, 6, 32)).astype(np.float32))
    _, a = quantize_gumbel(logits, 0.5, np.random.default_rng(42))
    _, b = quantize_gumbel(logits, 0.5, np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)


def test_hard_mode_forward_is_one_hot_gradient_is_soft():
    rng = np.random.default_rng(0)
    logits_data = rng.standard_normal((5, 12)).astype(np.float32)
    readout = Tensor(rng.standard_normal((5, 12)).astype(np.float32))

    hard_in = Tensor(logits_data.copy(), requires_grad=True)
    weights, _ = quantize_gumbel(hard_in, 1.0, rng=None, hard=True)
    assert set(np.unique(weights.data)) == {0.0, 1.0}
    assert (weights.data.sum(axis=-1) == 1.0).all()
    (weights * readout).sum().backward()

    soft_in = Tensor(logits_data.copy(), requires_grad=True)
    soft, _ = quantize_gumbel(soft_in, 1.0, rng=None, hard=False)
    (soft * readout).sum().backward()

    np.testing.assert_allclose(hard_in.grad, soft_in.grad, atol=1e-7)


def test_soft_path_gradcheck():
    rng = np.random.default_rng(1)
    readout = Tensor(rng.standard_normal((2, 6)).astype(np.float32))
    f = lambda t: (quantize_gumbel(t, 0.7, rng=None)[0] * readout).sum()
    assert grad_check(f, rng.standard_normal((2, 6)).astype(np.float32), eps=1e-3) < 1e-3


def test_invalid_temperature():
    with pytest.raises(ValueError):
        quantize_gumbel(Tensor(np.zeros((1, 4))), 0.0, None)


# -- loss --------------------------------------------------------------------------


def _uniform_probs(k):
    return Tensor(np.full(k, 1.0 / k, dtype=np.float32))


def test_loss_zero_when_recon_equals_target():
    recon = Tensor(np.ones((4, 4), dtype=np.float32) * 0.3)
    mse, _, _ = dvae_loss(recon, recon.data.copy(), _uniform_probs(8), 0.1)
    assert mse.item() == 0.0


def test_uniform_usage_zero_perplexity_loss():
    _, pl, _ = dvae_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2)), _uniform_probs(64), 0.1)
    assert abs(pl.item()) < 1e-6


def test_collapsed_codebook_perplexity_loss_one():
    probs = np.zeros(64, dtype=np.float32)
    probs[7] = 1.0
    _, pl, _ = dvae_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2)), Tensor(probs), 0.1)
    assert pl.item() == pytest.approx(1.0, abs=1e-6)


def test_total_combines_terms():
    recon = Tensor(np.full((2, 2), 0.5, dtype=np.float32))
    target = np.zeros((2, 2), dtype=np.float32)
    probs = np.zeros(16, dtype=np.float32)
    probs[0] = 1.0
    mse, pl, total = dvae_loss(recon, target, Tensor(probs), weight=0.3)
    assert total.item() == pytest.approx(mse.item() + 0.3 * pl.item(), rel=1e-6)


def test_unnormalized_probs_rejected():
    probs = Tensor(np.full(8, 0.2, dtype=np.float32))  # sums to 1.6
    with pytest.raises(ValueError):
        dvae_loss(Tensor(np.zeros((1, 1))), np.zeros((1, 1)), probs, 0.1)


def test_recon_target_shape_mismatch():
    with pytest.raises(ValueError):
        dvae_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 3)), _uniform_probs(4), 0.1)


# -- tokenize ------------------------------------------------------------------------


def test_tokenize_deterministic_and_in_range(tiny_model):
    tiny_model.loaded = True
    img = _gray(112, 112, seed=3)
    a = tokenize(img, tiny_model)
    b = tokenize(img, tiny_model)
    assert isinstance(a, TokenMap)
    assert a.indices.shape == (14, 14)
    np.testing.assert_array_equal(a.indices, b.indices)
    assert a.indices.min() >= 0 and a.indices.max() < 16
    assert a.flat().shape == (196,)


def test_tokenize_requires_loaded_weights():
    model = Dvae(DvaeConfig(codebook_size=16, code_dim=8, hidden=4), np.random.default_rng(1))
    with pytest.raises(RuntimeError, match="loaded"):
        tokenize(_gray(16, 16), model)


def test_temperature_anneal_shape():
    assert anneal_temperature(0, 100, 1e-10) == 1.0
    assert anneal_temperature(100, 100, 1e-10) == pytest.approx(math.exp(-5.0))
    assert anneal_temperature(10**9, 100, 1e-10) == 1e-10  # clamped at the floor


# -- training ---------------------------------------------------------------------------


def test_zero_epochs_keeps_initialization():
    cfg = DvaeConfig(codebook_size=16, code_dim=8, hidden=4)
    imgs = [_gray(16, 16, seed=s) for s in range(4)]
    reference = Dvae(cfg, np.random.default_rng(0))
    model, log = train_tokenizer(imgs, cfg, epochs=0, seed=0)
    for (name, p), (_, q) in zip(model.named_parameters(), reference.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    assert log.step_mse == []
    assert model.loaded


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        train_tokenizer([], DvaeConfig(codebook_size=4, code_dim=4, hidden=4), epochs=1)


def test_short_training_reduces_mse(doc_images_64):
    cfg = DvaeConfig(codebook_size=32, code_dim=16, hidden=8)
    model, log = train_tokenizer(doc_images_64[:8], cfg, epochs=30, batch_size=8, seed=0)
    assert log.step_mse[-1] < log.step_mse[0]
    assert model.loaded
