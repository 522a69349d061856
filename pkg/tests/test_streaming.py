import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_se import autodiff as ad
from causal_se.model import SeModel
from causal_se.streaming import StreamingEnhancer, enhance, enhance_streaming, inference_copy

from conftest import tiny


def _signal(model, frames=20, seed=0):
    rng = np.random.default_rng(seed)
    n = model.stft_config.num_samples(frames) + 5
    return np.sin(np.arange(n) * 0.3) * 0.5 + rng.standard_normal(n) * 0.1


@pytest.fixture(scope="module")
def model():
    m = SeModel(tiny(train={"dtype": "float32"}))
    x = _signal(m)
    m.vq.init_from(m.vq.encoder(m.causal_features(m.analysis(x[None])[2])).data, np.random.default_rng(0))
    return inference_copy(m)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 60))
def test_streaming_matches_batch(model, chunk):
    x = _signal(model)
    batch = enhance(model, x)
    stream = enhance_streaming(model, x, chunk)
    assert stream.shape == batch.shape
    assert np.max(np.abs(stream - batch)) <= 1e-6


def test_streaming_non_causal_encoder_matches_prefix_batch():
    m = SeModel(tiny(ssl={"causal": False, "prefix_mode": True}))
    x = _signal(m, frames=10)
    m.vq.init_from(m.vq.encoder(m.causal_features(m.analysis(x[None])[2])).data, np.random.default_rng(0))
    assert np.max(np.abs(enhance_streaming(m, x, 7) - enhance(m, x))) <= 1e-6


def test_streaming_tokens_match_batch(model):
    x = _signal(model)
    enh = StreamingEnhancer(model)
    enh.push(x)
    enh.finish()
    with ad.no_grad():
        batch = model(x[None]).vq.indices[0]
    assert enh.tokens == [int(v) for v in batch]


def test_output_released_one_hop_per_frame(model):
    cfg = model.stft_config
    enh = StreamingEnhancer(model)
    assert enh.push(np.zeros(cfg.win_length - 1)).size == 0
    assert enh.push(np.zeros(1)).size == cfg.hop_length
    assert enh.push(np.zeros(cfg.hop_length)).size == cfg.hop_length


def test_force_identity_reconstructs_input(model):
    x = _signal(model)
    out = enhance_streaming(model, x, 16, force_identity=True)
    cfg = model.stft_config
    inner = slice(cfg.win_length, out.size - cfg.win_length)
    np.testing.assert_allclose(out[inner], x[inner], atol=1e-9)


def test_silent_input_silent_output(model):
    x = np.zeros(model.stft_config.num_samples(8))
    assert not np.any(enhance_streaming(model, x, 10))


def test_repeatable(model):
    x = _signal(model)
    assert np.array_equal(enhance_streaming(model, x, 13), enhance_streaming(model, x, 13))


def test_bad_chunk(model):
    with pytest.raises(ValueError):
        enhance_streaming(model, np.zeros(100), 0)


def test_inference_copy_is_float64_and_independent(model):
    assert model.dtype == np.float64
    clone = inference_copy(model)
    clone.vq.codebook[:] = 0
    assert np.any(model.vq.codebook)
