import numpy as np
import pytest

from causal_se import autodiff as ad
from causal_se.autodiff.nn import Embedding
from causal_se.model import Concat, Film, SemanticPredictor, SeModel, build_input_z
from causal_se.vq import quantize

from conftest import tiny


def _set(lin, weight, bias):
    lin.weight.data = np.asarray(weight, dtype=np.float64)
    lin.bias.data = np.asarray(bias, dtype=np.float64)


def _film(rng):
    return Film(2, 2, 2, rng, np.float64)


def test_film_hand_computed(rng):
    film = _film(rng)
    _set(film.alpha, [[1, 2], [0, 1]], [0, 1])  # [1,1] -> [1, 4]
    _set(film.gamma, [[0.5, 0], [0, 0.5]], [1, 1])  # [2,-2] -> [2, 0]
    _set(film.beta, np.zeros((2, 2)), [3, -1])
    out = film(ad.constant([[1.0, 1.0]]), ad.constant([[2.0, -2.0]]))
    np.testing.assert_array_equal(out.data, [[5.0, -1.0]])


def test_film_identity_modulation_is_projection(rng):
    film = _film(rng)
    _set(film.gamma, np.zeros((2, 2)), [1, 1])
    _set(film.beta, np.zeros((2, 2)), [0, 0])
    x, h = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    np.testing.assert_array_equal(film(ad.constant(x), ad.constant(h)).data, film.alpha(ad.constant(x)).data)


def test_film_zero_gamma_gates_input(rng):
    film = _film(rng)
    _set(film.gamma, np.zeros((2, 2)), [0, 0])
    x, h = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    np.testing.assert_array_equal(film(ad.constant(x), ad.constant(h)).data, film.beta(ad.constant(h)).data)


def test_concat_fusion_width(rng):
    fuse = Concat(9, 8, 5, rng, np.float64)
    assert fuse(ad.constant(np.ones((2, 3, 9))), ad.constant(np.ones((2, 3, 8)))).shape == (2, 3, 5)


def test_input_variants(rng):
    c = ad.constant(rng.standard_normal((1, 4, 128)))
    codebook = rng.standard_normal((16, 64))
    enc = ad.constant(codebook[[3, 3, 5, 3]][None])
    vq_out = quantize(enc, codebook)
    assert build_input_z("raw", c) is c
    z = build_input_z("codebook", c, vq_out)
    assert z.shape == (1, 4, 192)
    emb = Embedding(16, 64, rng, np.float64)
    z = build_input_z("index", c, vq_out, emb)
    assert z.shape == (1, 4, 192)
    np.testing.assert_array_equal(z.data[0, 0, 128:], z.data[0, 1, 128:])
    with pytest.raises(ValueError):
        build_input_z("codebook", c)
    with pytest.raises(ValueError):
        build_input_z("bogus", c, vq_out)


def test_variant_widths_monotone():
    widths = {}
    for v in ("raw", "index", "codebook"):
        m = SeModel(tiny(model={"variant": v}))
        widths[v] = m.predictor.encoder.proj.weight.shape[0]
    assert widths["raw"] == 8
    assert widths["raw"] < widths["index"] and widths["raw"] < widths["codebook"]


def test_semantic_head_shapes_and_factorization(rng):
    head = SemanticPredictor(6, 8, 1, 2, 1, 10, rng, np.float64)
    h = head.encode(ad.constant(rng.standard_normal((2, 5, 6))))
    assert head.logits(h).shape == (2, 5, 1, 10)
    head3 = SemanticPredictor(6, 8, 1, 2, 3, 10, rng, np.float64)
    logits = head3.logits(head3.encode(ad.constant(rng.standard_normal((1, 4, 6))))).data[0, 0]
    joint = np.array([2, 7, 1])
    # joint log-probability of independent groups: log softmax over K^3 outer sum
    flat = (logits[0][:, None, None] + logits[1][None, :, None] + logits[2][None, None, :]).ravel()
    joint_lp = flat[np.ravel_multi_index(tuple(joint), (10, 10, 10))] - np.log(np.exp(flat).sum())
    per_n = ad.log_softmax(ad.constant(logits), axis=-1).data[np.arange(3), joint]
    assert abs(joint_lp - per_n.sum()) < 1e-10


def _noisy(model, rng, frames=6, batch=2):
    return rng.standard_normal((batch, model.stft_config.num_samples(frames))) * 0.3


def test_forward_shapes(rng, tiny_config):
    model = SeModel(tiny_config)
    out = model(_noisy(model, rng))
    assert out.enhanced.shape == (2, 6, 9)
    assert out.logits.shape == (2, 6, 2, 8)
    assert out.vq.indices.shape == (2, 6)
    assert out.c.shape == (2, 6, 8)


def test_mask_bounds_and_attenuation(rng, tiny_config):
    model = SeModel(tiny_config)
    out = model(_noisy(model, rng) * 20)
    assert np.all((out.mask.data > 0) & (out.mask.data < 1))
    assert np.all(out.enhanced.data >= 0)
    assert np.all(out.enhanced.data <= out.x_prime)


def test_zero_final_affine_gives_half_mask(rng, tiny_config):
    model = SeModel(tiny_config)
    model.estimator.out.weight.data[:] = 0
    model.estimator.out.bias.data[:] = 0
    out = model(_noisy(model, rng))
    assert np.all(out.mask.data == 0.5)


def test_force_identity(rng, tiny_config):
    model = SeModel(tiny_config)
    out = model(_noisy(model, rng), force_identity=True)
    np.testing.assert_array_equal(out.enhanced.data, out.x_prime)


def test_silent_input_stays_silent(tiny_config):
    model = SeModel(tiny_config)
    out = model(np.zeros((1, model.stft_config.num_samples(6))))
    assert not np.any(out.enhanced.data)


@pytest.mark.parametrize("variant", ["raw", "index", "codebook"])
@pytest.mark.parametrize("prefix_mode", [False, True])
def test_end_to_end_causality(rng, variant, prefix_mode):
    model = SeModel(tiny(model={"variant": variant}, ssl={"prefix_mode": prefix_mode}))
    cfg = model.stft_config
    x = _noisy(model, rng, frames=8, batch=1)
    with ad.no_grad():
        base = model(x)
    for t in range(7):
        y = x.copy()
        # frames <= t only read samples before t*hop + win
        start = t * cfg.hop_length + cfg.win_length
        y[:, start:] += rng.standard_normal(y[:, start:].shape)
        with ad.no_grad():
            out = model(y)
        for a, b in ((out.enhanced.data, base.enhanced.data), (out.mask.data, base.mask.data),
                     (out.logits.data, base.logits.data), (out.vq.indices, base.vq.indices)):
            np.testing.assert_allclose(a[:, : t + 1], b[:, : t + 1], atol=1e-12, rtol=0)


def test_named_parameters_unique_and_complete(tiny_config):
    model = SeModel(tiny_config)
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert "layer_logits" in names
    assert any(n.startswith("vq.encoder") for n in names)
    assert {"vq.codebook", "vq.ema.cluster_size"} <= model.state_names()


def test_frozen_frontend_flag():
    frozen = SeModel(tiny(ssl={"freeze_frontend": True}))
    assert not any(p.requires_grad for p in frozen.ssl.frontend_parameters())
    assert all(p.requires_grad for p in frozen.ssl.encoder.parameters())


def test_external_features_drive_model(rng, tiny_config):
    model = SeModel(tiny_config)
    x = _noisy(model, rng, batch=1)
    ext = rng.standard_normal((2, 6, 8))
    out = model(x, external=ext)
    manual = np.tensordot(np.exp(0) / 2 * np.ones(2), ext, axes=1)
    np.testing.assert_allclose(out.c.data[0], manual, atol=1e-12)
    from causal_se.errors import ShapeError

    with pytest.raises(ShapeError):
        model(x, external=rng.standard_normal((3, 6, 8)))


def test_same_seed_same_model(rng, tiny_config):
    a, b = SeModel(tiny_config), SeModel(tiny_config)
    x = _noisy(a, rng)
    assert np.array_equal(a(x).enhanced.data, b(x).enhanced.data)
