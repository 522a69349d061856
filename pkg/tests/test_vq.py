import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causal_se import autodiff as ad
from causal_se.autodiff.nn import Linear
from causal_se.errors import ShapeError
from causal_se.ssl import weighted_sum
from causal_se.vq import EmaState, VectorQuantizer, ema_update, kmeanspp_seed, nearest_codewords, quantize, vq_loss


def brute_force(x, codebook):
    """Scan every codeword with exact differences; first minimum wins."""
    out = []
    for row in x:
        best, best_k = np.inf, -1
        for k, cw in enumerate(codebook):
            d = float(np.sum((row - cw) ** 2))
            if d < best:
                best, best_k = d, k
        out.append(best_k)
    return np.array(out)


def _linear(weight, bias):
    lin = Linear(weight.shape[0], weight.shape[1], np.random.default_rng(0), np.float64)
    lin.weight.data = np.asarray(weight, dtype=np.float64)
    lin.bias.data = np.asarray(bias, dtype=np.float64)
    return lin


def test_exhaustive_oracle_agreement(rng):
    codebook = rng.standard_normal((64, 8))
    x = rng.standard_normal((1000, 8))
    assert np.array_equal(nearest_codewords(x, codebook), brute_force(x, codebook))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 6))
def test_oracle_agreement_random_shapes(seed, k, d):
    rng = np.random.default_rng(seed)
    codebook = rng.standard_normal((k, d))
    # include exact codewords and near-duplicates
    x = np.concatenate([rng.standard_normal((20, d)), codebook[rng.integers(0, k, 5)]])
    assert np.array_equal(nearest_codewords(x, codebook), brute_force(x, codebook))


def test_exact_codeword_hit(rng):
    codebook = rng.standard_normal((16, 4))
    enc = ad.constant(codebook[7][None])
    out = quantize(enc, codebook)
    assert out.indices[0] == 7
    assert np.array_equal(out.quantized[0], codebook[7])


def test_tie_goes_to_lower_index():
    codebook = np.array([[3.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    assert nearest_codewords(np.array([[0.0, 0.0]]), codebook)[0] == 1
    assert nearest_codewords(np.array([[2.0, 0.0]]), codebook)[0] == 0


def test_duplicate_codewords_pick_first():
    codebook = np.array([[1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])
    assert nearest_codewords(np.array([[0.9, 0.9]]), codebook)[0] == 0


def test_quantize_errors():
    with pytest.raises(ValueError):
        nearest_codewords(np.zeros((2, 3)), np.zeros((0, 3)))
    with pytest.raises(ShapeError):
        nearest_codewords(np.zeros((2, 3)), np.zeros((4, 2)))


def test_quantized_rows_are_codewords(rng):
    codebook = rng.standard_normal((10, 3))
    out = quantize(ad.constant(rng.standard_normal((2, 5, 3))), codebook)
    assert out.indices.shape == (2, 5)
    assert np.all((out.indices >= 0) & (out.indices < 10))
    np.testing.assert_array_equal(out.quantized, codebook[out.indices])


def test_straight_through_identity(rng):
    codebook = rng.standard_normal((10, 3))
    enc = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    out = quantize(enc, codebook)
    np.testing.assert_allclose(out.st.data, out.quantized, atol=1e-15)
    g = rng.standard_normal((4, 3))
    ad.sum_(out.st * ad.constant(g)).backward()
    np.testing.assert_array_equal(enc.grad, g)


def test_encoder_decoder_trivial_maps(rng):
    x = rng.standard_normal((5, 4))
    zero = _linear(np.zeros((4, 4)), np.zeros(4))
    assert not np.any(zero(ad.constant(x)).data)
    ident = _linear(np.eye(4), np.zeros(4))
    np.testing.assert_array_equal(ident(ad.constant(x)).data, x)
    assert not np.any(ident(ad.constant(np.zeros((2, 4)))).data)


def test_hand_computed_loss():
    # E = I, D = 2I, c = [[1,0],[0,2]], codebook [[1,1],[0,0]]
    # row 0 ties (distance 1 to both) -> code 0; row 1 -> code 0 (2 < 4)
    # recon = ((1-2)^2 + (0-2)^2 + (0-2)^2 + (2-2)^2) / 4 = 9/4
    # codebook term = (0 + 1 + 1 + 1) / 4 = 3/4; commit = 0.1 * 3/4
    c = ad.constant(np.array([[1.0, 0.0], [0.0, 2.0]]))
    enc, dec = _linear(np.eye(2), np.zeros(2)), _linear(2 * np.eye(2), np.zeros(2))
    out = vq_loss(c, enc, dec, np.array([[1.0, 1.0], [0.0, 0.0]]), xi=0.1)
    assert list(out.indices) == [0, 0]
    assert float(out.recon_loss.data) == 2.25
    assert float(out.codebook_loss.data) == 0.75
    assert abs(float(out.commit_loss.data) - 0.075) < 1e-15
    assert abs(float(out.total_loss.data) - 3.075) < 1e-15


def test_perfect_quantization_zero_loss(rng):
    codebook = rng.standard_normal((4, 3))
    c = ad.constant(codebook[[0, 2, 3, 2]])
    ident = _linear(np.eye(3), np.zeros(3))
    out = vq_loss(c, ident, _linear(np.eye(3), np.zeros(3)), codebook, 0.1)
    assert float(out.total_loss.data) == 0.0


def test_zero_xi_drops_commitment(rng):
    codebook = rng.standard_normal((4, 3))
    c = ad.constant(rng.standard_normal((6, 3)))
    e, d = _linear(rng.standard_normal((3, 3)), np.zeros(3)), _linear(rng.standard_normal((3, 3)), np.zeros(3))
    out = vq_loss(c, e, d, codebook, 0.0)
    assert float(out.commit_loss.data) == 0.0
    assert float(out.total_loss.data) == float(out.recon_loss.data) + float(out.codebook_loss.data)
    with pytest.raises(ValueError):
        vq_loss(c, e, d, codebook, -0.1)


def test_codebook_term_carries_no_gradient(rng):
    codebook = rng.standard_normal((4, 3))
    c = ad.Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    e, d = _linear(rng.standard_normal((3, 3)), np.zeros(3)), _linear(rng.standard_normal((3, 3)), np.zeros(3))
    out = vq_loss(c, e, d, codebook, 0.1)
    assert not out.codebook_loss.requires_grad


def test_vq_loss_reaches_layer_weights(rng):
    layers = [ad.constant(rng.standard_normal((2, 5, 6))) for _ in range(3)]
    logits = ad.Tensor(np.zeros(3), requires_grad=True)
    vq = VectorQuantizer(6, 3, 8, rng, np.float64)
    c = weighted_sum(layers, logits)
    vq.init_from(vq.encoder(c).data, rng)
    vq(c, 0.1).total_loss.backward()
    assert np.any(np.abs(logits.grad) > 0)


def test_ema_converges_geometrically(rng):
    gamma = 0.9
    c0 = rng.standard_normal((1, 4))
    v = rng.standard_normal(4)
    state = EmaState.fresh(c0, decay=gamma)
    cb = c0.copy()
    errs = [np.linalg.norm(cb[0] - v)]
    for _ in range(30):
        cb = ema_update(cb, state, v[None], np.array([0]))
        errs.append(np.linalg.norm(cb[0] - v))
    # with a single codeword: c_n = v + gamma^n (c_0 - v)
    ratios = np.array(errs[1:]) / np.array(errs[:-1])
    np.testing.assert_allclose(ratios, gamma, rtol=1e-6)


def test_unassigned_codeword_nearly_unchanged(rng):
    cb = rng.standard_normal((3, 2))
    state = EmaState.fresh(cb, eps=1e-12)
    x = cb[[0, 0, 1]] + 0.01
    new = ema_update(cb, state, x, np.array([0, 0, 1]))
    # m_2 and N_2 both decay by gamma, so m_2 / N_2 stays at the old codeword as eps -> 0
    np.testing.assert_allclose(new[2], cb[2], rtol=1e-9)


def test_dead_codes_restart(rng):
    cb = rng.standard_normal((4, 2))
    state = EmaState.fresh(cb, restart_after=3)
    x = rng.standard_normal((5, 2))
    for _ in range(3):
        cb = ema_update(cb, state, x, np.zeros(5, dtype=np.int64), rng)
    for k in (1, 2, 3):
        assert any(np.array_equal(cb[k], row) for row in x)
    assert np.all(state.unused == 0)


def test_ema_assignment_mismatch(rng):
    cb = rng.standard_normal((4, 2))
    with pytest.raises(ShapeError):
        ema_update(cb, EmaState.fresh(cb), np.zeros((3, 2)), np.zeros(2, dtype=np.int64))


def test_ema_codewords_stay_in_hull(rng):
    cb = rng.standard_normal((8, 3))
    state = EmaState.fresh(cb)
    bound = np.max(np.linalg.norm(cb, axis=1))
    for _ in range(100):
        x = rng.standard_normal((32, 3)) * 2
        bound = max(bound, np.max(np.linalg.norm(x, axis=1)))
        cb = ema_update(cb, state, x, nearest_codewords(x, cb), rng)
        assert np.all(np.isfinite(cb))
        assert np.max(np.linalg.norm(cb, axis=1)) <= bound * (1 + 1e-6)


def _clusters(rng, k=8, d=4, n=4000):
    centers = rng.standard_normal((k, d)) * 8
    labels = rng.integers(0, k, n)
    return centers[labels] + rng.standard_normal((n, d)) * 0.5


def test_ema_codebook_matches_kmeans_oracle(rng):
    from sklearn.cluster import KMeans

    k = 8
    data = _clusters(rng, k)
    oracle = KMeans(n_clusters=k, n_init=10, random_state=0).fit(data)
    oracle_mse = np.mean(np.sum((data - oracle.cluster_centers_[oracle.labels_]) ** 2, axis=1))

    vq_rng = np.random.default_rng(7)
    cb = kmeanspp_seed(data[:256], k, vq_rng)
    state = EmaState.fresh(cb)
    for _ in range(20):
        for batch in np.array_split(data[vq_rng.permutation(len(data))], 16):
            cb = ema_update(cb, state, batch, nearest_codewords(batch, cb), vq_rng)
    idx = nearest_codewords(data, cb)
    mse = np.mean(np.sum((data - cb[idx]) ** 2, axis=1))
    assert mse <= 1.5 * oracle_mse


def test_kmeanspp_seed_rows_from_data(rng):
    x = rng.standard_normal((50, 3))
    seeds = kmeanspp_seed(x, 5, rng)
    for row in seeds:
        assert np.any(np.all(x == row, axis=1))
    with pytest.raises(ValueError):
        kmeanspp_seed(np.zeros((0, 3)), 2, rng)
