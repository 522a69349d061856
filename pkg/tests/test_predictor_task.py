import numpy as np

from causal_se.predictor_task import (TokenPredictor, cycle_stream, evaluate_predictor, markov_stream,
                                      markov_transition, train_token_predictor)


def test_cycle_stream_periodic(rng):
    cyc = np.array([4, 1, 3])
    s = cycle_stream(5, 20, cyc, rng)
    np.testing.assert_array_equal(s[:, 3:], s[:, :-3])
    assert set(np.unique(s)) <= {1, 3, 4}


def test_markov_transition_stochastic(rng):
    p = markov_transition(6, 0.7, rng)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-15)
    assert np.all(p.max(axis=1) == 0.7 + 0.3 / 6)


def test_markov_stream_empirical_transitions(rng):
    p = markov_transition(4, 0.6, rng)
    s = markov_stream(200, 200, p, rng)
    counts = np.zeros((4, 4))
    np.add.at(counts, (s[:, :-1].ravel(), s[:, 1:].ravel()), 1)
    np.testing.assert_allclose(counts / counts.sum(1, keepdims=True), p, atol=0.02)


def test_learns_cycle():
    cyc = np.random.default_rng(1).permutation(16)[:7]
    model = TokenPredictor(16, 5, seed=0)
    ev = cycle_stream(16, 40, cyc, np.random.default_rng(5))
    run = train_token_predictor(model, lambda g: cycle_stream(16, 32, cyc, g), 2000, target=0.95,
                                eval_sample=ev, eval_every=50)
    assert np.all(run.per_n >= 0.95) and run.steps <= 2000


def test_markov_accuracy_declines_with_horizon():
    p = markov_transition(8, 0.7, np.random.default_rng(0))
    model = TokenPredictor(8, 3, dim=16, layers=1, seed=0)
    ev = markov_stream(32, 64, p, np.random.default_rng(99))
    run = train_token_predictor(model, lambda g: markov_stream(16, 32, p, g), 200, eval_sample=ev)
    assert np.all(np.diff(run.per_n) <= 0)
    # predictable part of an n-step transition: stay^n + (1 - stay^n) / K
    assert run.per_n[0] > 0.6


def test_untrained_accuracy_near_chance():
    model = TokenPredictor(8, 2, seed=3)
    tokens = np.random.default_rng(2).integers(0, 8, (16, 64))
    assert evaluate_predictor(model, tokens).mean() < 0.3
