"""Training the next-N token predictor alone on synthetic token streams.

Isolates the semantic branch (embedding -> causal encoder g -> N-way head)
from the rest of the network, to check that multi-token prediction learns
what a token source makes predictable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff.nn import Embedding, Module
from .metrics import token_accuracy
from .model import SemanticPredictor
from .training import semantic_ce_loss


def cycle_stream(batch: int, length: int, cycle: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Repetitions of ``cycle`` starting at random phases."""
    cycle = np.asarray(cycle)
    phase = rng.integers(0, cycle.size, size=(batch, 1))
    return cycle[(phase + np.arange(length)[None, :]) % cycle.size]


def markov_transition(num_tokens: int, stay: float, rng: np.random.Generator) -> np.ndarray:
    """p * (random permutation) + (1 - p) * uniform."""
    perm = rng.permutation(num_tokens)
    p = np.full((num_tokens, num_tokens), (1.0 - stay) / num_tokens)
    p[np.arange(num_tokens), perm] += stay
    return p


def markov_stream(batch: int, length: int, transition: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    k = transition.shape[0]
    cdf = np.cumsum(transition, axis=1)
    out = np.empty((batch, length), dtype=np.int64)
    out[:, 0] = rng.integers(0, k, size=batch)
    for t in range(1, length):
        u = rng.random(batch)
        out[:, t] = np.minimum((u[:, None] > cdf[out[:, t - 1]]).sum(axis=1), k - 1)
    return out


class TokenPredictor(Module):
    def __init__(self, num_tokens: int, n_future: int, dim: int = 32, layers: int = 2, heads: int = 2,
                 seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.embedding = Embedding(num_tokens, dim, rng, dtype)
        self.predictor = SemanticPredictor(dim, dim, layers, heads, n_future, num_tokens, rng, dtype)

    def __call__(self, tokens: np.ndarray):
        h = self.predictor.encode(self.embedding(tokens))
        return self.predictor.logits(h)


@dataclass
class PredictorRun:
    losses: list[float]
    per_n: np.ndarray
    steps: int


def train_token_predictor(model: TokenPredictor, sample, steps: int, lr: float = 3e-3,
                          seed: int = 0, target: float | None = None, eval_sample=None,
                          eval_every: int = 100) -> PredictorRun:
    """Adam on the next-N cross-entropy of streams from ``sample(rng)``.

    With ``target``, stops early once every per-n accuracy on
    ``eval_sample`` reaches it (checked every ``eval_every`` steps).
    """
    opt = ad.Adam(model.named_parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    per_n = np.zeros(0)
    step = 0
    for step in range(1, steps + 1):
        tokens = sample(rng)
        loss = semantic_ce_loss(model(tokens), tokens)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
        if target is not None and eval_sample is not None and step % eval_every == 0:
            per_n = evaluate_predictor(model, eval_sample)
            if np.all(per_n >= target):
                break
    if eval_sample is not None and (target is None or per_n.size == 0 or step % eval_every):
        per_n = evaluate_predictor(model, eval_sample)
    return PredictorRun(losses, per_n, step)


def evaluate_predictor(model: TokenPredictor, tokens: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        logits = model(tokens)
    return token_accuracy(logits.data, tokens)[0]
