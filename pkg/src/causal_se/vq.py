"""One-stage vector quantization of causal features into semantic tokens.

Encoder and decoder are single affine maps.  Codewords are not trained by
gradient; they track exponential moving averages of the encoder outputs
assigned to them (with Laplace-smoothed cluster sizes and dead-code
restarts).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff.nn import Linear, Module
from .autodiff.core import Tensor
from .errors import ShapeError


@dataclass
class VqOutput:
    indices: np.ndarray  # (...,) int64
    quantized: np.ndarray  # (..., D_code); quantized[t] == codebook[indices[t]]
    st: Tensor  # straight-through vectors: value ~ quantized, gradient -> encoded
    encoded: Tensor
    recon_loss: Tensor | None = None
    codebook_loss: Tensor | None = None
    commit_loss: Tensor | None = None

    @property
    def total_loss(self) -> Tensor:
        return self.recon_loss + self.codebook_loss + self.commit_loss


def nearest_codewords(x: np.ndarray, codebook: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """argmin_k ||x - codebook[k]||^2 per row, ties to the smallest k.

    Candidates come from the expanded-square form; rows whose best candidates
    are within rounding of each other are resolved with exact differences.
    """
    if codebook.shape[0] == 0:
        raise ValueError("empty codebook")
    if x.shape[-1] != codebook.shape[-1]:
        raise ShapeError(f"vector width {x.shape[-1]} vs codebook width {codebook.shape[-1]}")
    flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
    cb = codebook.astype(np.float64)
    cb_sq = np.sum(cb * cb, axis=1)
    out = np.empty(flat.shape[0], dtype=np.int64)
    for s in range(0, flat.shape[0], chunk):
        rows = flat[s : s + chunk]
        d = np.sum(rows * rows, axis=1, keepdims=True) - 2.0 * rows @ cb.T + cb_sq[None, :]
        best = d.min(axis=1, keepdims=True)
        scale = np.sum(rows * rows, axis=1, keepdims=True) + cb_sq.max()
        close = d <= best + 1e-9 * (scale + 1.0)
        idx = np.argmax(close, axis=1)
        ambiguous = np.nonzero(close.sum(axis=1) > 1)[0]
        for r in ambiguous:
            cand = np.nonzero(close[r])[0]
            diff = rows[r][None, :] - cb[cand]
            exact = np.sum(diff * diff, axis=1)
            idx[r] = cand[np.argmin(exact)]
        out[s : s + chunk] = idx
    return out.reshape(x.shape[:-1])


def quantize(encoded: Tensor, codebook: np.ndarray) -> VqOutput:
    """Nearest-codeword assignment with a straight-through estimator."""
    indices = ad.freeze(nearest_codewords(encoded.data, codebook))
    quantized = codebook[indices].astype(encoded.dtype)
    st = encoded + ad.detach(quantized - encoded.data)
    return VqOutput(indices=indices, quantized=quantized, st=st, encoded=encoded)


def vq_loss(c: Tensor, encoder: Linear, decoder: Linear, codebook: np.ndarray, xi: float) -> VqOutput:
    """Encode, quantize, decode and attach the three loss terms.

    recon  = mean (c - D(e))^2, gradient reaches D, E (straight-through) and c
    codebk = mean (sg[E(c)] - e)^2, monitored only (codewords follow the EMA)
    commit = xi * mean (sg[e] - E(c))^2
    """
    if xi < 0:
        raise ValueError("xi must be non-negative")
    out = quantize(encoder(c), codebook)
    e = ad.constant(out.quantized)
    out.recon_loss = ad.mse_loss(decoder(out.st), c)
    out.codebook_loss = ad.mse_loss(ad.detach(out.encoded), e)
    out.commit_loss = ad.mse_loss(out.encoded, e) * xi
    return out


class VectorQuantizer(Module):
    def __init__(self, d_in: int, d_code: int, num_codes: int, rng: np.random.Generator, dtype=np.float32,
                 decay: float = 0.99, eps: float = 1e-5, restart_after: int = 50):
        self.encoder = Linear(d_in, d_code, rng, dtype)
        self.decoder = Linear(d_code, d_in, rng, dtype)
        codebook = rng.standard_normal((num_codes, d_code)).astype(dtype)
        self.state = EmaState.fresh(codebook, decay, eps, restart_after)
        self.codebook = codebook
        self.initialized = False

    @property
    def num_codes(self) -> int:
        return self.codebook.shape[0]

    def __call__(self, c: Tensor, xi: float) -> VqOutput:
        return vq_loss(c, self.encoder, self.decoder, self.codebook, xi)

    def init_from(self, encoded: np.ndarray, rng: np.random.Generator) -> None:
        flat = encoded.reshape(-1, encoded.shape[-1])
        self.codebook = kmeanspp_seed(flat, self.num_codes, rng).astype(self.codebook.dtype)
        s = self.state
        self.state = EmaState.fresh(self.codebook, s.decay, s.eps, s.restart_after)
        self.initialized = True

    def update(self, encoded: np.ndarray, indices: np.ndarray, rng: np.random.Generator) -> None:
        self.codebook = ema_update(self.codebook, self.state, encoded, indices, rng)


@dataclass
class EmaState:
    cluster_size: np.ndarray  # (K,)
    embed_sum: np.ndarray  # (K, D)
    unused: np.ndarray  # (K,) consecutive updates without assignments
    decay: float = 0.99
    eps: float = 1e-5
    restart_after: int = 50

    @classmethod
    def fresh(cls, codebook: np.ndarray, decay=0.99, eps=1e-5, restart_after=50) -> "EmaState":
        # each initial codeword counts as one pseudo-observation of itself
        k = codebook.shape[0]
        return cls(np.ones(k, dtype=codebook.dtype), codebook.copy(), np.zeros(k, dtype=np.int64),
                   decay, eps, restart_after)


def ema_update(codebook: np.ndarray, state: EmaState, encoded: np.ndarray, indices: np.ndarray,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """One moving-average step; mutates ``state`` and returns the new codebook."""
    x = encoded.reshape(-1, encoded.shape[-1])
    idx = np.asarray(indices).reshape(-1)
    if idx.shape[0] != x.shape[0]:
        raise ShapeError(f"{idx.shape[0]} assignments for {x.shape[0]} vectors")
    k = codebook.shape[0]
    dtype = codebook.dtype
    g = state.decay
    counts = np.bincount(idx, minlength=k).astype(dtype)
    sums = np.zeros_like(state.embed_sum)
    np.add.at(sums, idx, x.astype(dtype))
    state.cluster_size = g * state.cluster_size + (1.0 - g) * counts
    state.embed_sum = g * state.embed_sum + (1.0 - g) * sums
    n = state.cluster_size.sum()
    smoothed = (state.cluster_size + state.eps) / (n + k * state.eps) * n
    new = (state.embed_sum / smoothed[:, None]).astype(dtype)
    state.unused = np.where(counts > 0, 0, state.unused + 1)
    dead = np.nonzero(state.unused >= state.restart_after)[0]
    if dead.size and x.shape[0]:
        rng = rng or np.random.default_rng(0)
        rows = x[rng.integers(0, x.shape[0], size=dead.size)].astype(dtype)
        new[dead] = rows
        state.embed_sum[dead] = rows
        state.cluster_size[dead] = 1.0
        state.unused[dead] = 0
    return new


def kmeanspp_seed(x: np.ndarray, k: int, rng: np.random.Generator, trials: int | None = None) -> np.ndarray:
    """Greedy D^2-weighted seeding of ``k`` rows of ``x`` (with replacement when short).

    Each pick draws ``trials`` candidates (default ``2 + ln k``) and keeps the one
    that lowers the total squared distance most; a single draw per pick misses
    well-separated clusters often enough that moving-average refinement stalls.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot seed a codebook from zero vectors")
    trials = trials or 2 + int(np.log(k))
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            j = rng.integers(n)
            centers[i] = x[j] + 1e-3 * rng.standard_normal(x.shape[1])
            continue
        cand = rng.choice(n, size=trials, p=d2 / total)
        cand_d2 = np.minimum(d2[None, :], np.sum((x[None, :, :] - x[cand][:, None, :]) ** 2, axis=-1))
        best = int(np.argmin(cand_d2.sum(axis=1)))
        centers[i] = x[cand[best]]
        d2 = cand_d2[best]
    return centers
