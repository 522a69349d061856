"""Desk-scale quality and prediction metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .errors import ShapeError, SilentSignalError

SI_SDR_CAP = 60.0


def si_sdr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Scale-invariant SDR in dB, capped at +60."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise ShapeError(f"si_sdr length mismatch: {ref.shape} vs {est.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise SilentSignalError("si_sdr undefined for a zero reference")
    target = (np.dot(est, ref) / ref_energy) * ref
    residual = est - target
    num = float(np.dot(target, target))
    den = float(np.dot(residual, residual))
    if den == 0.0 or (num > 0 and num >= den * 10 ** (SI_SDR_CAP / 10)):
        return SI_SDR_CAP
    if num == 0.0:
        return -SI_SDR_CAP
    return max(-SI_SDR_CAP, 10.0 * np.log10(num / den))


def scoring_span(num_samples: int, config: dsp.StftConfig) -> slice:
    """Samples covered by at least two overlapping synthesis windows.

    The first and last ``win - hop`` samples of a resynthesized signal see a
    single tapered window, so they are left out of quality scores.
    """
    edge = config.win_length - config.hop_length
    if num_samples <= 2 * edge:
        return slice(0, num_samples)
    return slice(edge, num_samples - edge)


def log_spectral_distance(reference: np.ndarray, estimate: np.ndarray,
                          config: dsp.StftConfig = dsp.StftConfig(), floor: float = 1e-8) -> float:
    """RMS over frames of the per-frame RMS log-magnitude difference (dB)."""
    ref = np.asarray(reference, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if ref.shape != est.shape:
        raise ShapeError(f"lsd length mismatch: {ref.shape} vs {est.shape}")
    a = np.maximum(np.abs(dsp.stft(ref, config).frames), floor)
    b = np.maximum(np.abs(dsp.stft(est, config).frames), floor)
    diff = 20.0 * (np.log10(a) - np.log10(b))
    per_frame = np.sqrt(np.mean(diff * diff, axis=-1))
    return float(np.sqrt(np.mean(per_frame * per_frame)))


def future_targets(tokens: np.ndarray, n_future: int) -> np.ndarray:
    """(..., T) tokens -> (..., T-N, N) with out[..., t, n-1] = tokens[..., t+n]."""
    tokens = np.asarray(tokens)
    t = tokens.shape[-1]
    if t <= n_future:
        raise ShapeError(f"no valid positions: T={t} <= N={n_future}")
    return np.stack([tokens[..., n : t - n_future + n] for n in range(1, n_future + 1)], axis=-1)


def token_accuracy(logits: np.ndarray, tokens: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-n and mean next-token accuracy.

    ``logits`` is (..., T, N, K) and ``tokens`` the realized (..., T) indices.
    Positions t < T-N are scored for every n, so the mean of the per-n
    values equals the overall mean.
    """
    logits = np.asarray(logits)
    n_future = logits.shape[-2]
    targets = future_targets(tokens, n_future)
    pred = np.argmax(logits[..., : targets.shape[-2], :, :], axis=-1)
    hits = (pred == targets).reshape(-1, n_future)
    per_n = hits.mean(axis=0)
    return per_n, float(per_n.mean())


@dataclass
class UtteranceMetrics:
    id: str
    noisy_si_sdr: float
    enhanced_si_sdr: float
    noisy_lsd: float
    enhanced_lsd: float
    token_acc: list[float]


@dataclass
class MetricReport:
    utterances: list[UtteranceMetrics] = field(default_factory=list)

    def aggregate(self) -> dict:
        if not self.utterances:
            return {}
        out = {}
        for key in ("noisy_si_sdr", "enhanced_si_sdr", "noisy_lsd", "enhanced_lsd"):
            out[key] = float(np.mean([getattr(u, key) for u in self.utterances]))
        out["si_sdr_improvement"] = out["enhanced_si_sdr"] - out["noisy_si_sdr"]
        per_n = np.mean([u.token_acc for u in self.utterances], axis=0)
        out["token_acc_per_n"] = [float(v) for v in per_n]
        out["token_acc"] = float(per_n.mean())
        return out

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate(),
            "utterances": [vars(u) for u in self.utterances],
        }
