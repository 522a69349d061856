"""STFT analysis/synthesis, log1p features and a causal streaming framer.

Frames are never centre-padded: frame ``t`` covers samples
``[t*hop, t*hop + win)``, so it depends on no later sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import SAMPLE_RATE, WaveBuffer
from .errors import ShapeError

WINDOWS = ("hann", "sqrt_hann")


@dataclass(frozen=True)
class StftConfig:
    win_length: int = 640
    hop_length: int = 320
    fft_size: int = 1024
    window: str = "hann"

    def __post_init__(self):
        if not (0 < self.hop_length <= self.win_length <= self.fft_size):
            raise ValueError("need 0 < hop <= win <= fft")
        if self.window not in WINDOWS:
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def num_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            return 0
        return 1 + (n_samples - self.win_length) // self.hop_length

    def num_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop_length + self.win_length if n_frames > 0 else 0


def analysis_window(config: StftConfig) -> np.ndarray:
    """Periodic Hann (or its square root) of length ``win_length``."""
    n = np.arange(config.win_length)
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * n / config.win_length)
    return np.sqrt(hann) if config.window == "sqrt_hann" else hann


def window_sum_square(config: StftConfig, n_frames: int) -> np.ndarray:
    """Overlap-added squared window for ``n_frames`` frames."""
    w2 = analysis_window(config) ** 2
    out = np.zeros(config.num_samples(n_frames))
    for t in range(n_frames):
        s = t * config.hop_length
        out[s : s + config.win_length] += w2
    return out


# below this fraction of the peak envelope, edge samples are not amplified
_WSS_FLOOR = 1e-2


@dataclass
class SpectrogramComplex:
    frames: np.ndarray  # (..., T, F) complex
    config: StftConfig

    @property
    def num_frames(self) -> int:
        return self.frames.shape[-2]


@dataclass
class LogMagFeatures:
    frames: np.ndarray  # (..., T, F), nonnegative


def frame_signal(samples: np.ndarray, config: StftConfig) -> np.ndarray:
    """(..., S) -> (..., T, win) view of overlapping frames, no padding."""
    samples = np.asarray(samples)
    n = samples.shape[-1]
    t = config.num_frames(n)
    if t == 0:
        raise ShapeError(f"signal of {n} samples is shorter than one window ({config.win_length})")
    idx = np.arange(t)[:, None] * config.hop_length + np.arange(config.win_length)[None, :]
    return samples[..., idx]


def _wave_samples(wave) -> np.ndarray:
    return wave.samples if isinstance(wave, WaveBuffer) else np.asarray(wave, dtype=np.float64)


def stft(wave, config: StftConfig = StftConfig()) -> SpectrogramComplex:
    frames = frame_signal(_wave_samples(wave), config) * analysis_window(config)
    return SpectrogramComplex(np.fft.rfft(frames, n=config.fft_size, axis=-1), config)


def _synthesis_frames(frames: np.ndarray, config: StftConfig) -> np.ndarray:
    time = np.fft.irfft(frames, n=config.fft_size, axis=-1)[..., : config.win_length]
    return time * analysis_window(config)


def steady_envelope_peak(config: StftConfig) -> float:
    """Peak of the squared-window overlap-add envelope far from the edges."""
    n = 2 * -(-config.win_length // config.hop_length) + 1
    return float(np.max(window_sum_square(config, n)))


def _normalizer(wss: np.ndarray, config: StftConfig) -> np.ndarray:
    return np.maximum(wss, _WSS_FLOOR * steady_envelope_peak(config))


def istft_samples(frames: np.ndarray, config: StftConfig) -> np.ndarray:
    """Overlap-add synthesis for (..., T, F) spectra; returns (..., S)."""
    if frames.shape[-1] != config.n_bins:
        raise ShapeError(f"spectrogram has {frames.shape[-1]} bins, config implies {config.n_bins}")
    t = frames.shape[-2]
    seg = _synthesis_frames(frames, config)
    out = np.zeros(frames.shape[:-2] + (config.num_samples(t),))
    for i in range(t):
        s = i * config.hop_length
        out[..., s : s + config.win_length] += seg[..., i, :]
    return out / _normalizer(window_sum_square(config, t), config)


def istft(spec: SpectrogramComplex, config: StftConfig | None = None) -> WaveBuffer:
    config = config or spec.config
    if spec.frames.ndim != 2:
        raise ShapeError("istft returns a single WaveBuffer; use istft_samples for batches")
    return WaveBuffer(istft_samples(spec.frames, config), SAMPLE_RATE)


def log1p_magnitude(frames: np.ndarray) -> np.ndarray:
    return np.log1p(np.abs(frames))


def log1p_features(spec: SpectrogramComplex) -> LogMagFeatures:
    return LogMagFeatures(log1p_magnitude(spec.frames))


def apply_logmag(enhanced: np.ndarray, noisy: np.ndarray) -> np.ndarray:
    """Complex spectrum with magnitude ``exp(enhanced) - 1`` and the noisy phase."""
    if enhanced.shape != noisy.shape:
        raise ShapeError(f"shape mismatch: {enhanced.shape} vs {noisy.shape}")
    mag = np.maximum(np.expm1(enhanced), 0.0)
    return mag * np.exp(1j * np.angle(noisy))


def reconstruct_from_logmag(enhanced: LogMagFeatures, noisy: SpectrogramComplex) -> WaveBuffer:
    spec = SpectrogramComplex(apply_logmag(enhanced.frames, noisy.frames), noisy.config)
    return istft(spec)


# ---------------------------------------------------------------------------
# streaming


@dataclass
class StreamFramerState:
    config: StftConfig = field(default_factory=StftConfig)
    pending: np.ndarray = field(default_factory=lambda: np.zeros(0))
    frame_count: int = 0


def framer_push(state: StreamFramerState, samples) -> list[np.ndarray]:
    """Append samples; return every raw frame that became complete.

    Frame ``t`` is returned as soon as sample ``t*hop + win - 1`` arrives.
    """
    cfg = state.config
    buf = np.concatenate([state.pending, np.asarray(samples, dtype=np.float64)])
    out = []
    start = 0
    while buf.size - start >= cfg.win_length:
        out.append(buf[start : start + cfg.win_length].copy())
        start += cfg.hop_length
        state.frame_count += 1
    state.pending = buf[start:]
    return out


def frame_spectrum(frame: np.ndarray, config: StftConfig) -> np.ndarray:
    """Spectrum of one raw frame, identical to the corresponding stft row."""
    return np.fft.rfft(frame[None, :] * analysis_window(config), n=config.fft_size, axis=-1)[0]


class OverlapAdd:
    """Incremental synthesis matching ``istft_samples`` sample for sample.

    After frame ``t`` is pushed, samples before ``(t+1)*hop`` are final and
    returned; ``finish`` releases the remaining ``win - hop`` samples.
    """

    def __init__(self, config: StftConfig):
        self.config = config
        self.tail = np.zeros(config.win_length)
        self.frames = 0
        self._w2 = analysis_window(config) ** 2
        self._floor = _WSS_FLOOR * steady_envelope_peak(config)

    def _envelope(self, start: int, stop: int) -> np.ndarray:
        cfg = self.config
        out = np.zeros(stop - start)
        for t in range(max(0, (start - cfg.win_length) // cfg.hop_length), self.frames):
            s = t * cfg.hop_length
            lo, hi = max(s, start), min(s + cfg.win_length, stop)
            if lo < hi:
                out[lo - start : hi - start] += self._w2[lo - s : hi - s]
        return np.maximum(out, self._floor)

    def push(self, spectrum: np.ndarray) -> np.ndarray:
        cfg = self.config
        self.tail += _synthesis_frames(spectrum[None, :], cfg)[0]
        self.frames += 1
        start = (self.frames - 1) * cfg.hop_length
        ready = self.tail[: cfg.hop_length] / self._envelope(start, start + cfg.hop_length)
        self.tail = np.concatenate([self.tail[cfg.hop_length :], np.zeros(cfg.hop_length)])
        return ready

    def finish(self) -> np.ndarray:
        cfg = self.config
        if self.frames == 0:
            return np.zeros(0)
        start = self.frames * cfg.hop_length
        rest = cfg.win_length - cfg.hop_length
        return self.tail[:rest] / self._envelope(start, start + rest)
