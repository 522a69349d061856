"""WAV I/O, JSONL manifests and synthetic noisy/clean pair generation."""

from __future__ import annotations

import json
import wave as _wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import (
    AudioFileMissingError,
    AudioFormatError,
    ManifestError,
    NotMonoError,
    SilentSignalError,
    UnsupportedBitDepthError,
)

SAMPLE_RATE = 16000
NOISE_KINDS = ("white", "pink", "babble-surrogate")


@dataclass(frozen=True)
class WaveBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("WaveBuffer holds mono audio only")
        if not np.all(np.isfinite(samples)):
            raise ValueError("WaveBuffer samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MixSpec:
    snr_db: float
    noise_kind: str = "white"
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    noisy: Path
    clean: Path


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)


# ---------------------------------------------------------------------------
# WAV


def quantize16(samples: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1] and round to the nearest int16 code."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.rint(x * 32768.0), -32768, 32767).astype(np.int16)


def read_wav(path) -> WaveBuffer:
    path = Path(path)
    if not path.is_file():
        raise AudioFileMissingError(f"no such audio file: {path}")
    try:
        with _wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (_wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if channels != 1:
        raise NotMonoError(f"{path}: expected mono, found {channels} channels")
    if width != 2:
        raise UnsupportedBitDepthError(f"{path}: expected 16-bit PCM, found {8 * width}-bit")
    codes = np.frombuffer(raw, dtype="<i2")
    return WaveBuffer(codes.astype(np.float64) / 32768.0, rate)


def write_wav(path, wave: WaveBuffer) -> None:
    codes = quantize16(wave.samples)
    try:
        with _wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(int(wave.sample_rate))
            wf.writeframes(codes.astype("<i2").tobytes())
    except OSError:
        raise
    except _wave.Error as exc:
        raise AudioFormatError(str(exc)) from exc


# ---------------------------------------------------------------------------
# manifests


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            entry = ManifestEntry(
                id=str(obj["id"]),
                noisy=(path.parent / obj["noisy"]).resolve(),
                clean=(path.parent / obj["clean"]).resolve(),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed entry ({exc})") from exc
        entries.append(entry)
    return DatasetManifest(entries)


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    lines = []
    for e in manifest.entries:
        rec = {"id": e.id}
        for key in ("noisy", "clean"):
            p = Path(getattr(e, key))
            try:
                rec[key] = str(p.resolve().relative_to(path.parent.resolve()))
            except ValueError:
                rec[key] = str(p)
        lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + "\n")


def load_pair(entry: ManifestEntry) -> tuple[WaveBuffer, WaveBuffer]:
    noisy = read_wav(entry.noisy)
    clean = read_wav(entry.clean)
    if len(noisy) != len(clean) or noisy.sample_rate != clean.sample_rate:
        raise ManifestError(f"entry {entry.id!r}: noisy/clean differ in length or rate")
    return noisy, clean


def load_pairs(manifest: DatasetManifest, workers: int = 4) -> list[tuple[WaveBuffer, WaveBuffer]]:
    """Read every pair; results keep manifest order."""
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(load_pair, manifest.entries))


# ---------------------------------------------------------------------------
# synthesis


def signal_power(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x)) if x.size else 0.0


def mix_at_snr(clean: WaveBuffer, noise: WaveBuffer, spec: MixSpec) -> WaveBuffer:
    """``clean + a * noise`` with ``a`` chosen so the clip-level SNR is ``spec.snr_db``.

    Noise shorter than the clean signal is tiled; longer noise is cut at a
    seed-determined offset.
    """
    if clean.sample_rate != noise.sample_rate:
        raise ValueError("clean and noise sample rates differ")
    p_clean = signal_power(clean.samples)
    if p_clean == 0.0:
        raise SilentSignalError("clean signal has zero power; SNR undefined")
    n = len(clean)
    src = noise.samples
    if len(src) < n:
        src = np.tile(src, -(-n // max(len(src), 1)))
    rng = np.random.default_rng(spec.seed)
    offset = int(rng.integers(0, len(src) - n + 1))
    seg = src[offset : offset + n]
    p_noise = signal_power(seg)
    if p_noise == 0.0:
        raise SilentSignalError("noise segment has zero power")
    alpha = np.sqrt(p_clean / (p_noise * 10.0 ** (spec.snr_db / 10.0)))
    return WaveBuffer(clean.samples + alpha * seg, clean.sample_rate)


def make_noise(kind: str, n: int, seed: int, sample_rate: int = SAMPLE_RATE) -> WaveBuffer:
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(n)
    if kind == "white":
        x = white
    elif kind == "pink":
        spec = np.fft.rfft(white)
        f = np.arange(spec.size, dtype=np.float64)
        f[0] = 1.0
        x = np.fft.irfft(spec / np.sqrt(f), n)
    elif kind == "babble-surrogate":
        # speech-band noise with a syllabic-rate amplitude envelope
        b, a = sps.butter(4, [200.0, 3500.0], btype="bandpass", fs=sample_rate)
        x = sps.lfilter(b, a, white)
        t = np.arange(n) / sample_rate
        env = np.ones(n)
        for _ in range(4):
            env += 0.5 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
        x = x * np.maximum(env, 0.1)
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    x = x / (np.max(np.abs(x)) + 1e-12) * 0.5
    return WaveBuffer(x, sample_rate)


@dataclass(frozen=True)
class PitchSegment:
    start: int
    stop: int
    f0: float


def speechlike_segments(duration_s: float, seed: int, sample_rate: int = SAMPLE_RATE) -> list[PitchSegment]:
    """Piecewise-constant pitch plan: segments of 100-400 ms, f0 in 100-300 Hz."""
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    n = int(round(duration_s * sample_rate))
    rng = np.random.default_rng(seed)
    segs = []
    pos = 0
    while pos < n:
        length = int(rng.uniform(0.1, 0.4) * sample_rate)
        stop = min(n, pos + length)
        segs.append(PitchSegment(pos, stop, float(rng.uniform(100.0, 300.0))))
        pos = stop
    return segs


def synth_speechlike(duration_s: float, seed: int, sample_rate: int = SAMPLE_RATE) -> WaveBuffer:
    """Harmonic surrogate for voiced speech.

    Pitch is piecewise constant per segment (phase-continuous across
    boundaries); harmonic amplitudes follow three formant-like bumps whose
    centres drift slowly; a syllabic envelope modulates the level.
    """
    segs = speechlike_segments(duration_s, seed, sample_rate)
    n = segs[-1].stop
    rng = np.random.default_rng(seed + 7919)
    f0 = np.empty(n)
    for s in segs:
        f0[s.start : s.stop] = s.f0
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    t = np.arange(n) / sample_rate

    centres = []
    for base, spread in ((500.0, 250.0), (1500.0, 500.0), (2600.0, 500.0)):
        c0 = base + rng.uniform(-spread, spread)
        drift = rng.uniform(0.5, 2.0)
        depth = rng.uniform(0.1, 0.3) * base
        centres.append(c0 + depth * np.sin(2 * np.pi * drift * t + rng.uniform(0, 2 * np.pi)))
    widths = (200.0, 300.0, 400.0)

    out = np.zeros(n)
    nyq = sample_rate / 2
    max_h = int(nyq // 100.0)
    for h in range(1, max_h + 1):
        fh = h * f0
        audible = fh < nyq * 0.95
        if not audible.any():
            break
        amp = sum(np.exp(-0.5 * ((fh - c) / w) ** 2) for c, w in zip(centres, widths))
        amp = amp + 0.02
        out += audible * amp * np.sin(h * phase) / np.sqrt(h)

    env = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(3.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    out *= env
    out *= 0.8 / (np.max(np.abs(out)) + 1e-12)
    return WaveBuffer(out, sample_rate)


def make_synthetic_corpus(out_dir, count: int, duration_s: float = 2.0, seed: int = 0,
                          snr_range=(0.0, 10.0), noise_kinds=("white", "pink"),
                          prefix: str = "utt") -> DatasetManifest:
    """Write ``count`` clean/noisy WAV pairs and a ``manifest.jsonl`` to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(count):
        item_seed = int(rng.integers(0, 2**31 - 1))
        clean = synth_speechlike(duration_s, item_seed)
        kind = noise_kinds[i % len(noise_kinds)]
        noise = make_noise(kind, len(clean) * 2, item_seed + 1)
        snr = float(np.random.default_rng(item_seed + 2).uniform(*snr_range))
        noisy = mix_at_snr(clean, noise, MixSpec(snr, kind, item_seed + 3))
        peak = np.max(np.abs(noisy.samples))
        if peak > 0.99:
            # same gain on both keeps the pair consistent and avoids clipping
            g = 0.99 / peak
            clean = WaveBuffer(clean.samples * g, clean.sample_rate)
            noisy = WaveBuffer(noisy.samples * g, noisy.sample_rate)
        uid = f"{prefix}{i:04d}"
        cpath, npath = out_dir / f"{uid}_clean.wav", out_dir / f"{uid}_noisy.wav"
        write_wav(cpath, clean)
        write_wav(npath, noisy)
        entries.append(ManifestEntry(uid, npath, cpath))
    manifest = DatasetManifest(entries)
    write_manifest(out_dir / "manifest.jsonl", manifest)
    return manifest
