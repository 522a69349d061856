"""Strict JSON configuration with "desk" and "paper" presets."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

VARIANTS = ("raw", "index", "codebook")
FUSIONS = ("film", "concat")
DTYPES = ("float32", "float64")


@dataclass
class StftSection:
    win: int = 640
    hop: int = 320
    fft: int = 1024
    window: str = "hann"


@dataclass
class SslSection:
    I: int = 4
    D_ssl: int = 128
    heads: int = 4
    causal: bool = True
    freeze_frontend: bool = True
    conv_kernel: int = 3
    prefix_mode: bool = False
    external_features_path: str | None = None


@dataclass
class VqSection:
    K: int = 256
    D_code: int = 64
    xi: float = 0.1
    gamma_ema: float = 0.99
    eps: float = 1e-5
    restart_after: int = 50


@dataclass
class ModelSection:
    D_g: int = 128
    D_f: int = 64
    heads: int = 4
    layers: int = 3
    variant: str = "codebook"
    D_emb: int = 64
    N: int = 5
    fusion: str = "film"


@dataclass
class TrainSection:
    lambda_se: float = 1.0
    lambda_vq: float = 1.0
    lambda_ce: float = 0.01
    lr: float = 1e-3
    epochs: int = 30
    batch: int = 8
    crop_frames: int = 256
    seed: int = 0
    dtype: str = "float32"


@dataclass
class Config:
    stft: StftSection = field(default_factory=StftSection)
    ssl: SslSection = field(default_factory=SslSection)
    vq: VqSection = field(default_factory=VqSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def architecture(self) -> dict:
        """The parts of the config that determine parameter shapes and semantics."""
        d = self.to_dict()
        d.pop("train")
        d["ssl"].pop("external_features_path")
        d["ssl"].pop("freeze_frontend")
        d["ssl"].pop("prefix_mode")
        return d

    def validate(self) -> "Config":
        s, q, m, t = self.ssl, self.vq, self.model, self.train
        checks = [
            (0 < self.stft.hop <= self.stft.win <= self.stft.fft, "stft needs 0 < hop <= win <= fft"),
            (self.stft.window in ("hann", "sqrt_hann"), f"unknown window {self.stft.window!r}"),
            (s.I >= 1, "ssl.I must be >= 1"),
            (s.D_ssl % s.heads == 0, "ssl.D_ssl must be divisible by ssl.heads"),
            (s.conv_kernel >= 1, "ssl.conv_kernel must be >= 1"),
            (q.K >= 1 and q.D_code >= 1, "vq.K and vq.D_code must be positive"),
            (q.xi >= 0, "vq.xi must be >= 0"),
            (0.0 <= q.gamma_ema < 1.0, "vq.gamma_ema must lie in [0, 1)"),
            (m.D_g % m.heads == 0 and m.D_f % m.heads == 0, "model widths must be divisible by heads"),
            (m.variant in VARIANTS, f"model.variant must be one of {VARIANTS}"),
            (m.fusion in FUSIONS, f"model.fusion must be one of {FUSIONS}"),
            (m.N >= 1, "model.N must be >= 1"),
            (min(t.lambda_se, t.lambda_vq, t.lambda_ce) >= 0, "loss weights must be >= 0"),
            (t.lr > 0 and t.epochs >= 0 and t.batch >= 1 and t.crop_frames > m.N, "invalid train section"),
            (t.dtype in DTYPES, f"train.dtype must be one of {DTYPES}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


PRESETS: dict[str, dict] = {
    "desk": {},
    "paper": {
        "ssl": {"I": 12, "D_ssl": 768, "heads": 12},
        "vq": {"K": 1024},
        "model": {"D_g": 512, "D_f": 256, "heads": 4, "layers": 3, "N": 5},
        "train": {"lr": 1e-4, "epochs": 200},
    },
}

_SECTIONS = {
    "stft": StftSection,
    "ssl": SslSection,
    "vq": VqSection,
    "model": ModelSection,
    "train": TrainSection,
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _check_type(section: str, key: str, value, default) -> None:
    if default is None:
        ok = value is None or isinstance(value, str)
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{section}.{key}: expected {type(default).__name__}, got {value!r}")


def config_from_dict(data: dict, preset: str = "desk") -> Config:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    merged = _merge(PRESETS[preset], data)
    sections = {}
    for name, body in merged.items():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown config section {name!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be an object")
        cls = _SECTIONS[name]
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(body) - known
        if unknown:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
        for key, value in body.items():
            _check_type(name, key, value, getattr(cls(), key))
        sections[name] = cls(**body)
    return Config(**sections).validate()


def load_config(path=None, preset: str = "desk") -> Config:
    data = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data, preset)
