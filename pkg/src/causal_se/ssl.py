"""Causal self-supervised-style features.

A small trainable stand-in for a pretrained SSL model produces one output
per layer; the layers are mixed with softmax-normalized trainable weights and
restricted to past context by prefix evaluation.  Externally computed layer
features can be injected in place of the built-in encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .audio import SAMPLE_RATE
from .autodiff.nn import LayerNorm, Linear, Module, TransformerStack
from .autodiff.core import Tensor
from .container import load_tensors, save_tensors
from .errors import MissingTensorError, ShapeError, UnknownTensorError


@dataclass
class SslFeatureStack:
    layers: np.ndarray  # (I, T, D)

    def __post_init__(self):
        self.layers = np.asarray(self.layers)
        if self.layers.ndim != 3 or self.layers.shape[0] < 1:
            raise ShapeError(f"feature stack must be (I, T, D) with I >= 1, got {self.layers.shape}")

    @property
    def num_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def num_frames(self) -> int:
        return self.layers.shape[1]


class PseudoSsl(Module):
    """Framed waveform -> per-layer features.

    Front-end: a filterbank of cosine/sine pairs on each windowed frame,
    initialized at mel-spaced centre frequencies, whose pair energies are
    log1p-compressed (so the features do not depend on the waveform phase
    within a frame), and a temporal convolution over ``conv_kernel`` frames
    (left-padded when causal).  Then a stack of transformer blocks whose
    outputs are the layer features.  No absolute positions are added: the
    convolution carries local order, so features (and the tokens quantized
    from them) depend on content rather than on the frame index.
    """

    def __init__(self, win: int, layers: int, width: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32, causal: bool = True, conv_kernel: int = 3,
                 sample_rate: int = SAMPLE_RATE):
        self.filterbank = Linear(win, 2 * width, rng, dtype, bias=False)
        self.filterbank.weight.data = quadrature_bank(win, width, sample_rate).astype(dtype)
        self.conv = Linear(conv_kernel * width, width, rng, dtype)
        self.norm = LayerNorm(width, dtype)
        self.encoder = TransformerStack(width, width, layers, heads, rng, dtype, causal, positions=False)
        self.causal = causal
        self.conv_kernel = conv_kernel

    def frontend_parameters(self) -> list[Tensor]:
        return self.filterbank.parameters() + self.conv.parameters() + self.norm.parameters()

    def __call__(self, frames, cache: dict | None = None) -> list[Tensor]:
        frames = frames if isinstance(frames, Tensor) else ad.constant(frames)
        b, t, _ = frames.shape
        width = self.conv.d_out
        pairs = self.filterbank(frames)
        h = ad.log1p(ad.square(pairs[..., :width]) + ad.square(pairs[..., width:]))
        k = self.conv_kernel
        left = k - 1 if self.causal else (k - 1) // 2
        right = k - 1 - left
        if cache is not None:
            if not self.causal:
                raise ValueError("incremental evaluation requires the causal encoder")
            hist = cache.get("conv")
            if hist is None:
                hist = np.zeros((b, left, width), dtype=h.dtype)
            padded = ad.concat([ad.constant(hist), h], axis=1)
            cache["conv"] = padded.data[:, padded.shape[1] - left :]
        else:
            parts = [h]
            if left:
                parts.insert(0, ad.constant(np.zeros((b, left, width), dtype=h.dtype)))
            if right:
                parts.append(ad.constant(np.zeros((b, right, width), dtype=h.dtype)))
            padded = ad.concat(parts, axis=1) if len(parts) > 1 else h
        cols = ad.concat([padded[:, j : j + t] for j in range(k)], axis=-1) if k > 1 else padded
        h = self.norm(ad.gelu(self.conv(cols)))
        enc_cache = None if cache is None else cache.setdefault("encoder", {})
        return self.encoder(h, cache=enc_cache, return_all=True)


def mel_centres(count: int, sample_rate: int, low: float = 40.0, high: float | None = None) -> np.ndarray:
    """``count`` frequencies in Hz, evenly spaced on the mel scale."""
    high = 0.475 * sample_rate if high is None else high
    mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    m = np.linspace(mel(low), mel(high), count)
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def quadrature_bank(win: int, count: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """(win, 2*count) weights: cosines in the first half, matching sines in the second."""
    phase = 2 * np.pi * np.outer(np.arange(win), mel_centres(count, sample_rate)) / sample_rate
    return np.concatenate([np.cos(phase), np.sin(phase)], axis=1)


def weighted_sum(layers: Sequence[Tensor], logits: Tensor) -> Tensor:
    """Convex combination sum_i softmax(logits)_i * layers[i]."""
    if len(layers) != logits.shape[0]:
        raise ShapeError(f"{len(layers)} layers but {logits.shape[0]} weights")
    w = ad.softmax(logits, axis=0)
    out = layers[0] * w[0]
    for i in range(1, len(layers)):
        out = out + layers[i] * w[i]
    return out


def causal_features_prefix(encoder: Callable[[np.ndarray], Tensor], frames: np.ndarray) -> Tensor:
    """For each t, run ``encoder`` on frames[:, :t+1] and keep its last output frame.

    ``encoder`` maps (B, t, ...) inputs to (B, t, D) features.  Evaluation uses
    the shape-stable kernels, so for a causal encoder the result equals a
    single full pass (also taken under ``ad.stable_kernels()``) bit for bit.
    Cost is quadratic in the number of frames.
    """
    frames = np.asarray(frames)
    t_total = frames.shape[1]
    if t_total == 0:
        raise ShapeError("causal_features_prefix needs at least one frame")
    rows = []
    with ad.stable_kernels():
        for t in range(t_total):
            out = encoder(frames[:, : t + 1])
            rows.append(out[:, t : t + 1])
    return ad.concat(rows, axis=1) if len(rows) > 1 else rows[0]


def save_external_features(path, stack: SslFeatureStack) -> None:
    save_tensors(path, {f"layer.{i}": np.asarray(layer) for i, layer in enumerate(stack.layers)})


def load_external_features(path, num_layers: int | None = None) -> SslFeatureStack:
    tensors = load_tensors(path)
    count = num_layers
    if count is None:
        count = sum(1 for name in tensors if name.startswith("layer."))
    if count < 1:
        raise MissingTensorError(f"{path}: missing tensor 'layer.0'")
    layers = []
    for i in range(count):
        name = f"layer.{i}"
        if name not in tensors:
            raise MissingTensorError(f"{path}: missing tensor {name!r}")
        layers.append(tensors.pop(name))
    if tensors:
        raise UnknownTensorError(f"{path}: unexpected tensors {sorted(tensors)}")
    shapes = {layer.shape for layer in layers}
    if len(shapes) != 1 or layers[0].ndim != 2:
        raise ShapeError(f"{path}: inconsistent layer shapes {sorted(shapes)}")
    return SslFeatureStack(np.stack(layers))
