"""The causal enhancement network.

noisy wave -> STFT -> log1p features X'
           -> framed wave -> pseudo-SSL layers -> weighted sum c(X)
c(X) -> VQ (tokens, codewords) -> Z (raw / +index embedding / +codeword)
Z -> encoder g -> H -> semantic head (next-N token logits)
X', H -> FiLM -> causal estimator f -> sigmoid mask -> X̂' = X' * mask
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff.nn import Embedding, Linear, Module, TransformerStack
from .autodiff.core import Tensor
from .config import Config
from .errors import ShapeError
from .ssl import PseudoSsl, causal_features_prefix, weighted_sum
from .vq import VectorQuantizer, VqOutput


def build_input_z(variant: str, c: Tensor, vq_out: VqOutput | None = None,
                  embedding: Embedding | None = None) -> Tensor:
    """Input of the semantic encoder for the three input variants."""
    if variant == "raw":
        return c
    if vq_out is None:
        raise ValueError(f"variant {variant!r} needs the VQ output")
    if variant == "index":
        if embedding is None:
            raise ValueError("index variant needs an embedding table")
        return ad.concat([c, embedding(vq_out.indices)], axis=-1)
    if variant == "codebook":
        return ad.concat([c, vq_out.st], axis=-1)
    raise ValueError(f"unknown input variant {variant!r}")


class SemanticPredictor(Module):
    """Encoder g plus a single affine head emitting N groups of K logits."""

    def __init__(self, d_in: int, dim: int, layers: int, heads: int, n_future: int, num_codes: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.encoder = TransformerStack(d_in, dim, layers, heads, rng, dtype, causal=True)
        self.head = Linear(dim, n_future * num_codes, rng, dtype)
        self.n_future = n_future
        self.num_codes = num_codes

    def encode(self, z: Tensor, cache: dict | None = None) -> Tensor:
        return self.encoder(z, cache=cache)

    def logits(self, h: Tensor) -> Tensor:
        b, t, _ = h.shape
        return self.head(h).reshape(b, t, self.n_future, self.num_codes)


class Film(Module):
    """gamma(h) * alpha(x) + beta(h)."""

    def __init__(self, d_x: int, d_h: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.alpha = Linear(d_x, d_out, rng, dtype)
        self.gamma = Linear(d_h, d_out, rng, dtype, scale=0.1)
        self.gamma.bias.data[:] = 1.0
        self.beta = Linear(d_h, d_out, rng, dtype)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return self.gamma(h) * self.alpha(x) + self.beta(h)


class Concat(Module):
    """Ablation fusion: affine map of x ⊕ h."""

    def __init__(self, d_x: int, d_h: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.proj = Linear(d_x + d_h, d_out, rng, dtype)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return self.proj(ad.concat([x, h], axis=-1))


class MaskEstimator(Module):
    def __init__(self, dim: int, n_bins: int, layers: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.stack = TransformerStack(dim, dim, layers, heads, rng, dtype, causal=True)
        self.out = Linear(dim, n_bins, rng, dtype)

    def __call__(self, fused: Tensor, cache: dict | None = None) -> Tensor:
        return ad.sigmoid(self.out(self.stack(fused, cache=cache)))


@dataclass
class ForwardOutput:
    spec: np.ndarray  # (B, T, F) complex noisy spectrum
    x_prime: np.ndarray  # (B, T, F)
    enhanced: Tensor  # (B, T, F)
    mask: Tensor
    c: Tensor  # (B, T, D_ssl)
    vq: VqOutput
    hidden: Tensor  # (B, T, D_g)
    logits: Tensor  # (B, T, N, K)


class SeModel(Module):
    def __init__(self, config: Config, seed: int | None = None):
        self.config = config
        dtype = np.dtype(config.train.dtype)
        rng = np.random.default_rng(config.train.seed if seed is None else seed)
        s, q, m = config.ssl, config.vq, config.model
        self.stft_config = dsp.StftConfig(config.stft.win, config.stft.hop, config.stft.fft, config.stft.window)
        n_bins = self.stft_config.n_bins

        self.ssl = PseudoSsl(config.stft.win, s.I, s.D_ssl, s.heads, rng, dtype, s.causal, s.conv_kernel)
        if s.freeze_frontend:
            for p in self.ssl.frontend_parameters():
                p.requires_grad = False
        self.layer_logits = Tensor(np.zeros(s.I, dtype=dtype), requires_grad=True)
        self.vq = VectorQuantizer(s.D_ssl, q.D_code, q.K, rng, dtype, q.gamma_ema, q.eps, q.restart_after)
        d_z = s.D_ssl
        if m.variant == "index":
            self.embedding = Embedding(q.K, m.D_emb, rng, dtype)
            d_z += m.D_emb
        elif m.variant == "codebook":
            d_z += q.D_code
        self.predictor = SemanticPredictor(d_z, m.D_g, m.layers, m.heads, m.N, q.K, rng, dtype)
        fusion_cls = Film if m.fusion == "film" else Concat
        self.fusion = fusion_cls(n_bins, m.D_g, m.D_f, rng, dtype)
        self.estimator = MaskEstimator(m.D_f, n_bins, m.layers, m.heads, rng, dtype)

    @property
    def dtype(self):
        return self.layer_logits.dtype

    # ------------------------------------------------------------------

    def analysis(self, noisy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(B, S) samples -> (complex spectrum, log1p features, windowed frames)."""
        cfg = self.stft_config
        frames = dsp.frame_signal(np.asarray(noisy, dtype=np.float64), cfg) * dsp.analysis_window(cfg)
        spec = np.fft.rfft(frames, n=cfg.fft_size, axis=-1)
        return spec, dsp.log1p_magnitude(spec).astype(self.dtype), frames.astype(self.dtype)

    def ssl_features(self, frames: np.ndarray, cache: dict | None = None) -> Tensor:
        """Weighted-sum features for (B, t, win) windowed frames."""
        return weighted_sum(self.ssl(frames, cache=cache), self.layer_logits)

    def causal_features(self, frames: np.ndarray, external: np.ndarray | None = None) -> Tensor:
        if external is not None:
            # external stacks: (B, I, T, D) or (I, T, D)
            ext = np.asarray(external, dtype=self.dtype)
            if ext.ndim == 3:
                ext = ext[None]
            if ext.shape[1] != self.layer_logits.shape[0] or ext.shape[2] != frames.shape[1]:
                raise ShapeError(f"external features {ext.shape} do not match I={self.layer_logits.shape[0]}, "
                                 f"T={frames.shape[1]}")
            return weighted_sum([ad.constant(ext[:, i]) for i in range(ext.shape[1])], self.layer_logits)
        if self.config.ssl.prefix_mode:
            return causal_features_prefix(self.ssl_features, frames)
        return self.ssl_features(frames)

    def core(self, x_prime: np.ndarray, c: Tensor, caches: dict | None = None,
             force_identity: bool = False):
        m = self.config.model
        vq_out = self.vq(c, self.config.vq.xi)
        z = build_input_z(m.variant, c, vq_out, getattr(self, "embedding", None))
        h = self.predictor.encode(z, None if caches is None else caches.setdefault("g", {}))
        logits = self.predictor.logits(h)
        xp = ad.constant(x_prime)
        fused = self.fusion(xp, h)
        mask = self.estimator(fused, None if caches is None else caches.setdefault("f", {}))
        if force_identity:
            mask = ad.constant(np.ones(mask.shape, dtype=mask.dtype))
        enhanced = xp * mask
        return enhanced, mask, vq_out, h, logits

    def forward(self, noisy: np.ndarray, external: np.ndarray | None = None,
                force_identity: bool = False) -> ForwardOutput:
        noisy = np.asarray(noisy)
        if noisy.ndim == 1:
            noisy = noisy[None]
        spec, x_prime, frames = self.analysis(noisy)
        c = self.causal_features(frames, external)
        enhanced, mask, vq_out, h, logits = self.core(x_prime, c, force_identity=force_identity)
        return ForwardOutput(spec, x_prime, enhanced, mask, c, vq_out, h, logits)

    __call__ = forward

    # ------------------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        st = self.vq.state
        out["vq.codebook"] = self.vq.codebook
        out["vq.ema.cluster_size"] = st.cluster_size
        out["vq.ema.embed_sum"] = st.embed_sum
        out["vq.ema.unused"] = st.unused.astype(np.int64)
        out["vq.initialized"] = np.array([int(self.vq.initialized)], dtype=np.int64)
        return out

    def state_names(self) -> set[str]:
        return set(self.state_tensors())

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for name, p in params.items():
            arr = tensors[name]
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = np.array(arr, dtype=arr.dtype)
        st = self.vq.state
        self.vq.codebook = np.array(tensors["vq.codebook"])
        st.cluster_size = np.array(tensors["vq.ema.cluster_size"])
        st.embed_sum = np.array(tensors["vq.ema.embed_sum"])
        st.unused = np.array(tensors["vq.ema.unused"], dtype=np.int64)
        self.vq.initialized = bool(tensors["vq.initialized"][0])

    def astype(self, dtype) -> None:
        super().astype(dtype)
        self.vq.codebook = self.vq.codebook.astype(dtype)
        st = self.vq.state
        st.cluster_size = st.cluster_size.astype(dtype)
        st.embed_sum = st.embed_sum.astype(dtype)
