"""Batch and frame-by-frame enhancement with a trained model.

The streaming path feeds one STFT frame at a time through the cached causal
encoders and synthesizes output by incremental overlap-add, so each output
hop is released as soon as its last contributing frame has been processed.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import dsp
from .model import SeModel


def inference_copy(model: SeModel, dtype=np.float64) -> SeModel:
    """A copy of ``model`` with every parameter and codebook cast to ``dtype``."""
    clone = SeModel(model.config)
    clone.load_state_tensors(model.state_tensors())
    clone.astype(dtype)
    return clone


def enhance_with_output(model: SeModel, samples: np.ndarray, force_identity: bool = False):
    """Whole-utterance enhancement; returns (``num_samples(T)`` samples, forward output)."""
    samples = np.asarray(samples, dtype=np.float64)
    with ad.no_grad():
        out = model(samples[None], force_identity=force_identity)
    spec = dsp.apply_logmag(out.enhanced.data.astype(np.float64)[0], out.spec[0])
    return dsp.istft_samples(spec, model.stft_config), out


def enhance(model: SeModel, samples: np.ndarray, force_identity: bool = False) -> np.ndarray:
    return enhance_with_output(model, samples, force_identity)[0]


class StreamingEnhancer:
    """Push arbitrary sample chunks, receive finalized enhanced samples.

    With the causal pseudo-SSL encoder, features are computed incrementally
    from key/value caches.  With the non-causal encoder each frame's feature
    is the last output of a pass over all frames so far (prefix evaluation).
    """

    def __init__(self, model: SeModel, force_identity: bool = False):
        self.model = model
        self.cfg = model.stft_config
        self.framer = dsp.StreamFramerState(self.cfg)
        self.synth = dsp.OverlapAdd(self.cfg)
        self.window = dsp.analysis_window(self.cfg)
        self.ssl_cache: dict = {}
        self.core_cache: dict = {}
        self.history: list[np.ndarray] = []
        self.force_identity = force_identity
        self.tokens: list[int] = []

    def _features(self, windowed: np.ndarray):
        model = self.model
        frame = windowed.astype(model.dtype)[None, None]
        if model.config.ssl.causal:
            return model.ssl_features(frame, cache=self.ssl_cache)
        self.history.append(frame[0, 0])
        full = model.ssl_features(np.stack(self.history)[None])
        return full[:, -1:]

    def _process(self, frame: np.ndarray) -> np.ndarray:
        model = self.model
        spectrum = dsp.frame_spectrum(frame, self.cfg)
        x_prime = dsp.log1p_magnitude(spectrum).astype(model.dtype)[None, None]
        c = self._features(frame * self.window)
        enhanced, _, vq_out, _, _ = model.core(x_prime, c, self.core_cache, self.force_identity)
        self.tokens.append(int(vq_out.indices[0, 0]))
        out_spec = dsp.apply_logmag(enhanced.data.astype(np.float64)[0, 0], spectrum)
        return self.synth.push(out_spec)

    def push(self, samples) -> np.ndarray:
        out = []
        with ad.no_grad():
            for frame in dsp.framer_push(self.framer, samples):
                out.append(self._process(frame))
        return np.concatenate(out) if out else np.zeros(0)

    def finish(self) -> np.ndarray:
        return self.synth.finish()


def enhance_streaming(model: SeModel, samples: np.ndarray, chunk: int,
                      force_identity: bool = False) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if chunk <= 0:
        raise ValueError("chunk size must be positive")
    enh = StreamingEnhancer(model, force_identity)
    pieces = [enh.push(samples[i : i + chunk]) for i in range(0, samples.size, chunk)]
    pieces.append(enh.finish())
    return np.concatenate(pieces)
