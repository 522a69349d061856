"""Finite-difference verification of every differentiable component.

Each check builds a scalar loss, records the non-differentiable constants of
that forward (quantizer assignments, stop-gradient values), and compares the
backward gradient against central differences taken with those constants
replayed.  Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff.core import Tensor
from .autodiff.nn import MultiHeadSelfAttention, TransformerBlock
from .config import config_from_dict
from .model import Film, SemanticPredictor, SeModel
from .ssl import PseudoSsl, weighted_sum
from .training import assemble_losses, semantic_ce_loss
from .vq import VectorQuantizer

F64 = np.float64
TOLERANCE = 1e-4
STEP = 1e-5
FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    probes: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def finite_difference_check(loss_fn: Callable[[], Tensor], params: list[Tensor], rng: np.random.Generator,
                            probes: int = 100, h: float = STEP) -> tuple[float, int]:
    """Max relative error between backward and central differences.

    Probes are distinct (parameter, element) pairs drawn uniformly over all
    elements; if there are fewer elements than ``probes``, all are probed.
    """
    with ad.record_constants() as tape:
        loss = loss_fn()
    for p in params:
        p.grad = None
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(probes, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        i = int(flat - offsets[k])
        p = params[k]
        orig = p.data.flat[i]
        vals = []
        for delta in (h, -h):
            p.data.flat[i] = orig + delta
            with ad.no_grad(), ad.replay_constants(tape):
                vals.append(float(loss_fn().data))
        p.data.flat[i] = orig
        numeric = (vals[0] - vals[1]) / (2 * h)
        analytic = float(grads[k].flat[i])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)
        worst = max(worst, err)
    return worst, len(picks)


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _projected(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    # fixed random projection turns any output into a scalar with generic gradients
    r = rng.standard_normal(out.shape) / np.sqrt(out.data.size)
    return lambda y: ad.sum_(y * ad.constant(r))


def _output_check(name: str, fn: Callable[[], Tensor], params: list[Tensor], rng) -> CheckResult:
    proj = _projected(fn(), rng)
    err, n = finite_difference_check(lambda: proj(fn()), params, rng)
    return CheckResult(name, err, n)


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    a, b = _leaf(rng, 4, 30), _leaf(rng, 4, 30)
    pos = Tensor(rng.uniform(0.5, 2.0, (4, 30)), requires_grad=True)
    m1, m2 = _leaf(rng, 2, 5, 12), _leaf(rng, 12, 9)
    w, bias = _leaf(rng, 30), _leaf(rng, 30)
    table = _leaf(rng, 20, 6)
    idx = rng.integers(0, 20, size=(3, 7))
    targets = rng.integers(0, 30, size=4)
    logits3 = _leaf(rng, 3, 5, 8)
    mask = np.tril(np.ones((5, 8), dtype=bool), k=3)
    return {
        "add": (lambda: a + b, [a, b]),
        "sub": (lambda: a - b, [a, b]),
        "mul": (lambda: a * b, [a, b]),
        "div": (lambda: a / pos, [a, pos]),
        "exp": (lambda: ad.exp(a * 0.5), [a]),
        "log": (lambda: ad.log(pos), [pos]),
        "log1p": (lambda: ad.log1p(pos), [pos]),
        "abs": (lambda: ad.abs_(a), [a]),
        "square": (lambda: ad.square(a), [a]),
        "sigmoid": (lambda: ad.sigmoid(a), [a]),
        "tanh": (lambda: ad.tanh(a), [a]),
        "relu": (lambda: ad.relu(a), [a]),
        "gelu": (lambda: ad.gelu(a), [a]),
        "sum": (lambda: ad.sum_(a * b, axis=1, keepdims=True), [a, b]),
        "mean": (lambda: ad.mean(a * b, axis=0), [a, b]),
        "reshape_transpose": (lambda: (a * b).reshape(2, 2, 30).transpose(2, 0, 1), [a, b]),
        "slice": (lambda: a[:, 3:17] * b[1:3, None, 5:19], [a, b]),
        "concat": (lambda: ad.concat([a, b * b], axis=1), [a, b]),
        "stack": (lambda: ad.stack([a, b * a], axis=1), [a, b]),
        "matmul": (lambda: ad.matmul(m1, m2), [m1, m2]),
        "softmax": (lambda: ad.softmax(a, axis=-1), [a]),
        "masked_softmax": (lambda: ad.softmax(logits3, axis=-1, mask=mask), [logits3]),
        "log_softmax": (lambda: ad.log_softmax(a, axis=-1), [a]),
        "layer_norm": (lambda: ad.layer_norm(a, w, bias), [a, w, bias]),
        "embedding": (lambda: ad.embedding(table, idx), [table]),
        "l1_loss": (lambda: ad.l1_loss(a, b), [a, b]),
        "mse_loss": (lambda: ad.mse_loss(a, b), [a, b]),
        "cross_entropy": (lambda: ad.cross_entropy_logits(a, targets), [a]),
        "detach": (lambda: ad.detach(a) * b + a, [a, b]),
    }


def tiny_model_config(**model_overrides) -> dict:
    """Smallest full-model geometry: T=6 frames, F=9 bins, width 8."""
    model = {"D_g": 8, "D_f": 8, "heads": 2, "layers": 1, "D_emb": 4, "N": 2}
    model.update(model_overrides)
    return {
        "stft": {"win": 16, "hop": 8, "fft": 16},
        "ssl": {"I": 2, "D_ssl": 8, "heads": 2, "freeze_frontend": False},
        "vq": {"K": 8, "D_code": 4},
        "model": model,
        "train": {"dtype": "float64", "crop_frames": 6},
    }


def _full_model_check(rng: np.random.Generator, variant: str, fusion: str = "film") -> CheckResult:
    cfg = config_from_dict(tiny_model_config(variant=variant, fusion=fusion))
    model = SeModel(cfg, seed=int(rng.integers(2**31)))
    n = model.stft_config.num_samples(6)
    noisy = rng.standard_normal((2, n)) * 0.3
    clean = noisy * 0.5
    with ad.no_grad():
        enc = model.vq.encoder(model.causal_features(model.analysis(noisy)[2]))
    model.vq.init_from(enc.data, rng)
    clean_feats = model.analysis(clean)[1]

    def loss():
        out = model(noisy)
        return assemble_losses(model, out, clean_feats)[0]

    params = [p for _, p in model.named_parameters()]
    err, probes = finite_difference_check(loss, params, rng, probes=200)
    suffix = "" if fusion == "film" else f"+{fusion}"
    return CheckResult(f"full_model[{variant}{suffix}]", err, probes)


def run_gradcheck(seed: int = 0, variants=None) -> list[CheckResult]:
    """All checks; ``variants`` lists the (input variant, fusion) pairs of the full model."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, params) in _primitive_cases(rng).items():
        results.append(_output_check(f"primitive.{name}", fn, params, rng))

    x = _leaf(rng, 2, 6, 8)
    mha = MultiHeadSelfAttention(8, 2, rng, F64, causal=True)
    results.append(_output_check("causal_mha", lambda: mha(x), [x] + mha.parameters(), rng))

    block = TransformerBlock(8, 2, rng, F64, causal=True)
    results.append(_output_check("transformer_block", lambda: block(x), [x] + block.parameters(), rng))

    xf, hf = _leaf(rng, 2, 6, 9), _leaf(rng, 2, 6, 8)
    film = Film(9, 8, 8, rng, F64)
    results.append(_output_check("film", lambda: film(xf, hf), [xf, hf] + film.parameters(), rng))

    c = _leaf(rng, 2, 6, 8)
    vq = VectorQuantizer(8, 4, 8, rng, F64)
    with ad.no_grad():
        vq.init_from(vq.encoder(c).data, rng)
    results.append(CheckResult("vq_encoder_decoder", *finite_difference_check(
        lambda: vq(c, 0.1).total_loss, [c] + vq.parameters(), rng)))

    head = SemanticPredictor(8, 8, 1, 2, 3, 8, rng, F64)
    targets = rng.integers(0, 8, size=(2, 6))
    hs = _leaf(rng, 2, 6, 8)
    results.append(CheckResult("semantic_head", *finite_difference_check(
        lambda: semantic_ce_loss(head.logits(hs), targets), [hs] + head.head.parameters(), rng)))

    layers = [_leaf(rng, 2, 6, 8) for _ in range(3)]
    logits = _leaf(rng, 3)
    results.append(_output_check("layer_weights", lambda: weighted_sum(layers, logits), layers + [logits], rng))

    frames = rng.standard_normal((2, 6, 16)) * 0.3
    ssl = PseudoSsl(16, 3, 8, 2, rng, F64)
    results.append(_output_check("pseudo_ssl", lambda: weighted_sum(ssl(frames), logits),
                                 ssl.parameters() + [logits], rng))

    if variants is None:
        variants = [("codebook", "film"), ("index", "film"), ("raw", "film"), ("codebook", "concat")]
    for variant, fusion in variants:
        results.append(_full_model_check(rng, variant, fusion))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'component':<{width}}  {'max rel err':>12}  probes  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:12.3e}  {r.probes:6d}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
