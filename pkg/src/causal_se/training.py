"""One-stage multi-task training: SE, VQ and next-N token prediction."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dsp
from .audio import DatasetManifest, load_pairs
from .autodiff.core import Tensor
from .config import Config, config_from_dict
from .container import CONFIG_KEY, decode_json, encode_json, load_tensors, save_tensors
from .errors import ManifestError, MissingTensorError, NonFiniteError, ShapeError, StructuralError, \
    UnknownTensorError
from .metrics import future_targets, scoring_span, si_sdr, token_accuracy
from .model import ForwardOutput, SeModel

log = logging.getLogger(__name__)


def se_loss(clean_feats, enhanced: Tensor) -> Tensor:
    """Mean absolute error between clean and enhanced log1p features."""
    clean = clean_feats if isinstance(clean_feats, Tensor) else ad.constant(clean_feats, enhanced.dtype)
    if clean.shape != enhanced.shape:
        raise ShapeError(f"se_loss shape mismatch: {clean.shape} vs {enhanced.shape}")
    return ad.l1_loss(enhanced, clean)


def semantic_ce_loss(logits: Tensor, tokens: np.ndarray) -> Tensor:
    """Mean NLL of the realized future tokens.

    ``logits`` is (B, T, N, K); position t predicts tokens[t+1..t+N] and only
    t < T-N contributes.  Tokens are integer arrays, so no gradient reaches
    the quantizer through them.
    """
    n_future = logits.shape[-2]
    targets = future_targets(np.asarray(tokens), n_future)
    valid = logits[:, : targets.shape[-2]]
    return ad.cross_entropy_logits(valid, targets)


@dataclass
class LossBreakdown:
    l_se: float
    l_vq: float
    l_ce: float
    total: float
    vq_recon: float
    vq_codebook: float
    vq_commit: float
    weights: tuple[float, float, float]

    @classmethod
    def build(cls, l_se: float, l_vq: float, l_ce: float, weights, recon=0.0, codebook=0.0, commit=0.0):
        w_se, w_vq, w_ce = (float(w) for w in weights)
        total = w_se * l_se + w_vq * l_vq + w_ce * l_ce
        return cls(l_se, l_vq, l_ce, total, recon, codebook, commit, (w_se, w_vq, w_ce))

    def as_dict(self) -> dict:
        return {"l_se": self.l_se, "l_vq": self.l_vq, "l_ce": self.l_ce, "total": self.total,
                "vq_recon": self.vq_recon, "vq_codebook": self.vq_codebook, "vq_commit": self.vq_commit}


def assemble_losses(model: SeModel, out: ForwardOutput, clean_feats: np.ndarray) -> tuple[Tensor, LossBreakdown]:
    """Weighted objective (as a graph) and its float breakdown.

    Terms with zero weight are evaluated for logging but left out of the
    graph, so their gradients are exactly absent rather than zero-scaled.
    """
    t = model.config.train
    l_se = se_loss(clean_feats, out.enhanced)
    l_vq = out.vq.total_loss
    l_ce = semantic_ce_loss(out.logits, out.vq.indices)
    objective = None
    for weight, term in ((t.lambda_se, l_se), (t.lambda_vq, l_vq), (t.lambda_ce, l_ce)):
        if weight == 0:
            continue
        piece = term * float(weight)
        objective = piece if objective is None else objective + piece
    if objective is None:
        objective = l_se * 0.0
    breakdown = LossBreakdown.build(
        float(l_se.data), float(l_vq.data), float(l_ce.data),
        (t.lambda_se, t.lambda_vq, t.lambda_ce),
        float(out.vq.recon_loss.data), float(out.vq.codebook_loss.data), float(out.vq.commit_loss.data),
    )
    return objective, breakdown


# ---------------------------------------------------------------------------
# batching


def crop_batch(pairs, indices, crop_frames: int, stft: dsp.StftConfig, rng: np.random.Generator):
    """Hop-aligned random crops of equal length from the selected pairs."""
    waves = [pairs[i] for i in indices]
    shortest = min(len(noisy.samples) for noisy, _ in waves)
    frames = min(crop_frames, stft.num_frames(shortest))
    if frames <= 0:
        raise ShapeError(f"utterance of {shortest} samples is shorter than one window")
    length = stft.num_samples(frames)
    noisy_out, clean_out = [], []
    for noisy, clean in waves:
        n = len(noisy.samples)
        slots = (n - length) // stft.hop_length
        start = int(rng.integers(0, slots + 1)) * stft.hop_length
        noisy_out.append(noisy.samples[start : start + length])
        clean_out.append(clean.samples[start : start + length])
    return np.stack(noisy_out), np.stack(clean_out)


def step_rng(seed: int, epoch: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, step, stream])


# ---------------------------------------------------------------------------


class Trainer:
    """Owns the model, the optimizer and the step counters."""

    def __init__(self, model: SeModel):
        self.model = model
        self.config = model.config
        self.optimizer = ad.Adam(model.named_parameters(), lr=self.config.train.lr)
        self.epoch = 0
        self.step_in_epoch = 0
        self.global_step = 0

    def maybe_init_codebook(self, noisy: np.ndarray, rng: np.random.Generator) -> None:
        model = self.model
        if model.vq.initialized:
            return
        with ad.no_grad():
            _, _, frames = model.analysis(noisy)
            c = model.causal_features(frames)
            encoded = model.vq.encoder(c)
        model.vq.init_from(encoded.data, rng)

    def mtl_step(self, noisy: np.ndarray, clean: np.ndarray, rng: np.random.Generator | None = None) -> LossBreakdown:
        """Forward, weighted loss, backward, Adam update, then the EMA codebook update."""
        rng = rng or np.random.default_rng(self.config.train.seed)
        model = self.model
        self.maybe_init_codebook(noisy, rng)
        out = model(noisy)
        clean_feats = model.analysis(clean)[1]
        objective, breakdown = assemble_losses(model, out, clean_feats)
        if not math.isfinite(breakdown.total):
            raise NonFiniteError("loss", f"step {self.global_step}: {breakdown.as_dict()}")
        self.optimizer.zero_grad()
        objective.backward()
        for name, p in self.optimizer.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError("backward", f"gradient of {name} at step {self.global_step}")
        self.optimizer.step()
        model.vq.update(out.vq.encoded.data, out.vq.indices, rng)
        self.global_step += 1
        return breakdown

    # -- checkpoints -------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {CONFIG_KEY: encode_json(self.config.to_dict())}
        out.update({f"model.{k}": v for k, v in self.model.state_tensors().items()})
        out.update(self.optimizer.state_tensors())
        out["train.counters"] = np.array([self.epoch, self.step_in_epoch, self.global_step], dtype=np.int64)
        return out

    def save(self, path) -> None:
        save_tensors(path, self.state_tensors())

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        tensors = dict(tensors)
        tensors.pop(CONFIG_KEY, None)
        model_part = {k[len("model."):]: tensors.pop(k) for k in list(tensors) if k.startswith("model.")}
        _check_names(model_part, self.model.state_names(), "model")
        self.model.load_state_tensors(model_part)
        adam_names = {k for k in tensors if k.startswith("adam.")}
        expected_adam = set(self.optimizer.state_tensors())
        _check_names({k: None for k in adam_names}, expected_adam, "optimizer")
        self.optimizer.load_state_tensors({k: tensors.pop(k) for k in adam_names})
        if "train.counters" not in tensors:
            raise MissingTensorError("missing tensor 'train.counters'")
        self.epoch, self.step_in_epoch, self.global_step = (int(v) for v in tensors.pop("train.counters"))
        if tensors:
            raise UnknownTensorError(f"unexpected tensors {sorted(tensors)}")


def _check_names(found: dict, expected: set[str], what: str) -> None:
    missing = expected - set(found)
    if missing:
        raise MissingTensorError(f"{what} state missing tensors {sorted(missing)[:5]}")
    extra = set(found) - expected
    if extra:
        raise UnknownTensorError(f"unknown {what} tensors {sorted(extra)[:5]}")


def checkpoint_config(tensors: dict[str, np.ndarray]) -> Config:
    if CONFIG_KEY not in tensors:
        raise MissingTensorError(f"missing tensor {CONFIG_KEY!r}")
    data = decode_json(tensors[CONFIG_KEY])
    return config_from_dict(data)


def save_checkpoint(path, trainer: Trainer) -> None:
    trainer.save(path)


def load_checkpoint(path, expected: Config | None = None) -> Trainer:
    """Rebuild a trainer (model + optimizer + counters) from a checkpoint.

    With ``expected``, the stored architecture must match it exactly.
    """
    tensors = load_tensors(path)
    config = checkpoint_config(tensors)
    if expected is not None and expected.architecture() != config.architecture():
        diff = _dict_diff(expected.architecture(), config.architecture())
        raise StructuralError(f"{path}: checkpoint architecture differs from the requested one: {diff}")
    trainer = Trainer(SeModel(config))
    trainer.load_state_tensors(tensors)
    return trainer


def load_model(path, expected: Config | None = None) -> SeModel:
    return load_checkpoint(path, expected).model


def _dict_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    out = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out += _dict_diff(va, vb, f"{prefix}{k}.")
        elif va != vb:
            out.append(f"{prefix}{k}: {vb!r} (checkpoint) vs {va!r} (requested)")
    return out


# ---------------------------------------------------------------------------
# validation and the loop


def enhance_batch(model: SeModel, noisy: np.ndarray, force_identity: bool = False):
    """Batch enhancement; returns (waves, forward output)."""
    with ad.no_grad():
        out = model(noisy, force_identity=force_identity)
    spec = dsp.apply_logmag(out.enhanced.data.astype(np.float64), out.spec)
    return dsp.istft_samples(spec, model.stft_config), out


@dataclass
class ValidationResult:
    si_sdr: float
    noisy_si_sdr: float
    token_acc: float
    token_acc_per_n: list[float]
    losses: LossBreakdown


def validate(model: SeModel, pairs) -> ValidationResult:
    scores, noisy_scores, accs, rows = [], [], [], []
    for noisy, clean in pairs:
        x = noisy.samples[None]
        wave, out = enhance_batch(model, x)
        span = scoring_span(wave.shape[-1], model.stft_config)
        scores.append(si_sdr(clean.samples[span], wave[0][span]))
        noisy_scores.append(si_sdr(clean.samples[span], noisy.samples[span]))
        per_n, _ = token_accuracy(out.logits.data, out.vq.indices)
        accs.append(per_n)
        with ad.no_grad():
            _, breakdown = assemble_losses(model, out, model.analysis(clean.samples[None])[1])
        rows.append(breakdown)
    per_n = np.mean(accs, axis=0)
    mean_losses = LossBreakdown.build(
        float(np.mean([r.l_se for r in rows])), float(np.mean([r.l_vq for r in rows])),
        float(np.mean([r.l_ce for r in rows])), rows[0].weights,
    )
    return ValidationResult(float(np.mean(scores)), float(np.mean(noisy_scores)), float(per_n.mean()),
                            [float(v) for v in per_n], mean_losses)


@dataclass
class TrainResult:
    trainer: Trainer
    history: list[dict] = field(default_factory=list)
    best_si_sdr: float = -math.inf


def run_epoch(trainer: Trainer, pairs) -> list[LossBreakdown]:
    """Remaining steps of ``trainer.epoch``; resumes mid-epoch from the counters."""
    cfg = trainer.config
    t = cfg.train
    order = np.random.default_rng([t.seed, trainer.epoch]).permutation(len(pairs))
    steps = -(-len(pairs) // t.batch)
    stft = trainer.model.stft_config
    out = []
    while trainer.step_in_epoch < steps:
        s = trainer.step_in_epoch
        idx = order[s * t.batch : (s + 1) * t.batch]
        noisy, clean = crop_batch(pairs, idx, t.crop_frames, stft, step_rng(t.seed, trainer.epoch, s, 0))
        out.append(trainer.mtl_step(noisy, clean, step_rng(t.seed, trainer.epoch, s, 1)))
        trainer.step_in_epoch += 1
    trainer.epoch += 1
    trainer.step_in_epoch = 0
    return out


def train_loop(train: DatasetManifest | list, config: Config, out_dir, val=None,
               trainer: Trainer | None = None, epochs: int | None = None) -> TrainResult:
    """Train for ``config.train.epochs`` epochs (or ``epochs`` more).

    Writes ``last.ckpt`` after each epoch, ``best.ckpt`` whenever validation
    SI-SDR improves, and appends one JSON line per epoch to ``metrics.jsonl``.
    Without ``val``, up to eight training utterances are used for validation.
    """
    pairs = load_pairs(train) if isinstance(train, DatasetManifest) else list(train)
    if not pairs:
        raise ManifestError("training manifest is empty")
    if val is None:
        val_pairs = pairs[: min(8, len(pairs))]
    else:
        val_pairs = load_pairs(val) if isinstance(val, DatasetManifest) else list(val)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if trainer is None:
        model = SeModel(config)
        trainer = Trainer(model)
    result = TrainResult(trainer)
    target_epoch = config.train.epochs if epochs is None else trainer.epoch + epochs
    metrics_path = out_dir / "metrics.jsonl"
    n_future = config.model.N
    if trainer.epoch > 0 and metrics_path.exists():
        # resuming: the best score so far lives in the log
        earlier = [json.loads(line) for line in metrics_path.read_text().splitlines() if line.strip()]
        scores = [r["si_sdr"] for r in earlier if r.get("epoch", 0) <= trainer.epoch]
        result.best_si_sdr = max(scores, default=-math.inf)
    while trainer.epoch < target_epoch:
        losses = run_epoch(trainer, pairs)
        v = validate(trainer.model, val_pairs)
        row = {
            "epoch": trainer.epoch,
            "l_se": float(np.mean([b.l_se for b in losses])),
            "l_vq": float(np.mean([b.l_vq for b in losses])),
            "l_ce": float(np.mean([b.l_ce for b in losses])),
            "total": float(np.mean([b.total for b in losses])),
            "si_sdr": v.si_sdr,
            f"token_acc@{n_future}": v.token_acc,
            "token_acc_per_n": v.token_acc_per_n,
            "noisy_si_sdr": v.noisy_si_sdr,
            "val_total": v.losses.total,
        }
        result.history.append(row)
        with metrics_path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")
        log.info("epoch %d: total %.4f, val SI-SDR %.2f dB (noisy %.2f), token acc %.3f",
                 trainer.epoch, row["total"], v.si_sdr, v.noisy_si_sdr, v.token_acc)
        trainer.save(out_dir / "last.ckpt")
        if v.si_sdr > result.best_si_sdr:
            result.best_si_sdr = v.si_sdr
            trainer.save(out_dir / "best.ckpt")
    return result
