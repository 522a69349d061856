"""Command-line entry point: train, enhance, eval, tokens, gradcheck, make-synthetic.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import WaveBuffer, load_pair, make_synthetic_corpus, read_manifest, read_wav, write_wav
from .config import PRESETS, load_config
from .errors import AudioError, ConfigError, ContainerError, ManifestError, NonFiniteError, StructuralError
from .metrics import MetricReport, UtteranceMetrics, log_spectral_distance, scoring_span, si_sdr, \
    token_accuracy
from .streaming import enhance, enhance_streaming, enhance_with_output, inference_copy
from .training import load_checkpoint, train_loop

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

def _load_inference_model(path):
    return inference_copy(load_checkpoint(path).model)


def cmd_train(args) -> int:
    config = load_config(args.config, args.preset)
    if args.epochs is not None:
        config.train.epochs = args.epochs
    manifest = read_manifest(args.manifest)
    val = read_manifest(args.val_manifest) if args.val_manifest else None
    trainer = None
    if args.resume:
        trainer = load_checkpoint(args.resume, expected=config)
        trainer.config.train.epochs = config.train.epochs
        config = trainer.config
    result = train_loop(manifest, config, args.out_dir, val=val, trainer=trainer)
    last = result.history[-1] if result.history else {}
    print(json.dumps({"epochs": result.trainer.epoch, "best_si_sdr": result.best_si_sdr, "last": last}))
    return EXIT_OK


def cmd_enhance(args) -> int:
    model = _load_inference_model(args.checkpoint)
    wave = read_wav(args.input)
    if args.streaming:
        chunk = max(1, int(round(args.chunk_ms * wave.sample_rate / 1000.0)))
        out = enhance_streaming(model, wave.samples, chunk, args.force_identity)
    else:
        out = enhance(model, wave.samples, args.force_identity)
    full = np.zeros(len(wave))
    full[: out.size] = out[: len(wave)]
    write_wav(args.output, WaveBuffer(full, wave.sample_rate))
    return EXIT_OK


def _evaluate_entry(model, entry, force_identity: bool) -> UtteranceMetrics:
    noisy, clean = load_pair(entry)
    enhanced, out = enhance_with_output(model, noisy.samples, force_identity)
    span = scoring_span(enhanced.size, model.stft_config)
    ref, raw, enhanced = clean.samples[span], noisy.samples[span], enhanced[span]
    per_n, _ = token_accuracy(out.logits.data, out.vq.indices)
    return UtteranceMetrics(
        id=entry.id,
        noisy_si_sdr=si_sdr(ref, raw),
        enhanced_si_sdr=si_sdr(ref, enhanced),
        noisy_lsd=log_spectral_distance(ref, raw, model.stft_config),
        enhanced_lsd=log_spectral_distance(ref, enhanced, model.stft_config),
        token_acc=[float(v) for v in per_n],
    )


def cmd_eval(args) -> int:
    model = _load_inference_model(args.checkpoint)
    manifest = read_manifest(args.manifest)
    if not manifest.entries:
        raise ManifestError(f"manifest is empty: {args.manifest}")
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        rows = list(pool.map(lambda e: _evaluate_entry(model, e, args.force_identity), manifest.entries))
    report = MetricReport(rows).to_dict()
    text = json.dumps(report, indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(json.dumps(report["aggregate"]))
    return EXIT_OK


def cmd_tokens(args) -> int:
    model = _load_inference_model(args.checkpoint)
    wave = read_wav(args.input)
    with ad.no_grad():
        out = model(wave.samples[None])
    tokens = out.vq.indices[0]
    n_show = 0 if args.predict is None else min(args.predict, model.config.model.N)
    preds = np.argmax(out.logits.data[0], axis=-1)
    lines = []
    for t, tok in enumerate(tokens):
        fields = [str(t), str(int(tok))]
        if n_show:
            fields.append(",".join(str(int(p)) for p in preds[t, :n_show]))
        lines.append("\t".join(fields))
    sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_table, run_gradcheck

    variants = None
    if args.config:
        m = load_config(args.config).model
        variants = [(m.variant, m.fusion)]
    if args.corrupt_op:
        with ad.corrupt_backward(args.corrupt_op):
            results = run_gradcheck(args.seed, variants)
    else:
        results = run_gradcheck(args.seed, variants)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    manifest = make_synthetic_corpus(args.out_dir, args.count, args.duration, args.seed,
                                     (args.snr_min, args.snr_max), tuple(args.noise), args.prefix)
    print(f"wrote {len(manifest)} pairs to {Path(args.out_dir) / 'manifest.jsonl'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="causal-se", description="Causal speech enhancement with semantic tokens")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--val-manifest")
    tr.add_argument("--out-dir", required=True)
    tr.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.set_defaults(func=cmd_train)

    en = sub.add_parser("enhance", help="enhance one wav file")
    en.add_argument("--checkpoint", required=True)
    en.add_argument("--input", required=True)
    en.add_argument("--output", required=True)
    en.add_argument("--streaming", action="store_true")
    en.add_argument("--chunk-ms", type=float, default=20.0)
    en.add_argument("--force-identity", action="store_true", help=argparse.SUPPRESS)
    en.set_defaults(func=cmd_enhance)

    ev = sub.add_parser("eval", help="evaluate on a manifest")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--report")
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--force-identity", action="store_true", help="debug: replace the mask by 1")
    ev.set_defaults(func=cmd_eval)

    tk = sub.add_parser("tokens", help="print semantic tokens per frame")
    tk.add_argument("--checkpoint", required=True)
    tk.add_argument("--input", required=True)
    tk.add_argument("--predict", type=int, nargs="?", const=-1)
    tk.set_defaults(func=cmd_tokens)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--config")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_gradcheck)

    ms = sub.add_parser("make-synthetic", help="write a synthetic noisy/clean corpus")
    ms.add_argument("--out-dir", required=True)
    ms.add_argument("--count", type=int, default=200)
    ms.add_argument("--duration", type=float, default=2.0)
    ms.add_argument("--seed", type=int, default=0)
    ms.add_argument("--snr-min", type=float, default=0.0)
    ms.add_argument("--snr-max", type=float, default=10.0)
    ms.add_argument("--noise", nargs="+", default=["white", "pink"])
    ms.add_argument("--prefix", default="utt")
    ms.set_defaults(func=cmd_make_synthetic)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "predict", None) == -1:
        args.predict = 10**9
    try:
        return args.func(args)
    except (ConfigError, ManifestError, StructuralError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AudioError, ContainerError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
