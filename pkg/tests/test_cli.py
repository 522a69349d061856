import json

import numpy as np
import pytest

from causal_se.audio import WaveBuffer, read_wav, write_wav
from causal_se.cli import main
from causal_se.container import load_tensors
from causal_se.gradcheck import tiny_model_config
from causal_se.training import checkpoint_config

TINY_TRAIN = {"epochs": 1, "batch": 2, "crop_frames": 12, "lr": 3e-3}


def _write_config(path, base=None, **train):
    cfg = base or tiny_model_config()
    cfg["train"] = {**cfg.get("train", {}), **TINY_TRAIN, **train}
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-synthetic", "--out-dir", str(root / "data"), "--count", "4", "--duration", "0.1",
                 "--seed", "3"]) == 0
    config = _write_config(root / "tiny.json")
    assert main(["train", "--config", str(config), "--manifest", str(root / "data" / "manifest.jsonl"),
                 "--out-dir", str(root / "run")]) == 0
    return root


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "last.ckpt").exists() and (run / "best.ckpt").exists()
    rows = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 1 and "token_acc@2" in rows[0]


def test_missing_manifest_exit_2(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "manifest.jsonl"
    assert main(["train", "--manifest", str(missing), "--out-dir", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_config_exit_2(tmp_path, workspace, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"vq": {"codes": 3}}))
    code = main(["train", "--config", str(bad), "--manifest", str(workspace / "data" / "manifest.jsonl"),
                 "--out-dir", str(tmp_path / "o")])
    assert code == 2 and "codes" in capsys.readouterr().err


def test_usage_error_exit_2():
    assert main(["enhance"]) == 2
    assert main(["no-such-command"]) == 2


def test_missing_input_exit_4(tmp_path, workspace):
    code = main(["enhance", "--checkpoint", str(workspace / "run" / "last.ckpt"),
                 "--input", str(tmp_path / "nope.wav"), "--output", str(tmp_path / "o.wav")])
    assert code == 4


def test_corrupt_checkpoint_exit_4(tmp_path, workspace):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"JUNKJUNKJUNK")
    code = main(["enhance", "--checkpoint", str(bad), "--input", str(workspace / "data" / "utt0000_noisy.wav"),
                 "--output", str(tmp_path / "o.wav")])
    assert code == 4


def test_resume_with_other_architecture_exit_2(tmp_path, workspace, capsys):
    other = tiny_model_config()
    other["vq"]["K"] = 16
    config = _write_config(tmp_path / "other.json", other)
    code = main(["train", "--config", str(config), "--manifest", str(workspace / "data" / "manifest.jsonl"),
                 "--out-dir", str(tmp_path / "o"), "--resume", str(workspace / "run" / "last.ckpt")])
    assert code == 2 and "architecture" in capsys.readouterr().err


def test_resume_continues_epochs(tmp_path, workspace):
    config = _write_config(tmp_path / "c.json", epochs=2)
    code = main(["train", "--config", str(config), "--manifest", str(workspace / "data" / "manifest.jsonl"),
                 "--out-dir", str(tmp_path / "o"), "--resume", str(workspace / "run" / "last.ckpt")])
    assert code == 0
    rows = [json.loads(l) for l in (tmp_path / "o" / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [2]


def test_paper_preset_echo(tmp_path, workspace):
    # paper preset with shrunken widths so the run stays small; K, N and the weights are untouched
    shrink = {"stft": {"win": 16, "hop": 8, "fft": 16},
              "ssl": {"I": 2, "D_ssl": 8, "heads": 2},
              "model": {"D_g": 8, "D_f": 8, "heads": 2, "layers": 1}}
    config = _write_config(tmp_path / "p.json", shrink)
    code = main(["train", "--preset", "paper", "--config", str(config),
                 "--manifest", str(workspace / "data" / "manifest.jsonl"), "--out-dir", str(tmp_path / "o")])
    assert code == 0
    echo = checkpoint_config(load_tensors(tmp_path / "o" / "last.ckpt"))
    assert echo.model.N == 5 and echo.vq.K == 1024 and echo.train.lambda_ce == 0.01


def _enhance(workspace, tmp_path, name, *extra, source="utt0001_noisy.wav"):
    out = tmp_path / name
    code = main(["enhance", "--checkpoint", str(workspace / "run" / "last.ckpt"),
                 "--input", str(workspace / "data" / source), "--output", str(out), *extra])
    assert code == 0
    return read_wav(out).samples


def test_enhance_streaming_matches_batch(tmp_path, workspace):
    batch = _enhance(workspace, tmp_path, "b.wav")
    stream = _enhance(workspace, tmp_path, "s.wav", "--streaming", "--chunk-ms", "3")
    assert batch.size == read_wav(workspace / "data" / "utt0001_noisy.wav").samples.size
    assert np.max(np.abs(batch - stream)) <= 1e-6


def test_enhance_repeatable(tmp_path, workspace):
    assert np.array_equal(_enhance(workspace, tmp_path, "a.wav"), _enhance(workspace, tmp_path, "b.wav"))


def test_enhance_silent_input(tmp_path, workspace):
    write_wav(workspace / "data" / "silence.wav", WaveBuffer(np.zeros(1600), 16000))
    out = _enhance(workspace, tmp_path, "s.wav", "--streaming", source="silence.wav")
    assert np.sqrt(np.mean(out**2)) <= 0.0


def _eval(workspace, tmp_path, *extra):
    report = tmp_path / "r.json"
    code = main(["eval", "--checkpoint", str(workspace / "run" / "last.ckpt"),
                 "--manifest", str(workspace / "data" / "manifest.jsonl"), "--report", str(report), *extra])
    assert code == 0
    return json.loads(report.read_text())


def test_eval_schema_and_determinism(tmp_path, workspace):
    a = _eval(workspace, tmp_path)
    b = _eval(workspace, tmp_path, "--workers", "3")
    assert a == b
    assert len(a["utterances"]) == 4
    for row in a["utterances"]:
        assert {"noisy_si_sdr", "enhanced_si_sdr", "noisy_lsd", "enhanced_lsd", "token_acc"} <= set(row)
        assert all(0 <= v <= 1 for v in row["token_acc"])


def test_eval_identity_matches_noisy(tmp_path, workspace):
    report = _eval(workspace, tmp_path, "--force-identity")
    for row in report["utterances"]:
        assert abs(row["enhanced_si_sdr"] - row["noisy_si_sdr"]) < 1e-6


def test_tokens_lines(workspace, capsys):
    wav = workspace / "data" / "utt0002_noisy.wav"
    assert main(["tokens", "--checkpoint", str(workspace / "run" / "last.ckpt"), "--input", str(wav),
                 "--predict"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    n = read_wav(wav).samples.size
    assert len(lines) == (n - 16) // 8 + 1
    for i, line in enumerate(lines):
        t, tok, preds = line.split("\t")
        assert int(t) == i and 0 <= int(tok) < 8
        assert len(preds.split(",")) == 2 and all(0 <= int(p) < 8 for p in preds.split(","))


def test_gradcheck_command(tmp_path, capsys):
    config = tmp_path / "g.json"
    config.write_text(json.dumps({"model": {"variant": "raw"}}))
    assert main(["gradcheck", "--config", str(config), "--seed", "1"]) == 0
    first = capsys.readouterr().out
    assert "full_model[raw]" in first and "FAIL" not in first
    assert main(["gradcheck", "--config", str(config), "--seed", "1"]) == 0
    assert capsys.readouterr().out == first


def test_gradcheck_corrupted_backward_names_component(tmp_path, capsys):
    config = tmp_path / "g.json"
    config.write_text(json.dumps({"model": {"variant": "raw"}}))
    assert main(["gradcheck", "--config", str(config), "--corrupt-op", "gelu"]) == 3
    out = capsys.readouterr().out
    failed = out.strip().splitlines()[-1]
    assert failed.startswith("FAILED:")
    assert "primitive.gelu" in failed and "transformer_block" in failed
    assert "primitive.exp" not in failed
