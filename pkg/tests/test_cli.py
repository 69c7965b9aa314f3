import json

import pytest
from click.testing import CliRunner

from tokentts.cli import main
from tokentts.tokens import read_tokens


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


def _ok(runner, args):
    result = runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


def test_help_lists_commands(runner):
    out = _ok(runner, ["--help"]).output
    for cmd in ("train-fine", "train-coarse", "train-lm", "make-dataset", "encode", "decode", "synthesize", "eval",
                "ablate", "report"):
        assert cmd in out


def test_make_dataset(runner, tmp_path):
    _ok(runner, ["make-dataset", "--out", tmp_path / "d", "--seed", 1])
    lines = (tmp_path / "d" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) > 16
    _ok(runner, ["make-dataset", "--out", tmp_path / "w", "--wav"])
    assert len(list((tmp_path / "w" / "wav").glob("*.wav"))) == len(lines) - 1


def test_train_requires_prerequisite(runner, tmp_path, tiny_run):
    result = runner.invoke(main, ["train-coarse", "--manifest", str(tiny_run["manifest"]),
                                  "--run-dir", str(tmp_path / "empty")])
    assert result.exit_code != 0 and "missing prerequisite" in result.output


def test_train_config_file(runner, tmp_path, tiny_run):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"manifest: {tiny_run['manifest']}\nsteps: 50\nlog_every: 1\neval_every: 100\n")
    result = _ok(runner, ["train-fine", "--config", cfg, "--steps", 1, "--run-dir", tmp_path / "r"])
    assert json.loads(result.stdout)["iterations"] == 1


def test_encode_decode_roundtrip(runner, tmp_path, tiny_run):
    run = tiny_run["root"]
    _ok(runner, ["make-dataset", "--out", tmp_path / "d", "--wav"])
    wav = sorted((tmp_path / "d" / "wav").glob("*.wav"))[0]
    _ok(runner, ["encode", wav, "--out", tmp_path / "utt", "--run-dir", run])
    coarse = read_tokens(tmp_path / "utt.coarse.tok")
    fine = read_tokens(tmp_path / "utt.fine.tok")
    assert coarse.n_q == 1 and fine.n_q == 16 and len(coarse) == len(fine)
    _ok(runner, ["decode", tmp_path / "utt.coarse.tok", "--out", tmp_path / "c.wav", "--run-dir", run])
    _ok(runner, ["decode", tmp_path / "utt.fine.tok", "--out", tmp_path / "f.wav", "--run-dir", run])
    assert (tmp_path / "c.wav").stat().st_size == (tmp_path / "f.wav").stat().st_size


def test_decode_rejects_garbage(runner, tmp_path, tiny_run):
    bad = tmp_path / "bad.tok"
    bad.write_bytes(b"junkjunkjunk")
    result = runner.invoke(main, ["decode", str(bad), "--out", str(tmp_path / "x.wav"),
                                  "--run-dir", str(tiny_run["root"])])
    assert result.exit_code != 0 and "magic" in result.output


def test_synthesize_eval_ablate_report(runner, tmp_path, tiny_run):
    run, manifest = tiny_run["root"], tiny_run["manifest"]
    out = _ok(runner, ["synthesize", "--text", "AB", "--out", tmp_path / "s.wav", "--run-dir", run, "--max-len", 4])
    assert "tokens" in out.output and (tmp_path / "s.wav").exists()
    res = _ok(runner, ["eval", "--manifest", manifest, "--run-dir", run, "--json", tmp_path / "e.json"])
    assert "bitrate_kbps" in json.loads(res.output)
    assert "per_utterance" in json.loads((tmp_path / "e.json").read_text())
    table = _ok(runner, ["ablate", "--manifest", manifest, "--run-dir", run, "--n-active", "1,16"]).output
    assert len(table.strip().splitlines()) == 3
    bad = runner.invoke(main, ["ablate", "--manifest", str(manifest), "--run-dir", str(run), "--n-active", "0"])
    assert bad.exit_code != 0
    summary = json.loads(_ok(runner, ["report", run / "lm" / "metrics.jsonl"]).output)
    assert "train" in summary and "loss_last" in summary["train"]
