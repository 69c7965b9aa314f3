import pytest

from tokentts.config import RUN_DIR_ENV, TrainConfig, build_train_config, get_preset, load_config_file


def test_merge_order(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("manifest: m.jsonl\nsteps: 50\nlr: 0.01\nseed: 3\n")
    cfg = build_train_config("fine", load_config_file(path), steps=7, lr=None)
    assert cfg.steps == 7 and cfg.lr == 0.01 and cfg.seed == 3 and cfg.manifest == "m.jsonl"
    hp = cfg.hparams()
    assert hp.steps == 7 and hp.lr == 0.01
    assert hp.batch_size == get_preset("toy").fine_train.batch_size


def test_config_errors(tmp_path):
    with pytest.raises(ValueError, match="unknown config keys"):
        build_train_config("fine", {"manifest": "m", "bogus": 1})
    with pytest.raises(ValueError, match="manifest"):
        build_train_config("fine", {})
    with pytest.raises(ValueError):
        TrainConfig("vocoder", "m")
    with pytest.raises(ValueError):
        get_preset("huge")
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ValueError):
        load_config_file(path)


def test_run_dir_env(monkeypatch):
    monkeypatch.setenv(RUN_DIR_ENV, "/tmp/somewhere")
    assert str(TrainConfig("lm", "m").resolved_run_dir()) == "/tmp/somewhere"
    assert str(TrainConfig("lm", "m", run_dir="x").resolved_run_dir()) == "x"


def test_presets():
    toy, full = get_preset("toy"), get_preset("full")
    assert toy.fine.n_q == full.fine.n_q == 16 and toy.fine.codebook_size == 256
    assert full.coarse.codebook_size == 1024
    assert full.lm_train.lr_min == 5e-5 and full.lm_train.betas == (0.9, 0.98)
