import json

import numpy as np
import pytest

from lava import cli, models, training
from lava.errors import NumericError

TINY = ["--hidden", "8,8", "--epochs", "1", "--batches-per-epoch", "3", "--meta-batch", "2"]


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def trained(tmp_path, capsys):
    out = tmp_path / "train"
    code, _, _ = run(["train", *TINY, "--output-dir", str(out)], capsys)
    assert code == 0
    return out


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.ini"
    code, _, err = run(["train", "--config", str(missing), "--output-dir", str(tmp_path / "o")], capsys)
    assert code == 2
    assert str(missing) in err


def test_bad_config_value_is_field_level(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text("[inner]\nalpha = -1\n", encoding="utf-8")
    code, _, err = run(["train", "--config", str(ini), "--output-dir", str(tmp_path / "o")], capsys)
    assert code == 2
    assert "alpha" in err


def test_zero_epochs_emits_manifest_and_initial_checkpoint(tmp_path, capsys):
    out = tmp_path / "run"
    code, _, _ = run(["train", "--hidden", "8,8", "--epochs", "0", "--output-dir", str(out)], capsys)
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["checkpoint_init.bin", "manifest.json"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["config"]["epochs"] == 0


def test_train_writes_artifacts(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"manifest.json", "checkpoint_init.bin", "checkpoint_final.bin", "train_log.csv"} <= names
    assert len((trained / "train_log.csv").read_text().splitlines()) == 2
    assert models.load_checkpoint(trained / "checkpoint_final.bin").arch.hidden == (8, 8)


def test_manifest_reproduces_run(trained, tmp_path, capsys):
    again = tmp_path / "again"
    code, _, _ = run(["train", "--config", str(trained / "manifest.json"), "--output-dir", str(again)], capsys)
    assert code == 0
    a = (trained / "checkpoint_final.bin").read_bytes()
    assert (again / "checkpoint_final.bin").read_bytes() == a


def test_output_dir_from_environment(tmp_path, capsys, monkeypatch):
    target = tmp_path / "env-out"
    monkeypatch.setenv("LAVA_OUTPUT_DIR", str(target))
    code, _, _ = run(["train", "--hidden", "8,8", "--epochs", "0"], capsys)
    assert code == 0
    assert (target / "manifest.json").is_file()


def test_numeric_abort_exits_3(tmp_path, capsys, monkeypatch):
    real = training.outer_gradient
    calls = []

    def flaky(meta, batch, cfg):
        calls.append(1)
        if len(calls) == 3:
            raise NumericError("loss overflow")
        return real(meta, batch, cfg)

    monkeypatch.setattr(training, "outer_gradient", flaky)
    out = tmp_path / "run"
    code, _, err = run(["train", *TINY, "--output-dir", str(out)], capsys)
    assert code == 3
    assert (out / "checkpoint_last_good.bin").is_file()
    assert not (out / "checkpoint_final.bin").exists()
    assert "last good" in err
    assert json.loads((out / "manifest.json").read_text())["status"] == "numeric-abort"


def test_eval_single_seed_has_zero_std(trained, tmp_path, capsys):
    out = tmp_path / "eval"
    code, _, _ = run(["eval", "--checkpoint", str(trained / "checkpoint_final.bin"), "--tasks", "5",
                      "--seeds", "0", "--output-dir", str(out)], capsys)
    assert code == 0
    res = json.loads((out / "eval.json").read_text())
    assert res["std"] == 0.0 and np.isfinite(res["mean"])


def test_eval_corrupt_magic(trained, tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    raw = bytearray((trained / "checkpoint_final.bin").read_bytes())
    raw[:8] = b"XXXXXXXX"
    bad.write_bytes(bytes(raw))
    code, _, err = run(["eval", "--checkpoint", str(bad), "--output-dir", str(tmp_path / "e")], capsys)
    assert code == 2
    assert "magic" in err


def test_eval_architecture_mismatch_names_tensor(trained, tmp_path, capsys):
    code, _, err = run(["eval", "--checkpoint", str(trained / "checkpoint_final.bin"), "--task", "mass-spring",
                        "--output-dir", str(tmp_path / "e")], capsys)
    assert code == 2
    assert "layer0.weight" in err


def test_unknown_experiment_lists_names(tmp_path, capsys):
    code, _, err = run(["experiment", "bogus", "--output-dir", str(tmp_path / "x")], capsys)
    assert code == 2
    for name in cli.EXPERIMENTS:
        assert name in err


def test_landscape_needs_2d_context_checkpoint(trained, tmp_path, capsys):
    code, _, err = run(["experiment", "landscape", "--checkpoint", str(trained / "checkpoint_final.bin"),
                        "--output-dir", str(tmp_path / "x")], capsys)
    assert code == 2
    assert "2-D context" in err


def test_landscape_experiment(tmp_path, capsys):
    ckpt = tmp_path / "ctx"
    assert run(["train", "--mode", "lava-context", "--context-dim", "2", "--hidden", "8,8", "--epochs", "0",
                "--output-dir", str(ckpt)], capsys)[0] == 0
    out = tmp_path / "land"
    code, _, _ = run(["experiment", "landscape", "--checkpoint", str(ckpt / "checkpoint_init.bin"), "--grid", "5",
                      "--support", "3", "--output-dir", str(out)], capsys)
    assert code == 0
    assert len((out / "landscape.csv").read_text().splitlines()) == 1 + 5 * 5 * 3
    assert len((out / "markers.csv").read_text().splitlines()) == 1 + 2 + 3


def test_condition_experiment(tmp_path, capsys):
    out = tmp_path / "cond"
    code, text, _ = run(["experiment", "condition", "--hidden", "8,8", "--support", "10", "--tasks", "3",
                         "--output-dir", str(out)], capsys)
    assert code == 0
    assert "support 10: kappa raw inf" in text
    assert (out / "condition.csv").is_file()


def test_variance_experiment(tmp_path, capsys):
    out = tmp_path / "var"
    code, _, _ = run(["experiment", "variance", *TINY, "--resamples", "3", "--output-dir", str(out)], capsys)
    assert code == 0
    lines = (out / "variance.csv").read_text().splitlines()
    assert lines[0] == "epoch,mode,log_var" and len(lines) == 1 + 2 * 2


def test_noise_experiment(trained, tmp_path, capsys):
    out = tmp_path / "noise"
    code, _, _ = run(["experiment", "noise", "--checkpoint", str(trained / "checkpoint_final.bin"),
                      "--supports", "2", "5", "--sigmas", "0", "3", "--tasks", "3", "--output-dir", str(out)], capsys)
    assert code == 0
    assert len((out / "noise.csv").read_text().splitlines()) == 1 + 4


def test_timing_experiment(tmp_path, capsys):
    out = tmp_path / "timing"
    code, _, _ = run(["experiment", "timing", "--hidden", "8,8", "--steps", "1", "2", "--budget", "0",
                      "--output-dir", str(out)], capsys)
    assert code == 0
    rows = (out / "timing.csv").read_text().splitlines()
    assert len(rows) == 1 + 1 + 2
