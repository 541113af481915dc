"""End-to-end command-line workflow, run in process via main()."""

import contextlib
import io

import numpy as np
import pytest

from cmoe import cli
from cmoe.tensor import Tensor, sum_


def run(argv):
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main(argv)
    kv = {}
    for line in buf.getvalue().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            kv[k] = v
    return code, kv


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """synth -> config -> extract -> train, shared by the command tests."""
    root = tmp_path_factory.mktemp("cliws")
    data_dir = root / "data"
    code, kv = run(["synth", "--out", str(data_dir), "--seed", "3",
                    "--train-per-class", "4", "--test-per-class", "2"])
    assert code == 0
    assert kv["n_sources"] == "24" and kv["n_modes"] == "8"

    cfg_path = root / "run.yaml"
    cfg_path.write_text(f"""
dataset:
  manifest: {data_dir / 'manifest.csv'}
  band: [50, 1000]
feature:
  kind: mel
  frame_ms: 1000
  shift_ms: 500
  n_filters: 48
  cache_dir: {root / 'cache'}
model:
  num_experts: 2
train:
  lr: 1e-3
  epochs: 2
  batch_size: 8
  seed: 11
out:
  dir: {root / 'out'}
""")
    code, extract_kv = run(["extract", "--config", str(cfg_path)])
    assert code == 0
    code, train_kv = run(["train", "--config", str(cfg_path)])
    assert code == 0
    return dict(root=root, data_dir=data_dir, cfg=str(cfg_path),
                extract=extract_kv, train=train_kv)


class TestExtract:
    def test_fills_the_cache(self, workspace):
        kv = workspace["extract"]
        assert kv["n_segments"] == "24"
        assert kv["n_written"] == "24" and kv["n_errors"] == "0"

    def test_idempotent_second_run(self, workspace):
        code, kv = run(["extract", "--config", workspace["cfg"]])
        assert code == 0
        assert kv["n_written"] == "0" and kv["n_skipped"] == "24"

    def test_corrupt_wav_logged_and_exit_2(self, tmp_path):
        code, _ = run(["synth", "--out", str(tmp_path / "d"), "--seed", "1",
                       "--train-per-class", "2", "--test-per-class", "2"])
        assert code == 0
        wav = sorted((tmp_path / "d").glob("*.wav"))[0]
        wav.write_bytes(wav.read_bytes()[:5000])  # header survives, payload cut
        code, kv = run(["extract",
                        "--dataset.manifest", str(tmp_path / "d" / "manifest.csv"),
                        "--dataset.band", "[50, 1000]",
                        "--feature.frame_ms", "1000", "--feature.shift_ms", "500",
                        "--feature.n_filters", "48",
                        f"--feature.cache_dir={tmp_path / 'cache'}"])
        assert code == 2
        assert kv["n_errors"] == "1"
        log = (tmp_path / "cache" / "errors.log").read_text()
        assert wav.stem in log


class TestTrain:
    def test_reports_and_checkpoints(self, workspace):
        kv = workspace["train"]
        assert kv["seed"] == "11"
        assert 0.0 <= float(kv["best_val_acc"]) <= 1.0
        assert 0.0 <= float(kv["mean_test_acc"]) <= 1.0
        root = workspace["root"]
        assert (root / "out" / "seed11" / "best.ckpt").exists()
        assert (root / "out" / "seed11" / "final.ckpt").exists()
        assert (root / "out" / "seed11" / "metrics.csv").exists()


class TestEvalAndExperts:
    def test_eval_writes_confusion(self, workspace):
        ckpt = workspace["train"]["checkpoint"]
        code, kv = run(["eval", "--config", workspace["cfg"],
                        "--checkpoint", ckpt, "--split", "test"])
        assert code == 0
        assert kv["n_segments"] == "8"
        assert 0.0 <= float(kv["segment_accuracy"]) <= 1.0
        for c in range(4):
            assert f"acc_class{c}" in kv
        root = workspace["root"]
        assert (root / "out" / "confusion.csv").exists()
        assert (root / "out" / "confusion.svg").exists()

    def test_experts_writes_tables_and_ami(self, workspace):
        ckpt = workspace["train"]["checkpoint"]
        code, kv = run(["experts", "--config", workspace["cfg"],
                        "--checkpoint", ckpt, "--split", "test"])
        assert code == 0
        root = workspace["root"]
        assert (root / "out" / "experts_by_class.csv").exists()
        assert (root / "out" / "experts_by_source.csv").exists()
        assert (root / "out" / "experts.svg").exists()
        # the synthetic sidecar sits next to the manifest, so AMI is reported
        assert -1.0 <= float(kv["specialization_ami"]) <= 1.0

    def test_eval_requires_checkpoint(self, workspace):
        code, _ = run(["eval", "--config", workspace["cfg"]])
        assert code == 1


def _toy_items(tol):
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True, dtype=np.float64)
    return [("toy", lambda: sum_(x * x), [x], 1e-5, None, tol)]


class TestGradcheckCommand:
    def test_pass_path(self, monkeypatch):
        monkeypatch.setattr(cli, "_gradcheck_items", lambda: _toy_items(1e-5))
        code, kv = run(["gradcheck"])
        assert code == 0
        assert kv["toy"] == "pass"
        assert float(kv["toy_max_rel_err"]) < 1e-5

    def test_failure_exits_3(self, monkeypatch):
        monkeypatch.setattr(cli, "_gradcheck_items", lambda: _toy_items(0.0))
        code, kv = run(["gradcheck"])
        assert code == 3
        assert kv["toy"] == "FAIL"


class TestArgHandling:
    def test_unknown_command_exits_1(self):
        assert run(["frobnicate"])[0] == 1

    def test_override_forms(self):
        pairs = cli._split_overrides(["--a.b", "v", "--c.d=w"])
        assert pairs == [("a.b", "v"), ("c.d", "w")]

    def test_override_missing_value(self):
        code, _ = run(["extract", "--dataset.manifest"])
        assert code == 1

    def test_stray_positional_rejected(self):
        code, _ = run(["synth", "--out", "x", "stray"])
        assert code == 1

    def test_bad_config_key_exits_1(self, workspace):
        code, _ = run(["extract", "--config", workspace["cfg"],
                       "--model.num_expert", "4"])
        assert code == 1


class TestThreadCap:
    def test_invalid_value_exits_1(self, monkeypatch):
        monkeypatch.setenv("CMOE_THREADS", "abc")
        monkeypatch.setattr(cli, "_gradcheck_items", lambda: _toy_items(1e-5))
        assert run(["gradcheck"])[0] == 1
        monkeypatch.setenv("CMOE_THREADS", "0")
        assert run(["gradcheck"])[0] == 1

    def test_valid_cap_applies(self, monkeypatch):
        monkeypatch.setenv("CMOE_THREADS", "1")
        monkeypatch.setattr(cli, "_gradcheck_items", lambda: _toy_items(1e-5))
        assert run(["gradcheck"])[0] == 0
