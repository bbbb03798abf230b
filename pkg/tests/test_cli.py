import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from lpae import cli
from lpae import tensor as T
from lpae.data import write_image

TINY = ["--arch", "tiny2", "--size", "16", "--n", "40", "--batch-size", "10"]


def _manifest(path):
    return json.loads(path.read_text())


def test_gradcheck_passes_with_one_row_per_primitive(tmp_path, capsys):
    code = cli.main(["gradcheck", "--scope", "op", "--manifest", str(tmp_path / "m.json")])
    out = capsys.readouterr().out.splitlines()
    assert code == 0
    rows = [l for l in out if l.endswith("pass") or l.endswith("FAIL")]
    assert len(rows) == len(set(l.split("  ")[0] for l in rows)) >= 20
    man = _manifest(tmp_path / "m.json")
    assert man["result"]["failed"] == [] and man["result"]["exit_code"] == 0


def test_gradcheck_fails_on_corrupted_backward(tmp_path, monkeypatch, capsys):
    real = T.relu

    def corrupted(x):
        out = real(x)
        mask = x.data > 0
        out._backward = lambda g: (0.5 * g * mask,)
        return out

    monkeypatch.setattr(T, "relu", corrupted)
    code = cli.main(["gradcheck", "--scope", "all", "--manifest", str(tmp_path / "m.json")])
    assert code != 0
    failed = _manifest(tmp_path / "m.json")["result"]["failed"]
    assert "relu" in failed and "conv->bn->relu->mse" in failed


def test_pyramid_command(tmp_path, rng, capsys):
    write_image(tmp_path / "in.png", rng.uniform(size=(3, 96, 96)))
    assert cli.main(["pyramid", str(tmp_path / "in.png"), "--levels", "4", "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["max_abs_roundtrip_error"] <= 1e-5
    assert [s[0] for s in report["sizes"]] == [96, 48, 24, 12]
    from PIL import Image
    for k, size in enumerate((96, 48, 24, 12)):
        for kind in "gl":
            with Image.open(tmp_path / "o" / f"{kind}{k}.png") as im:
                assert im.size == (size, size)
    man = _manifest(tmp_path / "o" / "manifest.json")
    assert len(man["inputs"]["image"]["hash"]) == 40


def test_pyramid_too_deep_is_a_clean_error(tmp_path, rng, capsys):
    write_image(tmp_path / "in.png", rng.uniform(size=(3, 32, 32)))
    code = cli.main(["pyramid", str(tmp_path / "in.png"), "--levels", "5", "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert code == 1
    assert "error:" in err and "Traceback" not in err and "minimum 4x4" in err


def test_train_writes_manifest_checkpoint_and_loss(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", *TINY, "--epochs", "1", "--out", str(out)]) == 0
    with open(out / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "epoch", "loss_total", "loss_0", "loss_1"]
    assert len(rows) - 1 == 40 // 10
    man = _manifest(out / "manifest.json")
    for key in ("command", "argv", "config", "seeds", "inputs", "outputs", "timing"):
        assert key in man
    assert man["seeds"] == {"train": 0, "data": 1}
    assert man["config"]["train"]["batch_size"] == 10
    assert isinstance(man["result"]["converged"], bool)
    assert (out / "checkpoint.lpae").exists()


def test_no_bn_run_reports_convergence_flag(tmp_path, capsys):
    out = tmp_path / "nobn"
    assert cli.main(["train", *TINY, "--epochs", "2", "--no-bn", "--out", str(out)]) == 0
    man = _manifest(out / "manifest.json")
    assert man["config"]["train"]["use_bn"] is False
    assert {"converged", "diverged"} <= set(man["result"])


def test_replay_from_manifest_is_identical(tmp_path, capsys):
    a = tmp_path / "a"
    assert cli.main(["train", *TINY, "--epochs", "2", "--deterministic", "--out", str(a)]) == 0
    assert cli.main(["--config", str(a / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    assert (a / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    assert (a / "checkpoint.lpae").read_bytes() == (tmp_path / "b" / "checkpoint.lpae").read_bytes()


def test_resume_reproduces_uninterrupted_run(tmp_path, capsys):
    full, part = tmp_path / "full", tmp_path / "part"
    assert cli.main(["train", *TINY, "--epochs", "2", "--out", str(full)]) == 0
    assert cli.main(["train", *TINY, "--epochs", "2", "--max-steps", "3", "--out", str(part)]) == 0
    assert _manifest(part / "manifest.json")["result"]["complete"] is False
    assert cli.main(["train", "--resume", str(part / "checkpoint.lpae"), "--size", "16", "--n", "40",
                     "--out", str(part)]) == 0
    assert (full / "loss.csv").read_bytes() == (part / "loss.csv").read_bytes()
    assert (full / "checkpoint.lpae").read_bytes() == (part / "checkpoint.lpae").read_bytes()


def test_model_flag_must_match_arch(tmp_path, capsys):
    assert cli.main(["train", *TINY, "--model", "dcae", "--epochs", "1", "--out", str(tmp_path)]) == 1
    assert "describes a lpae" in capsys.readouterr().err


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("ck")
    assert cli.main(["train", *TINY, "--epochs", "1", "--out", str(out)]) == 0
    return out / "checkpoint.lpae"


EVAL = ["--size", "16", "--n", "40", "--test-n", "20", "--probe-epochs", "3"]


def test_eval_level_ablation(tiny_ckpt, tmp_path, capsys):
    out = tmp_path / "lvl.csv"
    assert cli.main(["eval", str(tiny_ckpt), *EVAL, "--ablation", "level", "--values-per-map", "4",
                     "--repeats", "6", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["subset"] for r in rows] == ["level 0", "level 1", "C_level 0", "C_level 1", "whole set"]
    assert all(r["acc_6"] for r in rows)
    accs = [float(rows[-1][f"acc_{i}"]) for i in range(1, 7)]
    assert float(rows[-1]["mean"]) == pytest.approx(np.mean(accs), abs=1e-6)
    assert float(rows[-1]["std"]) == pytest.approx(np.std(accs), abs=1e-6)


def test_eval_levels_flag_and_baselines(tiny_ckpt, tmp_path, capsys):
    base = ["eval", str(tiny_ckpt), *EVAL, "--values-per-map", "4", "--repeats", "1"]
    assert cli.main(base + ["--levels", "1", "--out", str(tmp_path / "a.csv")]) == 0
    assert cli.main(base + ["--random-filters", "--out", str(tmp_path / "b.csv")]) == 0
    assert cli.main(base + ["--pixels", "--out", str(tmp_path / "c.csv")]) == 0
    rows = [next(csv.DictReader(open(tmp_path / f"{s}.csv"))) for s in "abc"]
    assert rows[0]["levels"] == "1" and rows[2]["n_columns"] == str(3 * 16 * 16)
    assert "random filters" in rows[1]["model"]
    assert cli.main(base + ["--levels", "3", "--out", str(tmp_path / "d.csv")]) == 1


def test_features_command(tiny_ckpt, tmp_path, capsys):
    out = tmp_path / "f.lpaf"
    assert cli.main(["features", str(tiny_ckpt), "--size", "16", "--n", "40", "--values-per-map", "9",
                     "--out", str(out)]) == 0
    from lpae.features import FeatureMatrix
    fm = FeatureMatrix.load(out)
    assert fm.shape[0] == 40 and fm.values_per_map == 9
    assert _manifest(tmp_path / "f.manifest.json")["result"]["shape"] == list(fm.shape)


def test_unknown_command_and_usage(capsys):
    assert cli.main([]) == 2
    assert cli.main(["train", "--bogus"]) == 2


def test_console_script_and_thread_env(tmp_path):
    env = {"LPAE_NUM_THREADS": "1", "PATH": "/usr/local/bin:/usr/bin:/bin"}
    proc = subprocess.run([sys.executable, "-m", "lpae.cli", "gradcheck", "--scope", "model",
                           "--manifest", str(tmp_path / "m.json")], capture_output=True, text=True,
                          env=env)
    assert proc.returncode == 0, proc.stderr
    assert _manifest(tmp_path / "m.json")["config"]["threads_env"] == "1"


def test_content_hash_matches_git(tmp_path):
    f = tmp_path / "x"
    f.write_bytes(b"hello\n")
    # `printf 'hello\n' | git hash-object --stdin`
    assert cli.git_blob_hash(f) == "ce013625030ba8dba906f756967f9e9ca394464a"
