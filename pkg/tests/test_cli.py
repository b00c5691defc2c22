import json
import subprocess
import sys

import pytest

from aligntune import cli
from aligntune import gradcheck as gc

from .test_data import _dir_digest
from .test_gradcheck import _flipped_pita

TINY = [
    "--set", "corpus.num_train=8", "--set", "corpus.num_dev=4", "--set", "corpus.image_size=32",
    "--set", "corpus.max_tokens=6", "--set", "corpus.vocab_size=20", "--set", "corpus.num_labels=2",
    "--set", "model.hidden_size=16", "--set", "model.num_heads=2", "--set", "model.proj_dim=8",
    "--set", "model.num_layers_img=1", "--set", "model.num_layers_txt=1",
    "--set", "model.num_layers_fusion=1", "--set", "train.epochs=2",
]


def run(*argv):
    return cli.main(["--log-level", "WARNING", *argv])


def test_generate_is_deterministic_and_creates_dirs(tmp_path, capsys):
    a, b = tmp_path / "x" / "a", tmp_path / "y" / "b"
    assert run("generate", "--seed", "7", "--num-docs", "50", "--out", str(a)) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["num_docs"] == 50
    assert run("generate", "--seed", "7", "--num-docs", "50", "--out", str(b)) == 0
    assert _dir_digest(a) == _dir_digest(b)


def test_unknown_override_is_a_usage_error(tmp_path, capsys):
    code = run("generate", "--out", str(tmp_path), "--set", "corpus.bogus=1")
    assert code == 2
    assert "corpus.bogus" in capsys.readouterr().err


def test_bad_config_value_is_a_usage_error(tmp_path, capsys):
    assert run("generate", "--out", str(tmp_path), "--set", "corpus.max_tokens=999") == 2
    assert "max_tokens" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert run("train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)) == 2


def test_argparse_errors_exit_2():
    assert run("train", "--preset", "nonsense") == 2
    assert run() == 2


def test_train_eval_and_resume(tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", *TINY, "--preset", "full", "--out", str(out)) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["step"] == 4
    assert len((out / "metrics.csv").read_text().splitlines()) == 5

    assert run("eval", "--checkpoint", str(out / "last.pt"), "--per-class") == 0
    res = json.loads(capsys.readouterr().out)
    assert "per_class_f1" in res and res["split"] == "dev" and res["num_docs"] == 4
    assert run("eval", "--checkpoint", str(out / "last.pt"), "--split", "train") == 0
    res = json.loads(capsys.readouterr().out)
    assert "per_class_f1" not in res and res["num_docs"] == 8

    part = tmp_path / "part"
    assert run("train", *TINY, "--preset", "full", "--out", str(part),
               "--set", "train.stop_after=1") == 0
    capsys.readouterr()
    assert run("train", *TINY, "--preset", "full", "--out", str(part), "--resume") == 0
    assert (part / "metrics.csv").read_text() == (out / "metrics.csv").read_text()


def test_ablation_override(tmp_path, capsys):
    out = tmp_path / "abl"
    assert run("train", *TINY, "--set", "losses.pita=0", "--set", "train.epochs=1",
               "--out", str(out)) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["losses"] == {"so": 1.0, "ditc": 1.0, "imc": 1.0, "glitc": 1.0, "pita": 0}
    rows = (out / "metrics.csv").read_text().splitlines()[1:]
    assert all(r.split(",")[5] == "0.0" for r in rows)


def test_train_on_saved_corpora(tmp_path, capsys):
    run("generate", *TINY, "--num-docs", "6", "--out", str(tmp_path / "c"))
    assert run("train", *TINY, "--train-corpus", str(tmp_path / "c"),
               "--dev-corpus", str(tmp_path / "c"), "--out", str(tmp_path / "r"),
               "--set", "train.epochs=1") == 0
    capsys.readouterr()
    assert run("eval", "--checkpoint", str(tmp_path / "r" / "last.pt"),
               "--corpus", str(tmp_path / "c")) == 0
    assert json.loads(capsys.readouterr().out)["num_docs"] == 6


def test_missing_checkpoint_exit_2(tmp_path, capsys):
    assert run("eval", "--checkpoint", str(tmp_path / "none.pt")) == 2
    assert run("train", *TINY, "--out", str(tmp_path), "--resume") == 2


def test_runtime_failure_exit_1(tmp_path, capsys):
    assert run("train", *TINY, "--out", str(tmp_path), "--set", "train.max_params=10") == 1
    assert "max_params" in capsys.readouterr().err


def test_gradcheck_single_case(capsys):
    assert run("gradcheck", "--loss", "ditc", "--seed", "3") == 0
    out = capsys.readouterr().out
    assert out.startswith("ditc seed=3 max_rel_err=") and "PASS" in out


def test_gradcheck_failure_names_loss(monkeypatch, capsys):
    monkeypatch.setitem(gc.CASES, "pita", lambda s: gc.case_pita(s, pita_fn=_flipped_pita))
    assert run("gradcheck", "--loss", "pita", "--seeds", "3") == 1
    captured = capsys.readouterr()
    assert "pita" in captured.err and "FAIL" in captured.out


def test_gradcheck_dump_assignments(tmp_path, capsys):
    path = tmp_path / "a.json"
    assert run("gradcheck", "--loss", "supervised", "--seeds", "1",
               "--dump-assignments", str(path)) == 0
    data = json.loads(path.read_text())
    assert len(data["token_to_cell"]) == len(data["boxes"])


@pytest.mark.slow
def test_module_entry_point_default_gradcheck():
    proc = subprocess.run([sys.executable, "-m", "aligntune", "gradcheck"],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    lines = proc.stdout.strip().splitlines()
    assert len(lines) == len(gc.CASES)
    assert all("20 cases" in line and "PASS" in line for line in lines)
