import json
import subprocess
import sys
from pathlib import Path

import pytest

from fewshot_sbir.cli import main

ROOT = Path(__file__).resolve().parents[1]
TINY = str(ROOT / "configs" / "tiny.cfg")
PIPELINE = [["gen-data"], ["pretrain"], ["meta-train"], ["meta-train", "--method", "maml-full"],
            ["eval", "--methods", "ours,no-adapt,fine-tune,maml-full,fixed-margin"], ["ablate"]]


def run_pipeline(out: Path, steps=PIPELINE) -> None:
    for step in steps:
        code = main(step + ["--config", TINY, "--out", str(out), "--threads", "1"])
        assert code == 0, step


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    run_pipeline(out, PIPELINE[:3])
    return out


def test_eval_two_methods_one_k_gives_two_rows(tiny_run, capsys):
    assert main(["eval", "--methods", "ours,no-adapt", "--k", "5", "--config", TINY,
                 "--out", str(tiny_run)]) == 0
    rows = json.loads((tiny_run / "report.json").read_text())
    assert len(rows) == 2 * 2  # two seeds per method in the fixture
    assert {(r["method"], r["k"]) for r in rows} == {("ours", 5), ("no-adapt", 5)}
    assert len(capsys.readouterr().out.strip().splitlines()) == 2


def test_artifacts_and_manifest(tiny_run):
    for name in ("data/dataset.jsonl", "data/semantic.json", "data/split.json", "baseline.ckpt",
                 "baseline_curve.csv", "meta.ckpt", "meta_curve.csv"):
        assert (tiny_run / name).exists(), name
    manifest = json.loads((tiny_run / "manifest-meta-train.json").read_text())
    assert set(manifest["artifacts"]) == {"meta.ckpt", "meta_curve.csv"}
    assert manifest["config"]["train"]["K"] == 3


def test_missing_config_exits_2_and_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert main(["gen-data", "--config", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[train]\nlearning_rate = 3\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_unknown_section_and_bad_value_exit_2(tmp_path):
    (tmp_path / "a.cfg").write_text("[optim]\nlr = 1\n")
    (tmp_path / "b.cfg").write_text("[train]\nK = five\n")
    for name in ("a.cfg", "b.cfg"):
        assert main(["gen-data", "--config", str(tmp_path / name), "--out", str(tmp_path)]) == 2


def test_unknown_flag_exits_2(tmp_path):
    assert main(["eval", "--colour", "red", "--out", str(tmp_path)]) == 2
    assert main(["frobnicate"]) == 2


def test_unknown_method_exits_2(tiny_run):
    assert main(["eval", "--methods", "ours,oracle", "--config", TINY, "--out", str(tiny_run)]) == 2


def test_missing_checkpoint_exits_1(tmp_path, capsys):
    run_pipeline(tmp_path, [["gen-data"]])
    assert main(["eval", "--config", TINY, "--out", str(tmp_path)]) == 1
    assert "run meta-train first" in capsys.readouterr().err


def test_check_grads_exits_0(tmp_path):
    assert main(["check-grads", "--out", str(tmp_path)]) == 0
    suites = json.loads((tmp_path / "gradcheck.json").read_text())
    assert [s["name"] for s in suites] == ["primitives", "hypergradient"]
    assert all(s["passed"] for s in suites)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fewshot_sbir", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "check-grads" in proc.stdout


def test_same_seed_gives_identical_artifacts(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_pipeline(a)
    run_pipeline(b)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert len(files) > 10
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_seed_flag_changes_data(tmp_path):
    main(["gen-data", "--config", TINY, "--out", str(tmp_path / "x")])
    main(["gen-data", "--config", TINY, "--out", str(tmp_path / "y"), "--seed", "11"])
    assert (tmp_path / "x/data/dataset.jsonl").read_bytes() != (tmp_path / "y/data/dataset.jsonl").read_bytes()
