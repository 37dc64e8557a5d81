import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from fusecad.cli import main

FAST = ["--size", "32", "--seed", "4", "--experts", "plain_shallow,residual", "--proxy-count", "40",
        "--pretrain-max-epochs", "2", "--pretrain-patience", "1",
        "--finetune-max-epochs", "2", "--finetune-patience", "1",
        "--head-max-epochs", "3", "--head-patience", "2",
        "--student-max-epochs", "3", "--student-patience", "2"]


def sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(root / "d1"), "--count", "60", "--patients", "24", "--size", "32",
                 "--seed", "1", "--patient-prefix", "A"]) == 0
    assert main(["generate", "--out", str(root / "d2"), "--count", "50", "--patients", "20", "--size", "32",
                 "--seed", "2", "--patient-prefix", "B"]) == 0
    assert main(["pretrain", "--out", str(root / "pre")] + FAST) == 0
    assert main(["consult", "--manifest", str(root / "d1" / "manifest.csv"), "--consult-size", "2",
                 "--pretrained", str(root / "pre"), "--out", str(root / "ec2")] + FAST) == 0
    return root


def test_generate_count_and_determinism(tmp_path, capsys):
    args = ["generate", "--count", "40", "--patients", "16", "--size", "32", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a" / "manifest.csv", tmp_path / "b" / "manifest.csv"
    assert len(a.read_text().splitlines()) == 41
    assert sha(a) == sha(b)
    assert (tmp_path / "a" / "run_config.json").exists()


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path), "--count", "0", "--patients", "4"]) == 2
    assert "count" in capsys.readouterr().err
    assert main(["generate", "--out", str(tmp_path)]) == 2  # argparse: missing required flags
    assert main(["explain", "--bundle", str(tmp_path / "nope"), "--out", str(tmp_path / "o"), "x.pgm"]) == 2
    assert "bundle path not found" in capsys.readouterr().err
    assert main(["experiment", "kdl", "--manifest", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2
    assert main(["nonsense"]) == 2


def test_runtime_failure_exit_1(tmp_path, pipeline):
    bad = tmp_path / "bad.toml"
    bad.write_text("[experiment]\nsize = 32\n")
    # a truncated bundle file is a runtime failure, not a usage problem
    ec = tmp_path / "ec"
    import shutil
    shutil.copytree(pipeline / "ec2", ec)
    (ec / "head.fct").write_bytes(b"FCT1")
    code = main(["kdl", "--manifest", str(pipeline / "d2" / "manifest.csv"), "--consult-bundle", str(ec),
                 "--out", str(tmp_path / "k"), "--config", str(bad)] + FAST)
    assert code == 1


def test_kdl_train_and_explain(pipeline, tmp_path):
    kd = tmp_path / "kdl"
    assert main(["kdl", "--manifest", str(pipeline / "d2" / "manifest.csv"), "--consult-bundle",
                 str(pipeline / "ec2"), "--out", str(kd)] + FAST) == 0
    assert json.loads((kd / "kdl.json").read_text())["aided"]
    imgs = sorted((pipeline / "d2" / "img").glob("*.pgm"))[:3]
    out = tmp_path / "exp"
    assert main(["explain", "--bundle", str(kd), "--out", str(out)] + [str(p) for p in imgs]) == 0
    ppms = sorted(p.name for p in out.glob("*.ppm"))
    assert len(ppms) == 9
    for p in imgs:
        for mode in ("raw", "augmented", "fused"):
            hits = [n for n in ppms if n.startswith(f"{p.stem}_{mode}_")]
            assert len(hits) == 1 and hits[0].rsplit("_", 1)[1] in ("benign.ppm", "malignant.ppm")
    assert all((out / n).read_bytes()[:2] == b"P6" for n in ppms)


def test_experiment_kdl_refuses_leakage(pipeline, tmp_path, capsys):
    code = main(["experiment", "kdl", "--train-manifest", str(pipeline / "d1" / "manifest.csv"),
                 "--consult-bundle", str(pipeline / "ec2"), "--out", str(tmp_path / "x"),
                 "--repetitions", "2"] + FAST)
    assert code == 2
    assert "patient leakage" in capsys.readouterr().err
    # fitting the consult on the evaluation manifest itself is refused before any training
    d1 = str(pipeline / "d1" / "manifest.csv")
    code = main(["experiment", "kdl", "--manifest", d1, "--consult-manifest", d1,
                 "--out", str(tmp_path / "y"), "--repetitions", "1"] + FAST)
    assert code == 2
    assert "patient leakage" in capsys.readouterr().err


def test_experiment_kdl_is_reproducible(pipeline, tmp_path):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["experiment", "kdl", "--manifest", str(pipeline / "d2" / "manifest.csv"),
                     "--consult-bundle", str(pipeline / "ec2"), "--out", str(out), "--repetitions", "2"] + FAST) == 0
        outs.append(out)
    for name in ("report.csv", "report.json", "splits.json"):
        assert sha(outs[0] / name) == sha(outs[1] / name)
    names = {p.name for p in outs[0].iterdir()}
    assert {"report.txt", "run_config.json", "KDL-EC-2_rows.csv", "unaided_rows.csv"} <= names
    assert any(n.startswith("KDL-EC-2_curve_rep") for n in names)
    cfg = json.loads((outs[0] / "run_config.json").read_text())
    assert cfg["experiment"]["size"] == 32
    assert main(["report", str(outs[0]), "--out", str(tmp_path / "merged")]) == 0
    assert (tmp_path / "merged" / "combined.csv").exists()


def test_config_file_with_flag_override(pipeline, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[experiment]\nsize = 32\nrepetitions = 1\nexperts = ["plain_shallow", "residual"]\n'
                   '[experiment.finetune]\nmax_epochs = 2\nearly_stop_patience = 1\n')
    out = tmp_path / "ft"
    assert main(["finetune", "--manifest", str(pipeline / "d1" / "manifest.csv"), "--expert", "residual",
                 "--freeze", "0.5", "--pretrained", str(pipeline / "pre"), "--config", str(cfg),
                 "--seed", "4", "--proxy-count", "40", "--pretrain-max-epochs", "2", "--pretrain-patience", "1",
                 "--finetune-max-epochs", "3", "--out", str(out)]) == 0
    resolved = json.loads((out / "run_config.json").read_text())["experiment"]
    assert resolved["finetune"]["max_epochs"] == 3 and resolved["finetune"]["early_stop_patience"] == 1
    assert (out / "residual_fused_f50.fct").exists()


def test_console_module_entry(tmp_path):
    env = dict(os.environ)
    r = subprocess.run([sys.executable, "-m", "fusecad.cli", "generate", "--out", str(tmp_path), "--count", "0",
                        "--patients", "4"], capture_output=True, text=True, env=env)
    assert r.returncode == 2
