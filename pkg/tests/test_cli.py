import json
import subprocess
import sys

import numpy as np
import pytest

from pstgcn.cli import main
from pstgcn.pipeline import read_scores, write_scores


@pytest.fixture(scope="module")
def syn(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "syn"
    assert main(["gen-synthetic", "--out", str(path), "--classes", "3", "--per-class", "20",
                 "--frames", "16", "--seed", "0"]) == 0
    return path


def test_gen_synthetic_writes_dataset(syn):
    assert (syn / "topology.txt").exists() and (syn / "samples.bin").exists()


def test_complexity_command(capsys, tmp_path):
    assert main(["complexity", "stgcn-baseline"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[-1] == "params=3093136 flops=17095710720"
    out = tmp_path / "c.json"
    assert main(["complexity", "pstgcn-ntu-cv", "--streams", "2", "--json-out", str(out)]) == 0
    assert capsys.readouterr().out.strip() == "params=1208020 flops=13563019200"
    assert json.loads(out.read_text())["streams"] == 2
    assert main(["complexity", "pstgcn-ntu-cv", "--input", "3,300,18"]) == 2


def test_search_requires_seed(syn, tmp_path):
    with pytest.raises(SystemExit):
        main(["search", "--dataset", str(syn), "--output-dir", str(tmp_path)])


def test_search_with_config_and_overrides(syn, tmp_path):
    cfg = {"dataset": str(syn), "output_dir": str(tmp_path / "ignored"),
           "search": {"S": 4, "K": 3, "epochs_per_iteration": 5, "lr_growth": 0.1, "finetune_epochs": 1,
                      "max_layers": 1, "max_width_steps": 2, "batch_size": 16}}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "run"
    assert main(["search", "--config", str(path), "--output-dir", str(out), "--max-width-steps", "1",
                 "--seed", "0"]) == 0
    saved = json.loads((out / "config.json").read_text())
    assert saved["search"]["max_width_steps"] == 1 and saved["search"]["S"] == 4
    assert saved["search"]["seed"] == 0
    assert not (tmp_path / "ignored").exists()
    report = json.loads((out / "growth_report.json").read_text())
    assert all(r["t"] == 1 for r in report["iterations"])


def test_train_eval_fuse(syn, tmp_path, capsys):
    desc = tmp_path / "d.json"
    desc.write_text(json.dumps({"in_channels": 3, "num_joints": 11, "num_classes": 3,
                                "layers": [{"channels": 8, "K": 3}]}))
    joint, bone = tmp_path / "joint", tmp_path / "bone"
    common = ["--descriptor", str(desc), "--dataset", str(syn), "--epochs", "3", "--milestones", "2",
              "--batch-size", "16"]
    assert main(["train", *common, "--out", str(joint)]) == 0
    assert main(["train", *common, "--out", str(bone), "--bones"]) == 0
    log = json.loads((joint / "train_log.json").read_text())
    assert [e["lr"] for e in log["epochs"]] == pytest.approx([0.1, 0.1, 0.01])
    capsys.readouterr()

    assert main(["eval", "--checkpoint", str(joint / "model.pstg"), "--dataset", str(syn),
                 "--scores-out", str(tmp_path / "sj.csv")]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["split"] == "test" and result["samples"] == 12
    _, labels, scores = read_scores(tmp_path / "sj.csv")
    assert result["accuracy"] == float((scores.argmax(1) == labels).mean())
    assert main(["eval", "--checkpoint", str(bone / "model.pstg"), "--dataset", str(syn), "--bones",
                 "--scores-out", str(tmp_path / "sb.csv")]) == 0
    capsys.readouterr()

    fused = tmp_path / "fused.csv"
    assert main(["fuse", "--joint", str(tmp_path / "sj.csv"), "--bone", str(tmp_path / "sb.csv"),
                 "--out", str(fused)]) == 0
    summary = json.loads(capsys.readouterr().out)
    rows = np.loadtxt(fused, delimiter=",", skiprows=1, ndmin=2)
    assert summary["samples"] == 12 and summary["accuracy"] == float((rows[:, 1] == rows[:, 2]).mean())


def test_fuse_rejects_mismatched_ids(tmp_path):
    s = np.full((2, 3), 1 / 3)
    write_scores(tmp_path / "a.csv", np.array([0, 1]), np.array([0, 1]), s)
    write_scores(tmp_path / "b.csv", np.array([0, 2]), np.array([0, 1]), s)
    with pytest.raises(SystemExit):
        main(["fuse", "--joint", str(tmp_path / "a.csv"), "--bone", str(tmp_path / "b.csv"),
              "--out", str(tmp_path / "f.csv")])


def test_missing_checkpoint_is_reported(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.pstg"), "--dataset", str(tmp_path)]) == 2
    assert "pstgcn eval" in capsys.readouterr().err


def test_threads_env_flag():
    code = "import pstgcn.cli, os; print(os.environ['OMP_NUM_THREADS'])"
    env = {"PSTGCN_THREADS": "3", "PATH": ""}
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "3"
    env["PSTGCN_THREADS"] = "zero"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env)
    assert out.returncode != 0 and "PSTGCN_THREADS" in out.stderr


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "pstgcn", "--help"], capture_output=True, text=True, check=True)
    for cmd in ("search", "train", "eval", "complexity", "gen-synthetic", "fuse"):
        assert cmd in out.stdout
