"""End-to-end command line behavior, driven in-process through run()."""

import json

import numpy as np
import pytest

from scprompt.cli import run
from scprompt.scpt import read_tensor

CLASSES = ["move-left", "move-right", "expand", "still"]


def last_line(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return out[-1] if out else ""


def fields_of(line):
    return dict(part.split("=", 1) for part in line.split())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"classes": CLASSES, "n_train": 16,
                                "n_val": 8, "seed": 3}))
    assert run(["gen-data", "--spec", str(spec), "--out",
                str(root / "data")]) == 0
    cfg = {"data_dir": str(root / "data"), "out_dir": str(root / "run"),
           "epochs": 1, "batch_size": 8, "init_std": 0.05,
           "init_scheme": "flat", "schedule": {"base_lr": 0.01},
           "encoder": {"patch_size": 8, "channels": 8, "depth": 1,
                       "heads": 2}}
    (root / "run.json").write_text(json.dumps(cfg))
    assert run(["train", "--config", str(root / "run.json")]) == 0
    return root


# ------------------------------------------------------------- happy paths


def test_gen_data_summary_and_idempotence(workspace, capsys):
    spec = workspace / "spec.json"
    out = workspace / "data_again"
    assert run(["gen-data", "--spec", str(spec), "--out", str(out)]) == 0
    got = fields_of(last_line(capsys))
    assert got["status"] == "ok"
    assert got["clips"] == "24" and got["val"] == "8"
    first = (out / "manifest.json").read_bytes()
    assert run(["gen-data", "--spec", str(spec), "--out", str(out)]) == 0
    assert (out / "manifest.json").read_bytes() == first


def test_train_summary_reports_final_metrics(workspace, capsys):
    report = json.loads((workspace / "run" / "report.json").read_text())
    cfg = json.loads((workspace / "run.json").read_text())
    cfg["out_dir"] = str(workspace / "run2")
    (workspace / "run2.json").write_text(json.dumps(cfg))
    assert run(["train", "--config", str(workspace / "run2.json")]) == 0
    got = fields_of(last_line(capsys))
    assert got["status"] == "ok" and got["epochs"] == "1"
    assert float(got["final_top1"]) == report["final"]["top1"]


def test_eval_matches_training_report(workspace, capsys):
    report = json.loads((workspace / "run" / "report.json").read_text())
    assert run(["eval", "--checkpoint",
                str(workspace / "run" / "checkpoint_001.ckpt"),
                "--data", str(workspace / "data")]) == 0
    got = fields_of(last_line(capsys))
    assert got["status"] == "ok" and got["split"] == "val"
    assert float(got["top1"]) == pytest.approx(report["final"]["top1"])
    assert float(got["loss"]) == pytest.approx(report["final"]["loss"],
                                               abs=1e-4)


def test_gradcheck_default_passes(capsys):
    assert run(["gradcheck"]) == 0
    got = fields_of(last_line(capsys))
    assert got["status"] == "ok"
    assert float(got["max_rel_err"]) <= 1e-5
    assert "worst" in got


def test_gradcheck_config_override(workspace, capsys):
    over = workspace / "gc.json"
    over.write_text(json.dumps({"prompt_mode": "scp-add", "agents": 2,
                                "patch_size": 2, "experts": 2}))
    assert run(["gradcheck", "--config", str(over)]) == 0
    assert fields_of(last_line(capsys))["status"] == "ok"


def test_flow_writes_scpt_tensors(workspace, capsys):
    out = workspace / "flowout"
    assert run(["flow", "--in", str(workspace / "data"), "--clip", "3",
                "--out", str(out)]) == 0
    got = fields_of(last_line(capsys))
    fused = read_tensor(got["fused"])
    mags = read_tensor(got["magnitude"])
    assert fused.shape == (8, 32, 32, 3)
    assert mags.shape == (4, 32, 32)
    assert np.all(mags >= 0) and np.all(mags <= 1)


def test_ablate_experts_writes_table_and_figure(workspace, capsys):
    cfg = json.loads((workspace / "run.json").read_text())
    cfg.update(prompt_mode="scp-concat", out_dir=str(workspace / "abl"))
    (workspace / "abl.json").write_text(json.dumps(cfg))
    assert run(["ablate-experts", "--config", str(workspace / "abl.json"),
                "--l", "1,2"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0].split() == ["l", "accuracy", "error"]
    got = fields_of(out[-1])
    assert got["rows"] == "2" and got["failures"] == "0"
    assert (workspace / "abl" / "ablation.csv").is_file()
    assert (workspace / "abl" / "ablation.png").is_file()


def test_ablate_empty_l_is_success(workspace, capsys):
    assert run(["ablate-experts", "--config", str(workspace / "abl.json"),
                "--l", ""]) == 0
    assert fields_of(last_line(capsys))["rows"] == "0"


def test_help_exits_zero_everywhere(capsys):
    for sub in ("gen-data", "train", "eval", "gradcheck", "flow",
                "ablate-experts"):
        with np.errstate(all="ignore"):
            assert run([sub, "--help"]) == 0
        assert "--help" in capsys.readouterr().out
    assert run(["--help"]) == 0


# -------------------------------------------------------------- exit codes


def test_usage_errors_exit_one(workspace, capsys):
    assert run([]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["train"]) == 1                       # missing --config
    assert run(["gradcheck", "--tolerance", "abc"]) == 1
    assert run(["gen-data", "--spec", "s.json", "--out", "d",
                "--sprites", "9"]) == 1              # unknown flag
    assert run(["ablate-experts", "--config", str(workspace / "abl.json"),
                "--l", "4,banana"]) == 1
    err = capsys.readouterr().err
    assert "--l" in err


def test_data_errors_exit_two(workspace, capsys):
    assert run(["eval", "--checkpoint", "missing.ckpt",
                "--data", str(workspace / "data")]) == 2
    assert "missing.ckpt" in capsys.readouterr().err
    assert run(["train", "--config", str(workspace / "nope.json")]) == 2
    assert "nope.json" in capsys.readouterr().err
    bad = workspace / "bad.json"
    bad.write_text(json.dumps({"data_dir": "d", "out_dir": "o",
                               "rocket": 1}))
    assert run(["train", "--config", str(bad)]) == 2
    assert "rocket" in capsys.readouterr().err
    assert run(["flow", "--in", str(workspace / "data"), "--clip", "999",
                "--out", str(workspace / "f2")]) == 2
    assert "999" in capsys.readouterr().err


def test_gradcheck_failure_exits_three_and_names_worst(capsys):
    assert run(["gradcheck", "--tolerance", "1e-12"]) == 3
    got = fields_of(last_line(capsys))
    assert got["status"] == "fail"
    assert "[" in got["worst"]


def test_error_paths_still_print_status_line(workspace, capsys):
    assert run(["train", "--config", str(workspace / "nope.json")]) == 2
    assert last_line(capsys) == "status=error code=2"
