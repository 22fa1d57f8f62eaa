"""Command-line interface: subcommands, outputs, and exit codes."""

import json
import os

import pytest

from mest.cli import main
from mest.trainer import OptimizerConfig, RunConfig


def write_config(tmp_path, **kw):
    base = dict(model="tiny-cnn",
                dataset={"kind": "synth", "num": 96, "classes": 2, "size": 8},
                overall_sparsity=0.9, epochs=2, batch_size=16, seed=0,
                out_dir=str(tmp_path / "run"),
                optimizer={"lr0": 0.05, "lr_end": 1e-6})
    base.update(kw)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(base))
    return str(path)


def test_train_and_inspect_and_forgetting(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    assert main(["train", "--config", cfg_path]) == 0
    out = capsys.readouterr().out
    assert "test_acc=" in out

    ck = str(tmp_path / "run" / "checkpoint_0002.mest")
    assert main(["inspect-checkpoint", ck]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["version"] == 1

    report = str(tmp_path / "forget.csv")
    assert main(["forgetting-report", "--run-dir", str(tmp_path / "run"),
                 "--th", "-1", "--csv", report]) == 0
    assert "unforgettable=" in capsys.readouterr().out
    assert open(report).readline().startswith("example_id,")


def test_train_resume_flag(tmp_path, capsys):
    cfg_path = write_config(tmp_path, checkpoint_interval=1)
    assert main(["train", "--config", cfg_path]) == 0
    ck = str(tmp_path / "run" / "checkpoint_0001.mest")
    cfg2 = write_config(tmp_path)
    assert main(["train", "--config", cfg2, "--out", str(tmp_path / "run2"),
                 "--resume", ck]) == 0


def test_footprint_text_and_json(tmp_path, capsys):
    assert main(["footprint", "--layers", "64x64x3x3,10x256",
                 "--mode", "unstructured", "--sparsity", "0.9"]) == 0
    assert "total: 284432 bits" in capsys.readouterr().out
    assert main(["footprint", "--layers", "64x64x3x3", "--mode", "dense",
                 "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["total_bits"] == 2 * 36864 * 32


def test_bench_writes_outputs(tmp_path, capsys):
    csv_path = str(tmp_path / "accel.csv")
    gp_path = str(tmp_path / "accel.dat")
    assert main(["bench", "--shape", "8x8x3x3", "--schemes", "unstructured",
                 "--sparsities", "0.9", "--repeats", "2",
                 "--fmap", "4", "--csv", csv_path, "--gnuplot", gp_path]) == 0
    assert "accel=" in capsys.readouterr().out
    assert os.path.exists(csv_path) and os.path.exists(gp_path)


def test_flops_command(tmp_path, capsys):
    cfg_path = write_config(tmp_path)
    assert main(["flops", "--config", cfg_path, "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["training_flops"] > data["inference_flops"]


def test_missing_file_exits_one(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 1
    assert "error:" in capsys.readouterr().err


def test_bad_usage_exits_two():
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2


def test_invalid_config_value_exits_one(tmp_path, capsys):
    cfg_path = write_config(tmp_path, model="does-not-exist")
    assert main(["train", "--config", cfg_path]) == 1
    assert "error:" in capsys.readouterr().err
