"""End-to-end CLI tests over the documented command surface."""

import json
import os

import numpy as np
import pytest
from PIL import Image

from liifseg import cli
from liifseg import model as mo


def run(argv):
    return cli.main(argv)


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            path = os.path.join(dirpath, name)
            out[os.path.relpath(path, root)] = open(path, "rb").read()
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, capsys=None):
    """A synthetic dataset plus a briefly trained checkpoint."""
    root = tmp_path_factory.mktemp("cliws")
    data = str(root / "data")
    out = str(root / "run")
    assert run(["synth", "--data", data, "--n", "12", "--res", "32", "--seed", "5"]) == 0
    assert run(["synth", "--data", data, "--n", "4", "--res", "32", "--seed", "9",
                "--split", "val"]) == 0
    cfg = {
        "model": {
            "base_width": 8, "group_sizes": [1, 1, 1], "rcmlp_dims": [16, 8],
            "head_width": 16, "head_depth": 1, "num_classes": 8, "input_resolution": 32,
        },
        "train": {"epochs": 2, "batch_size": 4, "initial_lr": 1e-3},
        "loss": {"lambda": 0.0, "tau": 0.5},
    }
    cfg_path = str(root / "cfg.json")
    with open(cfg_path, "w") as f:
        json.dump(cfg, f)
    assert run(["train", "--data", data, "--out", out, "--config", cfg_path, "--seed", "3"]) == 0
    return {"data": data, "out": out, "cfg": cfg_path, "root": root}


class TestSynth:
    def test_identical_trees_for_identical_args(self, tmp_path):
        a = str(tmp_path / "a")
        b = str(tmp_path / "b")
        assert run(["synth", "--data", a, "--n", "6", "--res", "32", "--seed", "7"]) == 0
        assert run(["synth", "--data", b, "--n", "6", "--res", "32", "--seed", "7"]) == 0
        assert tree_bytes(a) == tree_bytes(b)

    def test_layout(self, tmp_path):
        d = str(tmp_path / "ds")
        assert run(["synth", "--data", d, "--n", "3", "--res", "32", "--seed", "1"]) == 0
        assert sorted(os.listdir(os.path.join(d, "images"))) == ["00000.png", "00001.png", "00002.png"]
        assert open(os.path.join(d, "train.txt")).read().splitlines() == ["00000", "00001", "00002"]
        mask = np.asarray(Image.open(os.path.join(d, "masks", "00000.png")))
        assert mask.dtype == np.uint8 and mask.max() < 8


class TestTrain:
    def test_outputs_exist(self, workspace):
        out = workspace["out"]
        assert os.path.exists(os.path.join(out, "best.ckpt"))
        assert os.path.exists(os.path.join(out, "last.ckpt"))
        lines = open(os.path.join(out, "train_log.jsonl")).read().strip().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[0])
        assert {"epoch", "lr", "train_loss", "val_mean_f1", "wall_seconds"} == set(rec)

    def test_checkpoint_loads_with_config(self, workspace):
        model = mo.load_checkpoint(os.path.join(workspace["out"], "best.ckpt"))
        assert model.config.num_classes == 8
        assert model.config.input_resolution == 32


class TestEval:
    def test_writes_report(self, workspace, tmp_path):
        report = str(tmp_path / "report.json")
        code = run(["eval", "--ckpt", os.path.join(workspace["out"], "best.ckpt"),
                    "--data", workspace["data"], "--split", "val", "--report", report])
        assert code == 0
        parsed = json.loads(open(report).read())
        assert 0.0 <= parsed["mean_f1"] <= 1.0
        assert parsed["params"] > 0
        assert len(parsed["per_class_f1"]) == 8

    def test_multi_resolution_protocol_runs(self, workspace, tmp_path):
        report = str(tmp_path / "lowres.json")
        code = run(["eval", "--ckpt", os.path.join(workspace["out"], "best.ckpt"),
                    "--data", workspace["data"], "--split", "val",
                    "--out-res", "16", "--score-res", "32", "--report", report])
        assert code == 0
        assert 0.0 <= json.loads(open(report).read())["mean_f1"] <= 1.0

    def test_threaded_eval_matches_single(self, workspace, tmp_path):
        r1 = str(tmp_path / "r1.json")
        r2 = str(tmp_path / "r2.json")
        ckpt = os.path.join(workspace["out"], "best.ckpt")
        assert run(["eval", "--ckpt", ckpt, "--data", workspace["data"], "--split", "val",
                    "--report", r1]) == 0
        assert run(["eval", "--ckpt", ckpt, "--data", workspace["data"], "--split", "val",
                    "--report", r2, "--threads", "2"]) == 0
        a = json.loads(open(r1).read())
        b = json.loads(open(r2).read())
        assert a["mean_f1"] == b["mean_f1"]
        assert a["per_class_f1"] == b["per_class_f1"]


class TestInfer:
    def test_mask_values_within_class_range(self, workspace, tmp_path):
        image = os.path.join(workspace["data"], "images", "00000.png")
        mask_path = str(tmp_path / "mask.png")
        overlay_path = str(tmp_path / "overlay.png")
        code = run(["infer", "--ckpt", os.path.join(workspace["out"], "best.ckpt"),
                    "--image", image, "--mask", mask_path, "--overlay", overlay_path])
        assert code == 0
        mask = np.asarray(Image.open(mask_path))
        assert mask.shape == (32, 32)
        assert set(np.unique(mask)) <= set(range(8))
        overlay = Image.open(overlay_path)
        assert overlay.size == (32, 32) and overlay.mode == "RGB"

    def test_output_resolution_flag(self, workspace, tmp_path):
        image = os.path.join(workspace["data"], "images", "00001.png")
        mask_path = str(tmp_path / "mask64.png")
        code = run(["infer", "--ckpt", os.path.join(workspace["out"], "best.ckpt"),
                    "--image", image, "--out-res", "64", "--mask", mask_path])
        assert code == 0
        assert np.asarray(Image.open(mask_path)).shape == (64, 64)


class TestBench:
    def test_ladder_report(self, workspace, tmp_path):
        report = str(tmp_path / "bench.json")
        code = run(["bench", "--ckpt", os.path.join(workspace["out"], "best.ckpt"),
                    "--res", "32", "--iters", "2", "--warmup", "1", "--report", report])
        assert code == 0
        parsed = json.loads(open(report).read())
        assert parsed["params"] > 0
        assert len(parsed["ladder"]) == 5
        assert parsed["flops_convention"].startswith("2 FLOPs")
        flops = [row["gflops"] for row in parsed["ladder"]]
        assert all(a < b for a, b in zip(flops, flops[1:]))


class TestDispatch:
    def test_unknown_subcommand_nonzero(self, capsys):
        assert run(["frobnicate"]) != 0

    def test_unknown_flag_nonzero(self):
        assert run(["synth", "--data", "x", "--n", "1", "--bogus"]) != 0

    def test_missing_required_flag_nonzero(self):
        assert run(["synth", "--n", "1"]) != 0

    def test_missing_checkpoint_is_clean_error(self, workspace):
        assert run(["eval", "--ckpt", "/nonexistent.ckpt", "--data", workspace["data"]]) == 1

    def test_effective_config_echoed(self, workspace, capsys):
        run(["bench", "--ckpt", os.path.join(workspace["out"], "best.ckpt"),
             "--res", "32", "--out-res", "16", "--iters", "1", "--warmup", "0"])
        first = capsys.readouterr().out.splitlines()[0]
        echoed = json.loads(first)
        assert echoed["command"] == "bench"
        assert echoed["effective_config"]["input_res"] == 32

    def test_flags_override_config_file(self, workspace, tmp_path, capsys):
        out = str(tmp_path / "run2")
        data = workspace["data"]
        code = run(["train", "--data", data, "--out", out, "--config", workspace["cfg"],
                    "--epochs", "1", "--seed", "4"])
        assert code == 0
        echoed = json.loads(capsys.readouterr().out.splitlines()[0])
        assert echoed["effective_config"]["train"]["epochs"] == 1
        assert echoed["effective_config"]["train"]["seed"] == 4
