"""End-to-end CLI tests on a tiny dataset; exercise every subcommand and
the documented exit codes."""
import json
import os

import numpy as np
import pytest

from panoseg.cli import main
from panoseg.data_io import read_tensor


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "ds")
    assert main(["gen-data", "--out", out, "--samples", "6",
                 "--height", "32", "--seed", "4"]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(dataset, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "run")
    code = main(["train", "--data", dataset, "--out", out,
                 "--modalities", "rgb,d,n", "--epochs", "2", "--lr", "1e-3",
                 "--freeze-encoder", "--seed", "0"])
    assert code == 0
    return out


class TestGenData:
    def test_layout(self, dataset):
        assert os.path.exists(os.path.join(dataset, "manifest.json"))
        with open(os.path.join(dataset, "manifest.json")) as f:
            man = json.load(f)
        first = man["splits"]["train"][0]
        for name in ("rgb", "depth", "normals", "labels", "instances"):
            assert os.path.exists(os.path.join(dataset, first, f"{name}.ptns"))


class TestTrain:
    def test_artifacts(self, run_dir):
        assert os.path.exists(os.path.join(run_dir, "model.ckpt"))
        assert os.path.exists(os.path.join(run_dir, "config.json"))
        with open(os.path.join(run_dir, "loss.csv")) as f:
            lines = f.read().strip().splitlines()
        assert lines[0] == "epoch,loss"
        assert len(lines) == 3

    def test_missing_dataset_is_data_error(self, tmp_path):
        code = main(["train", "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "run"), "--epochs", "1"])
        assert code == 2

    def test_missing_modality_is_data_error(self, dataset, tmp_path):
        """Datasets store all modalities, so fake a bare-rgb dataset."""
        import shutil

        bare = str(tmp_path / "bare")
        shutil.copytree(dataset, bare)
        with open(os.path.join(bare, "manifest.json")) as f:
            man = json.load(f)
        for sid in man["splits"]["train"] + man["splits"]["val"]:
            os.remove(os.path.join(bare, sid, "depth.ptns"))
        code = main(["train", "--data", bare, "--out", str(tmp_path / "run"),
                     "--modalities", "rgb,d", "--epochs", "1"])
        assert code == 2

    def test_bad_flag_is_usage_error(self, dataset, tmp_path):
        assert main(["train", "--data", dataset, "--out", str(tmp_path),
                     "--loss", "hinge"]) == 1
        assert main(["no-such-command"]) == 1


class TestEval:
    def test_writes_metric_csvs(self, dataset, run_dir, tmp_path):
        out = str(tmp_path / "eval")
        code = main(["eval", "--data", dataset,
                     "--ckpt", os.path.join(run_dir, "model.ckpt"),
                     "--out", out, "--edge-ratios", "0.1,0.2"])
        assert code == 0
        with open(os.path.join(out, "metrics_global.csv")) as f:
            lines = f.read().strip().splitlines()
        assert lines[0] == "class,id,iou,acc,tp,fp,fn"
        assert lines[-1].startswith("summary,")
        assert os.path.exists(os.path.join(out, "metrics_edge_0.1.csv"))
        assert os.path.exists(os.path.join(out, "metrics_edge_0.2.csv"))

    def test_refine_and_single_view_run(self, dataset, run_dir, tmp_path):
        out = str(tmp_path / "eval2")
        code = main(["eval", "--data", dataset,
                     "--ckpt", os.path.join(run_dir, "model.ckpt"),
                     "--out", out, "--refine", "--single-view"])
        assert code == 0


class TestInfer:
    def test_writes_labels_and_preview(self, dataset, run_dir, tmp_path):
        with open(os.path.join(dataset, "manifest.json")) as f:
            sid = json.load(f)["splits"]["val"][0]
        out = str(tmp_path / "infer")
        code = main(["infer", "--ckpt", os.path.join(run_dir, "model.ckpt"),
                     "--sample", os.path.join(dataset, sid), "--out", out])
        assert code == 0
        pred = read_tensor(os.path.join(out, f"{sid}_labels.ptns"))
        assert pred.dtype == np.uint8 and pred.shape == (32, 64)
        assert os.path.exists(os.path.join(out, f"{sid}_labels.ppm"))


class TestVerify:
    def test_quick_suite_passes(self, capsys):
        assert main(["verify", "--suite", "oracles"]) == 0
        out = capsys.readouterr().out
        assert "[ok]" in out and "FAIL" not in out


class TestConfig:
    def test_unknown_config_keys_rejected(self, tmp_path):
        from panoseg.cli import load_config

        path = str(tmp_path / "config.json")
        with open(path, "w") as f:
            json.dump({"command": "train", "surprise": 1}, f)
        with pytest.raises(ValueError):
            load_config(path)
