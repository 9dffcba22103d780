"""Command line behavior: every subcommand, its outputs and its exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest
from scipy import ndimage

from tumorseg import datapipe as dp
from tumorseg import evalmetrics as em
from tumorseg.cli import main

TINY_CONFIG = {
    "arch": {"local_maps": [4, 4], "global_maps": 4},
    "max_epochs": 1, "epoch_patches": 64, "validation_patches": 32, "batch_size": 32,
    "phase2": {"epoch_patches": 64},
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "train", "--count", 2, "--dims", "48,48,24", "--seed", 0) == 0
    assert run("synth", "--out", root / "val", "--count", 1, "--dims", "48,48,24", "--seed", 10) == 0
    (root / "cfg.json").write_text(json.dumps(TINY_CONFIG))
    code = run("train", "--arch", "TwoPathCNN", "--data", root / "train", "--val", root / "val",
               "--out", root / "m.gseg", "--config", root / "cfg.json", "--seed", 3)
    assert code == 0
    return root


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return err[-1]


class TestSynth:
    def test_writes_pairs(self, workspace):
        names = [p.name for p in dp.list_volumes(workspace / "train")]
        assert names == ["phantom-0000", "phantom-0001"]
        vol = dp.load_volume(workspace / "train" / "phantom-0001")
        assert vol.dims == (48, 48, 24) and vol.labels is not None

    def test_matches_library(self, workspace):
        vol = dp.load_volume(workspace / "val" / "phantom-0010")
        ref = dp.make_phantom(10, (48, 48, 24))
        assert np.array_equal(vol.data, ref.data) and np.array_equal(vol.labels, ref.labels)

    def test_count_zero(self, tmp_path):
        assert run("synth", "--out", tmp_path / "e", "--count", 0) == 0
        assert list((tmp_path / "e").iterdir()) == []

    def test_three_pairs_and_determinism(self, tmp_path):
        for d in ("a", "b"):
            assert run("synth", "--out", tmp_path / d, "--count", 3, "--dims", "40,40,24") == 0
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert len(files) == 6
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    @pytest.mark.parametrize("dims", ["48,48", "a,b,c", "0,4,4"])
    def test_bad_dims(self, tmp_path, capsys, dims):
        assert run("synth", "--out", tmp_path, "--dims", dims) == 2
        assert error_line(capsys).startswith("error: --dims")


class TestTrain:
    def test_outputs(self, workspace):
        assert (workspace / "m.gseg").read_bytes()[:4] == b"GSEG"
        lines = (workspace / "m.gseg.train.jsonl").read_text().splitlines()
        phases = [json.loads(l)["phase"] for l in lines]
        assert phases == ["phase1", "phase2"]

    def test_same_seed_same_file(self, workspace, tmp_path):
        assert run("train", "--arch", "TwoPathCNN", "--data", workspace / "train",
                   "--val", workspace / "val", "--out", tmp_path / "again.gseg",
                   "--config", workspace / "cfg.json", "--seed", 3) == 0
        assert (tmp_path / "again.gseg").read_bytes() == (workspace / "m.gseg").read_bytes()

    def test_phase2_from_init(self, workspace, tmp_path):
        assert run("train", "--arch", "TwoPathCNN", "--data", workspace / "train",
                   "--val", workspace / "val", "--out", tmp_path / "p2.gseg", "--phase", "2",
                   "--init", workspace / "m.gseg", "--config", workspace / "cfg.json",
                   "--log", tmp_path / "h.jsonl") == 0
        assert json.loads((tmp_path / "h.jsonl").read_text().splitlines()[0])["phase"] == "phase2"

    def test_cascade_from_first_network(self, workspace, tmp_path):
        assert run("train", "--arch", "MFCascadeCNN", "--data", workspace / "train",
                   "--val", workspace / "val", "--out", tmp_path / "mf.gseg", "--phase", "1",
                   "--init", workspace / "m.gseg", "--config", workspace / "cfg.json") == 0

    def test_unknown_arch(self, workspace, tmp_path, capsys):
        assert run("train", "--arch", "FourPathCNN", "--data", workspace / "train",
                   "--val", workspace / "val", "--out", tmp_path / "x.gseg") == 2
        assert "FourPathCNN" in error_line(capsys)

    def test_phase2_needs_init(self, workspace, tmp_path, capsys):
        assert run("train", "--arch", "TwoPathCNN", "--data", workspace / "train",
                   "--val", workspace / "val", "--out", tmp_path / "x.gseg", "--phase", "2") == 2
        assert "--init" in error_line(capsys)

    def test_init_arch_mismatch(self, workspace, tmp_path):
        assert run("train", "--arch", "GlobalPathCNN", "--data", workspace / "train",
                   "--val", workspace / "val", "--out", tmp_path / "x.gseg",
                   "--init", workspace / "m.gseg", "--config", workspace / "cfg.json") == 2

    @pytest.mark.parametrize("text, word", [("{", "JSON"), ('{"momentum": 1}', "momentum"),
                                            ('{"learning_rate": -1}', "learning rate"),
                                            ('{"preset": "huge"}', "preset")])
    def test_bad_config(self, workspace, tmp_path, capsys, text, word):
        (tmp_path / "c.json").write_text(text)
        assert run("train", "--arch", "TwoPathCNN", "--data", workspace / "train",
                   "--val", workspace / "val", "--out", tmp_path / "x.gseg",
                   "--config", tmp_path / "c.json") == 3
        assert word in error_line(capsys)

    def test_missing_data_dir(self, workspace, tmp_path):
        assert run("train", "--arch", "TwoPathCNN", "--data", tmp_path / "nope",
                   "--val", workspace / "val", "--out", tmp_path / "x.gseg") == 3

    def test_unlabeled_volumes(self, workspace, tmp_path, capsys):
        vol = dp.load_volume(workspace / "val" / "phantom-0010")
        (tmp_path / "u").mkdir()
        dp.save_volume(dp.BrainVolume(vol.data, None, "bare"), tmp_path / "u" / "bare")
        assert run("train", "--arch", "TwoPathCNN", "--data", tmp_path / "u",
                   "--val", workspace / "val", "--out", tmp_path / "x.gseg") == 4
        assert "bare" in error_line(capsys)


@pytest.fixture(scope="module")
def predicted(workspace):
    out = workspace / "pred"
    raw = workspace / "raw"
    for d in (out, raw):
        d.mkdir(exist_ok=True)
    src = workspace / "val" / "phantom-0010"
    assert run("predict", "--model", workspace / "m.gseg", "--in", src,
               "--out", out / "phantom-0010") == 0
    assert run("predict", "--model", workspace / "m.gseg", "--in", src,
               "--out", raw / "phantom-0010", "--no-postprocess") == 0
    return out, raw


class TestPredictEvaluate:
    def test_label_volume(self, predicted, workspace):
        vol = dp.load_volume(predicted[0] / "phantom-0010")
        assert vol.modalities == () and vol.dims == (48, 48, 24)
        assert vol.labels.max() <= 4

    def test_postprocess_only_drops_small_components(self, predicted):
        post = dp.load_volume(predicted[0] / "phantom-0010").labels
        raw = dp.load_volume(predicted[1] / "phantom-0010").labels
        changed = post != raw
        assert not post[changed].any()
        comp, _ = ndimage.label(raw != 0, ndimage.generate_binary_structure(3, 1))
        sizes = np.bincount(comp.ravel())
        sizes[0] = 0
        assert np.all(sizes[np.unique(comp[changed])] < 0.1 * sizes.max())

    def test_evaluate(self, predicted, workspace, tmp_path):
        assert run("evaluate", "--pred", predicted[0], "--truth", workspace / "val",
                   "--out", tmp_path / "r.json", "--csv", tmp_path / "r.csv") == 0
        doc = json.loads((tmp_path / "r.json").read_text())
        em.validate_report(doc)
        truth = dp.load_volume(workspace / "val" / "phantom-0010").labels
        pred = dp.load_volume(predicted[0] / "phantom-0010").labels
        assert doc["cases"][0]["regions"]["core"]["dice"] == em.score_labels(pred, truth)["core"].dice
        assert (tmp_path / "r.csv").read_text().splitlines()[-1].startswith("mean")

    def test_evaluate_missing_truth(self, predicted, tmp_path):
        (tmp_path / "t").mkdir()
        assert run("evaluate", "--pred", predicted[0], "--truth", tmp_path / "t",
                   "--out", tmp_path / "r.json") == 3

    def test_evaluate_dim_mismatch(self, predicted, tmp_path, capsys):
        (tmp_path / "t").mkdir()
        dp.save_volume(dp.BrainVolume(np.zeros((0, 2, 2, 2)), np.zeros((2, 2, 2)), "x", modalities=()),
                       tmp_path / "t" / "phantom-0010")
        assert run("evaluate", "--pred", predicted[0], "--truth", tmp_path / "t",
                   "--out", tmp_path / "r.json") == 4
        assert "dims" in error_line(capsys)

    def test_perfect_prediction(self, workspace, tmp_path):
        assert run("evaluate", "--pred", workspace / "val", "--truth", workspace / "val",
                   "--out", tmp_path / "r.json") == 0
        doc = json.loads((tmp_path / "r.json").read_text())
        for region in doc["cases"][0]["regions"].values():
            assert region["dice"] == region["sensitivity"] == region["specificity"] == 1.0

    def test_predict_missing_model(self, workspace, tmp_path, capsys):
        assert run("predict", "--model", tmp_path / "none.gseg",
                   "--in", workspace / "val" / "phantom-0010", "--out", tmp_path / "o") == 3
        assert error_line(capsys).startswith("error:")

    def test_predict_bad_model(self, workspace, tmp_path):
        (tmp_path / "bad.gseg").write_bytes(b"NOPE" + b"\0" * 20)
        assert run("predict", "--model", tmp_path / "bad.gseg",
                   "--in", workspace / "val" / "phantom-0010", "--out", tmp_path / "o") == 3

    def test_predict_truncated_volume(self, workspace, tmp_path, capsys):
        vol = dp.load_volume(workspace / "val" / "phantom-0010")
        dp.save_volume(vol, tmp_path / "v")
        blob = tmp_path / "v.blob"
        blob.write_bytes(blob.read_bytes()[:-10])
        assert run("predict", "--model", workspace / "m.gseg", "--in", tmp_path / "v",
                   "--out", tmp_path / "o") == 4
        assert "truncated" in error_line(capsys)


class TestBench:
    def test_prints_report(self, workspace, capsys):
        assert run("bench", "--model", workspace / "m.gseg", "--dims", "10,10", "--reps", 1) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["equivalence_passed"] and rep["threads"] == 1
        assert rep["ratio"] > 0 and rep["dense_seconds"] > 0

    def test_bad_threads(self, workspace):
        assert run("--threads", 0, "bench", "--model", workspace / "m.gseg") == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tumorseg", "synth", "--out", str(tmp_path),
                           "--dims", "4,4"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.strip().splitlines()[-1].startswith("error:")
