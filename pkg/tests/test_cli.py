import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from face4d.cli import MANIFEST, digest_path, main, read_config
from face4d.sequence import load_sequence

FIT = ["--iters", "20,60,20,10"]


def run(*argv):
    return main([str(a) for a in argv])


def _tree(path):
    """Relative path -> bytes for every file except the run manifest."""
    out = {}
    for root, _, files in os.walk(path):
        for f in files:
            if f != MANIFEST:
                p = os.path.join(root, f)
                with open(p, "rb") as fh:
                    out[os.path.relpath(p, path)] = fh.read()
    return out


def _manifest(path):
    with open(os.path.join(path, MANIFEST)) as f:
        return json.load(f)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth-model", "--seed", 2, "--vertices", 162, "--k-id", 6, "--k-exp", 6, "--k-tex", 6,
               "--out", d / "model") == 0
    assert run("synth-scene", "--model", d / "model", "--frames", 3, "--cameras", 3, "--image-size", 48,
               "--out", d / "scene") == 0
    assert run("reconstruct", "--scene", d / "scene", "--model", d / "model", *FIT, "--out", d / "rec") == 0
    return d


def test_synth_model_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("synth-model", "--seed", 1, "--vertices", 642, "--out", tmp_path / name) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    assert sorted(os.listdir(tmp_path / "a")) == ["model.bin", "model.json", MANIFEST]


def test_synth_model_too_few_vertices(tmp_path, capsys):
    assert run("synth-model", "--vertices", 4, "--out", tmp_path / "m") == 2
    assert "vertex count too small" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert run() == 2
    assert run("no-such-command") == 2
    assert run("synth-model") == 2                              # missing --out
    assert run("synth-model", "--vertices", "many", "--out", tmp_path) == 2
    assert run("reconstruct", "--scene", "x", "--model", "y", "--iters", "1,2", "--out", tmp_path) == 2


def test_input_errors(tmp_path, work):
    assert run("synth-scene", "--model", tmp_path / "missing", "--out", tmp_path / "s") == 3
    assert run("metrics", "--pred", tmp_path / "nope", "--gt", work / "rec", "--model", work / "model",
               "--out", tmp_path / "m") == 3


def test_manifest_contents(work):
    m = _manifest(work / "rec")
    assert m["command"] == "reconstruct"
    assert m["config"]["lambda_d"] == 2.0 and m["config"]["iters"] == [20, 60, 20, 10]
    assert m["inputs"]["model"]["sha256"] == digest_path(work / "model")
    assert m["inputs"]["scene0"]["sha256"] == digest_path(work / "scene")
    assert m["wall_time_s"] >= 0 and m["version"]
    assert {"seq.json", "seq.bin", "frame_000000.obj", "report.json"} <= set(os.listdir(work / "rec"))
    report = json.loads((work / "rec" / "report.json").read_text())
    assert len(report["frames"]) == 3 and report["config"]["iters_seq"] == 10


def test_reconstruct_is_byte_reproducible(work, tmp_path):
    assert run("reconstruct", "--scene", work / "scene", "--model", work / "model", *FIT,
               "--out", tmp_path / "again") == 0
    assert _tree(work / "rec") == _tree(tmp_path / "again")


def test_config_precedence(work, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# fit settings\nlambda_d = 5\nlambda-lm = 7  # trailing comment\niters = 1,2,3,4\n")
    assert read_config(cfg) == {"lambda-d": "5", "lambda-lm": "7", "iters": "1,2,3,4"}
    assert run("reconstruct", "--config", cfg, "--scene", work / "scene", "--model", work / "model",
               "--lambda-lm", 9, "--frames", 1, "--out", tmp_path / "r") == 0
    c = _manifest(tmp_path / "r")["config"]
    assert c["lambda_d"] == 5.0          # from the file
    assert c["lambda_lm"] == 9.0         # flag beats file
    assert c["lambda_e"] == 20.0         # default
    assert c["iters"] == [1, 2, 3, 4]
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    assert run("metrics", "--config", bad, "--pred", "a", "--gt", "b", "--out", tmp_path / "x") == 2


def test_metrics_on_identical_sequences(work, tmp_path):
    assert run("metrics", "--pred", work / "rec", "--gt", work / "rec", "--model", work / "model",
               "--out", tmp_path / "m") == 0
    m = json.loads((tmp_path / "m" / "metrics.json").read_text())
    assert m == {"l_max_face": 0.0, "l_max_lip": 0.0, "l_max_upper": 0.0, "l_mean_lip": 0.0}


def test_metrics_against_ground_truth(work, tmp_path):
    assert run("metrics", "--pred", work / "rec", "--gt", work / "scene" / "ground_truth",
               "--model", work / "model", "--out", tmp_path / "m") == 0
    m = json.loads((tmp_path / "m" / "metrics.json").read_text())
    assert 0 < m["l_mean_lip"] <= m["l_max_lip"] < 0.05


def test_stats_and_plot_are_reproducible(work, tmp_path):
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("stats", "--seq", work / "rec", work / "scene" / "ground_truth", "--model", work / "model",
                   "--region-list", "lip,nose,chin", "--plot", out / "fig.svg", "--out", out) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    stats = json.loads((tmp_path / "a" / "stats.json").read_text())
    assert len(stats["sequences"]) == 2 and stats["region"] == "lip"
    graph = json.loads((tmp_path / "a" / "corr_graph.json").read_text())
    assert [g["regions"] for g in graph["sequences"]] == [["lip", "nose", "chin"]] * 2
    svg = (tmp_path / "a" / "fig.svg").read_text()
    assert svg.startswith("<?xml") and "<svg" in svg


def test_stats_with_regions_file(work, tmp_path):
    regions = tmp_path / "regions.json"
    regions.write_text(json.dumps({"lip": [0, 1, 2], "upper": [3, 4], "face": [0, 1, 2, 3, 4]}))
    assert run("stats", "--seq", work / "rec", "--regions", regions, "--out", tmp_path / "s") == 0
    assert run("stats", "--seq", work / "rec", "--regions", regions, "--velocity-region", "ear",
               "--out", tmp_path / "t") == 2
    assert run("stats", "--seq", work / "rec", "--out", tmp_path / "u") == 2


def test_calibrate_leaves_input_untouched(work, tmp_path):
    before = digest_path(work / "scene")
    assert run("calibrate", "--scene", work / "scene", "--out", work / "scene") == 2
    assert run("calibrate", "--scene", work / "scene", "--frames", "0,1", "--out", tmp_path / "cal") == 0
    assert digest_path(work / "scene") == before
    cal = json.loads((tmp_path / "cal" / "calibration.json").read_text())
    assert [c["id"] for c in cal["cameras"]] == [0, 1, 2]
    orig = json.loads((work / "scene" / "scene.json").read_text())
    new = json.loads((tmp_path / "cal" / "scene.json").read_text())
    for a, b in zip(orig["cameras"], new["cameras"]):
        assert np.abs(np.subtract(a["extrinsics"], b["extrinsics"])).max() < 0.02
    # the calibrated scene is a complete scene
    assert run("reconstruct", "--scene", tmp_path / "cal", "--model", work / "model", *FIT, "--frames", 1,
               "--out", tmp_path / "rec") == 0
    assert load_sequence(tmp_path / "rec").frame_count == 1


def test_reconstruct_several_scenes_in_parallel(work, tmp_path):
    for name in ("s1", "s2"):
        shutil.copytree(work / "scene", tmp_path / name)
    assert run("reconstruct", "--scene", tmp_path / "s1", tmp_path / "s2", "--model", work / "model", *FIT,
               "--jobs", 2, "--out", tmp_path / "out") == 0
    a, b = _tree(tmp_path / "out" / "s1"), _tree(tmp_path / "out" / "s2")
    assert a == b == _tree(work / "rec")


def test_gradcheck_exit_codes(tmp_path):
    assert run("gradcheck", "--seeds", 1, "--vertices", 100, "--image-size", 40, "--out", tmp_path / "ok") == 0
    res = json.loads((tmp_path / "ok" / "gradcheck.json").read_text())
    assert res["passed"] is True
    assert run("gradcheck", "--seeds", 1, "--vertices", 100, "--image-size", 40, "--tol", 1e-30,
               "--out", tmp_path / "strict") == 4


def test_console_script(tmp_path):
    exe = shutil.which("face4d")
    cmd = [exe] if exe else [sys.executable, "-m", "face4d.cli"]
    proc = subprocess.run(cmd + ["synth-model", "--vertices", "4", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "vertex count too small" in proc.stderr
