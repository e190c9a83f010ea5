import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from face4d.camera import rotation_about
from face4d.metrics import (CorrelationGraph, VertexSequence, lip_metrics, pearson, region_correlation,
                            vertex_velocity, write_json)

REGIONS = {"lip": [0, 1, 2], "upper": [3, 4, 5], "face": [0, 1, 2, 3, 4, 5, 6]}


def _seq(frames, regions=REGIONS):
    return VertexSequence(np.asarray(frames, dtype=float), 30.0, regions)


def test_static_sequence_has_zero_velocity(rng):
    frames = np.repeat(rng.normal(size=(1, 8, 3)), 5, axis=0)
    assert vertex_velocity(_seq(frames), "lip") == 0.0


def test_constant_velocity(rng):
    base = rng.normal(size=(8, 3))
    t = np.arange(12)[:, None, None]
    frames = base + t * np.array([0.01, 0.0, 0.0])
    seq = _seq(frames)
    assert abs(vertex_velocity(seq, "lip", "x") - 0.01) <= 1e-9
    assert vertex_velocity(seq, "lip", "y") == 0.0
    assert abs(vertex_velocity(seq, "lip", "all") - 0.01 / 3) <= 1e-9


def test_velocity_uses_magnitudes():
    frames = np.zeros((3, 8, 3))
    frames[1, :, 1] = 0.02      # up then back down
    assert vertex_velocity(_seq(frames), "lip", "y") == pytest.approx(0.02)


def test_velocity_errors(rng):
    with pytest.raises(ValueError, match="2 frames"):
        vertex_velocity(_seq(rng.normal(size=(1, 8, 3))), "lip")
    seq = _seq(rng.normal(size=(3, 8, 3)), {**REGIONS, "empty": []})
    with pytest.raises(KeyError, match="unknown region"):
        vertex_velocity(seq, "ear")
    with pytest.raises(ValueError, match="unknown axis"):
        vertex_velocity(seq, "lip", "w")
    with pytest.raises(ValueError, match="empty"):
        vertex_velocity(seq, "empty")


def test_sequence_validation():
    with pytest.raises(ValueError):
        VertexSequence(np.zeros((0, 3, 3)))
    with pytest.raises(ValueError):
        VertexSequence(np.zeros((2, 3)))


def _driven(signals, per_region=2, rng=None):
    """Frames whose region signals equal ``signals`` (name -> non-negative series).

    Every series is played forwards with displacement +s*e_x and again with
    -s*e_x, so the per-vertex mean is the rest position and the displacement
    magnitude is exactly s.  Duplicating the samples leaves Pearson unchanged.
    """
    rng = rng or np.random.default_rng(0)
    names = list(signals)
    t = len(next(iter(signals.values())))
    n = per_region * len(names)
    rest = rng.normal(size=(n, 3))
    frames = np.repeat(rest[None], 2 * t, axis=0)
    regions = {}
    for k, name in enumerate(names):
        idx = list(range(k * per_region, (k + 1) * per_region))
        regions[name] = idx
        s = np.asarray(signals[name], dtype=float)
        frames[:t, idx, 0] += s[:, None]
        frames[t:, idx, 0] -= s[:, None]
    return VertexSequence(frames, 30.0, regions)


def test_same_sinusoid_gives_unit_weight():
    s = 1.5 + np.sin(np.linspace(0, 4 * np.pi, 60, endpoint=False))
    g = region_correlation(_driven({"a": s, "b": s}))
    assert abs(g.weight("a", "b") - 1.0) <= 1e-9
    assert abs(g.self_corr["a"] - 1.0) <= 1e-9


def test_sine_and_cosine_are_uncorrelated():
    t = np.linspace(0, 4 * np.pi, 80, endpoint=False)
    # quadrature oracle: the correlation integral of sin and cos over whole periods
    grid = np.linspace(0, 2 * np.pi, 20001)
    integral = np.trapezoid(np.sin(grid) * np.cos(grid), grid) / np.pi
    assert abs(integral) <= 1e-6
    seq = _driven({"a": 2 + np.sin(t), "b": 2 + np.cos(t)})
    w = pearson(2 + np.sin(t), 2 + np.cos(t))
    assert abs(w - integral) <= 0.05
    g = region_correlation(seq, threshold=0.5)
    assert g.edges == []


def _mixed(rng, t=40):
    """Three signals with pairwise correlations ab=0.9, ac=0.3, bc=0.6 by construction."""
    x = rng.normal(size=(t, 3))
    x -= x.mean(axis=0)
    q, _ = np.linalg.qr(x)               # orthonormal, zero-mean columns
    target = np.array([[1.0, 0.9, 0.3], [0.9, 1.0, 0.6], [0.3, 0.6, 1.0]])
    mixed = q @ np.linalg.cholesky(target).T
    return {name: 5.0 + mixed[:, i] for i, name in enumerate("abc")}, target


def test_constructed_correlations_keep_two_edges(rng):
    signals, target = _mixed(rng)
    g = region_correlation(_driven(signals), threshold=0.5)
    assert {(a, b) for a, b, _ in g.edges} == {("a", "b"), ("b", "c")}
    assert abs(g.weight("a", "b") - 0.9) <= 1e-9
    assert abs(g.weight("b", "c") - 0.6) <= 1e-9
    assert g.weight("a", "c") is None
    assert g.weight("b", "a") == g.weight("a", "b")


@given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 100), shift=st.floats(0, 10))
def test_weights_invariant_under_positive_affine_maps(seed, scale, shift):
    rng = np.random.default_rng(seed)
    signals, _ = _mixed(rng, 30)
    before = region_correlation(_driven(signals), threshold=-1.0)
    signals["b"] = scale * signals["b"] + shift
    after = region_correlation(_driven(signals), threshold=-1.0)
    for (a, b, w0), (_, _, w1) in zip(before.edges, after.edges):
        assert abs(w0 - w1) <= 1e-9
        assert -1.0 <= w1 <= 1.0


def test_static_region_is_degenerate():
    s = 1.0 + np.sin(np.linspace(0, 2 * np.pi, 20, endpoint=False))
    g = region_correlation(_driven({"a": s, "b": s, "still": np.zeros(20)}))
    assert g.degenerate == ["still"]
    assert all("still" not in (a, b) for a, b, _ in g.edges)
    d = g.to_dict()
    assert d["self_corr"]["still"] is None
    assert json.loads(json.dumps(d))["edges"][0]["a"] == "a"


def test_correlation_errors(rng):
    seq = _seq(rng.normal(size=(2, 8, 3)))
    with pytest.raises(ValueError, match="3 frames"):
        region_correlation(seq)
    seq = _seq(rng.normal(size=(5, 8, 3)))
    with pytest.raises(ValueError, match="2 regions"):
        region_correlation(seq, ["lip"])
    with pytest.raises(ValueError, match="duplicate"):
        region_correlation(seq, ["lip", "lip"])
    with pytest.raises(ValueError):
        pearson(np.ones(4), np.arange(4.0))


def test_graph_has_no_self_edges(rng):
    g = region_correlation(_seq(rng.normal(size=(6, 8, 3))), threshold=-1.0)
    assert isinstance(g, CorrelationGraph)
    assert all(a != b for a, b, _ in g.edges)
    assert len(g.edges) == 3


def test_identical_sequences_give_zero_metrics(rng):
    a = rng.normal(size=(4, 8, 3))
    m = lip_metrics(_seq(a), _seq(a.copy()))
    assert m == {"l_max_lip": 0.0, "l_mean_lip": 0.0, "l_max_upper": 0.0, "l_max_face": 0.0}


def test_single_displacement_example(rng):
    gt = rng.normal(size=(4, 8, 3))
    pred = gt.copy()
    pred[2, 1, 1] += 0.002
    m = lip_metrics(_seq(pred), _seq(gt))
    assert m["l_max_lip"] == pytest.approx(5e-4, abs=1e-12)
    assert m["l_mean_lip"] == pytest.approx(0.002 / 12, abs=1e-12)
    assert m["l_max_upper"] == 0.0
    assert m["l_max_face"] == pytest.approx(5e-4, abs=1e-12)


@given(seed=st.integers(0, 2**31))
def test_metric_properties(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(5, 8, 3))
    pred = gt + rng.normal(0, 0.01, gt.shape) * (rng.uniform(size=(5, 8, 1)) > 0.5)
    m = lip_metrics(_seq(pred), _seq(gt))
    assert all(v >= 0 for v in m.values())
    assert m["l_mean_lip"] <= m["l_max_lip"]
    rot = rotation_about(rng.normal(size=3), rng.uniform(0, np.pi))
    shift = rng.normal(size=3)
    moved = lip_metrics(_seq(pred @ rot.T + shift), _seq(gt @ rot.T + shift))
    for k in m:
        assert abs(moved[k] - m[k]) <= 1e-9


def test_shape_mismatch_and_missing_region(rng):
    with pytest.raises(ValueError, match="shape mismatch"):
        lip_metrics(_seq(rng.normal(size=(4, 8, 3))), _seq(rng.normal(size=(3, 8, 3))))
    a = rng.normal(size=(4, 8, 3))
    with pytest.raises(KeyError, match="upper"):
        lip_metrics(_seq(a), _seq(a), {"lip": [0], "face": [1]})


def test_write_json_is_stable(tmp_path):
    write_json({"b": 1.0, "a": [1, 2]}, tmp_path / "x.json")
    text = (tmp_path / "x.json").read_text()
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [1, 2], "b": 1.0}
