"""Sequence statistics (vertex velocity, regional motion correlation) and lip-sync metrics."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class VertexSequence:
    frames: np.ndarray                          # (T, n, 3)
    fps: float = 30.0
    region_map: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ValueError(f"frames must be T x n x 3, got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("sequence has no frames")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        self.region_map = {k: np.asarray(v, dtype=np.int64) for k, v in self.region_map.items()}

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def vertex_count(self) -> int:
        return self.frames.shape[1]

    def region(self, name: str) -> np.ndarray:
        try:
            idx = self.region_map[name]
        except KeyError:
            raise KeyError(f"unknown region {name!r}; known: {sorted(self.region_map)}") from None
        if idx.size == 0:
            raise ValueError(f"region {name!r} is empty")
        return idx


def vertex_velocity(seq: VertexSequence, region: str, axis: str = "all") -> float:
    """Mean absolute per-frame displacement of the region's vertices along ``axis``.

    Units are model units per frame. ``axis="all"`` averages the three
    per-axis values.
    """
    if seq.frame_count < 2:
        raise ValueError("velocity needs at least 2 frames")
    idx = seq.region(region)
    step = np.abs(np.diff(seq.frames[:, idx, :], axis=0))      # (T-1, k, 3)
    if axis == "all":
        return float(step.mean(axis=(0, 1)).mean())
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; expected x, y, z or all")
    return float(step[..., AXES[axis]].mean())


def _is_flat(s: np.ndarray) -> bool:
    return bool(np.std(s) <= 1e-12 * (1.0 + np.abs(s).max()))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    denom = np.sqrt((a @ a) * (b @ b))
    if denom == 0:
        raise ValueError("correlation of a constant signal is undefined")
    return float(np.clip((a @ b) / denom, -1.0, 1.0))


def region_signals(seq: VertexSequence, regions) -> dict:
    """Per-frame mean distance of each region's vertices from their sequence-mean position."""
    disp = np.linalg.norm(seq.frames - seq.frames.mean(axis=0), axis=2)    # (T, n)
    return {r: disp[:, seq.region(r)].mean(axis=1) for r in regions}


def _self_correlation(disp: np.ndarray) -> float:
    live = [c for c in range(disp.shape[1]) if not _is_flat(disp[:, c])]
    if len(live) < 2:
        return float("nan")
    x = disp[:, live] - disp[:, live].mean(axis=0)
    x /= np.linalg.norm(x, axis=0)
    c = np.clip(x.T @ x, -1.0, 1.0)
    k = len(live)
    return float((c.sum() - np.trace(c)) / (k * (k - 1)))


@dataclass
class CorrelationGraph:
    regions: list
    self_corr: dict
    edges: list                     # (region_a, region_b, weight), a before b in ``regions``
    threshold: float = 0.5
    degenerate: list = field(default_factory=list)

    def weight(self, a: str, b: str):
        for p, q, w in self.edges:
            if {p, q} == {a, b}:
                return w
        return None

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "regions": list(self.regions),
            "self_corr": {k: (None if np.isnan(v) else v) for k, v in self.self_corr.items()},
            "degenerate": list(self.degenerate),
            "edges": [{"a": a, "b": b, "weight": w} for a, b, w in self.edges],
        }


def region_correlation(seq: VertexSequence, regions=None, threshold: float = 0.5) -> CorrelationGraph:
    """Correlation graph between facial regions.

    Each region is summarized per frame by its mean displacement magnitude
    from the sequence-mean face. Edges hold the Pearson coefficient of two
    region signals and are kept when it is at least ``threshold``. Regions
    with a constant signal are marked degenerate and get no edges.
    """
    regions = sorted(seq.region_map) if regions is None else list(regions)
    if seq.frame_count < 3:
        raise ValueError("correlation needs at least 3 frames")
    if len(regions) < 2:
        raise ValueError("correlation needs at least 2 regions")
    if len(set(regions)) != len(regions):
        raise ValueError("duplicate region names")
    signals = region_signals(seq, regions)
    disp = np.linalg.norm(seq.frames - seq.frames.mean(axis=0), axis=2)
    degenerate = [r for r in regions if _is_flat(signals[r])]
    self_corr = {r: _self_correlation(disp[:, seq.region(r)]) for r in regions}
    edges = []
    for a, b in itertools.combinations(regions, 2):
        if a in degenerate or b in degenerate:
            continue
        w = pearson(signals[a], signals[b])
        if w >= threshold:
            edges.append((a, b, w))
    return CorrelationGraph(regions, self_corr, edges, threshold, degenerate)


def lip_metrics(pred: VertexSequence, gt: VertexSequence, regions: dict | None = None) -> dict:
    """Lip, upper-face and whole-face vertex errors between two aligned sequences."""
    if pred.frames.shape != gt.frames.shape:
        raise ValueError(f"shape mismatch: pred {pred.frames.shape} vs gt {gt.frames.shape}")
    regions = gt.region_map if regions is None else {k: np.asarray(v, dtype=np.int64) for k, v in regions.items()}
    for name in ("lip", "upper", "face"):
        if name not in regions or len(regions[name]) == 0:
            raise KeyError(f"missing region {name!r}")
    err = np.linalg.norm(pred.frames - gt.frames, axis=2)      # (T, n)

    def max_err(name):
        return float(err[:, regions[name]].max(axis=1).mean())

    return {
        "l_max_lip": max_err("lip"),
        "l_mean_lip": float(err[:, regions["lip"]].mean()),
        "l_max_upper": max_err("upper"),
        "l_max_face": max_err("face"),
    }


def write_json(obj: dict, path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")
