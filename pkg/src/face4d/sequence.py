"""Reconstructed mesh-sequence container.

``seq.json`` carries frame count, vertex count, fps and a per-frame parameter
table; ``seq.bin`` holds the T x n x 3 vertices as little-endian float32,
frame-major.  ``frame_000000.obj`` optionally exports the first frame.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .model import FaceParams

SEQ_VERSION = 1


class SequenceFormatError(ValueError):
    pass


@dataclass
class SequenceData:
    vertices: np.ndarray            # (T, n, 3)
    fps: float = 30.0
    params: list = field(default_factory=list)   # FaceParams per frame, may be empty
    triangles: np.ndarray | None = None

    @property
    def frame_count(self) -> int:
        return self.vertices.shape[0]


def params_to_dict(p: FaceParams) -> dict:
    return {
        "alpha": p.alpha.tolist(),
        "beta": p.beta.tolist(),
        "delta": p.delta.tolist(),
        "gamma": {str(c): p.gamma[c].tolist() for c in sorted(p.gamma)},
    }


def params_from_dict(d: dict) -> FaceParams:
    return FaceParams(
        alpha=np.asarray(d["alpha"], dtype=np.float64),
        beta=np.asarray(d["beta"], dtype=np.float64),
        delta=np.asarray(d["delta"], dtype=np.float64),
        gamma={int(c): np.asarray(g, dtype=np.float64) for c, g in d["gamma"].items()},
    )


def write_obj(path, vertices: np.ndarray, triangles: np.ndarray) -> None:
    with open(path, "w") as f:
        for v in vertices:
            f.write(f"v {v[0]:.7g} {v[1]:.7g} {v[2]:.7g}\n")
        for t in triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def save_sequence(seq: SequenceData, path, export_obj: bool = True) -> None:
    os.makedirs(path, exist_ok=True)
    verts = np.ascontiguousarray(seq.vertices, dtype="<f4")
    if verts.ndim != 3 or verts.shape[2] != 3:
        raise SequenceFormatError(f"vertices must be T x n x 3, got {verts.shape}")
    manifest = {
        "format_version": SEQ_VERSION,
        "frame_count": int(verts.shape[0]),
        "n": int(verts.shape[1]),
        "fps": float(seq.fps),
        "dtype": "f32le",
        "frames": [params_to_dict(p) for p in seq.params],
    }
    with open(os.path.join(path, "seq.bin"), "wb") as f:
        f.write(verts.tobytes(order="C"))
    with open(os.path.join(path, "seq.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    if export_obj and seq.triangles is not None:
        write_obj(os.path.join(path, "frame_000000.obj"), verts[0], seq.triangles)


def load_sequence(path) -> SequenceData:
    mpath = os.path.join(path, "seq.json")
    bpath = os.path.join(path, "seq.bin")
    for p in (mpath, bpath):
        if not os.path.exists(p):
            raise FileNotFoundError(f"missing sequence file {p}")
    with open(mpath) as f:
        d = json.load(f)
    if d.get("format_version") != SEQ_VERSION:
        raise SequenceFormatError(f"unknown sequence version {d.get('format_version')!r}")
    t, n = int(d["frame_count"]), int(d["n"])
    with open(bpath, "rb") as f:
        blob = f.read()
    if len(blob) != 12 * t * n:
        raise SequenceFormatError(f"blob length mismatch: expected {12 * t * n} bytes, got {len(blob)}")
    verts = np.frombuffer(blob, dtype="<f4").reshape(t, n, 3).astype(np.float64)
    params = [params_from_dict(p) for p in d.get("frames", [])]
    if params and len(params) != t:
        raise SequenceFormatError("parameter table length does not match frame count")
    return SequenceData(verts, float(d.get("fps", 30.0)), params)
