"""Linear morphable face model: parameters, face assembly, albedo, synthesis and I/O.

A face is the mean shape plus identity and expression deformations plus a free
per-vertex offset field::

    S = mean_shape + B_id @ alpha + B_exp @ beta + R

Bases are stored as (3n, k) matrices whose rows are ordered x0, y0, z0, x1, ...
so ``(B @ alpha).reshape(n, 3)`` gives per-vertex displacements.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import ConvexHull

FORMAT_VERSION = 1
MANDATORY_REGIONS = ("lip", "upper", "face")
ARRAY_NAMES = ("mean_shape", "identity_basis", "expression_basis", "texture_mean", "texture_basis")

# Default basis sizes, typical of widely used face models.
DEFAULT_K_ID = 80
DEFAULT_K_EXP = 64
DEFAULT_K_TEX = 80
SH_COEFFS = 27


class ModelFormatError(ValueError):
    """Raised when a model container or in-memory model fails validation."""


@dataclass(frozen=True, eq=False)
class MorphableModel:
    mean_shape: np.ndarray
    identity_basis: np.ndarray
    expression_basis: np.ndarray
    texture_mean: np.ndarray
    texture_basis: np.ndarray
    triangles: np.ndarray
    landmark_indices: np.ndarray
    regions: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_model(self)

    @property
    def vertex_count(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def k_id(self) -> int:
        return self.identity_basis.shape[1]

    @property
    def k_exp(self) -> int:
        return self.expression_basis.shape[1]

    @property
    def k_tex(self) -> int:
        return self.texture_basis.shape[1]

    def region(self, name: str) -> np.ndarray:
        if name not in self.regions:
            raise KeyError(f"unknown region {name!r}; known: {sorted(self.regions)}")
        return self.regions[name]

    def bbox_diagonal(self, vertices: np.ndarray | None = None) -> float:
        v = self.mean_shape if vertices is None else vertices
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))

    def zero_params(self, camera_ids=(0,)) -> "FaceParams":
        return FaceParams(
            alpha=np.zeros(self.k_id),
            beta=np.zeros(self.k_exp),
            delta=np.zeros(self.k_tex),
            gamma={int(c): default_gamma() for c in camera_ids},
        )


@dataclass
class FaceParams:
    """Identity, expression, texture and per-camera SH lighting coefficients."""

    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    gamma: dict = field(default_factory=dict)

    def copy(self) -> "FaceParams":
        return FaceParams(
            alpha=self.alpha.copy(),
            beta=self.beta.copy(),
            delta=self.delta.copy(),
            gamma={c: g.copy() for c, g in self.gamma.items()},
        )


@dataclass
class VertexOffsets:
    offsets: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "VertexOffsets":
        return cls(np.zeros((n, 3)))

    def copy(self) -> "VertexOffsets":
        return VertexOffsets(self.offsets.copy())


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    albedo: np.ndarray | None = None


def default_gamma() -> np.ndarray:
    """Ambient-only lighting under which shaded color equals albedo."""
    from .render import SH_C0

    g = np.zeros(SH_COEFFS)
    g[0::9] = 1.0 / SH_C0
    return g


def validate_model(model: MorphableModel) -> None:
    mean = model.mean_shape
    if mean.ndim != 2 or mean.shape[1] != 3 or mean.shape[0] < 1:
        raise ModelFormatError(f"mean_shape must be n x 3, got {mean.shape}")
    n = mean.shape[0]
    for name in ("identity_basis", "expression_basis", "texture_basis"):
        b = getattr(model, name)
        if b.ndim != 2 or b.shape[0] != 3 * n:
            raise ModelFormatError(f"{name} must have 3n={3 * n} rows, got shape {b.shape}")
    if model.texture_mean.shape != (n, 3):
        raise ModelFormatError(f"texture_mean must be {(n, 3)}, got {model.texture_mean.shape}")
    tri = model.triangles
    if tri.ndim != 2 or tri.shape[1] != 3:
        raise ModelFormatError(f"triangles must be m x 3, got {tri.shape}")
    if tri.size and (tri.min() < 0 or tri.max() >= n):
        raise ModelFormatError("triangle index out of range")
    lm = model.landmark_indices
    if lm.size and (lm.min() < 0 or lm.max() >= n):
        raise ModelFormatError("landmark index out of range")
    for name in MANDATORY_REGIONS:
        if name not in model.regions:
            raise ModelFormatError(f"missing mandatory region {name!r}")
    for name, idx in model.regions.items():
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ModelFormatError(f"region {name!r} index out of range")


def _check_len(name: str, vec: np.ndarray, expected: int) -> None:
    if vec.ndim != 1 or vec.shape[0] != expected:
        raise ValueError(f"{name} has shape {vec.shape}, expected ({expected},)")


def shape_vertices(model: MorphableModel, alpha, beta, offsets=None) -> np.ndarray:
    """Vertex positions (n x 3) for the given coefficients and optional offsets."""
    n = model.vertex_count
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    _check_len("alpha", alpha, model.k_id)
    _check_len("beta", beta, model.k_exp)
    v = model.mean_shape + (model.identity_basis @ alpha + model.expression_basis @ beta).reshape(n, 3)
    if offsets is not None:
        if offsets.shape != (n, 3):
            raise ValueError(f"offsets has shape {offsets.shape}, expected {(n, 3)}")
        v = v + offsets
    return v


def assemble_face(model: MorphableModel, params: FaceParams, offsets: VertexOffsets | None = None) -> Mesh:
    r = None if offsets is None else offsets.offsets
    return Mesh(shape_vertices(model, params.alpha, params.beta, r), model.triangles)


def face_albedo_unclamped(model: MorphableModel, delta) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    _check_len("delta", delta, model.k_tex)
    return model.texture_mean + (model.texture_basis @ delta).reshape(-1, 3)


def face_albedo(model: MorphableModel, delta) -> np.ndarray:
    """Per-vertex albedo in [0, 1]; clamping follows the affine texture map."""
    return np.clip(face_albedo_unclamped(model, delta), 0.0, 1.0)


# --------------------------------------------------------------------------
# synthetic model generation


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64) + 0.5
    y = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - y * y)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)


def _outward_hull(points: np.ndarray) -> np.ndarray:
    tri = ConvexHull(points).simplices.astype(np.int64)
    a, b, c = points[tri[:, 0]], points[tri[:, 1]], points[tri[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    # canonical order so the output does not depend on qhull's internal ordering
    rot = np.argmin(tri, axis=1)
    tri = np.stack([np.roll(t, -k) for t, k in zip(tri, rot)])
    return tri[np.lexsort(tri.T[::-1])]


def adjacency(triangles: np.ndarray, n: int) -> sparse.csr_matrix:
    """Symmetric 0/1 vertex adjacency matrix of a triangle mesh."""
    e = edges_from_triangles(triangles)
    data = np.ones(2 * len(e))
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


def edges_from_triangles(triangles: np.ndarray) -> np.ndarray:
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def umbrella_operator(triangles: np.ndarray, n: int) -> sparse.csr_matrix:
    """Uniform umbrella Laplacian L with (L x)_v = x_v - mean of neighbours."""
    a = adjacency(triangles, n)
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return (sparse.identity(n, format="csr") - sparse.diags(inv) @ a).tocsr()


def _smooth_basis(rng, lap, n, k, weight, scales, passes):
    cols = []
    for _ in range(k):
        f = rng.standard_normal((n, 3)) * weight[:, None]
        for _ in range(passes):
            f = f - 0.5 * (lap @ f)
        cols.append(f.reshape(-1))
    if k == 0:
        return np.zeros((3 * n, 0))
    q, _ = np.linalg.qr(np.stack(cols, axis=1))
    return q * (scales * np.sqrt(n))[None, :]


# landmark directions on the unit head sphere: front is -z, up is -y
_LANDMARK_DIRS = np.array([
    [0.0, 0.05, -1.0],     # nose tip
    [0.0, -0.35, -0.94],   # nose bridge
    [-0.45, -0.35, -0.82], # right eye outer
    [-0.18, -0.33, -0.93], # right eye inner
    [0.18, -0.33, -0.93],  # left eye inner
    [0.45, -0.35, -0.82],  # left eye outer
    [-0.32, 0.45, -0.83],  # mouth right
    [0.32, 0.45, -0.83],   # mouth left
    [0.0, 0.36, -0.93],    # upper lip
    [0.0, 0.55, -0.83],    # lower lip
    [0.0, 0.82, -0.57],    # chin
    [-0.7, 0.1, -0.7],     # right cheek
    [0.7, 0.1, -0.7],      # left cheek
])
_MOUTH_DIR = np.array([0.0, 0.46, -0.89])


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _nearest_region(dirs, center, radius, minimum=1):
    cosang = dirs @ _unit(center)
    idx = np.flatnonzero(cosang >= np.cos(radius))
    if idx.size < minimum:
        idx = np.sort(np.argsort(-cosang, kind="stable")[:minimum])
    return idx.astype(np.int64)


def synth_model(seed: int, n: int = 642, k_id: int = DEFAULT_K_ID, k_exp: int = DEFAULT_K_EXP,
                k_tex: int = DEFAULT_K_TEX, smoothing_passes: int = 12) -> MorphableModel:
    """Generate a deterministic sphere-like head with smooth orthogonal bases.

    Bases are built from Gaussian random fields smoothed by ``smoothing_passes``
    umbrella-Laplacian passes and then orthogonalized column-wise; column ``j``
    is scaled so a unit coefficient moves vertices by a decaying RMS amount.
    """
    if n < 12:
        raise ValueError(f"vertex count too small: need n >= 12, got {n}")
    if min(k_id, k_exp, k_tex) < 0:
        raise ValueError("basis dimensions must be non-negative")
    if smoothing_passes < 10:
        raise ValueError("at least 10 smoothing passes are required")
    rng = np.random.default_rng(seed)

    dirs = _fibonacci_sphere(n)
    triangles = _outward_hull(dirs)

    # ellipsoidal head with a nose bump and a flattened face front
    nose = np.exp(-np.sum((dirs - _unit(np.array([0.0, 0.0, -1.0]))) ** 2, axis=1) / 0.04)
    brow = np.exp(-np.sum((dirs - _unit(np.array([0.0, -0.45, -0.9]))) ** 2, axis=1) / 0.08)
    radial = 1.0 + 0.16 * nose + 0.04 * brow
    pts = dirs * radial[:, None] * np.array([0.78, 1.0, 0.86])
    pts = pts - 0.5 * (pts.max(axis=0) + pts.min(axis=0))
    pts = pts / np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))

    lap = umbrella_operator(triangles, n)

    mouth_w = np.exp(-np.sum((dirs - _unit(_MOUTH_DIR)) ** 2, axis=1) / 0.3)
    front_w = 0.25 + 0.75 * np.clip(-dirs[:, 2], 0.0, 1.0)
    identity_basis = _smooth_basis(rng, lap, n, k_id, np.ones(n), 0.03 * 0.85 ** np.arange(k_id), smoothing_passes)
    expression_basis = _smooth_basis(rng, lap, n, k_exp, 0.2 + mouth_w, 0.02 * 0.88 ** np.arange(k_exp),
                                     smoothing_passes)
    texture_basis = _smooth_basis(rng, lap, n, k_tex, front_w, 0.06 * 0.85 ** np.arange(k_tex), smoothing_passes)

    tex_field = rng.standard_normal((n, 3))
    for _ in range(smoothing_passes):
        tex_field = tex_field - 0.5 * (lap @ tex_field)
    texture_mean = np.clip(np.array([0.72, 0.52, 0.42]) + 0.08 * tex_field / (np.abs(tex_field).max() + 1e-12),
                           0.05, 0.95)

    landmarks = []
    for d in _LANDMARK_DIRS[: min(len(_LANDMARK_DIRS), n)]:
        order = np.argsort(-(dirs @ _unit(d)), kind="stable")
        landmarks.append(next(int(i) for i in order if int(i) not in landmarks))
    landmarks = np.asarray(landmarks, dtype=np.int64)

    bridge_y = pts[landmarks[1], 1]
    regions = {
        "lip": _nearest_region(dirs, _MOUTH_DIR, 0.28),
        "upper": np.flatnonzero(pts[:, 1] <= bridge_y).astype(np.int64),
        "face": np.flatnonzero(dirs[:, 2] <= -0.2).astype(np.int64),
        "nose": _nearest_region(dirs, np.array([0.0, 0.0, -1.0]), 0.25),
        "chin": _nearest_region(dirs, np.array([0.0, 0.85, -0.53]), 0.25),
        "forehead": _nearest_region(dirs, np.array([0.0, -0.75, -0.66]), 0.3),
        "cheek_right": _nearest_region(dirs, np.array([-0.7, 0.15, -0.7]), 0.3),
        "cheek_left": _nearest_region(dirs, np.array([0.7, 0.15, -0.7]), 0.3),
    }
    if regions["face"].size == 0:
        regions["face"] = _nearest_region(dirs, np.array([0.0, 0.0, -1.0]), 0.0)

    return MorphableModel(
        mean_shape=pts,
        identity_basis=identity_basis,
        expression_basis=expression_basis,
        texture_mean=texture_mean,
        texture_basis=texture_basis,
        triangles=triangles,
        landmark_indices=landmarks,
        regions=regions,
    )


# --------------------------------------------------------------------------
# container I/O


def _f32(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype="<f4")


def save_model(model: MorphableModel, path) -> None:
    """Write ``model.json`` + ``model.bin`` into directory ``path``.

    Arrays are stored as little-endian float32; float64 inputs are rounded.
    """
    os.makedirs(path, exist_ok=True)
    table = {}
    blobs = []
    offset = 0
    for name in ARRAY_NAMES:
        a = _f32(getattr(model, name))
        raw = a.tobytes(order="C")
        table[name] = {"dtype": "f32le", "shape": list(a.shape), "byte_offset": offset, "byte_length": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "n": model.vertex_count,
        "dims": {"k_id": model.k_id, "k_exp": model.k_exp, "k_tex": model.k_tex},
        "arrays": table,
        "triangles": model.triangles.tolist(),
        "landmark_indices": model.landmark_indices.tolist(),
        "regions": {k: np.asarray(v).tolist() for k, v in sorted(model.regions.items())},
    }
    with open(os.path.join(path, "model.bin"), "wb") as f:
        f.write(b"".join(blobs))
    with open(os.path.join(path, "model.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_model(path) -> MorphableModel:
    mpath = os.path.join(path, "model.json")
    bpath = os.path.join(path, "model.bin")
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"missing model manifest {mpath}")
    if not os.path.exists(bpath):
        raise FileNotFoundError(f"missing model blob {bpath}")
    with open(mpath) as f:
        manifest = json.load(f)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unknown container version {version!r}")
    with open(bpath, "rb") as f:
        blob = f.read()

    n = int(manifest["n"])
    dims = manifest["dims"]
    expected = {
        "mean_shape": (n, 3),
        "identity_basis": (3 * n, int(dims["k_id"])),
        "expression_basis": (3 * n, int(dims["k_exp"])),
        "texture_mean": (n, 3),
        "texture_basis": (3 * n, int(dims["k_tex"])),
    }
    total = 0
    arrays = {}
    for name in ARRAY_NAMES:
        entry = manifest["arrays"].get(name)
        if entry is None:
            raise ModelFormatError(f"array table is missing {name}")
        if entry["dtype"] != "f32le":
            raise ModelFormatError(f"{name}: unsupported dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        if shape != expected[name]:
            raise ModelFormatError(f"{name}: stored shape {shape} does not match declared {expected[name]}")
        start, length = int(entry["byte_offset"]), int(entry["byte_length"])
        if length != 4 * int(np.prod(shape)):
            raise ModelFormatError(f"{name}: byte_length {length} inconsistent with shape {shape}")
        if start + length > len(blob):
            raise ModelFormatError(f"blob length mismatch: {name} needs bytes [{start}, {start + length}) "
                                   f"but model.bin has {len(blob)}")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=start) \
            .reshape(shape).astype(np.float64)
        total = max(total, start + length)
    if total != len(blob):
        raise ModelFormatError(f"blob length mismatch: manifest covers {total} bytes, model.bin has {len(blob)}")

    return MorphableModel(
        triangles=np.asarray(manifest["triangles"], dtype=np.int64).reshape(-1, 3),
        landmark_indices=np.asarray(manifest["landmark_indices"], dtype=np.int64),
        regions={k: np.asarray(v, dtype=np.int64) for k, v in manifest["regions"].items()},
        **arrays,
    )


def quantize_model(model: MorphableModel) -> MorphableModel:
    """Return the model as it reads back from disk (arrays rounded to float32)."""
    arrays = {name: _f32(getattr(model, name)).astype(np.float64) for name in ARRAY_NAMES}
    return MorphableModel(triangles=model.triangles.copy(), landmark_indices=model.landmark_indices.copy(),
                          regions={k: v.copy() for k, v in model.regions.items()}, **arrays)
