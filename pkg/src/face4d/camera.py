"""Rigid transforms, depth back-projection and multi-camera alignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .render import CameraIntrinsics

log = logging.getLogger(__name__)


class DegenerateConfigurationError(ValueError):
    pass


class NoCorrespondencesError(RuntimeError):
    pass


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return rodrigues(axis / np.linalg.norm(axis) * angle)


def rodrigues(w: np.ndarray) -> np.ndarray:
    """Rotation matrix for the axis-angle vector ``w``."""
    theta = float(np.linalg.norm(w))
    k = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if theta < 1e-12:
        return np.eye(3) + k
    k = k / theta
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def rotation_angle(r: np.ndarray) -> float:
    c = (np.trace(r) - 1.0) / 2.0
    # arccos loses precision near zero; use the antisymmetric part instead
    s = np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    return float(np.arctan2(s, c))


@dataclass(frozen=True)
class RigidTransform:
    """x -> rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m, orthonormalize_rotation: bool = False) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        r = orthonormalize(m[:3, :3]) if orthonormalize_rotation else m[:3, :3]
        return cls(r, m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        return vectors @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(orthonormalize(self.rotation @ other.rotation),
                              self.rotation @ other.translation + self.translation)


@dataclass
class RGBDFrame:
    camera_id: int
    color: np.ndarray          # (H, W, 3) uint8
    depth: np.ndarray          # (H, W) uint16 millimeters, 0 = invalid
    landmarks2d: np.ndarray    # (L, 2) pixel coordinates
    timestamp_index: int

    def color_linear(self) -> np.ndarray:
        return self.color.astype(np.float64) / 255.0

    def depth_meters(self) -> np.ndarray:
        return self.depth.astype(np.float64) / 1000.0


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray
    pixels: np.ndarray | None = None   # (m, 2) integer (u, v) when back-projected

    def __post_init__(self):
        if self.points.shape != self.normals.shape:
            raise ValueError("points and normals must have the same shape")

    def __len__(self) -> int:
        return self.points.shape[0]

    def transformed(self, transform: RigidTransform) -> "PointCloud":
        return PointCloud(transform.apply(self.points), transform.apply_vectors(self.normals), self.pixels)


def backproject_depth(depth: np.ndarray, intrinsics: CameraIntrinsics, stride: int = 1) -> PointCloud:
    """Back-project a millimeter depth image to camera-space points with normals.

    Normals are cross products of central differences on the full-resolution
    grid, oriented towards the camera.  A pixel is dropped when its depth or
    any of its four neighbours is zero, or when it lies on the image border.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    depth = np.asarray(depth)
    h, w = depth.shape
    z = depth.astype(np.float64) / 1000.0
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z], axis=-1)

    valid = z > 0
    ok = np.zeros_like(valid)
    ok[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2]
                      & valid[2:, 1:-1] & valid[:-2, 1:-1])
    mask = np.zeros_like(ok)
    mask[::stride, ::stride] = ok[::stride, ::stride]
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64))

    dx = pts[rows, cols + 1] - pts[rows, cols - 1]
    dy = pts[rows + 1, cols] - pts[rows - 1, cols]
    n = np.cross(dx, dy)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    p = pts[rows, cols]
    n = np.where(np.sum(n * p, axis=1, keepdims=True) > 0, -n, n)
    return PointCloud(p, n, np.stack([cols, rows], axis=1))


def landmarks_to_3d(landmarks2d: np.ndarray, depth: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-space 3D landmarks read through the depth image; NaN rows where depth is invalid."""
    lm = np.asarray(landmarks2d, dtype=np.float64)
    out = np.full((lm.shape[0], 3), np.nan)
    h, w = depth.shape
    for i, (u, v) in enumerate(lm):
        if not (np.isfinite(u) and np.isfinite(v)):
            continue
        iu, iv = int(round(u)), int(round(v))
        if not (0 <= iu < w and 0 <= iv < h):
            continue
        d = float(depth[iv, iu])
        if d <= 0:
            continue
        z = d / 1000.0
        out[i] = ((u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z)
    return out


def rigid_align(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` points onto ``dst`` (Kabsch)."""
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("rigid_align expects two m x 3 arrays of equal shape")
    if src.shape[0] < 3:
        raise DegenerateConfigurationError(f"degenerate configuration: need >= 3 landmarks, got {src.shape[0]}")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[0] == 0 or sv[1] / sv[0] < 1e-6:
        raise DegenerateConfigurationError("degenerate configuration: landmarks are collinear")
    u, _, vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(orthonormalize(r), cd - r @ cs)


def landmark_init_extrinsics(clouds_at_landmarks, master: int = 0) -> list:
    """Per-camera transforms into the master camera's frame from shared 3D landmarks.

    ``clouds_at_landmarks[i]`` holds camera ``i``'s back-projected landmarks
    (NaN rows are invalid).  The master camera maps by identity.
    """
    ref = np.asarray(clouds_at_landmarks[master], dtype=np.float64)
    out = []
    for i, pts in enumerate(clouds_at_landmarks):
        pts = np.asarray(pts, dtype=np.float64)
        if i == master:
            out.append(RigidTransform.identity())
            continue
        ok = np.all(np.isfinite(pts), axis=1) & np.all(np.isfinite(ref), axis=1)
        if ok.sum() < 3:
            raise DegenerateConfigurationError(
                f"degenerate configuration: camera {i} shares {int(ok.sum())} valid landmarks with the master")
        out.append(rigid_align(pts[ok], ref[ok]))
    return out


@dataclass
class IcpResult:
    transform: RigidTransform
    residual: float
    iterations: int
    history: list


def _point_to_plane(src_pts, target, tree, rejection, max_distance):
    dist, idx = tree.query(src_pts)
    keep = dist <= max_distance
    if keep.any():
        keep &= dist <= rejection * np.median(dist[keep])
    if not keep.any():
        raise NoCorrespondencesError("no correspondences within the rejection radius")
    p = src_pts[keep]
    q = target.points[idx[keep]]
    n = target.normals[idx[keep]]
    r = np.sum((p - q) * n, axis=1)
    return p, n, r


def icp_point_to_plane(source: PointCloud, target: PointCloud, init: RigidTransform | None = None,
                       max_iters: int = 50, tol: float = 1e-10, rejection: float = 3.0,
                       max_distance: float = 0.25, max_halvings: int = 6) -> IcpResult:
    """Refine ``init`` (source -> target) by linearized point-to-plane ICP.

    Correspondences are nearest target points; pairs farther than
    ``max_distance`` or ``rejection`` times the median distance are dropped.
    A step is kept only if it does not increase the mean absolute
    point-to-plane residual (it is halved up to ``max_halvings`` times
    otherwise), so the residual history is non-increasing.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("ICP needs non-empty point clouds")
    tree = cKDTree(target.points)
    current = init or RigidTransform.identity()
    p, n, r = _point_to_plane(current.apply(source.points), target, tree, rejection, max_distance)
    residual = float(np.mean(np.abs(r)))
    history = [residual]
    it = 0
    for it in range(1, max_iters + 1):
        a = np.hstack([np.cross(p, n), n])
        x, *_ = np.linalg.lstsq(a, -r, rcond=None)
        accepted = None
        step = x
        for _ in range(max_halvings + 1):
            r_inc = rodrigues(step[:3])
            cand = RigidTransform(orthonormalize(r_inc @ current.rotation), r_inc @ current.translation + step[3:])
            try:
                p2, n2, r2 = _point_to_plane(cand.apply(source.points), target, tree, rejection, max_distance)
            except NoCorrespondencesError:
                step = step / 2.0
                continue
            res2 = float(np.mean(np.abs(r2)))
            if res2 <= residual:
                accepted = (cand, p2, n2, r2, res2)
                break
            step = step / 2.0
        if accepted is None:
            log.debug("icp: no descent step at iteration %d", it)
            break
        current, p, n, r, residual = accepted
        history.append(residual)
        if np.linalg.norm(step) < tol:
            break
    return IcpResult(current, residual, it, history)
