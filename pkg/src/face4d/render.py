"""Fixed-visibility differentiable rasterizer with spherical-harmonics shading.

Visibility (which triangle owns each pixel) comes from a z-buffered scan
conversion and is treated as constant.  Given the owning triangle, the
perspective-correct barycentrics and depth of a pixel are the ray/plane
intersection of the pixel's viewing ray with the triangle::

    d = ((u - cx) / fx, (v - cy) / fy, 1)
    q = M^-1 d,   M = [V0 V1 V2]   (camera-space vertices as columns)
    s = sum(q),   b = q / s,   z = 1 / s

which is smooth in the vertices, so gradients are exact away from
silhouette and occlusion boundaries.  Pixel centers sit at integer
coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from PIL import Image

NEAR_PLANE = 1e-3  # meters

# first nine real SH basis constants, no Condon-Shortley phase
SH_C0 = 0.5 / math.sqrt(math.pi)             # 0.282094791774
SH_C1 = math.sqrt(3.0 / (4.0 * math.pi))     # 0.488602511903
SH_C2 = 0.5 * math.sqrt(15.0 / math.pi)      # 1.092548430592
SH_C3 = 0.25 * math.sqrt(5.0 / math.pi)      # 0.315391565253
SH_C4 = 0.25 * math.sqrt(15.0 / math.pi)     # 0.546274215296


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))

    def project(self, points: np.ndarray) -> np.ndarray:
        z = points[..., 2]
        return np.stack([self.fx * points[..., 0] / z + self.cx,
                         self.fy * points[..., 1] / z + self.cy], axis=-1)

    def rays(self, u, v) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


# --------------------------------------------------------------------------
# spherical harmonics


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """Evaluate the nine real SH basis functions at unit directions, shape (n, 9)."""
    x, y, z = normals[:, 0], normals[:, 1], normals[:, 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ], axis=1)


def sh_basis_jacobian(normals: np.ndarray) -> np.ndarray:
    """d Y_k / d normal, shape (n, 9, 3)."""
    x, y, z = normals[:, 0], normals[:, 1], normals[:, 2]
    zero = np.zeros_like(x)
    rows = [
        (zero, zero, zero),
        (zero, zero + SH_C1, zero),
        (zero, zero, zero + SH_C1),
        (zero + SH_C1, zero, zero),
        (SH_C2 * y, SH_C2 * x, zero),
        (zero, SH_C2 * z, SH_C2 * y),
        (zero, zero, 6.0 * SH_C3 * z),
        (SH_C2 * z, zero, SH_C2 * x),
        (2.0 * SH_C4 * x, -2.0 * SH_C4 * y, zero),
    ]
    return np.stack([np.stack(r, axis=1) for r in rows], axis=1)


def _check_gamma(gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (27,):
        raise ValueError(f"gamma must have 27 entries, got shape {gamma.shape}")
    if not np.all(np.isfinite(gamma)):
        raise ValueError("gamma must be finite")
    return gamma


def sh_shade(albedo: np.ndarray, normals: np.ndarray, gamma) -> np.ndarray:
    """Per-vertex color ``albedo_c * sum_k gamma[9c + k] * Y_k(normal)``."""
    gamma = _check_gamma(gamma)
    norms = np.linalg.norm(normals, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise ValueError("sh_shade expects unit normals")
    irradiance = sh_basis(normals) @ gamma.reshape(3, 9).T
    return albedo * irradiance


def sh_shade_backward(grad_color, albedo, normals, gamma):
    """Gradients of a scalar w.r.t. (albedo, normals, gamma) given d/d shaded color."""
    gamma = _check_gamma(gamma).reshape(3, 9)
    y = sh_basis(normals)
    irradiance = y @ gamma.T
    grad_albedo = grad_color * irradiance
    grad_irr = grad_color * albedo                     # (n, 3)
    grad_gamma = (grad_irr.T @ y).reshape(-1)          # (3, 9) -> 27
    jac = sh_basis_jacobian(normals)                   # (n, 9, 3)
    grad_normals = np.einsum("nc,ck,nkj->nj", grad_irr, gamma, jac)
    return grad_albedo, grad_normals, grad_gamma


# --------------------------------------------------------------------------
# vertex normals


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals, renormalized to unit length."""
    return _vertex_normals(vertices, triangles)[0]


def _vertex_normals(vertices, triangles):
    v0, v1, v2 = (vertices[triangles[:, i]] for i in range(3))
    face = np.cross(v1 - v0, v2 - v0)  # length = 2 * area
    acc = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(acc, triangles[:, i], face)
    length = np.linalg.norm(acc, axis=1)
    safe = np.where(length > 0, length, 1.0)
    normals = acc / safe[:, None]
    normals[length == 0] = (0.0, 0.0, 1.0)
    return normals, acc, safe


def vertex_normals_backward(grad_normals, vertices, triangles):
    normals, _, length = _vertex_normals(vertices, triangles)
    grad_acc = (grad_normals - normals * np.sum(normals * grad_normals, axis=1, keepdims=True)) / length[:, None]
    g = grad_acc[triangles[:, 0]] + grad_acc[triangles[:, 1]] + grad_acc[triangles[:, 2]]
    v0, v1, v2 = (vertices[triangles[:, i]] for i in range(3))
    e1, e2 = v1 - v0, v2 - v0
    g1 = np.cross(e2, g)
    g2 = np.cross(g, e1)
    grad = np.zeros_like(vertices)
    np.add.at(grad, triangles[:, 1], g1)
    np.add.at(grad, triangles[:, 2], g2)
    np.add.at(grad, triangles[:, 0], -(g1 + g2))
    return grad


# --------------------------------------------------------------------------
# rasterization


@numba.njit(cache=True)
def _owns_edge(ax, ay, bx, by):
    # top-left rule for positively oriented triangles: each shared edge belongs
    # to exactly one of its two triangles
    dy = by - ay
    dx = bx - ax
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)


@numba.njit(cache=True)
def _scan_convert(uv, z, triangles, width, height, near):
    zbuf = np.full((height, width), np.inf)
    tri_id = np.full((height, width), -1, dtype=np.int64)
    for t in range(triangles.shape[0]):
        i0 = triangles[t, 0]
        i1 = triangles[t, 1]
        i2 = triangles[t, 2]
        z0 = z[i0]
        z1 = z[i1]
        z2 = z[i2]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        x0 = uv[i0, 0]
        y0 = uv[i0, 1]
        x1 = uv[i1, 0]
        y1 = uv[i1, 1]
        x2 = uv[i2, 0]
        y2 = uv[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0 or not np.isfinite(area):
            continue
        if area < 0.0:
            # swap vertices 1 and 2 so the edge tests see a positive orientation
            x1, x2 = x2, x1
            y1, y2 = y2, y1
            z1, z2 = z2, z1
            area = -area
        umin = max(0, int(math.ceil(min(x0, min(x1, x2)))))
        umax = min(width - 1, int(math.floor(max(x0, max(x1, x2)))))
        vmin = max(0, int(math.ceil(min(y0, min(y1, y2)))))
        vmax = min(height - 1, int(math.floor(max(y0, max(y1, y2)))))
        own0 = _owns_edge(x1, y1, x2, y2)
        own1 = _owns_edge(x2, y2, x0, y0)
        own2 = _owns_edge(x0, y0, x1, y1)
        for py in range(vmin, vmax + 1):
            for px in range(umin, umax + 1):
                w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
                w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
                w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not own0) or (w1 == 0.0 and not own1) or (w2 == 0.0 and not own2):
                    continue
                inv = (w0 / z0 + w1 / z1 + w2 / z2) / area
                depth = 1.0 / inv
                if depth < zbuf[py, px]:
                    zbuf[py, px] = depth
                    tri_id[py, px] = t
    return tri_id, zbuf


@dataclass
class RenderOutput:
    """Rendered images plus the fragment data needed for the backward pass.

    ``color`` is None when no vertex colors were supplied.  ``tri_id`` is -1
    on uncovered pixels; ``bary`` holds perspective-correct barycentrics in
    the triangle's stored vertex order.
    """

    color: np.ndarray | None
    depth: np.ndarray
    coverage: np.ndarray
    tri_id: np.ndarray
    bary: np.ndarray
    # fragment cache for the backward pass
    pixels: np.ndarray      # (P, 2) integer (row, col) of covered pixels
    frag_q: np.ndarray      # (P, 3) unnormalized ray coordinates M^-1 d
    frag_m: np.ndarray      # (P, 3, 3) triangle vertex matrices
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_colors: np.ndarray | None


def rasterize(vertices: np.ndarray, triangles: np.ndarray, intrinsics: CameraIntrinsics,
              vertex_colors: np.ndarray | None = None, tri_id: np.ndarray | None = None) -> RenderOutput:
    """Rasterize a camera-space mesh into depth (and optionally color) images.

    Passing ``tri_id`` from an earlier output skips scan conversion and reuses
    that visibility, which makes every pixel a smooth function of the inputs.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    if vertices.shape[0] == 0 or triangles.shape[0] == 0:
        raise ValueError("cannot rasterize an empty mesh")
    if not np.all(np.isfinite(vertices)):
        raise ValueError("mesh vertices must be finite")
    h, w = intrinsics.height, intrinsics.width
    if tri_id is None:
        z = vertices[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = intrinsics.project(vertices)
        uv = np.where(np.isfinite(uv), uv, 0.0)
        tri_id, _ = _scan_convert(uv, z, triangles, w, h, NEAR_PLANE)
    elif tri_id.shape != (h, w):
        raise ValueError(f"tri_id shape {tri_id.shape} does not match image {(h, w)}")

    coverage = tri_id >= 0
    rows, cols = np.nonzero(coverage)
    tids = tri_id[rows, cols]
    m = np.transpose(vertices[triangles[tids]], (0, 2, 1))  # columns are the three vertices
    d = intrinsics.rays(cols, rows)
    if len(tids):
        q = np.linalg.solve(m, d[:, :, None])[:, :, 0]
    else:
        q = np.zeros((0, 3))
    s = q.sum(axis=1)
    b = q / s[:, None]

    depth = np.full((h, w), np.inf)
    depth[rows, cols] = 1.0 / s
    bary = np.zeros((h, w, 3))
    bary[rows, cols] = b
    color = None
    if vertex_colors is not None:
        color = np.zeros((h, w, 3))
        color[rows, cols] = np.einsum("pk,pkc->pc", b, vertex_colors[triangles[tids]])
    return RenderOutput(color, depth, coverage, tri_id, bary, np.stack([rows, cols], axis=1), q, m,
                        vertices, triangles, vertex_colors)


def render_backward(out: RenderOutput, grad_color: np.ndarray | None = None,
                    grad_depth: np.ndarray | None = None):
    """Back-propagate image gradients with visibility frozen at the forward pass.

    Returns ``(grad_vertices, grad_vertex_colors)``; the second is None when
    the forward pass had no vertex colors.
    """
    h, w = out.depth.shape
    if grad_color is not None and grad_color.shape != (h, w, 3):
        raise ValueError(f"grad_color shape {grad_color.shape} does not match image {(h, w, 3)}")
    if grad_depth is not None and grad_depth.shape != (h, w):
        raise ValueError(f"grad_depth shape {grad_depth.shape} does not match image {(h, w)}")
    if grad_color is not None and out.vertex_colors is None:
        raise ValueError("color gradient given but the forward pass rendered no color")

    rows, cols = out.pixels[:, 0], out.pixels[:, 1]
    corners = out.triangles[out.tri_id[rows, cols]]           # (P, 3)
    q = out.frag_q
    s = q.sum(axis=1)
    b = q / s[:, None]
    grad_vertices = np.zeros_like(out.vertices)
    grad_vc = None if out.vertex_colors is None else np.zeros_like(out.vertex_colors)

    g_b = np.zeros_like(q)
    g_z = np.zeros_like(s)
    if grad_color is not None:
        gc = grad_color[rows, cols]                            # (P, 3)
        g_b += np.einsum("pc,pkc->pk", gc, out.vertex_colors[corners])
        for k in range(3):
            np.add.at(grad_vc, corners[:, k], b[:, k:k + 1] * gc)
    if grad_depth is not None:
        g_z += grad_depth[rows, cols]

    if len(s):
        wvec = (g_b - np.sum(b * g_b, axis=1, keepdims=True)) / s[:, None] - (g_z / s ** 2)[:, None]
        r = np.linalg.solve(np.transpose(out.frag_m, (0, 2, 1)), wvec[:, :, None])[:, :, 0]
        for k in range(3):
            np.add.at(grad_vertices, corners[:, k], -r * q[:, k:k + 1])
    return grad_vertices, grad_vc


# --------------------------------------------------------------------------
# debug dumps


def color_to_png(color: np.ndarray, path) -> None:
    img = np.round(np.clip(color, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def depth_to_png(depth: np.ndarray, path) -> None:
    mm = np.where(np.isfinite(depth), np.round(depth * 1000.0), 0.0)
    Image.fromarray(np.clip(mm, 0, 65535).astype(np.uint16)).save(path)
