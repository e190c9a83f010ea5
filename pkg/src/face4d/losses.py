"""Reconstruction loss terms.  Every function returns ``(value, gradient)``."""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .render import CameraIntrinsics, RenderOutput


class LossError(ValueError):
    pass


def loss_landmark3d(vertices: np.ndarray, landmark_indices: np.ndarray, observed: np.ndarray):
    """Mean squared distance between model landmarks and observed 3D points.

    Rows of ``observed`` containing NaN (no valid depth) are skipped.
    """
    observed = np.asarray(observed, dtype=np.float64)
    valid = np.all(np.isfinite(observed), axis=1)
    if not valid.any():
        raise LossError("no valid 3D landmarks")
    idx = landmark_indices[valid]
    diff = vertices[idx] - observed[valid]
    count = valid.sum()
    grad = np.zeros_like(vertices)
    np.add.at(grad, idx, 2.0 * diff / count)
    return float(np.sum(diff * diff) / count), grad


def loss_landmark2d(cam_vertices: np.ndarray, landmark_indices: np.ndarray, observed: np.ndarray,
                    intrinsics: CameraIntrinsics):
    """Mean squared reprojection error in pixels, divided by the squared image diagonal.

    ``cam_vertices`` are in this camera's frame; the gradient is w.r.t. them.
    """
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != (len(landmark_indices), 2):
        raise LossError(f"expected {len(landmark_indices)} landmarks, got array of shape {observed.shape}")
    p = cam_vertices[landmark_indices]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    if np.any(z <= 0):
        raise LossError("landmark behind camera")
    u = intrinsics.fx * x / z + intrinsics.cx
    v = intrinsics.fy * y / z + intrinsics.cy
    du, dv = u - observed[:, 0], v - observed[:, 1]
    scale = 1.0 / (len(landmark_indices) * intrinsics.diagonal ** 2)
    value = float(np.sum(du * du + dv * dv) * scale)
    gu, gv = 2.0 * du * scale, 2.0 * dv * scale
    g = np.stack([gu * intrinsics.fx / z, gv * intrinsics.fy / z,
                  -(gu * intrinsics.fx * x + gv * intrinsics.fy * y) / (z * z)], axis=1)
    grad = np.zeros_like(cam_vertices)
    np.add.at(grad, landmark_indices, g)
    return value, grad


def loss_rgb(rendered: RenderOutput, observed: np.ndarray):
    """Mean over covered pixels of the Euclidean norm of the RGB residual.

    ``observed`` is linear color in [0, 1].  Returns the gradient image
    with respect to the rendered color.
    """
    cov = rendered.coverage
    count = int(cov.sum())
    if count == 0:
        raise LossError("rendered image covers no pixels")
    diff = np.where(cov[..., None], rendered.color - observed, 0.0)
    norm = np.sqrt(np.sum(diff * diff, axis=-1))
    safe = np.where(norm > 0, norm, 1.0)
    grad = np.where((norm > 0)[..., None], diff / safe[..., None], 0.0) / count
    return float(norm.sum() / count), grad


def loss_depth(rendered: RenderOutput, observed: np.ndarray, trunc: float = 0.05):
    """Mean truncated absolute depth error (meters) over covered pixels with valid observations."""
    valid = rendered.coverage & (observed > 0)
    count = int(valid.sum())
    if count == 0:
        raise LossError("no pixel is both rendered and observed")
    diff = np.where(valid, rendered.depth - observed, 0.0)
    err = np.abs(diff)
    value = float(np.minimum(err, trunc).sum() / count)
    grad = np.where(valid & (err < trunc), np.sign(diff), 0.0) / count
    return value, grad


def loss_prior(alpha, beta, delta):
    alpha, beta, delta = (np.asarray(a, dtype=np.float64) for a in (alpha, beta, delta))
    value = float(alpha @ alpha + beta @ beta + delta @ delta)
    return value, (2.0 * alpha, 2.0 * beta, 2.0 * delta)


def loss_edge(vertices: np.ndarray, reference: np.ndarray, edges: np.ndarray):
    """Mean squared change of edge lengths relative to ``reference`` (held fixed)."""
    d = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    length = np.linalg.norm(d, axis=1)
    ref_length = np.linalg.norm(reference[edges[:, 1]] - reference[edges[:, 0]], axis=1)
    diff = length - ref_length
    m = len(edges)
    coef = np.where(length > 0, 2.0 * diff / (m * np.where(length > 0, length, 1.0)), 0.0)
    g = coef[:, None] * d
    grad = np.zeros_like(vertices)
    np.add.at(grad, edges[:, 1], g)
    np.add.at(grad, edges[:, 0], -g)
    return float(np.sum(diff * diff) / m), grad


def loss_laplacian(offsets: np.ndarray, laplacian: sparse.spmatrix):
    """Mean squared umbrella-Laplacian of the offset field."""
    lr = laplacian @ offsets
    n = offsets.shape[0]
    return float(np.sum(lr * lr) / n), (2.0 / n) * (laplacian.T @ lr)


def loss_offset(offsets: np.ndarray):
    n = offsets.shape[0]
    return float(np.sum(offsets * offsets) / n), (2.0 / n) * offsets
