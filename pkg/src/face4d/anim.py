"""Closed-form pieces of the speech-driven animation objective.

These operate on plain arrays and carry no learned weights: mean-face
normalization, moment modulation of latent features, the decoding-matrix
sparsity regularizer and the combined training loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_FLOOR = 1e-6


def normalize_faces(seq) -> np.ndarray:
    """Subtract the sequence-mean face from every frame."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim < 1 or seq.shape[0] == 0:
        raise ValueError("empty face sequence")
    return seq - seq.mean(axis=0)


@dataclass(frozen=True)
class StyleMoments:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if mu.shape != sigma.shape or mu.ndim != 1:
            raise ValueError(f"mu and sigma must be matching vectors, got {mu.shape} and {sigma.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValueError("style moments must be finite")
        if np.any(sigma < 0):
            raise ValueError("sigma must be non-negative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", np.maximum(sigma, SIGMA_FLOOR))

    @classmethod
    def of(cls, z) -> "StyleMoments":
        """Temporal mean and population std of a T x C feature sequence."""
        z = np.asarray(z, dtype=np.float64)
        return cls(z.mean(axis=0), z.std(axis=0))


def adain_fuse(z, style: StyleMoments) -> np.ndarray:
    """Re-standardize each channel of ``z`` (T x C) to the style's mean and std.

    Channels whose own std is below the floor are not rescaled; they are
    only shifted from their mean to the style mean.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != style.mu.shape[0]:
        raise ValueError(f"features of shape {z.shape} do not match {style.mu.shape[0]} style channels")
    if z.shape[0] == 0:
        raise ValueError("empty feature sequence")
    if not np.all(np.isfinite(z)):
        raise ValueError("features must be finite")
    mean = z.mean(axis=0)
    std = z.std(axis=0)
    flat = std < SIGMA_FLOOR
    gain = np.where(flat, 1.0, style.sigma / np.where(flat, 1.0, std))
    return (z - mean) * gain + style.mu


def sparsity_reg(w):
    """Overlap between the absolute unit-normalized rows of a decoding matrix.

    Sums ``|w_i| . |w_j|`` over ordered pairs ``i != j`` of normalized rows.
    Returns ``(value, gradient)``; the gradient uses 0 as the subgradient of
    ``|x|`` at exact zeros.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"decoding matrix must be 2D, got shape {w.shape}")
    norms = np.linalg.norm(w, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"decoding matrix has an all-zero row ({int(np.argmax(norms == 0))})")
    unit = w / norms[:, None]
    a = np.abs(unit)
    others = a.sum(axis=0)[None, :] - a     # column sums over the other rows
    # summing non-negative terms keeps the value exactly 0 for disjoint rows
    value = float(np.sum(a * others))
    g_unit = np.sign(unit) * (2.0 * others)
    # back through row normalization
    g = (g_unit - unit * np.sum(g_unit * unit, axis=1, keepdims=True)) / norms[:, None]
    return value, g


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim < 2:
        raise ValueError("sequences must be T x ...")
    return pred, gt


def anim_total_loss(pred, gt, w, beta: float = 1e-6, squared: bool = False) -> float:
    """Sum over frames of the Frobenius norm of the vertex error, plus ``beta`` times the sparsity term.

    ``squared=True`` sums squared norms instead.
    """
    value, _, _ = anim_total_loss_grad(pred, gt, w, beta, squared)
    return value


def anim_total_loss_grad(pred, gt, w, beta: float = 1e-6, squared: bool = False):
    """``(value, d/d pred, d/d w)`` of :func:`anim_total_loss`."""
    pred, gt = _check_pair(pred, gt)
    diff = pred - gt
    t = diff.shape[0]
    flat = diff.reshape(t, -1)
    norms = np.linalg.norm(flat, axis=1)
    if squared:
        data = float(np.sum(norms * norms))
        g_pred = 2.0 * diff
    else:
        data = float(norms.sum())
        safe = np.where(norms > 0, norms, 1.0)
        g_pred = (np.where(norms[:, None] > 0, flat / safe[:, None], 0.0)).reshape(diff.shape)
    reg, g_w = sparsity_reg(w)
    return data + beta * reg, g_pred, beta * g_w
