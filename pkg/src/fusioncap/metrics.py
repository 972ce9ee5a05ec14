"""Joint position error metrics, in millimeters."""
from __future__ import annotations

import numpy as np

from .errors import DegenerateConfiguration, ShapeMismatch


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ShapeMismatch(f"pred {pred.shape} and gt {gt.shape} must match and end in 3")
    return pred.reshape(-1, pred.shape[-2], 3), gt.reshape(-1, gt.shape[-2], 3)


def per_joint_error(pred, gt, root: int | None = 0) -> np.ndarray:
    """Root-aligned Euclidean distance (frames, J) in meters.

    ``root=None`` skips the alignment, for inputs that are already root-relative.
    """
    pred, gt = _check(pred, gt)
    if root is not None:
        pred = pred - pred[:, root:root + 1]
        gt = gt - gt[:, root:root + 1]
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt, root: int | None = 0) -> float:
    """Mean per-joint position error after root alignment, mm."""
    return float(per_joint_error(pred, gt, root).mean() * 1000.0)


def procrustes_align(pred: np.ndarray, gt: np.ndarray, scale: bool = True) -> np.ndarray:
    """Similarity-align each frame of ``pred`` (F, J, 3) onto ``gt``.

    Solves the orthogonal Procrustes problem by SVD of the cross-covariance,
    with a reflection guard and optional uniform scale.
    """
    mu_p = pred.mean(axis=1, keepdims=True)
    mu_g = gt.mean(axis=1, keepdims=True)
    X = pred - mu_p
    Y = gt - mu_g
    var_x = np.sum(X ** 2, axis=(1, 2))
    if np.any(var_x < 1e-18) or np.any(np.sum(Y ** 2, axis=(1, 2)) < 1e-18):
        raise DegenerateConfiguration("point set collapsed to a single point")
    for arr in (X, Y):
        sv = np.linalg.svd(arr, compute_uv=False)
        if np.any(sv[:, 1] < 1e-9 * np.maximum(sv[:, 0], 1e-300)):
            raise DegenerateConfiguration("joints are collinear")
    H = np.swapaxes(X, 1, 2) @ Y
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.ones_like(S)
    D[:, -1] = d
    R = (U * D[:, None, :]) @ Vt
    s = (np.sum(S * D, axis=1) / var_x) if scale else np.ones(len(X))
    return s[:, None, None] * (X @ R) + mu_g


def pa_mpjpe(pred, gt, scale: bool = True) -> float:
    """MPJPE after per-frame similarity (Procrustes) alignment, mm."""
    pred, gt = _check(pred, gt)
    aligned = procrustes_align(pred, gt, scale)
    return float(np.linalg.norm(aligned - gt, axis=-1).mean() * 1000.0)
