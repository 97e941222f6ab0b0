"""Training loss with annotation masking, and the evaluation metrics.

Lengths are in millimetres for metrics; the parametric body works in metres,
so :func:`body_predictions` converts joints and vertices with ``MM_PER_M``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numeric_core as nc
from .body_model import BodyTemplate, body_outputs

MM_PER_M = 1000.0


@dataclass
class LossWeights:
    smpl: float = 1.0
    j3d: float = 1e-3   # 3D joints are in mm; 1e-3 weighs them in metres
    j2d: float = 1.0

    def __post_init__(self):
        if min(self.smpl, self.j3d, self.j2d) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class FrameAnnotation:
    """Ground truth for one frame, or a batch with leading dims ``(...)``.

    Missing fields contribute nothing to the loss.  ``*_mask`` arrays of
    shape ``(...)`` switch annotations off per frame inside a batch.
    """

    gt_theta: Optional[np.ndarray] = None
    gt_joints3d: Optional[np.ndarray] = None   # (..., P, 3) mm
    gt_joints2d: Optional[np.ndarray] = None   # (..., P, 2) normalized
    theta_mask: Optional[np.ndarray] = None
    joints3d_mask: Optional[np.ndarray] = None
    joints2d_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("gt_theta", "gt_joints3d", "gt_joints2d"):
            v = getattr(self, name)
            if v is not None and not np.all(np.isfinite(nc.value_of(v))):
                raise ValueError(f"{name} contains non-finite values")


def body_predictions(params, template: BodyTemplate) -> dict:
    """Parameters (..., D) -> {theta, joints3d (mm), joints2d, verts (mm)}."""
    verts, joints, joints2d = body_outputs(template, params)
    return {"theta": params, "joints3d": joints * MM_PER_M, "joints2d": joints2d, "verts": verts * MM_PER_M}


def _term(pred, gt, mask, lead_nd: int):
    if gt is None:
        return None
    ps, gs = np.shape(nc.value_of(pred)), np.shape(gt)
    if ps != gs:
        raise ValueError(f"prediction shape {ps} does not match annotation {gs}")
    lead = ps[:lead_nd]
    r = nc.reshape(pred - gt, lead + (-1,))
    n = nc.norm(r, axis=-1)
    if mask is not None:
        n = n * np.asarray(mask, dtype=np.float64)
    return n


def loss_total(pred: dict, ann: FrameAnnotation, lam: LossWeights = LossWeights()):
    """λ_smpl‖Θ−Θ̂‖ + λ_3D‖X−X̂‖ + λ_2D‖x−x̂‖ per frame; absent annotations drop out."""
    lead_nd = np.ndim(nc.value_of(pred["theta"])) - 1
    total = None
    for weight, key, gt, mask in ((lam.smpl, "theta", ann.gt_theta, ann.theta_mask),
                                  (lam.j3d, "joints3d", ann.gt_joints3d, ann.joints3d_mask),
                                  (lam.j2d, "joints2d", ann.gt_joints2d, ann.joints2d_mask)):
        if weight == 0:
            continue
        term = _term(pred[key], gt, mask, lead_nd)
        if term is None:
            continue
        term = term * weight
        total = term if total is None else total + term
    if total is None:
        return np.zeros(np.shape(nc.value_of(pred["theta"]))[:-1])
    return total


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def _check_pair(pred, gt, what):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ValueError(f"{what}: expected matching (T, P, 3) arrays, got {pred.shape} and {gt.shape}")
    return pred, gt


def _per_point_error(pred, gt):
    return np.sqrt(np.sum((pred - gt) ** 2, axis=-1)).mean(axis=-1)


def mpjpe(pred, gt, root: int = 0):
    """Root-centred mean joint error per frame; returns (per_frame, mean)."""
    pred, gt = _check_pair(pred, gt, "mpjpe")
    per = _per_point_error(pred - pred[:, root:root + 1], gt - gt[:, root:root + 1])
    return per, float(per.mean())


def procrustes_align(A, B):
    """Similarity (s, R, t) minimizing ||s R A_i + t - B_i||^2 over points (P, 3)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2 or A.shape[1] != 3 or A.shape[0] < 3:
        raise ValueError("procrustes_align needs matching (P >= 3, 3) point sets")
    mu_a, mu_b = A.mean(axis=0), B.mean(axis=0)
    A0, B0 = A - mu_a, B - mu_b
    var_a = np.sum(A0 * A0)
    if var_a <= 1e-20 * max(1.0, np.sum(B0 * B0)):
        raise ValueError("procrustes_align: source points are degenerate (zero spread)")
    K = A0.T @ B0
    U, S, Vt = np.linalg.svd(K)
    Z = np.eye(3)
    Z[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ Z @ U.T
    s = float(np.trace(R @ K) / var_a)
    t = mu_b - s * R @ mu_a
    return s, R, t


def pa_mpjpe(pred, gt):
    """Mean joint error after per-frame similarity alignment of pred onto gt."""
    pred, gt = _check_pair(pred, gt, "pa_mpjpe")
    aligned = np.empty_like(pred)
    for i in range(pred.shape[0]):
        s, R, t = procrustes_align(pred[i], gt[i])
        aligned[i] = s * pred[i] @ R.T + t
    per = _per_point_error(aligned, gt)
    return per, float(per.mean())


def pve(pred_verts, gt_verts, pred_root=None, gt_root=None):
    """Mean vertex error after subtracting each mesh's root (pelvis) position.

    Roots default to the vertex centroid when not supplied.
    """
    pred, gt = _check_pair(pred_verts, gt_verts, "pve")
    pr = pred.mean(axis=1) if pred_root is None else np.asarray(pred_root, dtype=np.float64)
    gr = gt.mean(axis=1) if gt_root is None else np.asarray(gt_root, dtype=np.float64)
    per = _per_point_error(pred - pr[:, None], gt - gr[:, None])
    return per, float(per.mean())


def accel_error(pred, gt=None, fps: Optional[float] = None):
    """Second-difference mismatch for frames 1..T-2; returns (per_frame, mean).

    ``gt=None`` compares against a static trajectory (absolute acceleration).
    Units are mm/frame^2, or mm/s^2 when ``fps`` is given.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.zeros_like(pred) if gt is None else np.asarray(gt, dtype=np.float64)
    pred, gt = _check_pair(pred, gt, "accel_error")
    if pred.shape[0] < 3:
        raise ValueError("accel_error needs at least 3 frames")
    a_pred = pred[2:] - 2 * pred[1:-1] + pred[:-2]
    a_gt = gt[2:] - 2 * gt[1:-1] + gt[:-2]
    per = _per_point_error(a_pred, a_gt)
    if fps is not None:
        per = per * float(fps) ** 2
    return per, float(per.mean())


@dataclass
class MetricReport:
    mpjpe: np.ndarray
    pa_mpjpe: np.ndarray
    pve: np.ndarray
    accel: np.ndarray          # length T, NaN where the second difference is undefined
    accel_unit: str = "mm/frame^2"
    means: dict = field(default_factory=dict)

    COLUMNS = ("frame", "mpjpe", "pa_mpjpe", "pve", "accel")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            out = csv.writer(f)
            out.writerow(self.COLUMNS)
            for i in range(len(self.mpjpe)):
                acc = "" if np.isnan(self.accel[i]) else _fmt(self.accel[i])
                out.writerow([i, _fmt(self.mpjpe[i]), _fmt(self.pa_mpjpe[i]), _fmt(self.pve[i]), acc])
            out.writerow(["mean"] + [_fmt(self.means[k]) if not np.isnan(self.means[k]) else ""
                                     for k in self.COLUMNS[1:]])


def _fmt(x) -> str:
    return f"{float(x):.6f}"


def evaluate_params(pred_params, gt_params, template: BodyTemplate, fps: Optional[float] = None) -> MetricReport:
    """MetricReport for per-frame parameter sequences (L, D)."""
    pred = body_predictions(np.asarray(pred_params, dtype=np.float64), template)
    gt = body_predictions(np.asarray(gt_params, dtype=np.float64), template)
    return evaluate_arrays(pred["joints3d"], gt["joints3d"], pred["verts"], gt["verts"], fps=fps)


def evaluate_arrays(pred_joints, gt_joints, pred_verts, gt_verts, fps=None) -> MetricReport:
    L = len(pred_joints)
    m, m_mean = mpjpe(pred_joints, gt_joints)
    pa, pa_mean = pa_mpjpe(pred_joints, gt_joints)
    v, v_mean = pve(pred_verts, gt_verts, pred_joints[:, 0], gt_joints[:, 0])
    acc = np.full(L, np.nan)
    acc_mean = float("nan")
    if L >= 3:
        per, acc_mean = accel_error(pred_joints, gt_joints, fps)
        acc[1:-1] = per
    unit = "mm/s^2" if fps is not None else "mm/frame^2"
    return MetricReport(m, pa, v, acc, unit,
                        {"mpjpe": m_mean, "pa_mpjpe": pa_mean, "pve": v_mean, "accel": acc_mean})
