"""Pose and mesh accuracy metrics.

Joint and vertex errors are returned in the input units (meters); reports
convert to millimeters.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

PELVIS = 0


def mpjpe(pred, gt, root: int = PELVIS) -> float | np.ndarray:
    """Mean joint distance after moving both roots to the origin. Batched over leading axes."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred - pred[..., root:root + 1, :]
    g = gt - gt[..., root:root + 1, :]
    return np.linalg.norm(p - g, axis=-1).mean(axis=-1)


@dataclass
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    degenerate: bool = False

    def apply(self, pts):
        return self.scale * np.asarray(pts) @ self.rotation.T + self.translation


def procrustes_align(pred, gt) -> tuple[np.ndarray, Similarity]:
    """Similarity transform (scale, proper rotation, translation) best mapping ``pred`` onto ``gt``.

    Rank-deficient inputs still return a proper rotation; the transform is
    flagged ``degenerate``.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3 or len(pred) < 3:
        raise ValueError("procrustes needs two (N, 3) arrays with N >= 3")
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    x, y = pred - mu_p, gt - mu_g
    var_x = np.sum(x * x)
    cov = y.T @ x
    u, sv, vt = np.linalg.svd(cov)
    fix = np.eye(3)
    fix[2, 2] = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = u @ fix @ vt
    degenerate = bool(sv[1] <= 1e-12 * max(sv[0], 1e-300)) or var_x <= 1e-300
    if degenerate:
        warnings.warn("procrustes: rank-deficient covariance, alignment is best-effort", stacklevel=2)
    scale = float(np.sum(sv * np.diag(fix)) / var_x) if var_x > 1e-300 else 1.0
    trans = mu_g - scale * rot @ mu_p
    sim = Similarity(scale, rot, trans, degenerate)
    return sim.apply(pred), sim


def pa_mpjpe(pred, gt) -> float:
    aligned, _ = procrustes_align(pred, gt)
    return float(np.linalg.norm(aligned - gt, axis=-1).mean())


def torso_length(gt2d, pelvis: int = PELVIS, neck: int = 3) -> float:
    gt2d = np.asarray(gt2d)
    return float(np.linalg.norm(gt2d[neck] - gt2d[pelvis]))


def pck(pred2d, gt2d, alpha: float, torso_len: float, visibility=None) -> float:
    """Fraction of visible keypoints within ``alpha * torso_len`` (inclusive).

    Returns NaN when nothing is visible so callers can drop the sample.
    """
    if torso_len <= 0:
        raise ValueError("torso length must be positive")
    pred2d, gt2d = np.asarray(pred2d), np.asarray(gt2d)
    vis = np.ones(len(gt2d), dtype=bool) if visibility is None else np.asarray(visibility) > 0
    if not vis.any():
        return float("nan")
    d = np.linalg.norm(pred2d - gt2d, axis=-1)
    return float(np.mean(d[vis] <= alpha * torso_len))


JOINT_GROUPS_17 = {
    "all": None,
    "ankles": ("left_ankle", "right_ankle"),
    "knees": ("left_knee", "right_knee"),
    "wrists": ("left_wrist", "right_wrist"),
}


def pck_curve(pred2d, gt2d, alphas, names=None, visibility=None, groups=None,
              pelvis: int = PELVIS, neck: int = 3) -> dict:
    """Mean PCK per alpha, overall and per joint group.

    ``pred2d``/``gt2d`` are ``(N, K, 2)``. Returns ``{group: [pck at each alpha]}``
    plus ``"alpha"``. Samples with nothing visible are skipped.
    """
    alphas = [float(a) for a in alphas]
    if any(b < a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be sorted ascending")
    pred2d, gt2d = np.asarray(pred2d), np.asarray(gt2d)
    n, k = gt2d.shape[:2]
    vis = np.ones((n, k), dtype=bool) if visibility is None else np.asarray(visibility) > 0
    groups = JOINT_GROUPS_17 if groups is None else groups
    table = {"alpha": alphas}
    torso = np.linalg.norm(gt2d[:, neck] - gt2d[:, pelvis], axis=-1)
    for gname, members in groups.items():
        if members is None:
            mask = np.ones(k, dtype=bool)
        else:
            if names is None or not all(m in names for m in members):
                continue
            mask = np.isin(np.arange(k), [list(names).index(m) for m in members])
        row = []
        for a in alphas:
            vals = [pck(pred2d[i, mask], gt2d[i, mask], a, torso[i], vis[i, mask]) for i in range(n)]
            vals = [v for v in vals if not np.isnan(v)]
            row.append(float(np.mean(vals)) if vals else float("nan"))
        table[gname] = row
    return table


def normalized_metrics(mpjpe_value: float, mve_value: float, f1: float) -> tuple[float, float]:
    """Errors divided by the detection F1 score: ``(NMJE, NMVE)``."""
    if not (0.0 < f1 <= 1.0):
        raise ValueError(f"F1 must lie in (0, 1], got {f1}")
    return mpjpe_value / f1, mve_value / f1


@dataclass
class EvalReport:
    mpjpe: float
    pa_mpjpe: float
    vertex_err: float
    pa_vertex_err: float
    pck: dict = field(default_factory=dict)
    n_samples: int = 0

    def as_dict(self) -> dict:
        out = asdict(self)
        out.pop("pck")
        out.update({f"pck@{a:g}": v for a, v in self.pck.items()})
        return out


def evaluate_arrays(pred_joints, gt_joints, pred_verts=None, gt_verts=None, pred2d=None, gt2d=None,
                    alphas=(0.2,)) -> EvalReport:
    """Aggregate metrics over a dataset; errors reported in millimeters."""
    pred_joints, gt_joints = np.asarray(pred_joints), np.asarray(gt_joints)
    n = len(gt_joints)
    mp = float(np.mean(mpjpe(pred_joints, gt_joints))) * 1000 if n else 0.0
    pa = float(np.mean([pa_mpjpe(p, g) for p, g in zip(pred_joints, gt_joints)])) * 1000 if n else 0.0
    ve = pve = 0.0
    if pred_verts is not None and n:
        ve = float(np.mean(mpjpe(pred_verts, gt_verts))) * 1000
        pve = float(np.mean([pa_mpjpe(p, g) for p, g in zip(pred_verts, gt_verts)])) * 1000
    pcks = {}
    if pred2d is not None and n:
        curve = pck_curve(pred2d, gt2d, sorted(alphas), groups={"all": None})
        pcks = dict(zip(curve["alpha"], curve["all"]))
    return EvalReport(mp, pa, ve, pve, pcks, n)


def write_report_csv(path, report: EvalReport, extra: dict | None = None) -> None:
    row = dict(extra or {})
    row.update(report.as_dict())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)


def write_pck_csv(path, table: dict) -> None:
    groups = [g for g in table if g != "alpha"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", *groups])
        for i, a in enumerate(table["alpha"]):
            writer.writerow([a, *(table[g][i] for g in groups)])
