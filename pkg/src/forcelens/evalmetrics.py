"""Quantitative evaluation: force magnitude/direction errors against ground
truth, trajectory re-simulation RMSE, and the report structure the CLI prints
as aligned tables."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import InvariantViolation
from .scene import Trajectory

GT_EXCLUSION_EPS = 1e-9  # N/kg; near-zero ground truth is excluded, counted


def direction_error(f_est, f_gt, eps: float = GT_EXCLUSION_EPS) -> float:
    """Angle between the two vectors in degrees (arccos of clamped cosine)."""
    a = np.asarray(f_est, dtype=np.float64)
    b = np.asarray(f_gt, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= eps or nb <= eps:
        raise InvariantViolation("direction_error: vectors must be nonzero above eps")
    cos = np.clip(a @ b / (na * nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def magnitude_error(f_est, f_gt, eps: float = GT_EXCLUSION_EPS) -> float:
    """Percent error of the estimated magnitude against ground truth."""
    na = np.linalg.norm(np.asarray(f_est, dtype=np.float64))
    nb = np.linalg.norm(np.asarray(f_gt, dtype=np.float64))
    if nb <= eps:
        raise InvariantViolation("magnitude_error: |f_gt| must exceed eps")
    return float(100.0 * abs(na - nb) / nb)


@dataclass
class ForceErrorReport:
    mean_magnitude_error_pct: float
    mean_direction_error_deg: float
    per_frame_magnitude_pct: list
    per_frame_direction_deg: list
    # frame-mean-then-mean variants (pooled numbers are primary)
    framewise_magnitude_pct: float
    framewise_direction_deg: float
    n_samples: int
    n_excluded: int
    sample_policy: str

    def to_json_dict(self) -> dict:
        def _clean(values):
            return [None if not np.isfinite(v) else v for v in values]

        return {
            "mean_magnitude_error_pct": self.mean_magnitude_error_pct,
            "mean_direction_error_deg": self.mean_direction_error_deg,
            "per_frame_magnitude_pct": _clean(self.per_frame_magnitude_pct),
            "per_frame_direction_deg": _clean(self.per_frame_direction_deg),
            "framewise_magnitude_pct": self.framewise_magnitude_pct,
            "framewise_direction_deg": self.framewise_direction_deg,
            "n_samples": self.n_samples,
            "n_excluded": self.n_excluded,
            "sample_policy": self.sample_policy,
        }


def field_errors(
    est_field,
    gt_field,
    trajectory: Trajectory,
    n_frames: int | None = None,
    eps: float = GT_EXCLUSION_EPS,
) -> ForceErrorReport:
    """Evaluate both fields at true particle positions at every force frame.

    Forces act where mass is, so errors are sampled along the true trajectory
    at frame-start times. Samples with |gt| <= eps are excluded and counted.
    """
    F = trajectory.n_frames if n_frames is None else n_frames
    if F < 1:
        raise InvariantViolation("field_errors: need at least one frame")
    n = trajectory.n_particles
    frame_dt = getattr(est_field, "config", None)
    frame_dt = est_field.config.frame_dt if frame_dt is not None else gt_field.frame_dt
    indices = np.arange(n)
    mag_all, dir_all = [], []
    per_frame_mag, per_frame_dir = [], []
    excluded = 0
    for k in range(F):
        xs = trajectory.positions[k]
        # mid-frame sampling treats piecewise-per-frame estimates and
        # continuous ground truth on equal footing
        t = (k + 0.5) * frame_dt
        est = est_field.query_batch(xs, t, k, indices=indices)
        gt = gt_field.query_batch(xs, t, k, indices=indices)
        gt_norm = np.linalg.norm(gt, axis=1)
        ok = gt_norm > eps
        excluded += int((~ok).sum())
        if not np.any(ok):
            per_frame_mag.append(float("nan"))
            per_frame_dir.append(float("nan"))
            continue
        est_ok, gt_ok = est[ok], gt[ok]
        est_norm = np.linalg.norm(est_ok, axis=1)
        mag = 100.0 * np.abs(est_norm - gt_norm[ok]) / gt_norm[ok]
        cos = np.einsum("na,na->n", est_ok, gt_ok) / np.maximum(
            est_norm * gt_norm[ok], 1e-300
        )
        ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
        # zero estimates have undefined direction; count the full 90 ambiguity
        ang = np.where(est_norm <= eps, 90.0, ang)
        mag_all.append(mag)
        dir_all.append(ang)
        per_frame_mag.append(float(mag.mean()))
        per_frame_dir.append(float(ang.mean()))
    if not mag_all:
        raise InvariantViolation("field_errors: every sample was excluded")
    mag_pool = np.concatenate(mag_all)
    dir_pool = np.concatenate(dir_all)
    frame_mags = [m for m in per_frame_mag if not np.isnan(m)]
    frame_dirs = [m for m in per_frame_dir if not np.isnan(m)]
    return ForceErrorReport(
        mean_magnitude_error_pct=float(mag_pool.mean()),
        mean_direction_error_deg=float(dir_pool.mean()),
        per_frame_magnitude_pct=per_frame_mag,
        per_frame_direction_deg=per_frame_dir,
        framewise_magnitude_pct=float(np.mean(frame_mags)),
        framewise_direction_deg=float(np.mean(frame_dirs)),
        n_samples=int(mag_pool.size),
        n_excluded=excluded,
        sample_policy="true particle positions at mid-frame times, pooled",
    )


def trajectory_rmse(traj_a: Trajectory | np.ndarray, traj_b: Trajectory | np.ndarray) -> float:
    """Root-mean-square of per-particle per-frame position distances (m)."""
    a = traj_a.positions if isinstance(traj_a, Trajectory) else np.asarray(traj_a)
    b = traj_b.positions if isinstance(traj_b, Trajectory) else np.asarray(traj_b)
    if a.shape != b.shape:
        raise InvariantViolation(f"trajectory_rmse: shape mismatch {a.shape} vs {b.shape}")
    d2 = ((a - b) ** 2).sum(axis=-1)
    return float(np.sqrt(d2.mean()))
