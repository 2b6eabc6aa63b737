"""Trajectory and pose accuracy measures.

TIoU compares two image-plane trajectories by the IoU of the ground-truth
mask placed at both positions; TIoU-3D does the same with balls in a space
where depth is expressed in pixels.  Both average over 8 instants per frame,
the midpoints of 8 equal sub-intervals.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import shift as nd_shift

from .image_model import as_image
from .rotation import axis_angle_deg

SAMPLES_PER_FRAME = 8

COLUMNS = {
    "tiou": "TIoU",
    "tiou3d": "TIoU-3D",
    "radius_error": "Radius Error [pixels]",
    "axis_error": "Axis Error [deg]",
    "axis_error_undirected": "Axis Error undirected [deg]",
    "angle_error": "Angle Error [deg]",
}


def sample_times(frames: Sequence[int] | range, per_frame: int = SAMPLES_PER_FRAME) -> np.ndarray:
    """Midpoints of ``per_frame`` equal sub-intervals of every listed frame."""
    f = np.asarray(list(frames), dtype=np.float64)
    if f.size == 0:
        raise ValueError("empty frame range")
    return (f[:, None] + (np.arange(per_frame) + 0.5)[None, :] / per_frame).ravel()


# ---------------------------------------------------------------------------
# closed forms

def lens_area(r: float, d: float) -> float:
    """Intersection area of two disks of radius ``r`` with centres ``d`` apart."""
    d = abs(d)
    if d >= 2 * r:
        return 0.0
    return 2 * r * r * math.acos(d / (2 * r)) - 0.5 * d * math.sqrt(4 * r * r - d * d)


def disk_iou(r: float, d: float) -> float:
    inter = lens_area(r, d)
    return inter / (2 * math.pi * r * r - inter)


def lens_volume(r: float, d: float) -> float:
    """Intersection volume of two balls of radius ``r`` with centres ``d`` apart."""
    d = abs(d)
    if d >= 2 * r:
        return 0.0
    return math.pi * (4 * r + d) * (2 * r - d) ** 2 / 12.0


def sphere_iou(r: float, d: float) -> float:
    inter = lens_volume(r, d)
    return inter / (2 * (4.0 / 3.0) * math.pi * r ** 3 - inter)


# ---------------------------------------------------------------------------
# pixel IoU

def mask_iou_offset(mask, offset_xy) -> float:
    """IoU of a soft mask with itself translated by ``offset_xy`` (sub-pixel, bilinear).

    Soft IoU is ``sum(min) / sum(max)``, which is the usual IoU for binary
    masks.
    """
    m = as_image(mask, channels=1, name="mask")[..., 0]
    dx, dy = float(offset_xy[0]), float(offset_xy[1])
    h, w = m.shape
    if abs(dx) >= w or abs(dy) >= h:
        return 0.0
    pad_y, pad_x = int(math.ceil(abs(dy))) + 1, int(math.ceil(abs(dx))) + 1
    a = np.pad(m, ((pad_y, pad_y), (pad_x, pad_x)))
    b = np.clip(nd_shift(a, (dy, dx), order=1, mode="constant"), 0.0, 1.0)
    union = float(np.maximum(a, b).sum())
    if union <= 0:
        return 0.0
    return float(np.minimum(a, b).sum()) / union


def tiou(curve, curve_gt, mask_gt, frames) -> float:
    """Mean pixel IoU of ``mask_gt`` placed at ``curve(t)`` and ``curve_gt(t)``."""
    return float(np.mean(tiou_samples(curve, curve_gt, mask_gt, frames)))


def tiou_samples(curve, curve_gt, mask_gt, frames) -> np.ndarray:
    ts = sample_times(frames)
    _check_domain(curve, ts)
    _check_domain(curve_gt, ts)
    off = curve(ts)[:, :2] - curve_gt(ts)[:, :2]
    return np.array([mask_iou_offset(mask_gt, o) for o in off])


def _check_domain(curve, ts):
    lo, hi = curve.domain
    if ts.min() < lo - 1e-9 or ts.max() > hi + 1e-9:
        raise ValueError(f"curve domain [{lo}, {hi}] does not cover the evaluated frames")


# ---------------------------------------------------------------------------
# 3D

def depth_scale(traj, traj_gt, ts: np.ndarray) -> float:
    """Factor mapping the relative depth of ``traj`` onto ``traj_gt`` (ratio of medians)."""
    d = traj(ts)[:, 2]
    d_gt = traj_gt(ts)[:, 2]
    ok = np.isfinite(d) & np.isfinite(d_gt) & (d > 0) & (d_gt > 0)
    if not np.any(ok):
        raise ValueError("no overlapping valid depth samples for scale alignment")
    return float(np.median(d_gt[ok]) / np.median(d[ok]))


def embed(traj, ts: np.ndarray, radius_at_unit_depth: float, scale: float = 1.0) -> np.ndarray:
    """Positions with depth in pixels: ``z = radius_at_unit_depth * scale * d``."""
    p = np.array(traj(ts), dtype=np.float64)
    p[:, 2] *= radius_at_unit_depth * scale
    return p


def tiou3d_samples(traj, traj_gt, radius_gt, frames, radius_at_unit_depth: float,
                   align: bool = True) -> tuple[np.ndarray, float]:
    ts = sample_times(frames)
    _check_domain(traj, ts)
    _check_domain(traj_gt, ts)
    scale = depth_scale(traj, traj_gt, ts) if align else 1.0
    p = embed(traj, ts, radius_at_unit_depth, scale)
    q = embed(traj_gt, ts, radius_at_unit_depth)
    dist = np.linalg.norm(p - q, axis=1)
    if callable(radius_gt):
        radii = np.asarray(radius_gt(ts), dtype=np.float64)
    else:
        radii = np.broadcast_to(np.asarray(radius_gt, dtype=np.float64), ts.shape)
    return np.array([sphere_iou(r, d) for r, d in zip(radii, dist)]), scale


def tiou3d(traj, traj_gt, radius_gt, frames, radius_at_unit_depth: float, align: bool = True) -> float:
    """Mean ball IoU between two 3D trajectories.

    ``radius_gt`` is the ball radius in pixels, a scalar or a function of
    time; ``radius_at_unit_depth`` converts relative depth to pixels.  With
    ``align`` the depth of ``traj`` is first rescaled so that its median
    over the sampled instants matches that of ``traj_gt``.
    """
    vals, _ = tiou3d_samples(traj, traj_gt, radius_gt, frames, radius_at_unit_depth, align)
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# report

@dataclass
class EvalReport:
    tiou: float | None = None
    tiou3d: float | None = None
    radius_error: float | None = None
    axis_error: float | None = None
    axis_error_undirected: float | None = None
    angle_error: float | None = None
    depth_scale: float | None = None
    rows: list = field(default_factory=list)  # per-frame dicts keyed like the fields above

    def __post_init__(self):
        for name in ("tiou", "tiou3d"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in COLUMNS:
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise ValueError(f"{name} is not finite")

    def summary(self) -> dict:
        return {COLUMNS[k]: getattr(self, k) for k in COLUMNS}


def pose_errors(radii: Sequence[tuple[float, float]] | None, velocities: Sequence[tuple[float, object]] | None,
                gt) -> EvalReport:
    """Radius, axis and angle errors against ground truth.

    ``radii`` is a series of ``(t, r_est)``; ``velocities`` a series of
    ``(t, omega)`` with omega in rad/frame (an array or an object with an
    ``omega`` attribute).  ``gt`` provides ``radius_at(t)``, ``omega_at(t)``
    and ``averaging_factor``.  The angle error is ``|rate_est - rate_gt|`` in
    degrees per ground-truth sub-frame.  A missing series leaves its columns
    ``None`` (absent).
    """
    rep = EvalReport()
    per_frame: dict[int, dict] = {}
    if radii is not None:
        if len(radii) == 0:
            raise ValueError("empty radius series")
        errs = []
        for t, r in radii:
            e = abs(float(r) - float(gt.radius_at(float(t))))
            errs.append(e)
            per_frame.setdefault(int(math.floor(t)), {}).setdefault("radius_error", []).append(e)
        rep.radius_error = float(np.mean(errs))
    if velocities is not None and len(velocities) > 0:
        ax_d, ax_u, ang = [], [], []
        k = float(gt.averaging_factor)
        for t, w in velocities:
            w = np.asarray(getattr(w, "omega", w), dtype=np.float64)
            w_gt = np.asarray(gt.omega_at(float(t)), dtype=np.float64)
            ax_d.append(axis_angle_deg(w, w_gt, directed=True))
            ax_u.append(axis_angle_deg(w, w_gt, directed=False))
            ang.append(math.degrees(abs(np.linalg.norm(w) - np.linalg.norm(w_gt)) / k))
            row = per_frame.setdefault(int(math.floor(t)), {})
            row.setdefault("axis_error", []).append(ax_d[-1])
            row.setdefault("angle_error", []).append(ang[-1])
        rep.axis_error = float(np.mean(ax_d))
        rep.axis_error_undirected = float(np.mean(ax_u))
        rep.angle_error = float(np.mean(ang))
    rep.rows = [{"frame": f, **{k: float(np.mean(v)) for k, v in d.items()}} for f, d in sorted(per_frame.items())]
    return rep


def evaluate(traj_est, gt, frames, radii=None, velocities=None, curve_est=None) -> EvalReport:
    """Full report: TIoU (from ``curve_est`` or the x, y of ``traj_est``), TIoU-3D and pose errors."""
    from .image_model import disk_mask

    frames = list(frames)
    rep = pose_errors(radii, velocities, gt)
    ts = sample_times(frames)
    r_gt = gt.radius_at(ts)
    curve = curve_est if curve_est is not None else traj_est
    ious2d = []
    for t, r in zip(ts, r_gt):
        side = 2 * int(math.ceil(r)) + 3
        off = curve(t)[:2] - gt.trajectory(t)[:2]
        ious2d.append(mask_iou_offset(disk_mask(side, r), off))
    ious3d, scale = tiou3d_samples(traj_est, gt.trajectory, gt.radius_at, frames, gt.radius_at_unit_depth)
    rep.tiou = float(np.mean(ious2d))
    rep.tiou3d = float(np.mean(ious3d))
    rep.depth_scale = scale
    by_frame = {row["frame"]: row for row in rep.rows}
    n = SAMPLES_PER_FRAME
    for i, f in enumerate(frames):
        row = by_frame.setdefault(int(f), {"frame": int(f)})
        row["tiou"] = float(np.mean(ious2d[i * n:(i + 1) * n]))
        row["tiou3d"] = float(np.mean(ious3d[i * n:(i + 1) * n]))
    rep.rows = [by_frame[k] for k in sorted(by_frame)]
    return rep


def _fmt(v) -> str:
    return "absent" if v is None else f"{v:.6g}"


def write_report_csv(report: EvalReport, path):
    """Summary row followed by per-frame rows; missing values are written as ``absent``."""
    keys = list(COLUMNS)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame"] + [COLUMNS[k] for k in keys])
        wr.writerow(["all"] + [_fmt(getattr(report, k)) for k in keys])
        for row in report.rows:
            wr.writerow([row["frame"]] + [_fmt(row.get(k)) for k in keys])


def read_report_csv(path) -> EvalReport:
    inv = {v: k for k, v in COLUMNS.items()}
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or rows[0]["frame"] != "all":
        raise ValueError(f"{path}: missing summary row")

    def val(s):
        return None if s == "absent" else float(s)

    rep = EvalReport(**{inv[c]: val(rows[0][c]) for c in inv if c in rows[0]})
    rep.rows = [{"frame": int(r["frame"]), **{inv[c]: val(r[c]) for c in inv if val(r[c]) is not None}}
                for r in rows[1:]]
    return rep


def format_table(report: EvalReport) -> str:
    """Human-readable summary table."""
    width = max(len(c) for c in COLUMNS.values())
    lines = [f"{c:<{width}}  {_fmt(getattr(report, k))}" for k, c in COLUMNS.items()]
    if report.depth_scale is not None:
        lines.append(f"{'depth scale (median aligned)':<{width}}  {report.depth_scale:.6g}")
    return "\n".join(lines)
