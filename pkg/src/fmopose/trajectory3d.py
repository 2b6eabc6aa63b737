"""Relative depth from mask area and piecewise polynomial 3D trajectories."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._poly import PiecewisePolynomial

MIN_RELIABLE_AREA = 4.0
MAX_DEGREE = 6


class Trajectory3D(PiecewisePolynomial):
    """Map from frame-time to ``(x, y, depth)``; x and y in pixels, depth relative."""

    dim = 3
    axis_names = ("x", "y", "d")

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Trajectory3D":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class DepthSample:
    t: float
    x: float
    y: float
    d: float
    mask_area: float
    reliable: bool = True

    @property
    def radius(self) -> float:
        """Apparent radius in pixels implied by the mask area."""
        return math.sqrt(self.mask_area / math.pi)


def depth_from_mask(mask) -> tuple[float, float]:
    """Mask area (sum of pixel values) and the relative depth ``sqrt(pi / area)``.

    A unit-radius disk therefore sits at depth 1.  An empty mask gives
    infinite depth.
    """
    area = float(np.sum(np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)))
    depth = math.sqrt(math.pi / area) if area > 0 else math.inf
    return area, depth


def make_sample(t: float, x: float, y: float, mask, min_area: float = MIN_RELIABLE_AREA) -> DepthSample:
    area, depth = depth_from_mask(mask)
    return DepthSample(float(t), float(x), float(y), depth, area, reliable=area >= min_area)


def normalize_depths(samples: Sequence[DepthSample]) -> list[DepthSample]:
    """Rescale depths so that the median over reliable samples equals 1."""
    good = [s.d for s in samples if s.reliable]
    if not good:
        raise ValueError("no reliable depth samples to normalise")
    med = float(np.median(good))
    return [DepthSample(s.t, s.x, s.y, s.d / med, s.mask_area, s.reliable) for s in samples]


def _merge_times(times: Sequence[float], tol: float, priority: set) -> list[float]:
    out: list[float] = []
    for t in sorted(times):
        if out and t - out[-1] <= tol + 1e-9:
            if t in priority and out[-1] not in priority:
                out[-1] = t
            continue
        out.append(t)
    return out


def detect_bounces(
    samples: Sequence[DepthSample],
    bounces_2d: Sequence[float] = (),
    threshold: float = 3.0,
    window: int = 2,
    merge_tol: float = 0.5,
    z: float = 4.0,
) -> list[float]:
    """Merge 2D bounces with extra ones visible only in the depth profile.

    A sample is a depth bounce when the depth slopes over ``window`` samples
    before and after it have opposite signs and their difference exceeds
    ``threshold`` times the median absolute depth increment between
    consecutive samples.  The difference must also exceed ``z`` robust
    standard deviations of the same statistic over the whole sequence
    (1.4826 times its median absolute deviation): snapshots of one frame
    share most of their mask, so consecutive increments understate the
    frame-to-frame noise.  Candidates within ``merge_tol`` frames are
    merged, keeping the strongest, and 2D bounces take precedence.
    """
    if len(samples) < 3:
        raise ValueError("need at least 3 samples to detect bounces")
    t = np.array([s.t for s in samples if s.reliable])
    d = np.array([s.d for s in samples if s.reliable])
    if np.any(np.diff(t) < 0):
        raise ValueError("samples must be time-ordered")
    found: list[tuple[float, float]] = []
    if t.size >= 2 * window + 1:
        scale = float(np.median(np.abs(np.diff(d))))
        idx = np.arange(window, t.size - window)
        before = d[idx] - d[idx - window]
        after = d[idx + window] - d[idx]
        changes = after - before
        sigma = 1.4826 * float(np.median(np.abs(changes - np.median(changes))))
        limit = max(threshold * scale, z * sigma)
        for i, b, a, c in zip(idx, before, after, changes):
            if b * a < 0 and abs(c) >= limit and c != 0:
                found.append((float(t[i]), float(abs(c))))
    # strongest first within a cluster
    clusters: list[list[tuple[float, float]]] = []
    for tc, ch in found:
        if clusters and tc - clusters[-1][-1][0] <= merge_tol + 1e-9:
            clusters[-1].append((tc, ch))
        else:
            clusters.append([(tc, ch)])
    depth_bounces = [max(c, key=lambda p: p[1])[0] for c in clusters]
    b2 = [float(b) for b in bounces_2d]
    return _merge_times(b2 + depth_bounces, merge_tol, set(b2))


def default_degree(n_samples: int, samples_per_frame: float = 1.0) -> int:
    frames = n_samples / samples_per_frame
    return min(MAX_DEGREE, int(frames // 4) + 1)


def fit_trajectory(
    samples: Sequence[DepthSample],
    bounces: Sequence[float] = (),
    n_frames: float | None = None,
    samples_per_frame: float = 1.0,
    max_degree: int = MAX_DEGREE,
    degree_rule: Callable[[int, float], int] = default_degree,
) -> Trajectory3D:
    """Fit a continuous piecewise polynomial ``(x, y, d)`` curve on ``[0, n_frames]``.

    Bounces split the domain into segments.  Each segment gets the degree
    from ``degree_rule`` (capped by ``max_degree`` and by its sample count)
    and all segments are solved jointly by least squares under equality
    constraints that make the curve continuous at the bounces.
    """
    samples = sorted((s for s in samples if s.reliable), key=lambda s: s.t)
    if len(samples) < 2:
        raise ValueError("need at least two reliable samples")
    t = np.array([s.t for s in samples])
    y = np.array([[s.x, s.y, s.d] for s in samples])
    end = float(n_frames) if n_frames is not None else float(math.ceil(t.max()))
    if end <= 0:
        raise ValueError("trajectory domain must have positive length")
    inner = sorted(b for b in bounces if 0 < b < end)
    bps = np.array([0.0] + inner + [end])
    seg = np.clip(np.searchsorted(bps, t, side="left") - 1, 0, len(bps) - 2)

    degrees = []
    for s in range(len(bps) - 1):
        n_s = int(np.sum(seg == s))
        if n_s < 2:
            degrees.append(0)
        else:
            degrees.append(max(0, min(max_degree, degree_rule(n_s, samples_per_frame), n_s - 1)))
    offsets = np.concatenate([[0], np.cumsum([p + 1 for p in degrees])])
    n_coef = int(offsets[-1])
    lengths = np.diff(bps)

    # design matrix in normalised local time u = (t - t_{s-1}) / L_s
    a = np.zeros((t.size, n_coef))
    for i, (ti, s) in enumerate(zip(t, seg)):
        u = (ti - bps[s]) / lengths[s]
        a[i, offsets[s]:offsets[s + 1]] = u ** np.arange(degrees[s] + 1)
    cons = np.zeros((len(bps) - 2, n_coef))
    for s in range(len(bps) - 2):
        cons[s, offsets[s]:offsets[s + 1]] = 1.0  # left polynomial at u = 1
        cons[s, offsets[s + 1]] = -1.0  # right polynomial at u = 0
    n_con = cons.shape[0]
    kkt = np.zeros((n_coef + n_con, n_coef + n_con))
    kkt[:n_coef, :n_coef] = a.T @ a
    kkt[:n_coef, n_coef:] = cons.T
    kkt[n_coef:, :n_coef] = cons
    rhs = np.zeros((n_coef + n_con, 3))
    rhs[:n_coef] = a.T @ y
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:n_coef]

    coeffs = []
    for s in range(len(bps) - 1):
        c = sol[offsets[s]:offsets[s + 1]].T  # (3, p + 1), normalised time
        coeffs.append(c / lengths[s] ** np.arange(degrees[s] + 1))
    traj = Trajectory3D(bps, tuple(coeffs))
    return _close_gaps(traj)


def _close_gaps(traj: Trajectory3D) -> Trajectory3D:
    """Remove round-off jumps at breakpoints by snapping right constants to left limits."""
    coeffs = [c.copy() for c in traj.coeffs]
    for s in range(traj.n_segments - 1):
        length = traj.breakpoints[s + 1] - traj.breakpoints[s]
        coeffs[s + 1][:, 0] = coeffs[s] @ (length ** np.arange(coeffs[s].shape[1]))
    return Trajectory3D(traj.breakpoints, tuple(coeffs))


def eval_trajectory(traj: Trajectory3D, t: float) -> tuple[float, float, float]:
    x, y, d = traj(float(t))
    return float(x), float(y), float(d)


def fit_residual_rms(traj: Trajectory3D, samples: Sequence[DepthSample], axes=(0, 1, 2)) -> float:
    t = np.array([s.t for s in samples if s.reliable])
    y = np.array([[s.x, s.y, s.d] for s in samples if s.reliable])
    r = traj(t)[:, axes] - y[:, axes]
    return float(np.sqrt(np.mean(r ** 2)))


def write_depth_csv(samples: Sequence[DepthSample], path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "x", "y", "area", "d", "reliable"])
        for s in samples:
            wr.writerow([repr(s.t), repr(s.x), repr(s.y), repr(s.mask_area), repr(s.d), int(s.reliable)])


def read_depth_csv(path) -> list[DepthSample]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(DepthSample(float(row["t"]), float(row["x"]), float(row["y"]), float(row["d"]),
                                   float(row["area"]), bool(int(row.get("reliable", 1)))))
    return out
