"""Angular velocity of a spherical object from its sub-frame snapshots.

Coordinates: x to the right, y down, z toward the camera.  A snapshot shows
the front hemisphere (z >= 0) of a sphere in orthographic projection.  An
angular velocity ``omega`` (rad per frame) rotates the sphere by
``exp(dt * omega)`` over a time ``dt``; the rotated appearance at a visible
point ``p`` is the old appearance at ``exp(-dt * omega) p``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial.transform import Rotation

from .image_model import Snapshot
from .deblatting.ops import mask_centroid

UNINFORMATIVE_VARIANCE = 1e-5


@dataclass(frozen=True)
class AngularVelocity:
    omega: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(w)):
            raise ValueError("angular velocity must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "omega", w)

    @property
    def rate(self) -> float:
        return float(np.linalg.norm(self.omega))

    @property
    def axis(self) -> np.ndarray:
        r = self.rate
        return self.omega / r if r > 0 else np.zeros(3)


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` near-uniform unit vectors (golden-angle spiral)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    rho = np.sqrt(1.0 - z * z)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


@dataclass(frozen=True)
class VelocityGrid:
    """Candidate angular velocities: zero plus ``axes x {delta, 2 delta, ..., rate_max}``."""

    n_axes: int = 312
    delta: float = 0.02
    rate_max: float = 1.2
    axes: np.ndarray | None = None

    def __post_init__(self):
        if self.delta <= 0 or self.rate_max < self.delta:
            raise ValueError("need 0 < delta <= rate_max")
        axes = fibonacci_sphere(self.n_axes) if self.axes is None else np.asarray(self.axes, dtype=np.float64)
        axes = axes / np.linalg.norm(axes, axis=1, keepdims=True)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "n_axes", len(axes))

    @property
    def rates(self) -> np.ndarray:
        return self.delta * np.arange(1, int(math.floor(self.rate_max / self.delta + 1e-9)) + 1)

    def candidates(self) -> np.ndarray:
        cand = (self.axes[:, None, :] * self.rates[None, :, None]).reshape(-1, 3)
        return np.concatenate([np.zeros((1, 3)), cand])

    def halved(self) -> "VelocityGrid":
        return VelocityGrid(self.n_axes, self.delta / 2, self.rate_max, self.axes)


@dataclass(frozen=True)
class ConsensusParams:
    """``rho``: inlier radius; ``epsilon``: score stabiliser; ``window``: snapshots per estimate.

    ``min_dt``/``max_dt`` restrict the pairs by time gap (e.g. to skip
    snapshots of the same frame); ``refine`` polishes each grid vote by a
    local search; ``coarse`` is the rate stride of the first search pass
    (1 gives the exhaustive grid).
    """

    rho: float = 0.04
    epsilon: float = 1e-3
    window: int = 8
    min_dt: float = 0.0
    max_dt: float | None = None
    refine: bool = True
    coarse: int = 4

    def check(self, grid: VelocityGrid):
        if self.rho < grid.delta:
            raise ValueError(f"rho={self.rho} must be at least the grid step {grid.delta}")
        if self.epsilon <= 0 or self.window < 2:
            raise ValueError("epsilon must be > 0 and window >= 2")


@dataclass
class PairVote:
    i: int
    j: int
    omega: np.ndarray
    score: float
    error: float
    informative: bool = True


# ---------------------------------------------------------------------------
# sphere geometry

@dataclass(frozen=True)
class SphereImage:
    """Planar ``(C, h, w)`` appearance with the disk centre ``(row, col)`` and radius."""

    data: np.ndarray
    center: tuple[float, float]
    radius: float

    @classmethod
    def from_snapshot(cls, snap: Snapshot) -> "SphereImage":
        return cls.from_arrays(snap.appearance, snap.mask)

    @classmethod
    def from_arrays(cls, appearance, mask) -> "SphereImage":
        f = np.asarray(appearance, dtype=np.float64)
        m = np.asarray(mask, dtype=np.float64)
        m2 = m[..., 0] if m.ndim == 3 else m
        area = float(np.clip(m2, 0, 1).sum())
        if area <= 0:
            raise ValueError("empty mask")
        if f.ndim == 2:
            f = f[..., None]
        return cls(np.moveaxis(f, -1, 0), mask_centroid(m2), math.sqrt(area / math.pi))

    def resampled(self, radius: float, side: int | None = None) -> "SphereImage":
        """Rescale about the centre so the disk has ``radius``, on an odd canvas."""
        if side is None:
            side = 2 * int(math.ceil(radius)) + 3
        c = (side - 1) / 2.0
        yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
        s = self.radius / radius
        rows = self.center[0] + (yy - c) * s
        cols = self.center[1] + (xx - c) * s
        out = np.stack([map_coordinates(ch, [rows, cols], order=1, mode="constant") for ch in self.data])
        return SphereImage(out, (c, c), float(radius))


def disk_points(center, radius: float, region_radius: float, shape) -> tuple[np.ndarray, np.ndarray]:
    """Pixel indices inside the region disk and their front-hemisphere unit points."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    x = (xx - center[1]) / radius
    y = (yy - center[0]) / radius
    sel = np.hypot(x, y) <= region_radius / radius
    px, py = x[sel], y[sel]
    pz = np.sqrt(np.maximum(0.0, 1.0 - px * px - py * py))
    return np.flatnonzero(sel.ravel()), np.stack([px, py, pz], axis=1)


def _bilinear(planar: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``(C, h, w)`` at float ``rows``/``cols`` (any shape); zero outside."""
    c_, h, w = planar.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = (rows - r0).astype(planar.dtype)
    fc = (cols - c0).astype(planar.dtype)
    flat = planar.reshape(c_, -1)
    out = 0.0
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc), (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        idx = np.where(ok, rr * w + cc, 0)
        out = out + flat[:, idx] * (wgt * ok)
    return out


def rotate_sphere_image(appearance, mask, omega_total) -> tuple[np.ndarray, np.ndarray]:
    """Rotate the imaged sphere by the rotation vector ``omega_total``.

    Returns the rotated appearance (same shape as ``appearance``) and a
    boolean validity mask: pixels inside the disk whose pre-image lies on
    the visible hemisphere.  Other pixels are zero.
    """
    src = SphereImage.from_arrays(appearance, mask)
    shape = src.data.shape[1:]
    idx, pts = disk_points(src.center, src.radius, src.radius, shape)
    rot = Rotation.from_rotvec(np.asarray(omega_total, dtype=np.float64)).as_matrix()
    pre = pts @ rot  # rows are R^T p
    valid = pre[:, 2] >= 0
    rows = src.center[0] + src.radius * pre[:, 1]
    cols = src.center[1] + src.radius * pre[:, 0]
    vals = _bilinear(src.data, rows, cols)
    out = np.zeros_like(src.data)
    flat = out.reshape(out.shape[0], -1)
    flat[:, idx[valid]] = vals[:, valid]
    vmask = np.zeros(shape[0] * shape[1], dtype=bool)
    vmask[idx[valid]] = True
    res = np.moveaxis(out, 0, -1)
    if np.asarray(appearance).ndim == 2:
        res = res[..., 0]
    return res, vmask.reshape(shape)


def region_radius(radius: float, max_angle: float) -> float:
    """Radius of the central disk that stays visible under any rotation up to ``max_angle``."""
    if max_angle >= math.pi / 2:
        raise ValueError(f"largest hypothesised rotation {max_angle:.3f} rad leaves no common visible region")
    return radius * math.cos(max_angle)


class _PairProblem:
    """Reprojection error of one image pair for batches of angular velocities.

    The region is the central disk of :func:`region_radius`; when it holds
    more than ``max_points`` pixels an evenly spaced fixed subset is used,
    so errors for all candidates are still taken over the same pixels.
    """

    def __init__(self, src: SphereImage, dst: SphereImage, dt: float, max_angle: float,
                 max_points: int | None = 400, min_pixels: int = 12):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.dt = dt
        rr = region_radius(dst.radius, max_angle)
        idx, pts = disk_points(dst.center, dst.radius, rr, dst.data.shape[1:])
        if len(idx) < min_pixels:
            raise ValueError("empty region: object too small for the hypothesised rotations")
        if max_points is not None and len(idx) > max_points:
            keep = np.unique(np.linspace(0, len(idx) - 1, max_points).round().astype(np.int64))
            idx, pts = idx[keep], pts[keep]
        self.pts = pts
        self.target = np.ascontiguousarray(dst.data.reshape(dst.data.shape[0], -1)[:, idx].T, dtype=np.float32)
        self.informative = float(self.target.var(axis=0).mean()) > UNINFORMATIVE_VARIANCE
        # one pixel of zero padding so that bilinear corners never leave the array
        c_, h, w = src.data.shape
        padded = np.zeros((h + 2, w + 2, c_), dtype=np.float32)
        padded[1:-1, 1:-1] = np.moveaxis(src.data, 0, -1)
        self.flat = padded.reshape(-1, c_)
        self.width = w + 2
        self.shape = (h, w)
        self.row0 = src.center[0] + 1.0
        self.col0 = src.center[1] + 1.0
        self.radius = src.radius

    def errors(self, omegas: np.ndarray, chunk_points: int = 1_000_000) -> np.ndarray:
        omegas = np.atleast_2d(np.asarray(omegas, dtype=np.float64))
        mats = Rotation.from_rotvec(omegas * self.dt).as_matrix()
        n_pts = len(self.pts)
        step = max(1, chunk_points // n_pts)
        out = np.empty(len(omegas))
        h, w = self.shape
        for k in range(0, len(omegas), step):
            m = mats[k:k + step]
            # pre-image R^T p: its x, y, z components are p . R[:, 0], p . R[:, 1], p . R[:, 2]
            pz = self.pts @ m[:, :, 2].T
            if pz.min() < -1e-9:
                raise AssertionError("region pixel mapped to the hidden hemisphere")
            rows = np.clip(self.row0 + self.radius * (self.pts @ m[:, :, 1].T), 0.0, h + 0.999)
            cols = np.clip(self.col0 + self.radius * (self.pts @ m[:, :, 0].T), 0.0, w + 0.999)
            r0 = rows.astype(np.int64)
            c0 = cols.astype(np.int64)
            fr = (rows - r0).astype(np.float32)[..., None]
            fc = (cols - c0).astype(np.float32)[..., None]
            base = r0 * self.width + c0
            f = self.flat
            top = f[base] * (1 - fc) + f[base + 1] * fc
            bot = f[base + self.width] * (1 - fc) + f[base + self.width + 1] * fc
            vals = top * (1 - fr) + bot * fr  # (P, K, C)
            out[k:k + step] = np.abs(vals - self.target[:, None, :]).mean(axis=(0, 2))
        return out


def reprojection_error(f1, f2, omega, dt: float, region) -> float:
    """Mean absolute difference between ``R_{dt omega} f1`` and ``f2`` over ``region``.

    ``f1``/``f2`` are :class:`Snapshot` objects (same size and disk); ``region``
    is a boolean mask that must lie inside the disk.
    """
    src = SphereImage.from_snapshot(f1)
    reg = np.asarray(region, dtype=bool)
    if reg.ndim == 3:
        reg = reg[..., 0]
    if not reg.any():
        raise ValueError("empty region")
    w = omega.omega if isinstance(omega, AngularVelocity) else np.asarray(omega, dtype=np.float64)
    yy, xx = np.nonzero(reg)
    x = (xx - src.center[1]) / src.radius
    y = (yy - src.center[0]) / src.radius
    pz = np.sqrt(np.maximum(0.0, 1.0 - x * x - y * y))
    pre = np.stack([x, y, pz], axis=1) @ Rotation.from_rotvec(w * dt).as_matrix()
    vals = _bilinear(src.data, src.center[0] + src.radius * pre[:, 1], src.center[1] + src.radius * pre[:, 0])
    target = np.moveaxis(f2.appearance, -1, 0)[:, yy, xx]
    return float(np.abs(vals - target).mean())


def _refine(problem: _PairProblem, start: np.ndarray, err0: float, step: float, rate_max: float,
            min_step: float) -> tuple[np.ndarray, float]:
    """Compass search in omega-space, halving the step when no neighbour improves."""
    best, best_err = start.copy(), err0
    dirs = np.concatenate([np.eye(3), -np.eye(3)])
    while step >= min_step:
        cand = best[None] + step * dirs
        norms = np.linalg.norm(cand, axis=1)
        cand = cand[norms <= rate_max + 1e-12]
        if len(cand) == 0:
            step /= 2
            continue
        errs = problem.errors(cand)
        k = int(np.argmin(errs))
        if errs[k] < best_err:
            best, best_err = cand[k], float(errs[k])
        else:
            step /= 2
    return best, best_err


def _vote(problem: _PairProblem, grid: VelocityGrid, epsilon: float, refine: bool, coarse: int = 1,
          keep_axes: int = 8):
    """Grid argmin of the reprojection error, optionally polished below the grid step.

    ``coarse > 1`` first scores every axis at every ``coarse``-th rate, then
    the full rate ladder only on the ``keep_axes`` best axes.  ``coarse = 1``
    is the exhaustive reference search.
    """
    if coarse <= 1:
        cands = grid.candidates()
        errs = problem.errors(cands)
    else:
        rates = grid.rates
        sub = rates[coarse - 1::coarse]
        if sub.size == 0 or sub[-1] < rates[-1]:
            sub = np.append(sub, rates[-1])
        c1 = np.concatenate([np.zeros((1, 3)), (grid.axes[:, None, :] * sub[None, :, None]).reshape(-1, 3)])
        e1 = problem.errors(c1)
        per_axis = e1[1:].reshape(grid.n_axes, sub.size).min(axis=1)
        best_axes = np.argsort(per_axis, kind="stable")[:keep_axes]
        c2 = (grid.axes[best_axes][:, None, :] * rates[None, :, None]).reshape(-1, 3)
        cands = np.concatenate([c1, c2])
        errs = np.concatenate([e1, problem.errors(c2)])
    k = int(np.argmin(errs))
    omega, err = cands[k], float(errs[k])
    if refine:
        omega, err = _refine(problem, omega, err, grid.delta / 2, grid.rate_max, grid.delta / 32)
    return omega, 1.0 / (err + epsilon), err


def _common_images(snapshots: Sequence[Snapshot], radius: float | None = None) -> list[SphereImage]:
    imgs = [SphereImage.from_snapshot(s) for s in snapshots]
    if radius is None:
        radius = float(np.median([im.radius for im in imgs]))
    return [im.resampled(radius) for im in imgs]


def estimate_pairwise(f_i: Snapshot, f_j: Snapshot, dt: float, grid: VelocityGrid = VelocityGrid(),
                      epsilon: float = 1e-3, refine: bool = False, return_vote: bool = False):
    """Vote ``omega_ij`` (grid argmin of the reprojection error) and score ``1 / (E + eps)``.

    Both snapshots are first resampled to their common (mean) radius.  With
    ``refine`` the grid argmin is polished by a local search below the grid
    step.
    """
    imgs = _common_images([f_i, f_j])
    problem = _PairProblem(imgs[0], imgs[1], dt, grid.rate_max * dt)
    omega, score, err = _vote(problem, grid, epsilon, refine)
    if return_vote:
        return PairVote(0, 1, omega, score, err, problem.informative)
    return AngularVelocity(omega), score


def consensus(votes: Sequence[PairVote], rho: float) -> tuple[np.ndarray, list[int], int]:
    """RANSAC-like consensus over votes.

    Every vote is a hypothesis; its support is the total score of votes
    within ``rho``.  Returns the score-weighted mean of the winner's inliers,
    their indices and the winner's index.
    """
    good = [k for k, v in enumerate(votes) if v.informative]
    if not good:
        raise ValueError("all votes are uninformative")
    om = np.array([votes[k].omega for k in good])
    sc = np.array([votes[k].score for k in good])
    dist = np.linalg.norm(om[:, None, :] - om[None, :, :], axis=2)
    inl = dist <= rho
    support = (inl * sc[None, :]).sum(axis=1)
    win = int(np.argmax(support))
    members = np.flatnonzero(inl[win])
    w = sc[members]
    est = (w[:, None] * om[members]).sum(axis=0) / w.sum()
    return est, [good[k] for k in members], good[win]


@dataclass
class WindowEstimate:
    t_center: float
    omega: AngularVelocity
    n_inliers: int
    score_total: float
    indices: tuple = ()
    votes: list = field(default_factory=list)


def _pairs(times: Sequence[float], params: ConsensusParams) -> list[tuple[int, int]]:
    out = []
    for i in range(len(times)):
        for j in range(i + 1, len(times)):
            dt = times[j] - times[i]
            if dt < params.min_dt - 1e-12:
                continue
            if params.max_dt is not None and dt > params.max_dt + 1e-12:
                continue
            out.append((i, j))
    return out


class _VoteCache:
    def __init__(self, images: list[SphereImage], times, grid: VelocityGrid, params: ConsensusParams):
        self.images, self.times, self.grid, self.params = images, list(times), grid, params
        self.cache: dict[tuple[int, int], PairVote] = {}

    def get(self, i: int, j: int) -> PairVote | None:
        """Vote of pair ``(i, j)``; ``None`` when the pair has no usable common region."""
        key = (i, j)
        if key not in self.cache:
            dt = self.times[j] - self.times[i]
            try:
                problem = _PairProblem(self.images[i], self.images[j], dt, self.grid.rate_max * dt)
            except ValueError:
                self.cache[key] = None
            else:
                omega, score, err = _vote(problem, self.grid, self.params.epsilon, self.params.refine,
                                          self.params.coarse)
                self.cache[key] = PairVote(i, j, omega, score, err, problem.informative)
        return self.cache[key]


def _window_estimate(cache: _VoteCache, idx: Sequence[int], params: ConsensusParams) -> WindowEstimate | None:
    times = [cache.times[k] for k in idx]
    votes = [cache.get(idx[a], idx[b]) for a, b in _pairs(times, params)]
    votes = [v for v in votes if v is not None]
    if not votes:
        return None
    est, members, _ = consensus(votes, params.rho)
    total = float(sum(votes[k].score for k in members))
    return WindowEstimate(0.5 * (times[0] + times[-1]), AngularVelocity(est), len(members), total, tuple(idx), votes)


def estimate_window(snapshots: Sequence[Snapshot], times: Sequence[float], grid: VelocityGrid = VelocityGrid(),
                    params: ConsensusParams = ConsensusParams(), return_details: bool = False):
    """Angular velocity of a window of snapshots by pairwise voting and consensus."""
    if len(snapshots) < 3 or len(snapshots) != len(times):
        raise ValueError("need at least 3 snapshots with matching times")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    params.check(grid)
    cache = _VoteCache(_common_images(snapshots), times, grid, params)
    est = _window_estimate(cache, range(len(snapshots)), params)
    if est is None:
        raise ValueError("no snapshot pair satisfies the time-gap limits with a usable common region")
    return est if return_details else est.omega


def _spans(times: Sequence[float], bounces: Sequence[float]) -> list[list[int]]:
    edges = sorted(bounces)
    spans: list[list[int]] = [[]]
    b = 0
    for k, t in enumerate(times):
        while b < len(edges) and t > edges[b]:
            b += 1
            spans.append([])
        spans[-1].append(k)
    return [s for s in spans if s]


def sliding_velocities(snapshots: Sequence[Snapshot], times: Sequence[float], bounces: Sequence[float] = (),
                       grid: VelocityGrid = VelocityGrid(), params: ConsensusParams = ConsensusParams(),
                       return_details: bool = False):
    """Window estimates sliding by one snapshot, never straddling a bounce.

    Each inter-bounce span is resampled to its own median radius.  A span
    shorter than the window yields one estimate over the whole span; spans
    with fewer than three snapshots, and windows without a usable pair, are
    skipped.
    """
    if len(snapshots) != len(times):
        raise ValueError("snapshots and times differ in length")
    if np.any(np.diff(times) < 0):
        raise ValueError("snapshots must be time-ordered")
    params.check(grid)
    out = []
    for span in _spans(times, bounces):
        if len(span) < 3:
            continue
        imgs = _common_images([snapshots[k] for k in span])
        cache = _VoteCache(imgs, [times[k] for k in span], grid, params)
        w = min(params.window, len(span))
        for start in range(0, len(span) - w + 1):
            est = _window_estimate(cache, range(start, start + w), params)
            if est is None:
                continue
            est.indices = tuple(span[k] for k in est.indices)
            out.append(est)
    if return_details:
        return out
    return [(e.t_center, e.omega) for e in out]


def write_velocity_csv(estimates: Sequence[WindowEstimate], path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t_center", "wx", "wy", "wz", "rate", "n_inliers", "score_total"])
        for e in estimates:
            wr.writerow([repr(float(e.t_center)), *map(repr, map(float, e.omega.omega)), repr(e.omega.rate),
                         e.n_inliers, repr(float(e.score_total))])


def read_velocity_csv(path) -> list[tuple[float, AngularVelocity]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append((float(row["t_center"]), AngularVelocity([float(row["wx"]), float(row["wy"]), float(row["wz"])])))
    return out


def axis_angle_deg(a, b, directed: bool = True) -> float:
    """Angle between two axes in degrees; undirected treats ``a`` and ``-a`` as equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 90.0 if na != nb else 0.0
    c = float(np.dot(a, b) / (na * nb))
    if not directed:
        c = abs(c)
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))
