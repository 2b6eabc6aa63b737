"""Hierarchical splitting of one frame into sub-frame snapshots."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..image_model import BlurKernel, Snapshot, as_image, disk_mask, rasterize_segment
from .params import FmSolverParams, HierarchySchedule, SolverInfo
from .solvers import solve_fm, solve_fm_piecewise


def patch_half_size(radius: float) -> int:
    """Half side of the snapshot patch for an object of the given radius."""
    return int(math.ceil(1.2 * radius)) + 2


@dataclass(frozen=True)
class Domain:
    """Rectangular estimation domain ``[y0, y1) x [x0, x1)`` inside the frame."""

    y0: int
    y1: int
    x0: int
    x1: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.y1 - self.y0, self.x1 - self.x0

    @property
    def origin(self) -> tuple[float, float]:
        """Frame position ``(x, y)`` of the domain's pixel ``(0, 0)``."""
        return float(self.x0), float(self.y0)

    def crop(self, img: np.ndarray) -> np.ndarray:
        return img[self.y0:self.y1, self.x0:self.x1]


def estimation_domain(curve, t0: float, t1: float, frame_shape: tuple[int, int], radius: float,
                      n_samples: int = 64) -> Domain:
    """Bounding box of the curve on ``[t0, t1]`` dilated by 1.5 radii (at least one patch half)."""
    pts = curve(np.linspace(t0, t1, n_samples))
    pad = max(1.5 * radius, patch_half_size(radius) + 1)
    h, w = frame_shape
    x0 = max(0, int(math.floor(pts[:, 0].min() - pad)))
    x1 = min(w, int(math.ceil(pts[:, 0].max() + pad)) + 1)
    y0 = max(0, int(math.floor(pts[:, 1].min() - pad)))
    y1 = min(h, int(math.ceil(pts[:, 1].max() + pad)) + 1)
    if x0 >= x1 or y0 >= y1:
        raise ValueError("curve lies outside the frame")
    return Domain(y0, y1, x0, x1)


def split_times(t0: float, t1: float, n: int) -> np.ndarray:
    return t0 + (t1 - t0) * np.arange(n + 1) / n


def snapshot_kernels(curve, t0: float, t1: float, n: int, shape: tuple[int, int],
                     origin: tuple[float, float] = (0.0, 0.0)) -> list[BlurKernel]:
    """Kernels of ``n`` equal-time sub-intervals of ``[t0, t1]``, each of mass ``1/n``."""
    ts = split_times(t0, t1, n)
    return [rasterize_segment(curve, ts[i], ts[i + 1], shape, mass=1.0 / n, origin=origin) for i in range(n)]


def parent_index(i: int, n: int, n_parent: int) -> int:
    """Parent segment that contains the midpoint of segment ``i`` of ``n``."""
    return min(n_parent - 1, int(math.floor((i + 0.5) * n_parent / n)))


def disk_template(side: int, radius: float, color=(0.5, 0.5, 0.5)) -> Snapshot:
    m = disk_mask(side, radius)
    return Snapshot(m * np.asarray(color, dtype=np.float64), m)


@dataclass
class HierarchyResult:
    snapshots: list
    times: np.ndarray  # segment boundaries, length n + 1
    levels: list = field(default_factory=list)  # (n_segments, SolverInfo) per level

    @property
    def mid_times(self) -> np.ndarray:
        return 0.5 * (self.times[:-1] + self.times[1:])


def hierarchical_deblat(
    frame,
    background,
    curve,
    f0: Snapshot,
    schedule: HierarchySchedule = HierarchySchedule(),
    params: FmSolverParams = FmSolverParams(),
    t_range: tuple[float, float] = (0.0, 1.0),
    origin: tuple[float, float] = (0.0, 0.0),
    return_result: bool = False,
):
    """Split the exposure of one frame into sub-frame snapshots, level by level.

    Each level divides every segment in two (equal time), rasterises the
    sub-curves into kernels of mass ``1/n`` and solves the piecewise problem
    with templates (and warm starts) inherited from the parent segments.
    ``frame`` and ``background`` may be crops; ``origin`` is the frame
    position ``(x, y)`` of their pixel ``(0, 0)`` and ``curve`` is in frame
    coordinates.
    """
    img = as_image(frame, name="frame")
    t0, t1 = t_range
    result = HierarchyResult([f0], split_times(t0, t1, 1))
    current = [f0]
    for n in schedule.segment_counts():
        kernels = snapshot_kernels(curve, t0, t1, n, img.shape[:2], origin)
        templates = [current[parent_index(i, n, len(current))] for i in range(n)]
        current, info = solve_fm_piecewise(img, background, kernels, templates, params, init=templates,
                                           return_info=True)
        result.levels.append((n, info))
    result.snapshots = current
    result.times = split_times(t0, t1, len(current))
    return result if return_result else current


def estimate_radius(
    frame,
    background,
    curve,
    radius_guess: float,
    params: FmSolverParams = FmSolverParams(),
    t_range: tuple[float, float] = (0.0, 1.0),
    passes: int = 2,
) -> float:
    """Apparent radius from template-free level-0 solves.

    Each pass solves the single-snapshot problem with ``lam = 0`` on a domain
    sized for the current radius and replaces the radius by
    ``sqrt(sum M / pi)``.  The template disk pulls the mask towards its own
    radius, so a poor guess would otherwise bias every later level.
    """
    img = as_image(frame, name="frame")
    bg = as_image(background, name="background")
    r = float(radius_guess)
    if not r >= 1.0:
        raise ValueError(f"radius_guess must be >= 1 px, got {radius_guess}")
    for _ in range(passes):
        dom = estimation_domain(curve, t_range[0], t_range[1], img.shape[:2], r)
        kernel = snapshot_kernels(curve, t_range[0], t_range[1], 1, dom.shape, dom.origin)[0]
        snap = solve_fm(dom.crop(img), dom.crop(bg), kernel, disk_template(2 * patch_half_size(r) + 1, r),
                        params.replace(lam=0.0))
        area = float(snap.mask.sum())
        if area < math.pi:
            break
        r = math.sqrt(area / math.pi)
    return r


def deblat_frame(
    frame,
    background,
    curve,
    radius: float,
    schedule: HierarchySchedule = HierarchySchedule(),
    params: FmSolverParams = FmSolverParams(),
    t_range: tuple[float, float] = (0.0, 1.0),
    template: Snapshot | None = None,
) -> tuple[HierarchyResult, Domain]:
    """Level-0 solve on the estimation domain followed by the hierarchy.

    ``curve`` and ``t_range`` describe the object path during this frame in
    full-frame coordinates; ``radius`` is the expected apparent radius.
    """
    img = as_image(frame, name="frame")
    bg = as_image(background, name="background")
    dom = estimation_domain(curve, t_range[0], t_range[1], img.shape[:2], radius)
    side = 2 * patch_half_size(radius) + 1
    if template is None:
        template = disk_template(side, radius)
    roi, roi_bg = dom.crop(img), dom.crop(bg)
    kernel = snapshot_kernels(curve, t_range[0], t_range[1], 1, dom.shape, dom.origin)[0]
    f0, info0 = solve_fm(roi, roi_bg, kernel, template, params, return_info=True)
    res = hierarchical_deblat(roi, roi_bg, curve, f0, schedule, params, t_range, dom.origin, return_result=True)
    res.levels.insert(0, (1, info0))
    return res, dom
