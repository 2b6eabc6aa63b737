"""Deblatting: joint deblurring and matting of a fast moving object."""
from .hierarchy import (
    Domain,
    HierarchyResult,
    deblat_frame,
    disk_template,
    estimate_radius,
    estimation_domain,
    hierarchical_deblat,
    parent_index,
    patch_half_size,
    snapshot_kernels,
    split_times,
)
from .ops import circular_average, mask_centroid, project_box, project_simplex
from .params import FmSolverParams, HierarchySchedule, SolverInfo
from .solvers import SolverError, fm_objective, h_objective, solve_fm, solve_fm_piecewise, solve_h

__all__ = [
    "Domain",
    "FmSolverParams",
    "HierarchyResult",
    "HierarchySchedule",
    "SolverError",
    "SolverInfo",
    "circular_average",
    "deblat_frame",
    "disk_template",
    "estimate_radius",
    "estimation_domain",
    "fm_objective",
    "h_objective",
    "hierarchical_deblat",
    "mask_centroid",
    "parent_index",
    "patch_half_size",
    "project_box",
    "project_simplex",
    "snapshot_kernels",
    "solve_fm",
    "solve_fm_piecewise",
    "solve_h",
    "split_times",
]
