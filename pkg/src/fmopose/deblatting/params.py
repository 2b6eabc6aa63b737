from __future__ import annotations

import math
from dataclasses import dataclass, field, fields


@dataclass(frozen=True)
class FmSolverParams:
    """Weights of the appearance/mask problem plus ADMM settings.

    ``lam``: template weight; ``alpha_f``: total variation of the appearance;
    ``lambda_r``: rotational symmetry of the mask; ``gamma_f``/``gamma_m``:
    L1 similarity of neighbouring sub-frame appearances/masks.
    """

    lam: float = 1e-3
    alpha_f: float = 1e-4
    lambda_r: float = 1e-2
    gamma_f: float = 1e-4
    gamma_m: float = 1e-4
    admm_rho: float = 1e-1
    max_iters: int = 100
    tol: float = 1e-4
    adaptive_rho: bool = True
    check_every: int = 5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                continue
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")
        if self.admm_rho <= 0 or self.tol <= 0:
            raise ValueError("admm_rho and tol must be positive")
        if self.max_iters < 1 or self.check_every < 1:
            raise ValueError("max_iters and check_every must be >= 1")

    def replace(self, **kw) -> "FmSolverParams":
        from dataclasses import replace

        return replace(self, **kw)


@dataclass(frozen=True)
class HierarchySchedule:
    """Binary splitting schedule: ``levels`` halvings, optionally ending in ``n_final`` uniform segments."""

    levels: int = 3
    n_final: int | None = None

    MAX_SEGMENTS = 32

    def __post_init__(self):
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        if self.segment_counts() and self.segment_counts()[-1] > self.MAX_SEGMENTS:
            raise ValueError(f"at most {self.MAX_SEGMENTS} segments per frame")

    def segment_counts(self) -> list[int]:
        """Segment count of every level after level 0."""
        if self.n_final is None:
            return [2 ** k for k in range(1, self.levels + 1)]
        if self.n_final < 1:
            raise ValueError("n_final must be >= 1")
        counts = []
        k = 1
        while 2 ** k < self.n_final:
            counts.append(2 ** k)
            k += 1
        if self.n_final > 1:
            counts.append(self.n_final)
        return counts

    @property
    def n_segments(self) -> int:
        counts = self.segment_counts()
        return counts[-1] if counts else 1


@dataclass
class SolverInfo:
    converged: bool = False
    iterations: int = 0
    objective_init: float = math.nan
    objective: float = math.nan
    best_iteration: int = 0
    history: list = field(default_factory=list)  # (iteration, objective, r_primal, r_dual, rho)
