"""Piecewise polynomial curves shared by the 2D and 3D trajectory types.

Each segment stores ascending power coefficients in *local* time, i.e. the
segment ``s`` is evaluated as ``sum_k c[s][:, k] * (t - t_{s-1})**k``.  This is
the same function space as a global power basis but is far better
conditioned for sequences of tens of frames.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar, Sequence

import numpy as np

CONTINUITY_TOL = 1e-6


@dataclass(frozen=True)
class PiecewisePolynomial:
    breakpoints: np.ndarray
    coeffs: tuple  # one (dim, degree + 1) array per segment

    dim: ClassVar[int] = 0
    axis_names: ClassVar[tuple] = ()

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=np.float64)
        if bp.ndim != 1 or bp.size < 2:
            raise ValueError("need at least two breakpoints")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        coeffs = tuple(np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in self.coeffs)
        if len(coeffs) != bp.size - 1:
            raise ValueError(f"{bp.size - 1} segments expected, got {len(coeffs)}")
        for c in coeffs:
            if c.shape[0] != self.dim:
                raise ValueError(f"segment coefficients must have {self.dim} rows, got {c.shape}")
            if not np.all(np.isfinite(c)):
                raise ValueError("non-finite coefficient")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def n_segments(self) -> int:
        return len(self.coeffs)

    @property
    def degrees(self) -> list[int]:
        return [c.shape[1] - 1 for c in self.coeffs]

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.breakpoints[0]), float(self.breakpoints[-1])

    def segment_index(self, t) -> np.ndarray:
        """Index of the segment containing ``t``; at a breakpoint the left segment wins."""
        t = np.asarray(t, dtype=np.float64)
        lo, hi = self.domain
        if np.any(t < lo - 1e-12) or np.any(t > hi + 1e-12):
            raise ValueError(f"t outside curve domain [{lo}, {hi}]")
        idx = np.searchsorted(self.breakpoints, t, side="left") - 1
        return np.clip(idx, 0, self.n_segments - 1)

    def __call__(self, t) -> np.ndarray:
        """Evaluate at scalar or array ``t``; returns shape ``t.shape + (dim,)``."""
        t = np.asarray(t, dtype=np.float64)
        idx = self.segment_index(t)
        out = np.empty(t.shape + (self.dim,))
        for s in np.unique(idx):
            sel = idx == s
            tau = t[sel] - self.breakpoints[s]
            c = self.coeffs[s]
            acc = np.zeros((tau.size, self.dim))
            for k in range(c.shape[1] - 1, -1, -1):  # Horner
                acc = acc * tau[:, None] + c[:, k]
            out[sel] = acc
        return out

    def derivative(self) -> "PiecewisePolynomial":
        new = []
        for c in self.coeffs:
            if c.shape[1] == 1:
                new.append(np.zeros((self.dim, 1)))
            else:
                new.append(c[:, 1:] * np.arange(1, c.shape[1]))
        return type(self)(self.breakpoints, tuple(new))

    def continuity_gap(self) -> float:
        """Largest jump between left and right limits at interior breakpoints."""
        gap = 0.0
        for s in range(self.n_segments - 1):
            c_left, c_right = self.coeffs[s], self.coeffs[s + 1]
            length = self.breakpoints[s + 1] - self.breakpoints[s]
            left = c_left @ (length ** np.arange(c_left.shape[1]))
            gap = max(gap, float(np.max(np.abs(left - c_right[:, 0]))))
        return gap

    def is_continuous(self, tol: float = CONTINUITY_TOL) -> bool:
        return self.continuity_gap() <= tol

    def rescale_time(self, factor: float) -> "PiecewisePolynomial":
        """Return the curve re-parametrised as ``t' = factor * t``."""
        new = [c / factor ** np.arange(c.shape[1]) for c in self.coeffs]
        return type(self)(self.breakpoints * factor, tuple(new))

    def restrict(self, t_start: float, t_end: float) -> "PiecewisePolynomial":
        """Sub-curve on ``[t_start, t_end]`` keeping absolute time."""
        if not t_start < t_end:
            raise ValueError("empty interval")
        i0 = int(self.segment_index(t_start))
        i1 = int(self.segment_index(t_end))
        bps = [t_start] + [b for b in self.breakpoints[i0 + 1:i1 + 1] if t_start < b < t_end] + [t_end]
        new = []
        for s, a in zip(range(i0, i1 + 1), bps[:-1]):
            new.append(_shift_coeffs(self.coeffs[s], a - self.breakpoints[s]))
        return type(self)(np.asarray(bps), tuple(new))

    def to_dict(self) -> dict:
        segs = []
        for c in self.coeffs:
            seg = {"degree": c.shape[1] - 1}
            for name, row in zip(self.axis_names, c):
                seg[f"coeffs_{name}"] = row.tolist()
            segs.append(seg)
        return {"breakpoints": self.breakpoints.tolist(), "basis": "local", "segments": segs}

    @classmethod
    def from_dict(cls, data: dict) -> "PiecewisePolynomial":
        try:
            bp = data["breakpoints"]
            coeffs = []
            for seg in data["segments"]:
                rows = [seg[f"coeffs_{name}"] for name in cls.axis_names]
                if len({len(r) for r in rows}) != 1:
                    raise ValueError("coefficient rows differ in length")
                if "degree" in seg and int(seg["degree"]) != len(rows[0]) - 1:
                    raise ValueError("degree does not match coefficient count")
                coeffs.append(np.array(rows, dtype=np.float64))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed curve document: {exc}") from exc
        curve = cls(np.asarray(bp, dtype=np.float64), tuple(coeffs))
        if data.get("basis", "local") == "global":
            curve = curve._from_global()
        return curve

    def _from_global(self):
        new = [_shift_coeffs(c, b) for c, b in zip(self.coeffs, self.breakpoints[:-1])]
        return type(self)(self.breakpoints, tuple(new))

    @classmethod
    def from_segments(cls, breakpoints: Sequence[float], polys: Sequence[np.ndarray]):
        return cls(np.asarray(breakpoints, dtype=np.float64), tuple(polys))


def _shift_coeffs(c: np.ndarray, a: float) -> np.ndarray:
    """Coefficients of p(tau + a) given those of p(tau)."""
    from math import comb

    deg = c.shape[1] - 1
    out = np.zeros_like(c)
    for k in range(deg + 1):
        for j in range(k + 1):
            out[:, j] += c[:, k] * comb(k, j) * a ** (k - j)
    return out
