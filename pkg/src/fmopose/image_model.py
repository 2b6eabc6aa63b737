"""Pixel containers and the blur-and-matting formation model.

Conventions used throughout the package:

* An image is a float64 array of shape ``(height, width, channels)`` with
  ``channels`` in ``{1, 3}`` and values in ``[0, 1]``.  Masks are images with
  one channel, so ``F <= M`` broadcasts directly.
* A :class:`Snapshot` is an object-sized patch with odd side length whose
  centre pixel is the object origin.
* A :class:`BlurKernel` lives on the frame (or estimation-domain) grid; a unit
  weight at pixel ``(row, col)`` pastes the snapshot centred on that pixel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from ._poly import PiecewisePolynomial

KERNEL_MASS_TOL = 1e-9


def as_image(data, channels: int | None = None, name: str = "image") -> np.ndarray:
    """Validate ``data`` as an image and return it as a float64 ``(H, W, C)`` array.

    2D input is treated as single-channel.  Values must be finite and in
    ``[0, 1]``; nothing is clipped silently.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"{name}: expected (H, W, 1|3) array, got shape {arr.shape}")
    if channels is not None and arr.shape[2] != channels:
        raise ValueError(f"{name}: expected {channels} channel(s), got {arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name}: values outside [0, 1] (range {arr.min():.3g}..{arr.max():.3g})")
    return arr


@dataclass(frozen=True)
class BlurKernel:
    """Nonnegative motion-blur kernel on the frame grid."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError(f"kernel must be 2D, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("kernel weights must be finite and nonnegative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @property
    def is_normalized(self) -> bool:
        return abs(self.mass - 1.0) <= KERNEL_MASS_TOL

    def normalized(self) -> "BlurKernel":
        m = self.mass
        if m <= 0:
            raise ValueError("cannot normalize an all-zero kernel")
        return BlurKernel(self.weights / m)

    def __add__(self, other: "BlurKernel") -> "BlurKernel":
        return BlurKernel(self.weights + other.weights)

    @classmethod
    def delta(cls, shape: tuple[int, int], row: int | None = None, col: int | None = None, mass: float = 1.0):
        w = np.zeros(shape)
        w[shape[0] // 2 if row is None else row, shape[1] // 2 if col is None else col] = mass
        return cls(w)


@dataclass(frozen=True)
class Snapshot:
    """Sharp appearance ``F`` and mask ``M`` of the object for one time interval."""

    appearance: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        f = as_image(self.appearance, name="appearance")
        m = as_image(self.mask, channels=1, name="mask")
        if f.shape[:2] != m.shape[:2]:
            raise ValueError(f"appearance {f.shape[:2]} and mask {m.shape[:2]} differ in size")
        if f.shape[0] % 2 == 0 or f.shape[1] % 2 == 0:
            raise ValueError(f"snapshot side lengths must be odd, got {f.shape[:2]}")
        if np.any(f > m):
            raise ValueError("appearance exceeds mask (0 <= F <= M <= 1 violated)")
        f.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "appearance", f)
        object.__setattr__(self, "mask", m)

    @property
    def size(self) -> tuple[int, int]:
        return self.appearance.shape[:2]

    @property
    def channels(self) -> int:
        return self.appearance.shape[2]

    @classmethod
    def empty(cls, side: int, channels: int = 3) -> "Snapshot":
        return cls(np.zeros((side, side, channels)), np.zeros((side, side, 1)))

    @classmethod
    def disk(cls, side: int, radius: float, color=(1.0, 1.0, 1.0)) -> "Snapshot":
        """Uniformly coloured anti-aliased disk centred in the patch."""
        m = disk_mask(side, radius)
        return cls(m * np.asarray(color, dtype=np.float64), m)


def disk_mask(side: int, radius: float, center: tuple[float, float] | None = None) -> np.ndarray:
    """Anti-aliased disk indicator of shape ``(side, side, 1)``.

    Coverage is the linear ramp ``clip(radius + 0.5 - dist, 0, 1)``, whose sum
    approximates ``pi * radius**2`` closely for radius of a few pixels and up.
    """
    c = (side - 1) / 2.0
    cy, cx = (c, c) if center is None else center
    yy, xx = np.mgrid[0:side, 0:side]
    dist = np.hypot(yy - cy, xx - cx)
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)[:, :, None]


class Curve2D(PiecewisePolynomial):
    """Piecewise polynomial image-plane trajectory ``t -> (x, y)`` in pixels."""

    dim = 2
    axis_names = ("x", "y")

    @classmethod
    def polyline(cls, times: Sequence[float], points) -> "Curve2D":
        """Continuous piecewise linear curve through ``points`` at ``times``."""
        times = np.asarray(times, dtype=np.float64)
        points = np.asarray(points, dtype=np.float64)
        coeffs = []
        for k in range(times.size - 1):
            slope = (points[k + 1] - points[k]) / (times[k + 1] - times[k])
            coeffs.append(np.stack([points[k], slope], axis=1))
        return cls(times, tuple(coeffs))


# ---------------------------------------------------------------------------
# convolution

def convolve(kernel: np.ndarray, patch: np.ndarray) -> np.ndarray:
    """Blur a centred odd-sized ``patch`` (h, w, C) along a frame-sized ``kernel``.

    Linear (zero-padded) convolution evaluated by FFT; output has the kernel's
    spatial size and the patch's channel count.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    patch = np.asarray(patch, dtype=np.float64)
    # "same" crops every axis to the first input, so the kernel needs the full channel axis
    k3 = np.broadcast_to(kernel[:, :, None], kernel.shape + (patch.shape[2],))
    return fftconvolve(k3, patch, mode="same", axes=(0, 1))


def convolve_spatial(kernel: np.ndarray, patch: np.ndarray) -> np.ndarray:
    """Direct spatial-domain version of :func:`convolve` (slow; reference only)."""
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    ph, pw, nc = patch.shape
    cy, cx = ph // 2, pw // 2
    out = np.zeros((kh, kw, nc))
    for r, c in zip(*np.nonzero(kernel)):
        # paste patch centred at (r, c), cropped to the frame
        r0, c0 = r - cy, c - cx
        pr0, pc0 = max(0, -r0), max(0, -c0)
        pr1, pc1 = min(ph, kh - r0), min(pw, kw - c0)
        if pr0 >= pr1 or pc0 >= pc1:
            continue
        out[r0 + pr0:r0 + pr1, c0 + pc0:c0 + pc1] += kernel[r, c] * patch[pr0:pr1, pc0:pc1]
    return out


# ---------------------------------------------------------------------------
# formation model

def render_frame(background, snapshot: Snapshot, kernel: BlurKernel) -> np.ndarray:
    """Composite the blurred object over the background: ``H*F + (1 - H*M) B``."""
    return render_frame_piecewise(background, [snapshot], [kernel])


def render_frame_piecewise(background, snapshots: Sequence[Snapshot], kernels: Sequence[BlurKernel]) -> np.ndarray:
    """Frame formed by several snapshots, each blurred by its own kernel.

    The kernels must jointly carry unit mass.
    """
    b = as_image(background, name="background")
    if len(snapshots) != len(kernels) or not snapshots:
        raise ValueError(f"need equally many snapshots and kernels, got {len(snapshots)} and {len(kernels)}")
    total = sum(k.mass for k in kernels)
    if abs(total - 1.0) > KERNEL_MASS_TOL:
        raise ValueError(f"total kernel mass must be 1, got {total:.12g}")
    blurred_f = np.zeros_like(b)
    blurred_m = np.zeros(b.shape[:2] + (1,))
    for snap, k in zip(snapshots, kernels):
        if k.shape != b.shape[:2]:
            raise ValueError(f"kernel shape {k.shape} differs from frame {b.shape[:2]}")
        if snap.channels != b.shape[2]:
            raise ValueError("snapshot and background channel counts differ")
        blurred_f += convolve(k.weights, snap.appearance)
        blurred_m += convolve(k.weights, snap.mask)
    out = blurred_f + (1.0 - blurred_m) * b
    return np.clip(out, 0.0, 1.0)


def estimate_background(frames: Sequence) -> np.ndarray:
    """Per-pixel, per-channel median of a window of frames."""
    if len(frames) == 0:
        raise ValueError("empty frame window")
    stack = np.stack([as_image(f) for f in frames])
    return np.median(stack, axis=0)


def sliding_backgrounds(frames: Sequence, window: int = 5) -> list[np.ndarray]:
    """Background for every frame from the median of the last ``window`` frames.

    Near the start of the sequence the window is extended forward so that it
    still holds ``window`` frames whenever the sequence is long enough.
    """
    n = len(frames)
    if n == 0:
        raise ValueError("empty frame sequence")
    window = max(1, min(window, n))
    out = []
    cache = {}
    for i in range(n):
        lo = max(0, i - window + 1)
        hi = lo + window
        if hi > n:
            lo, hi = n - window, n
        if lo not in cache:
            cache[lo] = estimate_background(frames[lo:hi])
        out.append(cache[lo])
    return out


# ---------------------------------------------------------------------------
# trajectory -> kernel

def curve_arc_length(curve: PiecewisePolynomial, t_start: float, t_end: float, n: int = 256) -> float:
    pts = curve(np.linspace(t_start, t_end, n + 1))[:, :2]
    return float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))


def splat(points_xy: np.ndarray, weights: np.ndarray, frame_size: tuple[int, int]) -> np.ndarray:
    """Bilinear splatting of weighted sub-pixel points onto a ``(rows, cols)`` grid.

    Points are clamped to the grid so no weight is lost at the border.
    """
    h, w = frame_size
    x = np.clip(points_xy[:, 0], 0.0, w - 1.0)
    y = np.clip(points_xy[:, 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    fx, fy = x - x0, y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    idx = np.concatenate([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1])
    wts = np.concatenate([
        weights * (1 - fx) * (1 - fy),
        weights * fx * (1 - fy),
        weights * (1 - fx) * fy,
        weights * fx * fy,
    ])
    return np.bincount(idx, weights=wts, minlength=h * w).reshape(h, w)


def rasterize_segment(
    curve: PiecewisePolynomial,
    t_start: float,
    t_end: float,
    frame_size: tuple[int, int],
    mass: float = 1.0,
    origin: tuple[float, float] = (0.0, 0.0),
    samples_per_pixel: float = 16.0,
) -> BlurKernel:
    """Blur kernel of the curve on ``[t_start, t_end]`` carrying total weight ``mass``.

    The curve is sampled at the midpoints of equal time steps (exposure is
    uniform in time), with at least ``samples_per_pixel`` samples per pixel of
    arc length, and each sample is splatted bilinearly.  ``origin`` is the
    frame position ``(x, y)`` of kernel pixel ``(0, 0)``.
    """
    if not t_start < t_end:
        raise ValueError(f"degenerate interval [{t_start}, {t_end}]")
    if not 0 < mass <= 1:
        raise ValueError("mass must be in (0, 1]")
    length = curve_arc_length(curve, t_start, t_end)
    n = max(1, int(math.ceil(samples_per_pixel * length)))
    ts = t_start + (np.arange(n) + 0.5) * (t_end - t_start) / n
    pts = curve(ts)[:, :2] - np.asarray(origin, dtype=np.float64)
    weights = np.full(n, mass / n)
    return BlurKernel(splat(pts, weights, frame_size))
