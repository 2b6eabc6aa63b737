"""Linear operators, proximal maps and projections used by the deblatting solvers.

The solvers work on a zero-padded periodic grid.  The observed frame sits in
the top-left ``(h, w)`` corner; object patches are stored wrapped around the
origin so that circular convolution with a frame-sized kernel reproduces the
linear convolution of :func:`fmopose.image_model.convolve` on the frame.
"""
from __future__ import annotations

import numpy as np
from scipy import fft as sfft


class Grid:
    """Padded periodic grid for a ``frame_shape`` frame and ``patch_shape`` objects."""

    def __init__(self, frame_shape: tuple[int, int], patch_shape: tuple[int, int], dtype=np.float64):
        h, w = frame_shape
        self.dtype = np.dtype(dtype)
        ph, pw = patch_shape
        if ph % 2 == 0 or pw % 2 == 0:
            raise ValueError("patch sides must be odd")
        self.frame_shape = (h, w)
        self.patch_shape = (ph, pw)
        self.cy, self.cx = ph // 2, pw // 2
        # h + cy rows keep the wrapped patch from aliasing onto the frame
        # (p - q >= -(h - 1) for frame pixels); the extra pixel keeps the
        # patch support clear of itself
        self.shape = (sfft.next_fast_len(max(h + self.cy, ph + 1), real=True),
                      sfft.next_fast_len(max(w + self.cx, pw + 1), real=True))
        ys = np.arange(-self.cy, self.cy + 1) % self.shape[0]
        xs = np.arange(-self.cx, self.cx + 1) % self.shape[1]
        self._rows, self._cols = np.ix_(ys, xs)
        support = np.zeros(self.shape, dtype=bool)
        support[self._rows, self._cols] = True
        self.patch_support = support
        frame = np.zeros(self.shape, dtype=bool)
        frame[:h, :w] = True
        self.frame_support = frame
        dy = np.zeros(self.shape, dtype=self.dtype)
        dy[0, 0], dy[-1, 0] = -1.0, 1.0  # forward difference kernel: x[i+1] - x[i]
        dx = np.zeros(self.shape, dtype=self.dtype)
        dx[0, 0], dx[0, -1] = -1.0, 1.0
        self.dy_hat = self.rfft(dy)
        self.dx_hat = self.rfft(dx)
        self.grad_norm2 = np.abs(self.dy_hat) ** 2 + np.abs(self.dx_hat) ** 2

    # fft helpers ---------------------------------------------------------
    def rfft(self, x):
        return sfft.rfft2(x, s=self.shape, axes=(-2, -1))

    def irfft(self, x):
        return sfft.irfft2(x, s=self.shape, axes=(-2, -1))

    # layout conversions --------------------------------------------------
    def wrap_patch(self, patch: np.ndarray) -> np.ndarray:
        """``(..., ph, pw)`` centred patch -> ``(..., H, W)`` wrapped around the origin."""
        out = np.zeros(patch.shape[:-2] + self.shape, dtype=self.dtype)
        out[..., self._rows, self._cols] = patch
        return out

    def unwrap_patch(self, full: np.ndarray) -> np.ndarray:
        return full[..., self._rows, self._cols]

    def embed_frame(self, img: np.ndarray) -> np.ndarray:
        """``(..., h, w)`` frame-sized array -> ``(..., H, W)`` zero padded."""
        out = np.zeros(img.shape[:-2] + self.shape, dtype=self.dtype)
        h, w = self.frame_shape
        out[..., :h, :w] = img
        return out

    def crop_frame(self, full: np.ndarray) -> np.ndarray:
        h, w = self.frame_shape
        return full[..., :h, :w]

    # differential operators ---------------------------------------------
    @staticmethod
    def grad(x: np.ndarray) -> np.ndarray:
        """Periodic forward differences; adds an axis of length 2 before the image axes."""
        return np.stack([np.roll(x, -1, axis=-2) - x, np.roll(x, -1, axis=-1) - x], axis=-3)

    @staticmethod
    def grad_adjoint(g: np.ndarray) -> np.ndarray:
        gy, gx = g[..., 0, :, :], g[..., 1, :, :]
        return (np.roll(gy, 1, axis=-2) - gy) + (np.roll(gx, 1, axis=-1) - gx)


def to_planar(img: np.ndarray) -> np.ndarray:
    """``(h, w, C)`` -> ``(C, h, w)``."""
    return np.moveaxis(np.asarray(img, dtype=np.float64), -1, 0)


def to_interleaved(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x, 0, -1))


# ---------------------------------------------------------------------------
# proximal maps and projections

def soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    return x - np.clip(x, -t, t)


def shrink_isotropic(g: np.ndarray, t: float) -> np.ndarray:
    """Group soft-threshold over the gradient axis (axis -3)."""
    norm = np.sqrt(np.sum(g * g, axis=-3, keepdims=True))
    np.maximum(norm, max(t, np.finfo(norm.dtype).tiny), out=norm)
    return g * (1.0 - t / norm)


def project_simplex(y: np.ndarray, mass: float = 1.0) -> np.ndarray:
    """Euclidean projection of a vector onto ``{x >= 0, sum x = mass}`` (sort and threshold)."""
    flat = np.asarray(y, dtype=np.float64).ravel()
    u = np.sort(flat)[::-1]
    css = np.cumsum(u) - mass
    ind = np.arange(1, flat.size + 1)
    cond = u - css / ind > 0
    k = ind[cond][-1]
    theta = css[cond][-1] / k
    x = np.maximum(flat - theta, 0.0)
    # absorb round-off so the sum is exact to working precision
    s = x.sum()
    if s > 0:
        x *= mass / s
    return x.reshape(np.shape(y))


def project_box(f: np.ndarray, m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project ``(f, m)`` onto ``{0 <= f_c <= m <= 1}`` pixelwise.

    ``f`` has shape ``(C, ...)`` and ``m`` shape ``(1, ...)`` or ``(...)``.
    For fixed ``m`` the optimal ``f`` is ``clip(f, 0, m)``; the remaining 1D
    problem in ``m`` is convex piecewise quadratic, and its minimiser is one of
    the ``C + 1`` per-piece stationary points clipped to ``[0, 1]``.
    """
    m0 = np.asarray(m, dtype=np.float64).reshape(f.shape[1:])
    fs = -np.sort(-f, axis=0)  # descending per pixel
    n_ch = f.shape[0]
    best_m = None
    best_cost = None
    running = np.zeros_like(m0)
    for k in range(n_ch + 1):
        if k > 0:
            running = running + fs[k - 1]
        cand = np.clip((m0 + running) / (1 + k), 0.0, 1.0)
        cost = (cand - m0) ** 2 + np.sum(np.maximum(f - cand, 0.0) ** 2, axis=0)
        if best_m is None:
            best_m, best_cost = cand, cost
        else:
            better = cost < best_cost
            best_m = np.where(better, cand, best_m)
            best_cost = np.where(better, cost, best_cost)
    f_out = np.clip(f, 0.0, None)
    f_out = np.minimum(f_out, best_m)
    return f_out, best_m[None]


def radial_weights(shape: tuple[int, int], center: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Lower ring index ``floor(distance)`` and the interpolation fraction per pixel."""
    cy, cx = center
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    d = np.hypot(yy - cy, xx - cx)
    lo = np.floor(d).astype(np.int64)
    return lo, d - lo


def circular_average(mask: np.ndarray, center: tuple[float, float] | None = None) -> np.ndarray:
    """Closest rotationally symmetric image to ``mask`` about ``center`` (row, col).

    Symmetric images are radial profiles sampled at integer radii and
    interpolated linearly in between; the result is the least-squares fit of
    such a profile, so the operator is an orthogonal projection (linear,
    symmetric, idempotent).  The default centre is the middle pixel.  Accepts
    ``(h, w)`` or ``(h, w, 1)`` input and returns the same shape.
    """
    arr = np.asarray(mask, dtype=np.float64)
    squeeze = arr.ndim == 3
    m2 = arr[..., 0] if squeeze else arr
    if center is None:
        center = ((m2.shape[0] - 1) / 2.0, (m2.shape[1] - 1) / 2.0)
    lo, fr = radial_weights(m2.shape, center)
    lo, fr, v = lo.ravel(), fr.ravel(), m2.ravel()
    nb = int(lo.max()) + 2
    w0, w1 = 1.0 - fr, fr
    # normal equations of the hat-function basis: tridiagonal
    diag = np.bincount(lo, w0 * w0, nb) + np.bincount(lo + 1, w1 * w1, nb)
    off = np.bincount(lo, w0 * w1, nb)[:-1]
    gram = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
    rhs = np.bincount(lo, w0 * v, nb) + np.bincount(lo + 1, w1 * v, nb)
    prof = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    out = (w0 * prof[lo] + w1 * prof[lo + 1]).reshape(m2.shape)
    return out[..., None] if squeeze else out


def mask_centroid(mask2d: np.ndarray) -> tuple[float, float]:
    """Centre of mass ``(row, col)``; the array centre for an empty mask."""
    total = float(mask2d.sum())
    if total <= 1e-12:
        return (mask2d.shape[0] - 1) / 2.0, (mask2d.shape[1] - 1) / 2.0
    yy, xx = np.mgrid[0:mask2d.shape[0], 0:mask2d.shape[1]]
    return float((yy * mask2d).sum() / total), float((xx * mask2d).sum() / total)


def path_laplacian(n: int) -> np.ndarray:
    """``D^T D`` for the forward-difference operator on a path of ``n`` nodes."""
    lap = np.zeros((n, n))
    for i in range(n - 1):
        lap[i, i] += 1
        lap[i + 1, i + 1] += 1
        lap[i, i + 1] -= 1
        lap[i + 1, i] -= 1
    return lap


def seg_diff(x: np.ndarray) -> np.ndarray:
    """Neighbour differences ``x_i - x_{i+1}`` along the first axis."""
    return x[:-1] - x[1:]


def seg_diff_adjoint(d: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + d.shape[1:])
    out[:-1] += d
    out[1:] -= d
    return out
