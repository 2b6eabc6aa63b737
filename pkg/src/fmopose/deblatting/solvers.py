"""ADMM solvers for appearance/mask estimation and for blur-kernel estimation.

Splitting used by the appearance/mask solver (per frame, ``n`` segments):

* ``v = sum_i H_i * F_i`` and ``w = sum_i H_i * M_i``: the data term becomes
  separable per pixel (a 4x4 problem for RGB, solved in closed form);
* ``g_i = grad F_i``: isotropic total variation, group soft-thresholding;
* ``(zF_i, zM_i)``: the set ``0 <= F <= M <= 1`` restricted to the patch;
* ``q_i = M_i``: rotational-symmetry penalty, closed form because circular
  averaging is an orthogonal projection;
* ``dF_i = F_i - F_{i+1}`` (and the mask analogue): L1 soft-thresholding.

The ``F``/``M`` updates are diagonal in frequency up to an ``n x n`` system per
frequency, which is a path Laplacian plus a rank-one term and is inverted
exactly with an eigenbasis and Sherman-Morrison.
"""
from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np

from ..image_model import KERNEL_MASS_TOL, BlurKernel, Snapshot, as_image
from .ops import (
    Grid,
    circular_average,
    mask_centroid,
    path_laplacian,
    project_box,
    project_simplex,
    seg_diff,
    seg_diff_adjoint,
    shrink_isotropic,
    soft_threshold,
    to_interleaved,
    to_planar,
)
from .params import FmSolverParams, SolverInfo

log = logging.getLogger(__name__)


H_SPLIT_SCALE = 1e-2
OVER_RELAX = 1.6
# single precision halves the cost; feasibility is restored exactly in float64 at return
WORK_DTYPE = np.float32


class SolverError(RuntimeError):
    """Raised for degenerate inputs or a numerically broken solve."""


def _data_prox(t, s, y, b, b2sum, rho, frame_mask):
    """Pixelwise minimiser of ``1/2 |v - w B - y|^2 + rho/2 |v - t|^2 + rho/2 |w - s|^2``.

    ``t, y, b`` have shape ``(C, H, W)``, ``s`` shape ``(1, H, W)``.  Outside
    ``frame_mask`` there is no data and ``(v, w) = (t, s)``.
    """
    w = ((1 + rho) * s + np.sum(b * (t - y), axis=0, keepdims=True)) / (1 + rho + b2sum)
    v = (y + w * b + rho * t) / (1 + rho)
    w = np.where(frame_mask, w, s)
    v = np.where(frame_mask, v, t)
    return v, w


def _check_frame(frame, background):
    img = as_image(frame, name="frame")
    bg = as_image(background, name="background")
    if img.shape != bg.shape:
        raise ValueError(f"frame {img.shape} and background {bg.shape} differ")
    return img, bg


def fm_objective(frame, background, kernels, snapshots, templates, params: FmSolverParams, centers=None) -> float:
    """Value of the (piecewise) appearance/mask objective on the frame grid.

    Evaluated with direct linear convolution; ``templates`` may be ``None``
    (no template term).  Used by tests and diagnostics.
    """
    from ..image_model import convolve

    img, bg = _check_frame(frame, background)
    bf = np.zeros_like(img)
    bm = np.zeros(img.shape[:2] + (1,))
    for k, s in zip(kernels, snapshots):
        bf += convolve(k.weights, s.appearance)
        bm += convolve(k.weights, s.mask)
    val = 0.5 * np.sum((bf + (1 - bm) * bg - img) ** 2)
    for i, s in enumerate(snapshots):
        f = to_planar(s.appearance)
        if templates is not None and params.lam > 0:
            val += 0.5 * params.lam * np.sum((s.appearance - templates[i].appearance) ** 2)
        if params.alpha_f > 0:
            # the object is zero outside its patch, so edges on every side count
            grad = Grid.grad(np.pad(f, ((0, 0), (1, 1), (1, 1))))
            val += params.alpha_f * np.sum(np.sqrt(np.sum(grad ** 2, axis=-3)))
        if params.lambda_r > 0:
            m = s.mask[..., 0]
            c = mask_centroid(m) if centers is None else centers[i]
            val += 0.5 * params.lambda_r * np.sum((circular_average(m, c) - m) ** 2)
    for a, b in zip(snapshots[:-1], snapshots[1:]):
        val += params.gamma_f * np.sum(np.abs(a.appearance - b.appearance))
        val += params.gamma_m * np.sum(np.abs(a.mask - b.mask))
    return float(val)


class _FmProblem:
    def __init__(self, frame, background, kernels, templates, params: FmSolverParams, init):
        img, bg = _check_frame(frame, background)
        self.params = params
        n = len(kernels)
        if n < 1 or len(templates) != n:
            raise ValueError(f"need equally many kernels and templates, got {n} and {len(templates)}")
        total = sum(k.mass for k in kernels)
        if abs(total - 1.0) > KERNEL_MASS_TOL:
            raise ValueError(f"total kernel mass must be 1, got {total:.12g}")
        if total <= 0:
            raise SolverError("all-zero kernel")
        for k in kernels:
            if k.shape != img.shape[:2]:
                raise ValueError(f"kernel shape {k.shape} differs from frame {img.shape[:2]}")
        patch = templates[0].size
        if any(t.size != patch for t in templates):
            raise ValueError("templates differ in size")
        n_ch = img.shape[2]
        if any(t.channels != n_ch for t in templates):
            raise ValueError("template channels differ from frame channels")
        self.n, self.n_ch = n, n_ch
        self.grid = g = Grid(img.shape[:2], patch, WORK_DTYPE)
        self.frame_mask = g.frame_support[None]
        self.grid64 = g64 = Grid(img.shape[:2], patch)
        self.y64 = g64.embed_frame(to_planar(img - bg))
        self.b64 = g64.embed_frame(to_planar(bg))
        self.k_hat64 = np.stack([g64.rfft(g64.embed_frame(k.weights)) for k in kernels])
        self.y, self.b = self.y64.astype(WORK_DTYPE), self.b64.astype(WORK_DTYPE)
        self.b2sum = np.sum(self.b ** 2, axis=0, keepdims=True)
        self.k_hat = self.k_hat64.astype(np.result_type(WORK_DTYPE, np.complex64))
        self.templ = g.wrap_patch(np.stack([to_planar(t.appearance) for t in templates]))
        lap_vals, lap_vecs = np.linalg.eigh(path_laplacian(n))
        self.lap_vals, self.lap_vecs = lap_vals.astype(WORK_DTYPE), lap_vecs.astype(WORK_DTYPE)
        init = templates if init is None else init
        self.f = g.wrap_patch(np.stack([to_planar(s.appearance) for s in init]))
        self.m = g.wrap_patch(np.stack([to_planar(s.mask) for s in init]))
        self.use_tv = params.alpha_f > 0
        self.use_sym = params.lambda_r > 0
        self.use_cf = n > 1 and params.gamma_f > 0
        self.use_cm = n > 1 and params.gamma_m > 0
        self.rho = params.admm_rho
        self._factor()

    # ------------------------------------------------------------------
    def _factor(self):
        rho, g = self.rho, self.grid
        base_f = self.params.lam + rho + (rho * g.grad_norm2 if self.use_tv else 0.0)
        base_m = rho * (1.0 + (1.0 if self.use_sym else 0.0))
        lap_f = self.lap_vals if self.use_cf else np.zeros(self.n)
        lap_m = self.lap_vals if self.use_cm else np.zeros(self.n)
        self.fac_f = self._factor_one(base_f, lap_f)
        self.fac_m = self._factor_one(base_m, lap_m)

    def _factor_one(self, base, lap_vals):
        rho = self.rho
        inv_diag = 1.0 / (np.asarray(base)[None] + rho * lap_vals[:, None, None])  # (n, H, Wf)
        kbar = np.conj(self.k_hat)
        z0 = self._apply_inv(inv_diag, kbar[:, None])[:, 0]
        denom = 1.0 + rho * np.sum(self.k_hat * z0, axis=0)
        return inv_diag, z0, denom

    def _apply_inv(self, inv_diag, x):
        if self.n == 1:
            return x * inv_diag[:, None]
        q = self.lap_vecs
        xt = np.tensordot(q.T, x, axes=1) * inv_diag[:, None]
        return np.tensordot(q, xt, axes=1)

    def _solve(self, fac, rhs_hat):
        inv_diag, z0, denom = fac
        y = self._apply_inv(inv_diag, rhs_hat)
        ky = np.sum(self.k_hat[:, None] * y, axis=0)
        return y - self.rho * z0[:, None] * (ky / denom)[None]

    # ------------------------------------------------------------------
    def _sym_prox(self, x):
        """Closed-form prox of ``lambda_r/2 |R q - q|^2`` restricted to the patch."""
        g = self.grid
        out = x.copy()
        lam_r, rho = self.params.lambda_r, self.rho
        patches = g.unwrap_patch(x[:, 0])
        centers = [mask_centroid(np.clip(p, 0, None)) for p in g.unwrap_patch(self.zm[:, 0])]
        res = np.empty_like(patches)
        for i, (p, c) in enumerate(zip(patches, centers)):
            avg = circular_average(p, c)
            res[i] = avg + rho / (lam_r + rho) * (p - avg)
        out[:, 0][:, g._rows, g._cols] = res
        return out

    def _project(self, f, m):
        """Box projection on the patch support; zero elsewhere."""
        g = self.grid
        pf, pm = g.unwrap_patch(f), g.unwrap_patch(m)
        zf, zm = project_box(np.moveaxis(pf, 1, 0), np.moveaxis(pm, 1, 0))
        return g.wrap_patch(np.moveaxis(zf, 0, 1)), g.wrap_patch(np.moveaxis(zm, 0, 1))

    def blurred(self, f, m):
        g = self.grid
        kf = g.irfft(np.sum(self.k_hat[:, None] * g.rfft(f), axis=0))
        km = g.irfft(np.sum(self.k_hat[:, None] * g.rfft(m), axis=0))
        return kf, km

    def objective(self, zf, zm) -> float:
        """Objective in double precision (the iterations may run in single)."""
        p, g = self.params, self.grid64
        zf, zm = zf.astype(np.float64), zm.astype(np.float64)
        kf = g.irfft(np.sum(self.k_hat64[:, None] * g.rfft(zf), axis=0))
        km = g.irfft(np.sum(self.k_hat64[:, None] * g.rfft(zm), axis=0))
        r = (kf - km * self.b64 - self.y64) * self.frame_mask
        val = 0.5 * np.sum(r ** 2)
        if p.lam > 0:
            val += 0.5 * p.lam * np.sum((zf - self.templ.astype(np.float64)) ** 2)
        if self.use_tv:
            val += p.alpha_f * np.sum(np.sqrt(np.sum(g.grad(zf) ** 2, axis=-3)))
        if self.use_sym:
            for pm in g.unwrap_patch(zm[:, 0]):
                val += 0.5 * p.lambda_r * np.sum((circular_average(pm, mask_centroid(pm)) - pm) ** 2)
        if self.n > 1:
            val += p.gamma_f * np.sum(np.abs(seg_diff(zf))) + p.gamma_m * np.sum(np.abs(seg_diff(zm)))
        return float(val)

    # ------------------------------------------------------------------
    def _blocks(self, f, m, kf, km):
        """Current ``A x`` of every split, keyed by block name."""
        out = {"data": (kf, km), "box": (f, m)}
        if self.use_tv:
            out["tv"] = (Grid.grad(f),)
        if self.use_sym:
            out["sym"] = (m,)
        if self.use_cf:
            out["cf"] = (seg_diff(f),)
        if self.use_cm:
            out["cm"] = (seg_diff(m),)
        return out

    def _prox(self, name, x):
        p, rho = self.params, self.rho
        if name == "data":
            return _data_prox(x[0], x[1], self.y, self.b, self.b2sum, rho, self.frame_mask)
        if name == "box":
            return self._project(*x)
        if name == "tv":
            return (shrink_isotropic(x[0], p.alpha_f / rho),)
        if name == "sym":
            return (self._sym_prox(x[0]),)
        if name == "cf":
            return (soft_threshold(x[0], p.gamma_f / rho),)
        return (soft_threshold(x[0], p.gamma_m / rho),)

    def run(self):
        p, g = self.params, self.grid
        n = self.n
        f, m = self.f, self.m
        kf, km = self.blurred(f, m)
        ax = self._blocks(f, m, kf, km)
        z = {k: self._prox(k, v) if k == "box" else tuple(a.copy() for a in v) for k, v in ax.items()}
        u = {k: tuple(np.zeros_like(a) for a in v) for k, v in ax.items()}
        self.zm = z["box"][1]

        info = SolverInfo()
        best = (self.objective(*z["box"]), z["box"][0].copy(), z["box"][1].copy())
        info.objective_init = best[0]
        info.history.append((0, best[0], math.nan, math.nan, self.rho))
        relax = OVER_RELAX

        for it in range(1, p.max_iters + 1):
            rho = self.rho
            # quadratic step, diagonal in frequency
            d = [zz - uu for zz, uu in zip(z["data"], u["data"])]
            bx = [zz - uu for zz, uu in zip(z["box"], u["box"])]
            rhs_f = rho * bx[0] + p.lam * self.templ
            rhs_m = rho * bx[1]
            if self.use_tv:
                rhs_f += rho * g.grad_adjoint(z["tv"][0] - u["tv"][0])
            if self.use_cf:
                rhs_f += rho * seg_diff_adjoint(z["cf"][0] - u["cf"][0], n)
            if self.use_sym:
                rhs_m += rho * (z["sym"][0] - u["sym"][0])
            if self.use_cm:
                rhs_m += rho * seg_diff_adjoint(z["cm"][0] - u["cm"][0], n)
            kbar = rho * np.conj(self.k_hat)[:, None]
            f_hat = self._solve(self.fac_f, g.rfft(rhs_f) + kbar * g.rfft(d[0])[None])
            m_hat = self._solve(self.fac_m, g.rfft(rhs_m) + kbar * g.rfft(d[1])[None])
            f, m = g.irfft(f_hat), g.irfft(m_hat)
            kf = g.irfft(np.sum(self.k_hat[:, None] * f_hat, axis=0))
            km = g.irfft(np.sum(self.k_hat[:, None] * m_hat, axis=0))

            # proximal steps on over-relaxed iterates, then dual ascent
            ax = self._blocks(f, m, kf, km)
            check = it % p.check_every == 0 or it == p.max_iters
            r2 = s2 = xn2 = zn2 = un2 = 0.0
            for name, axs in ax.items():
                zold = z[name]
                # w = relax * a + (1 - relax) * z + u, built in place
                w = []
                for a, zo, uu in zip(axs, zold, u[name]):
                    t = a - zo
                    t *= relax
                    t += zo
                    t += uu
                    w.append(t)
                if name == "sym":
                    self.zm = z["box"][1]
                znew = self._prox(name, tuple(w))
                for t, zn in zip(w, znew):
                    t -= zn
                u[name] = tuple(w)
                z[name] = znew
                if check:
                    for a, zo, zn, uu in zip(axs, zold, znew, u[name]):
                        r2 += float(np.sum((a - zo) ** 2))
                        s2 += float(np.sum((zn - zo) ** 2))
                        xn2 += float(np.sum(a * a))
                        zn2 += float(np.sum(zn * zn))
                        un2 += float(np.sum(uu * uu))
            if not check:
                continue

            r_primal = math.sqrt(r2)
            r_dual = rho * math.sqrt(s2)
            rel_p = r_primal / max(math.sqrt(xn2), math.sqrt(zn2), 1e-12)
            rel_d = r_dual / max(rho * math.sqrt(un2), 1e-12)
            obj = self.objective(*z["box"])
            if not math.isfinite(obj):
                raise SolverError("objective became non-finite")
            info.history.append((it, obj, rel_p, rel_d, rho))
            if obj < best[0]:
                best = (obj, z["box"][0].copy(), z["box"][1].copy())
                info.best_iteration = it
            if rel_p < p.tol and rel_d < p.tol:
                info.converged = True
                break
            if p.adaptive_rho:
                scale = 2.0 if r_primal > 10 * r_dual else 0.5 if r_dual > 10 * r_primal else 1.0
                if scale != 1.0:
                    self.rho = rho * scale
                    u = {k: tuple(uu / scale for uu in v) for k, v in u.items()}
                    self._factor()
        info.iterations = it

        info.objective = best[0]
        zf, zm = project_box(np.moveaxis(g.unwrap_patch(best[1]).astype(np.float64), 1, 0),
                             np.moveaxis(g.unwrap_patch(best[2]).astype(np.float64), 1, 0))
        zf, zm = np.moveaxis(zf, 0, 1), np.moveaxis(zm, 0, 1)
        snaps = [Snapshot(to_interleaved(zf[i]), to_interleaved(zm[i])) for i in range(n)]
        if not info.converged:
            log.debug("appearance/mask solve stopped at max_iters=%d", p.max_iters)
        return snaps, info


def solve_fm_piecewise(
    frame,
    background,
    kernels: Sequence[BlurKernel],
    templates: Sequence[Snapshot],
    params: FmSolverParams = FmSolverParams(),
    init: Sequence[Snapshot] | None = None,
    return_info: bool = False,
):
    """Jointly estimate sub-frame snapshots given their blur kernels.

    ``templates`` define both the patch size and the template appearances;
    ``init`` (default: the templates) is the starting point.  Every returned
    snapshot satisfies ``0 <= F <= M <= 1`` exactly.  The returned iterate is
    the best objective value seen, so it never scores worse than the start.
    """
    prob = _FmProblem(frame, background, list(kernels), list(templates), params, None if init is None else list(init))
    snaps, info = prob.run()
    return (snaps, info) if return_info else snaps


def solve_fm(frame, background, kernel: BlurKernel, template: Snapshot,
             params: FmSolverParams = FmSolverParams(), init: Snapshot | None = None, return_info: bool = False):
    """Estimate one snapshot ``(F, M)`` of the object blurred by ``kernel``."""
    if not kernel.is_normalized:
        raise ValueError(f"kernel must be normalised, mass is {kernel.mass:.12g}")
    if kernel.mass <= 0:
        raise SolverError("all-zero kernel")
    out = solve_fm_piecewise(frame, background, [kernel], [template], params,
                             None if init is None else [init], return_info=True)
    snaps, info = out
    return (snaps[0], info) if return_info else snaps[0]


# ---------------------------------------------------------------------------

def h_objective(frame, background, snapshot: Snapshot, kernel: BlurKernel) -> float:
    from ..image_model import convolve

    img, bg = _check_frame(frame, background)
    bf = convolve(kernel.weights, snapshot.appearance)
    bm = convolve(kernel.weights, snapshot.mask)
    return float(0.5 * np.sum((bf + (1 - bm) * bg - img) ** 2))


def solve_h(frame, background, snapshot: Snapshot, params: FmSolverParams = FmSolverParams(),
            init: BlurKernel | None = None, return_info: bool = False):
    """Estimate the blur kernel on the simplex ``{H >= 0, sum H = 1}`` for a known object."""
    img, bg = _check_frame(frame, background)
    if float(snapshot.mask.sum()) <= 0:
        raise SolverError("degenerate snapshot: empty mask")
    if snapshot.channels != img.shape[2]:
        raise ValueError("snapshot and frame channel counts differ")
    g = Grid(img.shape[:2], snapshot.size)
    frame_mask = g.frame_support[None]
    y = g.embed_frame(to_planar(img - bg))
    b = g.embed_frame(to_planar(bg))
    b2sum = np.sum(b ** 2, axis=0, keepdims=True)
    f_hat = g.rfft(g.wrap_patch(to_planar(snapshot.appearance)))
    m_hat = g.rfft(g.wrap_patch(to_planar(snapshot.mask)))
    spectral = np.sum(np.abs(f_hat) ** 2, axis=0) + np.abs(m_hat[0]) ** 2
    # weight of the h = z split; matching it to the blur operator's energy keeps ADMM well scaled
    c = H_SPLIT_SCALE * float(spectral.max())
    h, w = img.shape[:2]

    def project(x):
        out = np.zeros(g.shape)
        out[:h, :w] = project_simplex(x[:h, :w])
        return out

    def blur(x_hat):
        return g.irfft(f_hat * x_hat[None]), g.irfft(m_hat * x_hat[None])

    def objective(z):
        bf, bm = blur(g.rfft(z))
        r = (bf - bm * b - y) * frame_mask
        return float(0.5 * np.sum(r ** 2))

    if init is None:
        hv = project(np.zeros(g.shape))
    else:
        hv = project(g.embed_frame(init.weights))
    z = hv.copy()
    u = np.zeros_like(hv)
    bf, bm = blur(g.rfft(hv))
    v, wv = bf.copy(), bm.copy()
    av, aw = np.zeros_like(v), np.zeros_like(wv)
    rho = params.admm_rho
    info = SolverInfo()
    best = (objective(z), z.copy())
    info.objective_init = best[0]
    for it in range(1, params.max_iters + 1):
        num = (np.sum(np.conj(f_hat) * g.rfft(v - av), axis=0) + np.conj(m_hat[0]) * g.rfft(wv - aw)[0]
               + c * g.rfft(z - u))
        x_hat = num / (spectral + c)
        hv = g.irfft(x_hat)
        bf, bm = blur(x_hat)
        prev = (v, wv, z)
        v, wv = _data_prox(bf + av, bm + aw, y, b, b2sum, rho, frame_mask)
        z = project(hv + u)
        av += bf - v
        aw += bm - wv
        u += hv - z
        r_primal = math.sqrt(np.sum((bf - v) ** 2) + np.sum((bm - wv) ** 2) + c * np.sum((hv - z) ** 2))
        r_dual = rho * math.sqrt(np.sum((v - prev[0]) ** 2) + np.sum((wv - prev[1]) ** 2) + c * np.sum((z - prev[2]) ** 2))
        xn = math.sqrt(np.sum(bf ** 2) + np.sum(bm ** 2) + c * np.sum(hv ** 2))
        un = rho * math.sqrt(np.sum(av ** 2) + np.sum(aw ** 2) + c * np.sum(u ** 2))
        converged = r_primal / max(xn, 1e-12) < params.tol and r_dual / max(un, 1e-12) < params.tol
        if it % params.check_every == 0 or converged or it == params.max_iters:
            obj = objective(z)
            if not math.isfinite(obj):
                raise SolverError("objective became non-finite")
            info.history.append((it, obj, r_primal, r_dual, rho))
            if obj < best[0]:
                best = (obj, z.copy())
                info.best_iteration = it
        info.iterations = it
        if converged:
            info.converged = True
            break
        if params.adaptive_rho and it % params.check_every == 0:
            scale = 2.0 if r_primal > 10 * r_dual else 0.5 if r_dual > 10 * r_primal else 1.0
            if scale != 1.0:
                rho *= scale
                av /= scale
                aw /= scale
                u /= scale
    info.objective = best[0]
    kernel = BlurKernel(project_simplex(best[1][:h, :w]))
    return (kernel, info) if return_info else kernel
