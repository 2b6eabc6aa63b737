import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from fmopose.deblatting import (FmSolverParams, HierarchySchedule, SolverError, circular_average, deblat_frame,
                                disk_template, fm_objective, hierarchical_deblat, project_box, project_simplex,
                                snapshot_kernels, solve_fm, solve_fm_piecewise, solve_h)
from fmopose.deblatting.ops import radial_weights, shrink_isotropic, soft_threshold
from fmopose.image_model import BlurKernel, Curve2D, Snapshot, convolve, disk_mask, rasterize_segment, render_frame, \
    render_frame_piecewise
from fmopose.rotation import VelocityGrid, estimate_pairwise
from fmopose.synth import free_flight_scene, generate_sequence, project_sphere, random_background, random_texture

TEX = random_texture(0)
SIDE = 2 * (math.ceil(1.2 * 8) + 2) + 1  # patch side for radius 8


def _sphere(rotvec=(0, 0, 0), radius=8.0, side=SIDE):
    c = (side - 1) / 2
    return project_sphere(TEX, Rotation.from_rotvec(rotvec), radius, (c, c), (side, side))


def _scene(shape=(40, 70), path=((18.0, 20.0), (50.0, 22.0)), seed=1):
    bg = random_background(shape, seed=seed)
    curve = Curve2D.polyline([0.0, 1.0], list(path))
    return bg, curve


def _data_residual(frame, bg, kernels, snaps):
    return float(np.abs(render_frame_piecewise(bg, snaps, kernels) - frame).mean())


# ---------------------------------------------------------------------------
# proximal operators

def _hat_basis_projection(shape, center):
    """Dense least-squares projection onto profiles linear between integer radii."""
    lo, fr = radial_weights(shape, center)
    nb = int(lo.max()) + 2
    a = np.zeros((lo.size, nb))
    idx = np.arange(lo.size)
    a[idx, lo.ravel()] += 1 - fr.ravel()
    a[idx, lo.ravel() + 1] += fr.ravel()
    return a @ np.linalg.pinv(a)


def test_circular_average_matches_dense_projection_single_pixel():
    m = np.zeros((15, 15))
    m[4, 10] = 1.0
    proj = _hat_basis_projection(m.shape, (7.0, 7.0))
    assert np.abs(circular_average(m) - (proj @ m.ravel()).reshape(m.shape)).max() <= 1e-9


def test_circular_average_single_pixel_spreads_over_its_ring():
    m = np.zeros((21, 21))
    m[10, 15] = 1.0  # integer radius 5 about the centre
    out = circular_average(m)
    d = np.hypot(*np.mgrid[0:21, 0:21] - 10.0)
    ring = np.abs(d - 5.0) < 1e-9
    assert np.ptp(out[ring]) <= 1e-12 and out[ring].min() > 0
    assert out.sum() == pytest.approx(1.0, abs=1e-9)  # the constant profile is in the range


@pytest.mark.parametrize("r", [4.5, 7.5, 9.5])
def test_disk_is_fixed_point(r):
    m = disk_mask(25, r)[..., 0]
    assert np.abs(circular_average(m) - m).max() <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_circular_average_idempotent_and_symmetric(seed):
    r = np.random.default_rng(seed)
    x, y = r.uniform(0, 1, (2, 13, 13))
    cx = (6.0 + r.uniform(-1, 1), 6.0 + r.uniform(-1, 1))
    px = circular_average(x, cx)
    assert np.abs(circular_average(px, cx) - px).max() <= 1e-9
    assert np.sum(px * y) == pytest.approx(np.sum(x * circular_average(y, cx)), abs=1e-9)


def test_circular_average_keeps_channel_axis():
    assert circular_average(np.ones((9, 9, 1))).shape == (9, 9, 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_simplex_projection_feasible_and_optimal(seed, scale):
    y = np.random.default_rng(seed).normal(0, scale, (6, 7))
    p = project_simplex(y)
    assert p.min() >= 0 and abs(p.sum() - 1) <= 1e-9
    # optimality: p is closer to y than random simplex points
    for q in np.random.default_rng(seed + 1).dirichlet(np.ones(42), 20):
        assert np.sum((p - y) ** 2) <= np.sum((q.reshape(6, 7) - y) ** 2) + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_box_projection_feasible(seed):
    r = np.random.default_rng(seed)
    f, m = project_box(r.normal(0.5, 1, (3, 5, 5)), r.normal(0.5, 1, (1, 5, 5)))
    assert m.min() >= 0 and m.max() <= 1 and f.min() >= 0 and np.all(f <= m)


def test_box_projection_is_nearest_point_per_pixel():
    r = np.random.default_rng(0)
    f0, m0 = r.normal(0.5, 0.7, (3, 1, 1)), r.normal(0.5, 0.7, (1, 1, 1))
    f, m = project_box(f0, m0)
    best = np.inf
    for mm in np.linspace(0, 1, 2001):
        ff = np.clip(f0, 0, mm)
        best = min(best, np.sum((ff - f0) ** 2) + (mm - m0) ** 2)
    assert np.sum((f - f0) ** 2) + np.sum((m - m0) ** 2) <= best + 1e-6


def test_shrinkage_operators():
    x = np.array([-2.0, -0.5, 0.0, 0.3, 3.0])
    assert np.allclose(soft_threshold(x, 1.0), [-1.0, 0.0, 0.0, 0.0, 2.0])
    g = np.array([[[3.0]], [[4.0]]])
    assert np.allclose(shrink_isotropic(g, 1.0)[:, 0, 0], [3 * 0.8, 4 * 0.8])
    assert np.array_equal(shrink_isotropic(np.zeros((2, 1, 1)), 0.0), np.zeros((2, 1, 1)))


# ---------------------------------------------------------------------------
# solve_fm

def test_round_trip_data_residual():
    """Mean absolute residual over a standard 480x270 frame after 100 iterations."""
    bg = random_background((270, 480), seed=1)
    curve = Curve2D.polyline([0.0, 1.0], [(210.0, 135.0), (270.0, 138.0)])
    side = 2 * (math.ceil(1.2 * 20) + 2) + 1
    c = (side - 1) / 2
    gt = project_sphere(TEX, Rotation.from_rotvec((0.2, 0.5, 0.1)), 20.0, (c, c), (side, side))
    kernel = rasterize_segment(curve, 0.0, 1.0, bg.shape[:2])
    frame = render_frame(bg, gt, kernel)
    params = FmSolverParams(lam=0.0, lambda_r=0.0, alpha_f=1e-6, gamma_f=0.0, gamma_m=0.0, max_iters=100)
    tmpl = disk_template(side, 20.0)
    snap = solve_fm(frame, bg, kernel, tmpl, params)
    assert _data_residual(frame, bg, [kernel], [snap]) <= 1e-4
    # on the blurred footprint the fit still improves a lot on the template start
    supp = convolve(kernel.weights, gt.mask)[..., 0] > 1e-6
    start = np.abs(render_frame(bg, tmpl, kernel) - frame)[supp].mean()
    assert np.abs(render_frame(bg, snap, kernel) - frame)[supp].mean() <= 0.1 * start


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 1000), st.floats(1e-4, 1.0))
def test_solve_fm_feasible_and_improves_objective(seed, lam):
    r = np.random.default_rng(seed)
    bg, curve = _scene(seed=seed + 1, path=((18.0, 20.0), (18.0 + r.uniform(0, 30), 20.0 + r.uniform(-5, 5))))
    kernel = rasterize_segment(curve, 0.0, 1.0, bg.shape[:2])
    frame = np.clip(render_frame(bg, _sphere(r.normal(0, 1, 3)), kernel) + r.normal(0, 0.02, bg.shape), 0, 1)
    params = FmSolverParams(lam=lam, max_iters=30)
    tmpl = disk_template(SIDE, 8.0)
    snap, info = solve_fm(frame, bg, kernel, tmpl, params, return_info=True)
    assert snap.mask.min() >= 0 and snap.mask.max() <= 1
    assert snap.appearance.min() >= 0 and np.all(snap.appearance <= snap.mask)
    assert info.objective <= info.objective_init
    assert fm_objective(frame, bg, [kernel], [snap], [tmpl], params) == pytest.approx(info.objective, rel=1e-8)


def test_huge_template_weight_returns_template():
    bg, curve = _scene()
    kernel = rasterize_segment(curve, 0.0, 1.0, bg.shape[:2])
    frame = render_frame(bg, _sphere((1, 0, 0)), kernel)
    tmpl = _sphere((0, 1, 0))
    snap = solve_fm(frame, bg, kernel, tmpl, FmSolverParams(lam=1e6))
    assert np.abs(snap.appearance - tmpl.appearance).max() <= 1e-3


def test_strong_symmetry_makes_mask_radial():
    bg, curve = _scene()
    kernel = rasterize_segment(curve, 0.0, 1.0, bg.shape[:2])
    gt = Snapshot.disk(SIDE, 8.0, (0.9, 0.4, 0.2))
    frame = render_frame(bg, gt, kernel)
    snap = solve_fm(frame, bg, kernel, disk_template(SIDE, 8.0), FmSolverParams(lambda_r=10.0, max_iters=200))
    m = snap.mask[..., 0]
    from fmopose.deblatting import mask_centroid

    rm = circular_average(m, mask_centroid(m))
    assert np.linalg.norm(rm - m) / np.linalg.norm(m) <= 1e-2


def test_solve_fm_rejects_zero_kernel():
    bg, _ = _scene()
    with pytest.raises((SolverError, ValueError)):
        solve_fm(bg, bg, BlurKernel(np.zeros(bg.shape[:2])), disk_template(SIDE, 8.0))


def test_more_iterations_do_not_worsen_objective_beyond_tol():
    bg, curve = _scene()
    kernel = rasterize_segment(curve, 0.0, 1.0, bg.shape[:2])
    frame = render_frame(bg, _sphere((0.3, 0.3, 0)), kernel)
    tmpl = disk_template(SIDE, 8.0)
    _, a = solve_fm(frame, bg, kernel, tmpl, FmSolverParams(max_iters=50), return_info=True)
    _, b = solve_fm(frame, bg, kernel, tmpl, FmSolverParams(max_iters=100), return_info=True)
    assert b.objective <= a.objective + 1e-4 * max(1.0, abs(a.objective))


def test_solvers_deterministic():
    bg, curve = _scene()
    kernel = rasterize_segment(curve, 0.0, 1.0, bg.shape[:2])
    frame = render_frame(bg, _sphere((0.3, 0.3, 0)), kernel)
    a = solve_fm(frame, bg, kernel, disk_template(SIDE, 8.0), FmSolverParams(max_iters=20))
    b = solve_fm(frame, bg, kernel, disk_template(SIDE, 8.0), FmSolverParams(max_iters=20))
    assert np.array_equal(a.appearance, b.appearance) and np.array_equal(a.mask, b.mask)


# ---------------------------------------------------------------------------
# solve_h

def _ncc(a, b):
    a, b = a - a.mean(), b - b.mean()
    return float(np.sum(a * b) / np.sqrt(np.sum(a * a) * np.sum(b * b)))


def test_solve_h_two_point_kernel():
    bg = random_background((40, 60), seed=2)
    w = np.zeros(bg.shape[:2])
    w[20, 22], w[18, 38] = 0.5, 0.5
    snap = _sphere((0.4, 0.2, 0))
    frame = render_frame(bg, snap, BlurKernel(w))
    h = solve_h(frame, bg, snap, FmSolverParams(max_iters=300))
    assert _ncc(h.weights, w) >= 0.95


def test_solve_h_delta_kernel():
    bg = random_background((40, 60), seed=3)
    snap = _sphere((0.1, 0.7, 0))
    frame = render_frame(bg, snap, BlurKernel.delta(bg.shape[:2], 21, 30))
    h = solve_h(frame, bg, snap)
    assert h.weights[20:23, 29:32].sum() >= 0.9


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 1000))
def test_solve_h_on_simplex(seed):
    r = np.random.default_rng(seed)
    bg = r.uniform(0, 1, (30, 40, 3))
    frame = r.uniform(0, 1, (30, 40, 3))
    h = solve_h(frame, bg, _sphere(r.normal(0, 1, 3)), FmSolverParams(max_iters=20))
    assert h.weights.min() >= 0 and abs(h.weights.sum() - 1) <= 1e-9


def test_solve_h_rejects_empty_mask():
    bg = random_background((30, 40), seed=3)
    with pytest.raises(SolverError):
        solve_h(bg, bg, Snapshot.empty(SIDE))


# ---------------------------------------------------------------------------
# piecewise and hierarchy

def test_piecewise_single_segment_equals_solve_fm():
    bg, curve = _scene()
    kernel = rasterize_segment(curve, 0.0, 1.0, bg.shape[:2])
    frame = render_frame(bg, _sphere((0.3, 0.3, 0)), kernel)
    tmpl = disk_template(SIDE, 8.0)
    a = solve_fm(frame, bg, kernel, tmpl)
    (b,) = solve_fm_piecewise(frame, bg, [kernel], [tmpl], FmSolverParams(gamma_f=5.0, gamma_m=5.0))
    assert np.abs(a.appearance - b.appearance).max() <= 1e-6
    assert np.abs(a.mask - b.mask).max() <= 1e-6


def test_piecewise_feasible_and_strong_coupling_equalises():
    bg, curve = _scene()
    kernels = snapshot_kernels(curve, 0.0, 1.0, 2, bg.shape[:2])
    snap = _sphere((0.3, 0.3, 0))
    frame = render_frame_piecewise(bg, [snap, snap], kernels)
    tmpl = disk_template(SIDE, 8.0)
    out = solve_fm_piecewise(frame, bg, kernels, [tmpl, tmpl], FmSolverParams(gamma_f=10.0, gamma_m=10.0,
                                                                              max_iters=200))
    for s in out:
        assert s.mask.min() >= 0 and s.mask.max() <= 1 and np.all(s.appearance <= s.mask)
    assert np.abs(out[0].appearance - out[1].appearance).mean() <= 1e-3
    assert np.abs(out[0].mask - out[1].mask).mean() <= 1e-3


def test_piecewise_four_segments_track_rotation():
    bg, curve = _scene(shape=(50, 110), path=((18.0, 25.0), (92.0, 25.0)))
    rotvecs = [np.array([0.0, 0.6, 0.0]) * i for i in range(4)]
    gts = [_sphere(v) for v in rotvecs]
    kernels = snapshot_kernels(curve, 0.0, 1.0, 4, bg.shape[:2])
    frame = render_frame_piecewise(bg, gts, kernels)
    tmpl = disk_template(SIDE, 8.0)
    out = solve_fm_piecewise(frame, bg, kernels, [tmpl] * 4, FmSolverParams(max_iters=200))
    m = gts[0].mask
    wins = 0
    for i, s in enumerate(out):
        d = [np.sum(np.abs(s.appearance - g.appearance) * m) for g in gts]
        wins += int(np.argmin(d) == i)
    assert wins >= 3


def test_hierarchy_zero_levels_returns_input():
    bg, curve = _scene()
    f0 = _sphere()
    out = hierarchical_deblat(bg, bg, curve, f0, HierarchySchedule(0))
    assert len(out) == 1 and out[0] is f0


def test_hierarchy_static_appearance_keeps_f0():
    bg, curve = _scene()
    snap = Snapshot.disk(SIDE, 8.0, (0.8, 0.3, 0.5))
    kernel = rasterize_segment(curve, 0.0, 1.0, bg.shape[:2])
    frame = render_frame(bg, snap, kernel)
    res, dom = deblat_frame(frame, bg, curve, 8.0, HierarchySchedule(1))
    # level-0 result is the first entry of the recorded levels; compare the split to it
    f0 = solve_fm(dom.crop(frame), dom.crop(bg), rasterize_segment(curve, 0, 1, dom.shape, origin=dom.origin),
                  disk_template(SIDE, 8.0))
    assert len(res.snapshots) == 2
    for s in res.snapshots:
        assert np.abs(s.appearance - f0.appearance).mean() <= 1e-2


def test_schedule_limits():
    assert HierarchySchedule(3).n_segments == 8
    assert HierarchySchedule(2, n_final=25).segment_counts() == [2, 4, 8, 16, 25]
    with pytest.raises(ValueError):
        HierarchySchedule(6)
    with pytest.raises(ValueError):
        FmSolverParams(lam=-1.0)
