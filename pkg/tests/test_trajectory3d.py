import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmopose._poly import _shift_coeffs
from fmopose.image_model import disk_mask
from fmopose.synth import bounce_scene, free_flight_scene, generate_sequence
from fmopose.trajectory3d import (DepthSample, Trajectory3D, default_degree, depth_from_mask, detect_bounces,
                                  eval_trajectory, fit_residual_rms, fit_trajectory, make_sample,
                                  normalize_depths, read_depth_csv, write_depth_csv)


def _samples(ts, fn):
    return [DepthSample(float(t), *map(float, fn(t)), mask_area=100.0) for t in ts]


# ---------------------------------------------------------------------------
# depth from mask

def test_depth_trivial_cases():
    assert depth_from_mask(np.full((1, 1), math.pi / 4) * np.ones((2, 2)))[1] == pytest.approx(1.0)
    area, d = depth_from_mask(np.full((4, 4), math.pi / 4))
    assert area == pytest.approx(4 * math.pi) and d == pytest.approx(0.5)
    assert depth_from_mask(np.zeros((3, 3)))[1] == math.inf


def test_depth_clips_mask_values():
    assert depth_from_mask(np.array([[2.0, -1.0]]))[0] == 1.0


def test_small_area_flagged_unreliable():
    assert not make_sample(0.0, 0, 0, np.full((1, 3), 1.0)).reliable
    assert make_sample(0.0, 0, 0, np.ones((2, 2))).reliable


def test_rendered_disk_depth_matches_ground_truth():
    r0 = 20.0
    samples = [make_sample(i, 0, 0, disk_mask(101, r)[..., 0]) for i, r in enumerate([20.0, 13.0, 31.0])]
    norm = normalize_depths(samples)
    gt = np.array([r0 / 20.0, r0 / 13.0, r0 / 31.0])
    gt = gt / np.median(gt)
    assert np.allclose([s.d for s in norm], gt, rtol=1e-2)


@settings(max_examples=30, deadline=None)
@given(st.floats(6.0, 30.0), st.floats(1.1, 2.5))
def test_depth_scales_inversely_with_radius(r, s):
    d1 = depth_from_mask(disk_mask(151, r)[..., 0])[1]
    d2 = depth_from_mask(disk_mask(151, r * s)[..., 0])[1]
    assert d1 / d2 == pytest.approx(s, rel=1e-2)


def test_normalised_median_is_one():
    s = _samples(range(5), lambda t: (0, 0, 1 + t))
    assert np.median([x.d for x in normalize_depths(s)]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        normalize_depths([DepthSample(0, 0, 0, 1, 1, reliable=False)])


def test_depth_csv_round_trip(tmp_path):
    s = [make_sample(0.125, 3.5, 4.25, disk_mask(21, 5.0)[..., 0]), make_sample(0.375, 1, 2, np.zeros((2, 2)))]
    write_depth_csv(s, tmp_path / "d.csv")
    assert read_depth_csv(tmp_path / "d.csv") == s
    assert open(tmp_path / "d.csv").readline().strip() == "t,x,y,area,d,reliable"


# ---------------------------------------------------------------------------
# bounces

def test_monotone_depth_has_no_bounce():
    assert detect_bounces(_samples(np.arange(40) / 8, lambda t: (t, 0, 1 + 0.1 * t))) == []


def test_two_d_bounces_pass_through():
    assert detect_bounces(_samples(np.arange(200) / 8, lambda t: (t, 0, 1 + 0.01 * t * t)), [12.0]) == [12.0]


def test_v_shaped_depth_from_rendered_masks():
    spec = bounce_scene(n_subframes=96)
    k = spec.averaging_factor
    ts = (np.arange(spec.n_frames * k) + 0.5) / k
    pos = spec.trajectory_gt(ts)
    side = 2 * int(math.ceil(spec.radius_at_unit_depth / pos[:, 2].min())) + 5
    samples = [make_sample(t, x, y, disk_mask(side, spec.radius_at_unit_depth / d)[..., 0])
               for t, (x, y, d) in zip(ts, pos)]
    tb = float(spec.trajectory_gt.breakpoints[1])
    found = detect_bounces(samples)
    assert len(found) == 1 and abs(found[0] - tb) <= 1.0 / k + 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_frame_noise_with_paired_snapshots(seed):
    # two snapshots per frame share their depth; the frame-to-frame noise is 1.5%
    noise = np.repeat(np.random.default_rng(seed).normal(0, 0.015, 40), 2)
    ts = (np.arange(80) + 0.5) / 2
    drift = _samples(ts, lambda t: (t, 0, 1 + 0.004 * t))
    drift = [DepthSample(s.t, s.x, s.y, s.d + e, s.mask_area) for s, e in zip(drift, noise)]
    assert detect_bounces(drift, window=2) == []
    vee = [DepthSample(s.t, s.x, s.y, 1 + 0.3 * abs(s.t - 20.25) + e, s.mask_area) for s, e in zip(drift, noise)]
    (b,) = detect_bounces(vee, window=2)
    assert abs(b - 20.25) <= 0.5


def test_nearby_bounces_merge_and_prefer_two_d():
    samples = _samples(np.arange(80) / 8, lambda t: (t, 0, 1 + abs(t - 5.0)))
    assert detect_bounces(samples, [5.2]) == [5.2]
    with pytest.raises(ValueError):
        detect_bounces(samples[:2])


# ---------------------------------------------------------------------------
# fitting

def test_line_fit_is_exact():
    samples = _samples(np.linspace(0, 10, 33), lambda t: (3 + 2 * t, 5 - t, 1 + 0.01 * t))
    traj = fit_trajectory(samples, n_frames=10)
    assert traj.n_segments == 1
    assert fit_residual_rms(traj, samples) <= 1e-9
    assert np.abs(traj.coeffs[0][:, 2:]).max() <= 1e-9


def test_two_segments_reproduce_parabolas():
    def f(t):
        u = t if t <= 6 else 12 - t
        return 10 + 4 * t, 20 - 2 * t, 1 + 0.01 * u * u

    ts = np.arange(96) / 8 + 1 / 16
    samples = _samples(ts, f)
    traj = fit_trajectory(samples, [6.0], n_frames=12)
    assert traj.n_segments == 2 and traj.is_continuous()
    assert fit_residual_rms(traj, samples) <= 1e-6


def test_degree_rule_and_cap():
    assert default_degree(8) == 3 and default_degree(400) == 6
    assert default_degree(64, samples_per_frame=8) == 3
    samples = _samples(np.linspace(0, 50, 400), lambda t: (np.sin(t), np.cos(t), 1.0))
    assert max(fit_trajectory(samples, n_frames=50).degrees) <= 6


def test_sparse_segment_gets_constant_fill():
    samples = _samples([0.5, 1.0, 1.5, 2.0, 2.5, 3.9], lambda t: (t, t, 1.0))
    traj = fit_trajectory(samples, [3.0, 3.5], n_frames=4)
    assert traj.degrees[1] == 0 and traj.is_continuous()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.floats(1.0, 9.0), max_size=3))
def test_fit_continuous_and_degree_monotone(seed, bounces):
    r = np.random.default_rng(seed)
    ts = np.sort(r.uniform(0, 10, 120))
    y = r.normal(0, 1, (120, 3)).cumsum(axis=0)
    samples = [DepthSample(t, *v, mask_area=50.0) for t, v in zip(ts, y)]
    bounces = sorted(set(round(b, 3) for b in bounces))
    errs = []
    for deg in range(0, 7):
        traj = fit_trajectory(samples, bounces, n_frames=10, degree_rule=lambda n, spf, d=deg: d)
        assert traj.continuity_gap() <= 1e-6
        errs.append(fit_residual_rms(traj, samples))
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


def test_piecewise_xy_no_worse_than_global_fit():
    ts = np.arange(160) / 8 + 1 / 16

    def f(t):
        return (5 * t, 100 - 3 * abs(t - 10) ** 1.0, 1.0)

    samples = _samples(ts, f)
    traj = fit_trajectory(samples, [10.0], n_frames=20, samples_per_frame=8)
    budget = sum(traj.degrees)
    xy = np.array([[s.x, s.y] for s in samples])
    glob = np.polynomial.polynomial.polyval(ts, np.polynomial.polynomial.polyfit(ts, xy, budget)).T
    rms_glob = float(np.sqrt(np.mean((glob - xy) ** 2)))
    assert fit_residual_rms(traj, samples, axes=(0, 1)) <= rms_glob + 1e-9


def test_free_flight_oracle_depth_fit():
    spec = free_flight_scene(n_subframes=80)
    _, gt = generate_sequence(spec)
    side = 2 * int(math.ceil(gt.radii.max())) + 5
    samples = normalize_depths([make_sample(t, c[0], c[1], disk_mask(side, r)[..., 0])
                                for t, c, r in zip(gt.times, gt.centers, gt.radii)])
    traj = fit_trajectory(samples, n_frames=spec.n_frames, samples_per_frame=spec.averaging_factor)
    d_gt = gt.depths / np.median(gt.depths)
    assert np.abs(traj(gt.times)[:, 2] - d_gt).max() <= 1e-2
    assert np.abs(traj(gt.times)[:, :2] - gt.centers).max() <= 0.5


def test_fit_errors():
    with pytest.raises(ValueError):
        fit_trajectory(_samples([1.0], lambda t: (0, 0, 1)))


# ---------------------------------------------------------------------------
# evaluation and serialisation

def _random_traj(seed):
    r = np.random.default_rng(seed)
    bps = np.array([0.0, 3.0, 7.5, 10.0])
    return Trajectory3D(bps, tuple(r.normal(0, 1, (3, r.integers(1, 7))) for _ in range(3)))


def test_eval_at_zero_and_horner():
    traj = _random_traj(0)
    assert eval_trajectory(traj, 0.0) == pytest.approx(tuple(traj.coeffs[0][:, 0]), abs=0)
    for t in np.random.default_rng(1).uniform(0, 10, 50):
        s = int(traj.segment_index(t))
        tau = t - traj.breakpoints[s]
        direct = [sum(c * tau ** k for k, c in enumerate(row)) for row in traj.coeffs[s]]
        assert np.allclose(traj(t), direct, rtol=1e-12, atol=1e-12)


def test_eval_left_segment_wins_and_domain():
    traj = _random_traj(2)
    t = traj.breakpoints[1]
    left = traj.coeffs[0] @ (t ** np.arange(traj.coeffs[0].shape[1]))
    assert np.allclose(traj(t), left, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        traj(10.5)
    with pytest.raises(ValueError):
        traj(-0.1)


def test_fitted_curve_continuous_at_breakpoints():
    samples = _samples(np.arange(160) / 8, lambda t: (t * t, np.sin(t), 1 + abs(t - 13)))
    traj = fit_trajectory(samples, [4.0, 13.0], n_frames=20)
    for b in traj.breakpoints[1:-1]:
        assert np.abs(traj(b - 1e-12) - traj(b + 1e-12)).max() <= 1e-6


def test_json_round_trip(tmp_path):
    traj = _random_traj(3)
    traj.save(tmp_path / "t.json")
    back = Trajectory3D.load(tmp_path / "t.json")
    assert all(np.array_equal(a, b) for a, b in zip(traj.coeffs, back.coeffs))
    doc = json.loads((tmp_path / "t.json").read_text())
    assert {"coeffs_x", "coeffs_y", "coeffs_d", "degree"} <= set(doc["segments"][0])


def test_global_basis_documents_are_converted():
    traj = _random_traj(4)
    doc = traj.to_dict()
    doc["basis"] = "global"
    for seg, c, b in zip(doc["segments"], traj.coeffs, traj.breakpoints):
        g = _shift_coeffs(c, -b)
        seg["coeffs_x"], seg["coeffs_y"], seg["coeffs_d"] = g.tolist()
    back = Trajectory3D.from_dict(doc)
    ts = np.linspace(0, 10, 41)
    assert np.allclose(back(ts), traj(ts), atol=1e-8)


def test_invalid_trajectory_documents():
    with pytest.raises(ValueError):
        Trajectory3D(np.array([0.0, 1.0]), (np.ones((2, 2)),))
    with pytest.raises(ValueError):
        Trajectory3D.from_dict({"breakpoints": [0, 1], "segments": [{"coeffs_x": [1]}]})
