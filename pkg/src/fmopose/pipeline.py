"""End-to-end runs: scene synthesis, tracking, evaluation and super-resolution.

Tracking is split into stages that each write their artifacts and read the
artifacts of earlier stages back from disk, so resuming from any stage
reproduces the full run.

Output layout of a tracking run::

    manifest.json          parameters, versions, stage status
    curve2d.json           2D trajectory the deblatting used
    snapshots/             F_frame{n}_seg{i}.png, M_frame{n}_seg{i}.png, snapshots.json
    depth.csv              per-snapshot position, mask area and relative depth
    bounces.json           bounce times
    trajectory3d.json      fitted 3D trajectory
    velocities.csv         angular velocity per window
    solver_history.csv     ADMM residuals (with diagnostics only)
"""
from __future__ import annotations

import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import io as fio
from . import synth
from .config import Config
from .deblatting import (FmSolverParams, SolverError, deblat_frame, disk_template, estimate_radius,
                         estimation_domain, patch_half_size, solve_fm, solve_h)
from .image_model import Curve2D, Snapshot, rasterize_segment, render_frame_piecewise, sliding_backgrounds
from .metrics import EvalReport, evaluate, write_report_csv
from .rotation import read_velocity_csv, sliding_velocities, write_velocity_csv
from .trajectory3d import (Trajectory3D, detect_bounces, fit_trajectory, make_sample, normalize_depths,
                           read_depth_csv, write_depth_csv)

log = logging.getLogger(__name__)

STAGES = ("deblat", "depth", "trajectory", "rotation")
EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_ALIGN = 0, 2, 3, 4

# breakpoints of an input curve count as bounces when the direction turns by more than this
BOUNCE_TURN_DEG = 30.0


class PipelineError(Exception):
    """Failure of one stage; ``code`` is the process exit code."""

    def __init__(self, stage: str, message: str, code: int):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.code = code


def _input_error(stage, msg):
    return PipelineError(stage, msg, EXIT_INPUT)


def versions() -> dict:
    import cv2
    import scipy

    return {"fmopose": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "opencv": cv2.__version__}


# ---------------------------------------------------------------------------
# synth

def build_scene(cfg: Config) -> synth.SceneSpec:
    kind, k = cfg["scene.kind"], cfg["scene.averaging_factor"]
    kw: dict = {"averaging_factor": k, "subsamples_per_subframe": cfg["scene.subsamples"], "seed": cfg["seed"]}
    if cfg["scene.radius"] > 0:
        kw["radius"] = cfg["scene.radius"]
    if cfg["scene.canvas"] != (0, 0):
        kw["canvas"] = cfg["scene.canvas"]
    n = cfg["scene.n_frames"]
    if kind == "free_flight":
        return synth.free_flight_scene(**kw, **({"n_subframes": n * k} if n else {"n_subframes": 80 // k * k or k}))
    if kind == "bounce":
        return synth.bounce_scene(**kw, **({"n_subframes": n * k} if n else {"n_subframes": 96 // k * k or k}))
    if kind == "zigzag":
        return synth.zigzag_scene(**kw, **({"n_frames": n} if n else {}))
    return synth.static_scene(**kw, **({"n_frames": n} if n else {}))


def run_synth(cfg: Config, out_dir) -> tuple[list, synth.GroundTruth]:
    """Render the configured scene; writes frames, background, ground truth and a manifest."""
    out = Path(out_dir)
    try:
        spec = build_scene(cfg)
        frames, gt = synth.generate_sequence(spec)
    except ValueError as exc:
        raise _input_error("synth", f"invalid scene: {exc}") from exc
    fio.write_frames(out / "frames", frames, cfg["scene.bits"])
    fio.write_png(out / "background.png", spec.background, 16)
    gt.write_csv(out / "gt")
    fio.write_json(out / "manifest.json", {
        "command": "synth", "config": dict(cfg), "scene": synth.scene_summary(spec),
        "fps": 240.0 / spec.averaging_factor, "versions": versions(),
    })
    return frames, gt


# ---------------------------------------------------------------------------
# trajectory sources

def curve_bounces(curve, turn_deg: float = BOUNCE_TURN_DEG) -> list[float]:
    """Interior breakpoints where the direction of motion turns by more than ``turn_deg``."""
    out = []
    d = curve.derivative()
    for s in range(curve.n_segments - 1):
        b = float(curve.breakpoints[s + 1])
        left = d.coeffs[s][:2] @ ((b - curve.breakpoints[s]) ** np.arange(d.coeffs[s].shape[1]))
        right = d.coeffs[s + 1][:2, 0]
        nl, nr = np.linalg.norm(left), np.linalg.norm(right)
        if nl == 0 or nr == 0:
            continue
        cos = float(np.clip(left @ right / (nl * nr), -1.0, 1.0))
        if math.degrees(math.acos(cos)) > turn_deg:
            out.append(b)
    return out


def _streak_axis(weights: np.ndarray, offset=(0.0, 0.0), q: float = 0.01):
    """Weighted principal axis of a 2D weight image: centre, direction, extent and perpendicular spread."""
    ys, xs = np.nonzero(weights > 0)
    w = weights[ys, xs]
    pts = np.stack([xs + offset[0], ys + offset[1]], axis=1).astype(np.float64)
    c = (w[:, None] * pts).sum(0) / w.sum()
    cov = ((pts - c).T * w) @ (pts - c) / w.sum()
    evals, evecs = np.linalg.eigh(cov)
    u = evecs[:, 1]
    proj = (pts - c) @ u
    order = np.argsort(proj)
    cw = np.cumsum(w[order]) / w.sum()
    a = float(proj[order][np.searchsorted(cw, q)])
    b = float(proj[order][min(len(cw) - 1, np.searchsorted(cw, 1 - q))])
    return c, u, a, b, math.sqrt(max(evals[0], 0.0))


def estimate_frame_segment(frame, background, radius: float | None, params: FmSolverParams,
                           threshold: float = 0.1) -> tuple[np.ndarray, np.ndarray, float]:
    """Undirected straight path of the object in one frame from an estimated blur kernel.

    The difference to the background gives a first path and radius; one
    level-0 appearance solve and one kernel solve on the surrounding crop
    refine the path to the extent of the estimated kernel.  Returns the two
    end points and the radius.
    """
    diff = np.abs(np.asarray(frame) - np.asarray(background)).sum(axis=2)
    if diff.max() <= 0:
        raise ValueError("frame equals the background")
    blob = np.where(diff >= threshold * diff.max(), diff, 0.0)
    c, u, a, b, spread = _streak_axis(blob)
    r = radius if radius else max(2.0, 2.0 * spread)
    # the difference streak includes the object's extent around the path
    a, b = min(a + r, 0.0), max(b - r, 0.0)
    p0, p1 = c + a * u, c + b * u
    if np.allclose(p0, p1):
        p1 = p0 + 1e-3 * u
    seg = Curve2D.polyline([0.0, 1.0], [p0, p1])
    dom = estimation_domain(seg, 0.0, 1.0, diff.shape, r)
    kernel = rasterize_segment(seg, 0.0, 1.0, dom.shape, origin=dom.origin)
    side = 2 * patch_half_size(r) + 1
    snap = solve_fm(dom.crop(frame), dom.crop(background), kernel, disk_template(side, r), params)
    if snap.mask.sum() > math.pi:
        h = solve_h(dom.crop(frame), dom.crop(background), snap, params, init=kernel)
        c, u, a, b, _ = _streak_axis(h.weights, dom.origin)
        p0, p1 = c + a * u, c + b * u
    return p0, p1, float(r)


def estimate_curve(frames, backgrounds, radius: float | None, params: FmSolverParams) -> Curve2D:
    """Per-frame blur-kernel estimation joined into a piecewise linear curve.

    Every frame contributes one straight segment; its direction is chosen so
    that it starts near where the previous frame ended (the first frame
    looks ahead to the second).  Consecutive segments meet at the midpoint
    of the previous end and the next start.
    """
    segs = [estimate_frame_segment(f, b, radius, params) for f, b in zip(frames, backgrounds)]
    oriented = []
    for n, (p0, p1, _) in enumerate(segs):
        if n == 0:
            if len(segs) > 1:
                nxt = 0.5 * (segs[1][0] + segs[1][1])
                if np.linalg.norm(p0 - nxt) < np.linalg.norm(p1 - nxt):
                    p0, p1 = p1, p0
        elif np.linalg.norm(p1 - oriented[-1][1]) < np.linalg.norm(p0 - oriented[-1][1]):
            p0, p1 = p1, p0
        oriented.append((p0, p1))
    # neighbouring frames share a vertex so the curve stays continuous
    verts = [oriented[0][0]]
    verts += [0.5 * (oriented[n - 1][1] + oriented[n][0]) for n in range(1, len(oriented))]
    verts.append(oriented[-1][1])
    return Curve2D.polyline(np.arange(len(frames) + 1, dtype=np.float64), verts)


def load_curve(cfg: Config, frames, backgrounds) -> Curve2D:
    src = cfg["trajectory.source"]
    if src == "file":
        if not cfg["trajectory.file"]:
            raise _input_error("input", "trajectory.source = file needs trajectory.file")
        try:
            return fio.read_curve(cfg["trajectory.file"], Curve2D)
        except (FileNotFoundError, ValueError) as exc:
            raise _input_error("input", str(exc)) from exc
    if src == "oracle":
        path = Path(cfg["trajectory.gt_dir"]) / "gt_trajectory.json"
        if not cfg["trajectory.gt_dir"] or not path.is_file():
            raise _input_error("input", f"oracle mode needs {path}")
        traj = Trajectory3D.from_dict(fio.read_json(path))
        return Curve2D(traj.breakpoints, tuple(c[:2] for c in traj.coeffs))
    try:
        return estimate_curve(frames, backgrounds, cfg["radius.guess"] or None, cfg.fm_params())
    except (ValueError, SolverError) as exc:
        raise PipelineError("input", f"per-frame kernel estimation failed: {exc}", EXIT_SOLVER) from exc


def load_backgrounds(cfg: Config, frames) -> list[np.ndarray]:
    if cfg["input.background"]:
        try:
            bg = fio.read_png(cfg["input.background"])
        except FileNotFoundError as exc:
            raise _input_error("input", str(exc)) from exc
        if bg.shape != frames[0].shape:
            raise _input_error("input", f"background shape {bg.shape} differs from frames {frames[0].shape}")
        return [bg] * len(frames)
    return sliding_backgrounds(frames, cfg["background.window"])


def load_frames(cfg: Config) -> list[np.ndarray]:
    if not cfg["input.frames"]:
        raise _input_error("input", "input.frames is not set")
    try:
        frames = fio.read_frames(cfg["input.frames"])
    except (FileNotFoundError, ValueError) as exc:
        raise _input_error("input", str(exc)) from exc
    if len({f.shape for f in frames}) != 1:
        raise _input_error("input", "frames differ in size")
    return frames


# ---------------------------------------------------------------------------
# tracking stages

@dataclass
class FrameResult:
    frame: int
    radius: float
    snapshots: list
    times: np.ndarray
    levels: list = field(default_factory=list)


def _deblat_one(args) -> FrameResult:
    n, frame, bg, curve, guess, passes, schedule, params = args
    r = estimate_radius(frame, bg, curve, guess, params, (n, n + 1), passes) if passes else guess
    res, _ = deblat_frame(frame, bg, curve, r, schedule, params, (n, n + 1))
    return FrameResult(n, r, res.snapshots, res.times, res.levels)


def stage_deblat(cfg: Config, frames, backgrounds, curve, out: Path, jobs: int = 1) -> list[FrameResult]:
    lo, hi = curve.domain
    if lo > 1e-9 or hi < len(frames) - 1e-9:
        raise _input_error("deblat", f"trajectory domain [{lo}, {hi}] does not cover {len(frames)} frames")
    guess = cfg["radius.guess"] or 0.1 * min(frames[0].shape[:2])
    params, schedule = cfg.fm_params(), cfg.schedule()
    tasks = [(n, f, b, curve, guess, cfg["radius.passes"], schedule, params)
             for n, (f, b) in enumerate(zip(frames, backgrounds))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_deblat_one, tasks))
    else:
        results = [_deblat_one(t) for t in tasks]
    entries = []
    snap_dir = out / "snapshots"
    for res in results:
        entries += fio.write_snapshots(snap_dir, res.frame, res.snapshots, res.times, {"radius": res.radius})
    fio.write_snapshot_index(snap_dir, entries)
    return results


def load_snapshots(out: Path) -> tuple[list[Snapshot], np.ndarray, list[dict]]:
    snap_dir = out / "snapshots"
    entries = sorted(fio.read_snapshot_index(snap_dir), key=lambda e: (e["frame"], e["segment"]))
    snaps = [fio.load_snapshot(snap_dir, e) for e in entries]
    times = np.array([0.5 * (e["t_start"] + e["t_end"]) for e in entries])
    return snaps, times, entries


def stage_depth(out: Path, curve) -> list:
    snaps, times, _ = load_snapshots(out)
    pts = curve(times)
    samples = normalize_depths([make_sample(t, p[0], p[1], s.mask) for t, p, s in zip(times, pts, snaps)])
    write_depth_csv(samples, out / "depth.csv")
    return samples


def stage_trajectory(out: Path, curve, n_frames: int, per_frame: int) -> tuple[Trajectory3D, list[float]]:
    samples = read_depth_csv(out / "depth.csv")
    # depth slopes span a whole frame: snapshots of one frame share most of their mask area
    window = max(2, per_frame)
    if len(samples) >= 3:
        bounces = detect_bounces(samples, curve_bounces(curve), window=window)
    else:
        bounces = curve_bounces(curve)
    traj = fit_trajectory(samples, bounces, n_frames=n_frames, samples_per_frame=per_frame)
    fio.write_json(out / "bounces.json", {"bounces": bounces})
    fio.write_curve(out / "trajectory3d.json", traj)
    return traj, bounces


def stage_rotation(cfg: Config, out: Path) -> list:
    snaps, times, _ = load_snapshots(out)
    bounces = fio.read_json(out / "bounces.json")["bounces"]
    est = sliding_velocities(snaps, times, bounces, cfg.grid(), cfg.consensus(), return_details=True)
    write_velocity_csv(est, out / "velocities.csv")
    return est


@dataclass
class TrackResult:
    out_dir: Path
    curve: Curve2D
    trajectory: Trajectory3D | None = None
    bounces: list = field(default_factory=list)
    velocities: list = field(default_factory=list)
    frames: list = field(default_factory=list)  # FrameResult of the deblat stage, when it ran
    manifest: dict = field(default_factory=dict)


def run_track(cfg: Config, diagnostics: bool = False, start: str = "deblat") -> TrackResult:
    """Run the tracking stages from ``start`` on, writing every artifact under ``output.dir``.

    Raises :class:`PipelineError`; artifacts of completed stages and the
    manifest (with the failing stage) stay on disk.
    """
    if start not in STAGES:
        raise _input_error("input", f"unknown stage {start!r}")
    out = Path(cfg["output.dir"])
    frames = load_frames(cfg)
    backgrounds = load_backgrounds(cfg, frames)
    manifest = {"command": "track", "config": dict(cfg), "versions": versions(), "n_frames": len(frames),
                "fps": cfg["fps"], "start_stage": start, "stages": {}, "status": "running"}
    if start == "deblat":
        curve = load_curve(cfg, frames, backgrounds)
        fio.write_curve(out / "curve2d.json", curve)
    else:
        try:
            curve = fio.read_curve(out / "curve2d.json", Curve2D)
        except FileNotFoundError as exc:
            raise _input_error("input", f"cannot resume: {exc}") from exc
    result = TrackResult(out, curve, manifest=manifest)
    per_frame = cfg.schedule().n_segments

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            value = fn()
        except PipelineError as exc:
            _fail(manifest, out, name, str(exc))
            raise
        except SolverError as exc:
            _fail(manifest, out, name, str(exc))
            raise PipelineError(name, str(exc), EXIT_SOLVER) from exc
        except (ValueError, FileNotFoundError) as exc:
            _fail(manifest, out, name, str(exc))
            raise PipelineError(name, str(exc), EXIT_SOLVER if name == "deblat" else EXIT_INPUT) from exc
        manifest["stages"][name] = {"status": "ok", "seconds": round(time.perf_counter() - t0, 3)}
        fio.write_json(out / "manifest.json", manifest)
        return value

    first = STAGES.index(start)
    if first <= 0:
        jobs = cfg["jobs"]
        result.frames = stage("deblat", lambda: stage_deblat(cfg, frames, backgrounds, curve, out, jobs))
        unconverged = sum(not info.converged for r in result.frames for _, info in r.levels)
        manifest["stages"]["deblat"]["unconverged_solves"] = unconverged
        if diagnostics:
            fio.write_solver_history(out / "solver_history.csv",
                                     [(r.frame, n, "fm", info) for r in result.frames for n, info in r.levels])
    if first <= 1:
        stage("depth", lambda: stage_depth(out, curve))
    if first <= 2:
        result.trajectory, result.bounces = stage(
            "trajectory", lambda: stage_trajectory(out, curve, len(frames), per_frame))
    else:
        result.trajectory = Trajectory3D.from_dict(fio.read_json(out / "trajectory3d.json"))
        result.bounces = fio.read_json(out / "bounces.json")["bounces"]
    result.velocities = stage("rotation", lambda: stage_rotation(cfg, out))
    manifest["status"] = "ok"
    fio.write_json(out / "manifest.json", manifest)
    return result


def _fail(manifest: dict, out: Path, stage: str, message: str):
    manifest["stages"][stage] = {"status": "failed", "error": message}
    manifest["status"] = "failed"
    fio.write_json(out / "manifest.json", manifest)


# ---------------------------------------------------------------------------
# evaluation

def run_eval(est_dir, gt_dir, report_path=None) -> EvalReport:
    """Compare a tracking run with ground truth; writes ``report.csv`` into ``est_dir`` by default."""
    est_dir, gt_dir = Path(est_dir), Path(gt_dir)
    try:
        gt = synth.GroundTruth.read_csv(gt_dir)
        traj = Trajectory3D.from_dict(fio.read_json(est_dir / "trajectory3d.json"))
    except (FileNotFoundError, ValueError) as exc:
        raise _input_error("eval", str(exc)) from exc
    n_gt = int(round(gt.times.size / gt.averaging_factor))
    manifest_path = est_dir / "manifest.json"
    if manifest_path.is_file():
        n_est = fio.read_json(manifest_path).get("n_frames", n_gt)
        if n_est != n_gt:
            raise PipelineError("eval", f"estimate covers {n_est} frames, ground truth {n_gt}", EXIT_ALIGN)
    radii = None
    if (est_dir / "depth.csv").is_file():
        radii = [(s.t, s.radius) for s in read_depth_csv(est_dir / "depth.csv") if s.reliable]
    velocities = None
    if (est_dir / "velocities.csv").is_file():
        velocities = read_velocity_csv(est_dir / "velocities.csv")
    try:
        report = evaluate(traj, gt, range(n_gt), radii=radii, velocities=velocities)
    except ValueError as exc:
        raise PipelineError("eval", str(exc), EXIT_ALIGN) from exc
    write_report_csv(report, report_path or est_dir / "report.csv")
    return report


# ---------------------------------------------------------------------------
# temporal super-resolution

def render_interval(background, curve, entries_snaps, a: float, b: float) -> np.ndarray:
    """Frame covering ``[a, b]``: each snapshot blurred along the part of its segment inside the interval."""
    parts = []
    for e, snap in entries_snaps:
        lo, hi = max(a, e["t_start"]), min(b, e["t_end"])
        if hi - lo > 1e-12:
            parts.append((lo, hi, snap))
    if not parts:
        raise ValueError(f"no snapshot covers [{a}, {b}]")
    half = max(s.size[0] for _, _, s in parts) // 2
    dom = estimation_domain(curve, a, b, background.shape[:2], max(1.0, half / 1.2))
    kernels = [rasterize_segment(curve, lo, hi, dom.shape, mass=(hi - lo) / (b - a), origin=dom.origin)
               for lo, hi, _ in parts]
    out = np.array(background, dtype=np.float64, copy=True)
    out[dom.y0:dom.y1, dom.x0:dom.x1] = render_frame_piecewise(dom.crop(background), [s for _, _, s in parts], kernels)
    return out


def run_superres(cfg: Config, factor: int | None = None, out_dir=None) -> tuple[list[np.ndarray], bool]:
    """Re-render the sequence at ``factor`` times the frame rate from the tracking outputs.

    Returns the frames and whether snapshots had to be reused because the
    factor exceeds the number of snapshots per frame.
    """
    factor = int(factor or cfg["superres.factor"])
    if factor < 1:
        raise _input_error("superres", "factor must be >= 1")
    track = Path(cfg["output.dir"])
    try:
        curve = fio.read_curve(track / "curve2d.json", Curve2D)
        snaps, _, entries = load_snapshots(track)
    except FileNotFoundError as exc:
        raise _input_error("superres", f"tracking outputs missing: {exc}") from exc
    frames = load_frames(cfg)
    backgrounds = load_backgrounds(cfg, frames)
    by_frame: dict[int, list] = {}
    for e, s in zip(entries, snaps):
        by_frame.setdefault(e["frame"], []).append((e, s))
    per_frame = min(len(v) for v in by_frame.values())
    reused = factor > per_frame
    if reused:
        log.warning("factor %d exceeds %d snapshots per frame; snapshots are reused", factor, per_frame)
    out = []
    for n in range(len(frames)):
        if n not in by_frame:
            raise _input_error("superres", f"no snapshots for frame {n}")
        for j in range(factor):
            out.append(render_interval(backgrounds[n], curve, by_frame[n], n + j / factor, n + (j + 1) / factor))
    dest = Path(out_dir) if out_dir else track / "superres"
    fio.write_frames(dest / "frames", out, 16)
    fio.write_json(dest / "superres.json", {"factor": factor, "snapshots_per_frame": per_frame,
                                            "snapshot_reuse": reused, "n_frames": len(out),
                                            "fps": cfg["fps"] * factor, "versions": versions()})
    return out, reused

