"""Forward simulator of a textured sphere filmed at a low frame rate.

Each output frame is the mean of ``averaging_factor`` sub-frames and each
sub-frame the mean of ``subsamples_per_subframe`` instantaneous composites,
mimicking a high-speed camera with a 360 degree shutter whose frames are
averaged down to a lower rate.

Coordinate frame: x to the right, y down, z toward the camera.  Projection is
orthographic with a depth-dependent scale: the apparent radius at depth ``d``
is ``radius_at_unit_depth / d``.  The texture is equirectangular with its
poles on the y axis of the reference orientation.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .image_model import Snapshot, as_image
from .io import read_json, write_csv, write_json
from .trajectory3d import Trajectory3D

log = logging.getLogger(__name__)


@dataclass
class SceneSpec:
    background: np.ndarray
    texture: np.ndarray
    trajectory_gt: Trajectory3D
    omega_gt: list  # one rotation-rate 3-vector (rad / frame) per trajectory segment
    radius_at_unit_depth: float
    n_frames: int
    fps_target: float = 30.0
    averaging_factor: int = 8
    subsamples_per_subframe: int = 8
    orientation0: np.ndarray = field(default_factory=lambda: np.zeros(3))  # rotation vector at t = 0

    def validate(self):
        as_image(self.background, channels=3, name="background")
        as_image(self.texture, channels=3, name="texture")
        if self.radius_at_unit_depth <= 0:
            raise ValueError("radius_at_unit_depth must be positive")
        if self.averaging_factor < 1 or self.subsamples_per_subframe < 1:
            raise ValueError("averaging_factor and subsamples_per_subframe must be >= 1")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        lo, hi = self.trajectory_gt.domain
        if lo > 0 or hi < self.n_frames - 1e-9:
            raise ValueError(f"trajectory domain [{lo}, {hi}] does not cover {self.n_frames} frames")
        if len(self.omega_gt) != self.trajectory_gt.n_segments:
            raise ValueError("need one angular velocity per trajectory segment")


@dataclass
class GroundTruth:
    """Per-sub-frame pose table and per-segment angular velocities."""

    times: np.ndarray  # sub-frame mid-times, frame units
    centers: np.ndarray  # (n, 2) x, y in pixels
    radii: np.ndarray
    depths: np.ndarray
    quaternions: np.ndarray  # (n, 4) w, x, y, z: rotation from reference pose
    segments: list  # (t_start, t_end, omega)
    trajectory: Trajectory3D
    radius_at_unit_depth: float
    averaging_factor: int

    def omega_at(self, t: float) -> np.ndarray:
        for t0, t1, w in self.segments:
            if t0 <= t <= t1:
                return np.asarray(w, dtype=np.float64)
        raise ValueError(f"t={t} outside ground-truth segments")

    def radius_at(self, t) -> np.ndarray:
        return self.radius_at_unit_depth / self.trajectory(t)[..., 2]

    def write_csv(self, directory):
        """Sub-frame and segment tables plus the trajectory JSON and scalar metadata."""
        directory = Path(directory)
        write_csv(directory / "gt_subframes.csv",
                  ["subframe_index", "t", "x", "y", "radius", "quat_w", "quat_x", "quat_y", "quat_z"],
                  [[i, repr(float(t)), repr(float(c[0])), repr(float(c[1])), repr(float(r)),
                    *map(repr, map(float, q))]
                   for i, (t, c, r, q) in enumerate(zip(self.times, self.centers, self.radii, self.quaternions))])
        write_csv(directory / "gt_segments.csv", ["t_start", "t_end", "wx", "wy", "wz"],
                  [[repr(float(t0)), repr(float(t1)), *map(repr, map(float, w))] for t0, t1, w in self.segments])
        write_json(directory / "gt_trajectory.json", self.trajectory.to_dict())
        write_json(directory / "gt_meta.json", {"radius_at_unit_depth": float(self.radius_at_unit_depth),
                                                "averaging_factor": int(self.averaging_factor)})

    @classmethod
    def read_csv(cls, directory) -> "GroundTruth":
        directory = Path(directory)
        names = ["gt_subframes.csv", "gt_segments.csv", "gt_trajectory.json", "gt_meta.json"]
        missing = [n for n in names if not (directory / n).is_file()]
        if missing:
            raise FileNotFoundError(f"{directory}: missing ground-truth files {missing}")
        with open(directory / "gt_subframes.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        with open(directory / "gt_segments.csv", newline="") as fh:
            segs = [(float(r["t_start"]), float(r["t_end"]), np.array([float(r["wx"]), float(r["wy"]), float(r["wz"])]))
                    for r in csv.DictReader(fh)]
        meta = read_json(directory / "gt_meta.json")

        def col(*keys):
            return np.array([[float(r[k]) for k in keys] for r in rows]).reshape(len(rows), len(keys))

        return cls(
            times=col("t")[:, 0],
            centers=col("x", "y"),
            radii=col("radius")[:, 0],
            depths=float(meta["radius_at_unit_depth"]) / col("radius")[:, 0],
            quaternions=col("quat_w", "quat_x", "quat_y", "quat_z"),
            segments=segs,
            trajectory=Trajectory3D.from_dict(read_json(directory / "gt_trajectory.json")),
            radius_at_unit_depth=float(meta["radius_at_unit_depth"]),
            averaging_factor=int(meta["averaging_factor"]),
        )


# ---------------------------------------------------------------------------
# rendering

def orientation_at(spec: SceneSpec, t) -> Rotation:
    """Orientation (rotation from reference pose) at frame-time ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    bps = spec.trajectory_gt.breakpoints
    rot_at_bp = [Rotation.from_rotvec(spec.orientation0)]
    for s in range(len(bps) - 2):
        step = Rotation.from_rotvec(np.asarray(spec.omega_gt[s]) * (bps[s + 1] - bps[s]))
        rot_at_bp.append(step * rot_at_bp[-1])
    idx = spec.trajectory_gt.segment_index(t)
    out = []
    for ti, s in zip(t, np.atleast_1d(idx)):
        step = Rotation.from_rotvec(np.asarray(spec.omega_gt[s]) * (ti - bps[s]))
        out.append((step * rot_at_bp[s]).as_quat())
    return Rotation.from_quat(np.array(out))


def sample_texture(texture: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear lookup of unit-sphere ``points`` (n, 3) in an equirectangular texture."""
    th, tw = texture.shape[:2]
    lat = np.arcsin(np.clip(-points[:, 1], -1.0, 1.0))
    lon = np.arctan2(points[:, 0], points[:, 2])
    u = (lon + np.pi) / (2 * np.pi) * tw - 0.5
    v = (np.pi / 2 - lat) / np.pi * th - 0.5
    v = np.clip(v, 0.0, th - 1.0)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.minimum(np.floor(v).astype(np.int64), th - 1)
    fu, fv = (u - u0)[:, None], (v - v0)[:, None]
    u0 %= tw
    u1 = (u0 + 1) % tw
    v1 = np.minimum(v0 + 1, th - 1)
    return ((1 - fu) * (1 - fv) * texture[v0, u0] + fu * (1 - fv) * texture[v0, u1]
            + (1 - fu) * fv * texture[v1, u0] + fu * fv * texture[v1, u1])


def render_sphere(texture, orientation: Rotation, radius: float, center, shape) -> tuple[np.ndarray, np.ndarray]:
    """Appearance and coverage mask of the sphere on a grid of ``shape`` (rows, cols).

    ``center`` is ``(x, y)`` in grid coordinates.  Appearance is premultiplied
    by coverage, so it never exceeds the mask.
    """
    if radius < 1:
        raise ValueError(f"radius {radius} below 1 px")
    h, w = shape
    cx, cy = center
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = (xx - cx) / radius, (yy - cy) / radius
    dist = np.hypot(dx, dy)
    cover = np.clip(radius + 0.5 - dist * radius, 0.0, 1.0)
    f = np.zeros((h, w, 3))
    sel = cover > 0
    if np.any(sel):
        scale = np.minimum(1.0, 0.999999 / np.maximum(dist[sel], 1e-12))
        px, py = dx[sel] * scale, dy[sel] * scale
        pz = np.sqrt(np.maximum(0.0, 1.0 - px * px - py * py))
        body = orientation.inv().apply(np.stack([px, py, pz], axis=1))
        f[sel] = sample_texture(texture, body) * cover[sel][:, None]
    return f, cover[:, :, None]


def project_sphere(texture, orientation, radius: float, center, canvas) -> Snapshot:
    """Orthographic snapshot of the rotated textured sphere on an odd-sized canvas.

    ``orientation`` may be a :class:`~scipy.spatial.transform.Rotation`, a
    rotation vector or a 3x3 matrix.
    """
    f, m = render_sphere(np.asarray(texture, dtype=np.float64), _as_rotation(orientation), radius, center, canvas)
    return Snapshot(f, m)


def _as_rotation(orientation) -> Rotation:
    if isinstance(orientation, Rotation):
        return orientation
    arr = np.asarray(orientation, dtype=np.float64)
    if arr.shape == (3, 3):
        return Rotation.from_matrix(arr)
    return Rotation.from_rotvec(arr)


def _composite_into(acc: np.ndarray, background: np.ndarray, texture, rot, radius, cx, cy, weight):
    """Add ``weight * (instantaneous composite - background)`` to ``acc`` in place."""
    h, w = background.shape[:2]
    half = int(math.ceil(radius)) + 2
    x0, x1 = max(0, int(math.floor(cx)) - half), min(w, int(math.floor(cx)) + half + 2)
    y0, y1 = max(0, int(math.floor(cy)) - half), min(h, int(math.floor(cy)) + half + 2)
    if x0 >= x1 or y0 >= y1:
        return
    f, m = render_sphere(texture, rot, radius, (cx - x0, cy - y0), (y1 - y0, x1 - x0))
    b = background[y0:y1, x0:x1]
    acc[y0:y1, x0:x1] += weight * (f - m * b)


def generate_sequence(spec: SceneSpec, return_subframes: bool = False):
    """Render the low-frame-rate sequence and its ground truth.

    Returns ``(frames, gt)`` or ``(frames, gt, subframes)``.
    """
    spec.validate()
    bg = np.asarray(spec.background, dtype=np.float64)
    tex = np.asarray(spec.texture, dtype=np.float64)
    k, s_per = spec.averaging_factor, spec.subsamples_per_subframe
    h, w = bg.shape[:2]

    n_sub = spec.n_frames * k
    t_sub = (np.arange(n_sub)[:, None] + (np.arange(s_per)[None, :] + 0.5) / s_per) / k
    pos = spec.trajectory_gt(t_sub.ravel()).reshape(n_sub, s_per, 3)
    rots = orientation_at(spec, t_sub.ravel())
    radii = spec.radius_at_unit_depth / pos[..., 2]
    if np.any(pos[..., 2] <= 0):
        raise ValueError("ground-truth depth must stay positive")
    off = (pos[..., 0] < -radii) | (pos[..., 0] > w - 1 + radii) | (pos[..., 1] < -radii) | (pos[..., 1] > h - 1 + radii)
    if np.any(off):
        log.warning("trajectory leaves the canvas at %d of %d instants; object clipped", off.sum(), off.size)

    frames, subframes = [], []
    for n in range(spec.n_frames):
        frame_acc = np.zeros_like(bg)
        for j in range(k):
            m = n * k + j
            acc = np.zeros_like(bg)
            for s in range(s_per):
                x, y, _ = pos[m, s]
                _composite_into(acc, bg, tex, rots[m * s_per + s], radii[m, s], x, y, 1.0 / s_per)
            sub = np.clip(bg + acc, 0.0, 1.0)
            if return_subframes:
                subframes.append(sub)
            frame_acc += sub
        frames.append(frame_acc / k)

    t_mid = (np.arange(n_sub) + 0.5) / k
    p_mid = spec.trajectory_gt(t_mid)
    quat_xyzw = orientation_at(spec, t_mid).as_quat()
    bps = spec.trajectory_gt.breakpoints
    gt = GroundTruth(
        times=t_mid,
        centers=p_mid[:, :2],
        radii=spec.radius_at_unit_depth / p_mid[:, 2],
        depths=p_mid[:, 2],
        quaternions=np.concatenate([quat_xyzw[:, 3:], quat_xyzw[:, :3]], axis=1),
        segments=[(float(bps[i]), float(bps[i + 1]), np.asarray(spec.omega_gt[i], dtype=np.float64))
                  for i in range(len(bps) - 1)],
        trajectory=spec.trajectory_gt,
        radius_at_unit_depth=spec.radius_at_unit_depth,
        averaging_factor=k,
    )
    if return_subframes:
        return frames, gt, subframes
    return frames, gt


# ---------------------------------------------------------------------------
# procedural content

def random_texture(seed: int = 0, shape=(96, 192), n_caps: int = 28) -> np.ndarray:
    """Equirectangular texture made of soft coloured spherical caps."""
    rng = np.random.default_rng(seed)
    th, tw = shape
    lat = np.pi / 2 - (np.arange(th) + 0.5) / th * np.pi
    lon = (np.arange(tw) + 0.5) / tw * 2 * np.pi - np.pi
    lat, lon = np.meshgrid(lat, lon, indexing="ij")
    pts = np.stack([np.cos(lat) * np.sin(lon), -np.sin(lat), np.cos(lat) * np.cos(lon)], axis=-1)
    tex = np.empty((th, tw, 3))
    tex[:] = rng.uniform(0.55, 0.9, size=3)
    centers = rng.normal(size=(n_caps, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    for c in centers:
        ang = np.arccos(np.clip(pts @ c, -1, 1))
        size = rng.uniform(0.18, 0.45)
        weight = np.clip((size - ang) / 0.08, 0.0, 1.0)[..., None]
        color = rng.uniform(0.05, 0.95, size=3)
        tex = tex * (1 - weight) + color * weight
    return np.clip(tex, 0.0, 1.0)


def random_background(shape=(270, 480), seed: int = 1, detail: float = 0.2) -> np.ndarray:
    """Low-saturation background: smooth blobs, a mild gradient and fine texture of amplitude ``detail``."""
    from scipy.ndimage import gaussian_filter, zoom

    rng = np.random.default_rng(seed)
    h, w = shape
    coarse = rng.uniform(0.0, 1.0, size=(max(2, h // 30), max(2, w // 30), 3))
    field_ = zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1], 1), order=3)[:h, :w]
    field_ = gaussian_filter(field_, sigma=(4, 4, 0))
    yy, xx = np.mgrid[0:h, 0:w]
    grad = (0.1 * xx / w + 0.05 * yy / h)[..., None]
    gray = field_.mean(axis=2, keepdims=True)
    fine = gaussian_filter(rng.standard_normal((h, w)), sigma=1.5)
    fine = (fine / fine.std())[..., None]
    bg = 0.3 + 0.25 * (0.7 * gray + 0.3 * field_) + grad + detail * 0.5 * fine
    return np.clip(bg, 0.0, 1.0)


def _poly_in_frames(per_sub_coeffs: np.ndarray, k: int) -> np.ndarray:
    """Convert coefficients in sub-frame time to coefficients in frame time."""
    return per_sub_coeffs * float(k) ** np.arange(per_sub_coeffs.shape[1])


def free_flight_scene(
    averaging_factor: int = 8,
    n_subframes: int = 80,
    canvas=(270, 480),
    radius: float = 20.0,
    start=(60.0, 90.0, 0.9),
    velocity=(5.0, -0.6, 0.004),
    gravity: float = 0.02,
    omega=(0.02, 0.04, 0.03),
    subsamples_per_subframe: int = 8,
    seed: int = 0,
) -> SceneSpec:
    """Ballistic flight with receding depth; rates given per sub-frame.

    ``radius`` is the apparent radius at unit depth; ``velocity`` is in
    pixels (and depth units) per sub-frame, ``omega`` in rad per sub-frame.
    The same physical scene is produced for every ``averaging_factor``.
    """
    k = averaging_factor
    if n_subframes % k:
        raise ValueError("n_subframes must be a multiple of averaging_factor")
    n_frames = n_subframes // k
    per_sub = np.array([
        [start[0], velocity[0], 0.0],
        [start[1], velocity[1], gravity],
        [start[2], velocity[2], 0.0],
    ])
    traj = Trajectory3D(np.array([0.0, float(n_frames)]), (_poly_in_frames(per_sub, k),))
    return SceneSpec(
        background=random_background(canvas, seed + 1),
        texture=random_texture(seed),
        trajectory_gt=traj,
        omega_gt=[np.asarray(omega, dtype=np.float64) * k],
        radius_at_unit_depth=radius,
        n_frames=n_frames,
        fps_target=240.0 / k,
        averaging_factor=k,
        subsamples_per_subframe=subsamples_per_subframe,
    )


def bounce_scene(
    averaging_factor: int = 8,
    n_subframes: int = 96,
    canvas=(270, 480),
    radius: float = 20.0,
    bounce_at: float = 0.5,
    omega_before=(0.0, 0.05, 0.0),
    omega_after=(0.0, -0.05, 0.0),
    subsamples_per_subframe: int = 8,
    seed: int = 0,
) -> SceneSpec:
    """Ball approaching the camera, bouncing off a wall, then receding.

    The bounce happens at fraction ``bounce_at`` of the sequence; depth is
    V-shaped around it and the spin changes.
    """
    k = averaging_factor
    n_frames = n_subframes // k
    tb = bounce_at * n_subframes  # in sub-frames
    x0, y0, d0 = 80.0, 120.0, 1.3
    vx, vy, vd = 3.0, 0.3, -0.006
    pb = np.array([x0 + vx * tb, y0 + vy * tb, d0 + vd * tb])
    seg1 = np.array([[x0, vx], [y0, vy], [d0, vd]])
    seg2 = np.array([[pb[0], vx], [pb[1], vy], [pb[2], -vd]])
    traj = Trajectory3D(np.array([0.0, tb / k, float(n_frames)]),
                        (_poly_in_frames(seg1, k), _poly_in_frames(seg2, k)))
    return SceneSpec(
        background=random_background(canvas, seed + 1),
        texture=random_texture(seed),
        trajectory_gt=traj,
        omega_gt=[np.asarray(omega_before) * k, np.asarray(omega_after) * k],
        radius_at_unit_depth=radius,
        n_frames=n_frames,
        fps_target=240.0 / k,
        averaging_factor=k,
        subsamples_per_subframe=subsamples_per_subframe,
    )


def zigzag_scene(
    averaging_factor: int = 8,
    n_frames: int = 50,
    canvas=(270, 480),
    radius: float = 18.0,
    speed: float = 2.5,
    walls=(70.0, 410.0),
    omega=(0.02, 0.04, 0.03),
    subsamples_per_subframe: int = 8,
    seed: int = 0,
) -> SceneSpec:
    """Long sequence bouncing between two vertical walls.

    The ball starts at the left wall moving right at ``speed`` pixels per
    sub-frame with a slight vertical drift; depth drifts away from the camera
    on rightward passes and back on leftward passes.  Each bounce reverses
    the spin ``omega`` (rad per sub-frame).  Segments join continuously.
    """
    k = averaging_factor
    n_sub = n_frames * k
    x_left, x_right = walls
    pass_len = (x_right - x_left) / speed  # sub-frames per wall-to-wall pass
    vy = 0.15
    vd = 0.25 / pass_len  # depth 1.0 <-> 1.25 per pass
    h = canvas[0]
    starts = np.arange(0.0, n_sub, pass_len)
    bps = np.append(starts, float(n_sub)) / k
    coeffs, omegas = [], []
    pos = np.array([x_left, 0.5 * h - 0.5 * vy * pass_len, 1.0])
    for s in range(len(starts)):
        sign = 1.0 if s % 2 == 0 else -1.0
        vel = np.array([sign * speed, vy * sign, sign * vd])
        coeffs.append(_poly_in_frames(np.stack([pos, vel], axis=1), k))
        omegas.append(sign * np.asarray(omega, dtype=np.float64) * k)
        pos = pos + vel * min(pass_len, n_sub - starts[s])
    traj = Trajectory3D(bps, tuple(coeffs))
    return SceneSpec(
        background=random_background(canvas, seed + 1),
        texture=random_texture(seed),
        trajectory_gt=traj,
        omega_gt=omegas,
        radius_at_unit_depth=radius,
        n_frames=n_frames,
        fps_target=240.0 / k,
        averaging_factor=k,
        subsamples_per_subframe=subsamples_per_subframe,
    )


def static_scene(averaging_factor: int = 8, n_frames: int = 2, canvas=(101, 121), radius: float = 15.0,
                 position=(60.0, 50.0), subsamples_per_subframe: int = 8, seed: int = 0) -> SceneSpec:
    traj = Trajectory3D(np.array([0.0, float(n_frames)]), (np.array([[position[0]], [position[1]], [1.0]]),))
    return SceneSpec(
        background=random_background(canvas, seed + 1),
        texture=random_texture(seed),
        trajectory_gt=traj,
        omega_gt=[np.zeros(3)],
        radius_at_unit_depth=radius,
        n_frames=n_frames,
        fps_target=240.0 / averaging_factor,
        averaging_factor=averaging_factor,
        subsamples_per_subframe=subsamples_per_subframe,
    )


def rolling_snapshots(
    n: int = 16,
    radius: float = 25.0,
    speed: float = 1.25,
    tilt_deg: float = 40.0,
    step: float = 0.125,
    seed: int = 0,
    side: int | None = None,
):
    """Sharp snapshots of a ball rolling on a straight ground path.

    The ground normal is tilted by ``tilt_deg`` toward the camera; the ball
    advances ``speed`` pixels per snapshot along +x and snapshots are
    ``step`` frame units apart.  Returns ``(snapshots, times, omega)`` with
    ``omega`` in rad per frame derived from the rolling constraint
    ``|omega| = v / r``.
    """
    tilt = math.radians(tilt_deg)
    up = np.array([0.0, -math.cos(tilt), math.sin(tilt)])
    v = np.array([speed / step, 0.0, 0.0])  # pixels per frame
    omega = np.cross(up, v) / radius
    tex = random_texture(seed)
    side = side or 2 * int(math.ceil(radius)) + 7
    c = (side - 1) / 2.0
    times = np.arange(n) * step
    snaps = []
    for t in times:
        rot = Rotation.from_rotvec(omega * t)
        # the ball is re-centred in its patch; the traversal only sets the spin
        snaps.append(project_sphere(tex, rot, radius, (c, c), (side, side)))
    return snaps, times, omega


def path_length_rate(length: float, radius: float, duration: float) -> float:
    """Rolling rate from traversed length: angle ``length / radius`` over ``duration``."""
    return (length / radius) / duration


def subframe_times(n_frames: int, k: int) -> np.ndarray:
    return (np.arange(n_frames * k) + 0.5) / k


def crop_snapshot(image: np.ndarray, center, side: int) -> np.ndarray:
    """Odd-sized patch of ``image`` centred at the nearest pixel to ``center``."""
    half = side // 2
    cx, cy = int(round(center[0])), int(round(center[1]))
    pad = np.pad(image, ((half, half), (half, half), (0, 0)))
    return pad[cy:cy + side, cx:cx + side]


def scene_summary(spec: SceneSpec) -> dict:
    return {
        "n_frames": spec.n_frames,
        "averaging_factor": spec.averaging_factor,
        "subsamples_per_subframe": spec.subsamples_per_subframe,
        "radius_at_unit_depth": spec.radius_at_unit_depth,
        "canvas": list(np.asarray(spec.background).shape[:2]),
    }


def average_subframes(subframes: Sequence[np.ndarray], k: int) -> list[np.ndarray]:
    return [np.mean(subframes[i:i + k], axis=0) for i in range(0, len(subframes), k)]
