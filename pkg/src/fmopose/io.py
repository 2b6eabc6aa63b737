"""File formats: PNG frames, curve JSON, snapshot exports and diagnostics CSV.

Every writer goes through a temporary file in the target directory that is
renamed into place, so readers never see a partial file.
"""
from __future__ import annotations

import contextlib
import csv
import json
import os
import tempfile
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .image_model import Curve2D, Snapshot, as_image

FRAME_PATTERN = "frame_{:05d}.png"


@contextlib.contextmanager
def atomic_path(path, suffix: str = ""):
    """Yield a temporary path next to ``path``; rename it over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=suffix or path.suffix, dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_text(path, text: str):
    with atomic_path(path) as tmp:
        tmp.write_text(text)


def write_json(path, data):
    write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc


def write_csv(path, header: Sequence[str], rows):
    with atomic_path(path) as tmp:
        with open(tmp, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            wr.writerows(rows)


# ---------------------------------------------------------------------------
# images

def write_png(path, image, bits: int = 8):
    """Write an image in ``[0, 1]`` as an 8- or 16-bit PNG (RGB or gray)."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    img = as_image(image)
    top = 255 if bits == 8 else 65535
    codes = np.rint(img * top).astype(np.uint8 if bits == 8 else np.uint16)
    if codes.shape[2] == 3:
        codes = codes[:, :, ::-1]  # OpenCV stores BGR
    with atomic_path(path, ".png") as tmp:
        if not cv2.imwrite(str(tmp), codes):
            raise OSError(f"could not write {path}")


def read_png(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG as float64 in ``[0, 1]`` (divided by the max code value)."""
    codes = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if codes is None:
        raise FileNotFoundError(f"cannot read image {path}")
    top = {np.dtype(np.uint8): 255.0, np.dtype(np.uint16): 65535.0}.get(codes.dtype)
    if top is None:
        raise ValueError(f"{path}: unsupported PNG sample type {codes.dtype}")
    if codes.ndim == 2:
        codes = codes[:, :, None]
    elif codes.shape[2] == 4:
        codes = codes[:, :, :3]
    if codes.shape[2] == 3:
        codes = codes[:, :, ::-1]
    return codes.astype(np.float64) / top


def write_frames(directory, frames: Sequence[np.ndarray], bits: int = 16) -> list[Path]:
    directory = Path(directory)
    paths = []
    for i, f in enumerate(frames):
        p = directory / FRAME_PATTERN.format(i)
        write_png(p, f, bits)
        paths.append(p)
    return paths


def frame_paths(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory {directory} does not exist")
    paths = sorted(directory.glob("frame_*.png"))
    if not paths:
        raise FileNotFoundError(f"no frame_*.png files in {directory}")
    return paths


def read_frames(directory) -> list[np.ndarray]:
    return [read_png(p) for p in frame_paths(directory)]


# ---------------------------------------------------------------------------
# curves

def write_curve(path, curve):
    write_json(path, curve.to_dict())


def read_curve(path, cls=Curve2D):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"trajectory file {path} does not exist")
    return cls.from_dict(read_json(path))


# ---------------------------------------------------------------------------
# snapshots

SNAPSHOT_INDEX = "snapshots.json"


def write_snapshots(directory, frame: int, snapshots: Sequence[Snapshot], t_bounds: Sequence[float],
                    extra: dict | None = None) -> list[dict]:
    """Export one frame's snapshots as 16-bit PNG pairs; returns their index entries.

    ``t_bounds`` has ``len(snapshots) + 1`` segment boundaries in frame time.
    """
    directory = Path(directory)
    if len(t_bounds) != len(snapshots) + 1:
        raise ValueError("need one more time boundary than snapshots")
    entries = []
    for i, s in enumerate(snapshots):
        f_name, m_name = f"F_frame{frame}_seg{i}.png", f"M_frame{frame}_seg{i}.png"
        write_png(directory / f_name, s.appearance, 16)
        write_png(directory / m_name, s.mask, 16)
        entry = {"frame": frame, "segment": i, "t_start": float(t_bounds[i]), "t_end": float(t_bounds[i + 1]),
                 "appearance": f_name, "mask": m_name}
        if extra:
            entry.update(extra)
        entries.append(entry)
    return entries


def write_snapshot_index(directory, entries: Sequence[dict]):
    write_json(Path(directory) / SNAPSHOT_INDEX, {"snapshots": list(entries)})


def read_snapshot_index(directory) -> list[dict]:
    path = Path(directory) / SNAPSHOT_INDEX
    if not path.is_file():
        raise FileNotFoundError(f"snapshot index {path} does not exist")
    return read_json(path)["snapshots"]


def load_snapshot(directory, entry: dict) -> Snapshot:
    directory = Path(directory)
    f = read_png(directory / entry["appearance"])
    m = read_png(directory / entry["mask"])
    # rounding is monotone, so F <= M survives quantisation
    return Snapshot(f, m)


# ---------------------------------------------------------------------------
# diagnostics

def write_solver_history(path, records: Sequence[tuple[int, int, str, "object"]]):
    """Solver diagnostics: one row per checked iteration.

    ``records`` holds ``(frame, n_segments, solver, SolverInfo)``.
    """
    rows = []
    for frame, n, solver, info in records:
        for it, obj, rp, rd, rho in info.history:
            rows.append([frame, n, solver, it, repr(float(obj)), repr(float(rp)), repr(float(rd)), repr(float(rho))])
    write_csv(path, ["frame", "n_segments", "solver", "iteration", "objective", "r_primal", "r_dual", "rho"], rows)
