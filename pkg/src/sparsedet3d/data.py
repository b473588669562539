"""Scene ingestion and synthetic scene generation.

Two interchangeable scene formats:
  * text: one point per line, ``x y z [f1 ... fF]`` whitespace-separated;
  * binary: magic ``SPD3``, u32 version, u32 N, u32 F, then N*(3+F)
    little-endian float32 (each point stored as x, y, z, f1..fF).

Ground truth rides in a sidecar ``<stem>.gt.txt`` with one box per line:
``cx cy cz w l h theta class``.
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .geometry import Box3D
from .voxelize import PointCloud

__all__ = ["SceneRecord", "SynthSpec", "load_scene", "save_scene",
           "load_scene_dir", "synth_scenes", "InfeasibleSceneError"]

MAGIC = b"SPD3"
VERSION = 1


class InfeasibleSceneError(RuntimeError):
    pass


@dataclass
class SceneRecord:
    cloud: PointCloud
    boxes: List[Box3D]
    class_ids: List[int]
    scene_id: str = ""

    def __post_init__(self):
        if len(self.boxes) != len(self.class_ids):
            raise ValueError("boxes and class_ids must align")


def _gt_path(scene_path: Path) -> Path:
    return scene_path.with_suffix(".gt.txt")


def _load_gt(path: Path):
    boxes, classes = [], []
    if not path.exists():
        return boxes, classes
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields 'cx cy cz w l h theta class'")
        vals = [float(v) for v in parts[:7]]
        boxes.append(Box3D(*vals))
        classes.append(int(parts[7]))
    return boxes, classes


def _save_gt(path: Path, boxes, classes):
    lines = [
        f"{b.cx!r} {b.cy!r} {b.cz!r} {b.w!r} {b.l!r} {b.h!r} {b.theta!r} {c}"
        for b, c in zip(boxes, classes)
    ]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def _load_text_points(path: Path):
    rows = []
    width = None
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 3:
            raise ValueError(f"{path}:{lineno}: need at least 'x y z'")
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise ValueError(f"{path}:{lineno}: inconsistent column count")
        rows.append([float(v) for v in parts])
    if not rows:
        return np.empty((0, 3)), None
    arr = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(arr[:, :3])):
        raise ValueError(f"{path}: non-finite point coordinates")
    feats = arr[:, 3:] if arr.shape[1] > 3 else None
    return arr[:, :3], feats


def _load_binary_points(path: Path):
    blob = path.read_bytes()
    if len(blob) == 0:
        return np.empty((0, 3)), None
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic, not an SPD3 file")
    version, n, f = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported SPD3 version {version}")
    want = 16 + 4 * n * (3 + f)
    if len(blob) != want:
        raise ValueError(f"{path}: truncated payload ({len(blob)} bytes, expected {want})")
    data = np.frombuffer(blob, dtype="<f4", offset=16).reshape(n, 3 + f)
    pos = data[:, :3].astype(np.float64)
    if not np.all(np.isfinite(pos)):
        raise ValueError(f"{path}: non-finite point coordinates")
    feats = data[:, 3:].astype(np.float64) if f else None
    return pos, feats


def load_scene(path, fmt: str = "auto") -> SceneRecord:
    """Parse one scene file plus its optional ground-truth sidecar."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if fmt == "auto":
        fmt = "binary" if path.suffix == ".spd3" else "text"
    if fmt == "binary":
        pos, feats = _load_binary_points(path)
    elif fmt == "text":
        pos, feats = _load_text_points(path)
    else:
        raise ValueError(f"unknown scene format {fmt!r} (expected text/binary/auto)")
    boxes, classes = _load_gt(_gt_path(path))
    return SceneRecord(PointCloud(pos, feats), boxes, classes, scene_id=path.stem)


def save_scene(record: SceneRecord, directory, fmt: str = "binary") -> Path:
    """Write a scene and its ground-truth sidecar; returns the scene path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pos = record.cloud.positions.astype("<f4")
    feats = record.cloud.features
    f = 0 if feats is None else feats.shape[1]
    if fmt == "binary":
        path = directory / f"{record.scene_id}.spd3"
        rows = pos if f == 0 else np.concatenate([pos, feats.astype("<f4")], axis=1)
        blob = MAGIC + struct.pack("<III", VERSION, len(pos), f) + rows.astype("<f4").tobytes()
        path.write_bytes(blob)
    elif fmt == "text":
        path = directory / f"{record.scene_id}.xyz"
        lines = []
        for i in range(len(pos)):
            vals = [*pos[i]] + ([] if f == 0 else [*feats[i].astype(np.float32)])
            lines.append(" ".join(repr(float(v)) for v in vals))
        path.write_text("\n".join(lines) + ("\n" if lines else ""))
    else:
        raise ValueError(f"unknown scene format {fmt!r}")
    _save_gt(_gt_path(path), record.boxes, record.class_ids)
    return path


def load_scene_dir(directory) -> List[SceneRecord]:
    directory = Path(directory)
    paths = sorted(list(directory.glob("*.spd3")) + list(directory.glob("*.xyz")))
    if not paths:
        raise FileNotFoundError(f"no *.spd3 or *.xyz scenes under {directory}")
    return [load_scene(p) for p in paths]


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Knobs of the synthetic scene generator; class dimension means are
    deliberately spread so the class-specific grouping grids differ."""

    n_class: int = 3
    class_dim_means: tuple = ((0.45, 0.45, 0.5), (0.9, 0.75, 0.7), (1.6, 1.2, 0.9))
    dim_rel_std: float = 0.1
    boxes_per_scene: tuple = (3, 5)
    room: tuple = (6.0, 6.0, 3.0)
    points_per_box: int = 320
    clutter_fraction: float = 0.1
    color_noise: float = 0.05
    max_retries: int = 200

    # one distinct base color per class; clutter is mid gray
    class_colors: tuple = ((0.9, 0.2, 0.2), (0.2, 0.9, 0.2), (0.2, 0.3, 0.9))

    def __post_init__(self):
        if len(self.class_dim_means) < self.n_class or len(self.class_colors) < self.n_class:
            raise ValueError("need means and colors for every class")


def sample_class_dims(rng, spec: SynthSpec, class_id: int) -> np.ndarray:
    mean = np.asarray(spec.class_dim_means[class_id])
    dims = rng.normal(mean, spec.dim_rel_std * mean)
    return np.maximum(dims, 0.25 * mean)


def _sample_surface_points(rng, box: Box3D, n: int) -> np.ndarray:
    """Uniform samples on the box surface, area-weighted over the six faces."""
    w, l, h = box.w, box.l, box.h
    areas = np.array([l * h, l * h, w * h, w * h, w * l, w * l])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.empty((n, 3))
    for axis in range(3):
        for side in (0, 1):
            f = 2 * axis + side
            mask = faces == f
            if not mask.any():
                continue
            sign = -0.5 if side == 0 else 0.5
            dims = np.array([w, l, h])
            local = np.zeros((mask.sum(), 3))
            other = [a for a in range(3) if a != axis]
            local[:, axis] = sign * dims[axis]
            local[:, other[0]] = u[mask] * dims[other[0]]
            local[:, other[1]] = v[mask] * dims[other[1]]
            pts[mask] = local
    import math

    c, s = math.cos(box.theta), math.sin(box.theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return pts @ rot.T + box.center


def synth_scenes(n: int, seed: int, spec: Optional[SynthSpec] = None) -> List[SceneRecord]:
    """Deterministic synthetic scenes: class-distinct oriented boxes with
    surface-sampled colored points plus uniform clutter."""
    from .geometry import iou3d

    if n < 1:
        raise ValueError("need n >= 1 scenes")
    spec = spec or SynthSpec()
    rng = np.random.default_rng(seed)
    room = np.asarray(spec.room)
    scenes = []
    for si in range(n):
        boxes: List[Box3D] = []
        classes: List[int] = []
        n_boxes = int(rng.integers(spec.boxes_per_scene[0], spec.boxes_per_scene[1] + 1))
        for _ in range(n_boxes):
            cid = int(rng.integers(0, spec.n_class))
            placed = False
            for _attempt in range(spec.max_retries):
                dims = sample_class_dims(rng, spec, cid)
                half = 0.5 * dims
                margin = 0.5 * np.sqrt(dims[0] ** 2 + dims[1] ** 2)
                cx = rng.uniform(margin, room[0] - margin)
                cy = rng.uniform(margin, room[1] - margin)
                cz = rng.uniform(half[2], room[2] - half[2])
                theta = rng.uniform(-np.pi, np.pi)
                cand = Box3D(cx, cy, cz, dims[0], dims[1], dims[2], theta)
                if all(iou3d(cand, b) == 0.0 for b in boxes):
                    boxes.append(cand)
                    classes.append(cid)
                    placed = True
                    break
            if not placed:
                raise InfeasibleSceneError(
                    f"scene {si}: could not place box after {spec.max_retries} retries")

        pos_parts, col_parts = [], []
        for b, cid in zip(boxes, classes):
            pts = _sample_surface_points(rng, b, spec.points_per_box)
            base = np.asarray(spec.class_colors[cid])
            cols = np.clip(base + rng.normal(0, spec.color_noise, size=(len(pts), 3)), 0, 1)
            pos_parts.append(pts)
            col_parts.append(cols)
        n_surface = sum(len(p) for p in pos_parts)
        n_clutter = int(round(spec.clutter_fraction * n_surface))
        if n_clutter:
            pos_parts.append(rng.uniform(0, room, size=(n_clutter, 3)))
            col_parts.append(np.clip(
                0.5 + rng.normal(0, spec.color_noise * 2, size=(n_clutter, 3)), 0, 1))
        pos = np.concatenate(pos_parts) if pos_parts else np.empty((0, 3))
        cols = np.concatenate(col_parts) if col_parts else np.empty((0, 3))
        perm = rng.permutation(len(pos))
        scenes.append(SceneRecord(
            PointCloud(pos[perm], cols[perm]), boxes, classes, scene_id=f"synth{si:04d}"))
    return scenes
