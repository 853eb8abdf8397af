"""Synthetic LiDAR-like domains with controllable cross-dataset discrepancies.

Each :class:`DatasetSpec` fixes a sensing range, point densities and
per-class object-size statistics. Frames are pure functions of
``(spec, seed)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CLASS_NAMES = ("car", "pedestrian", "cyclist")
CAR, PEDESTRIAN, CYCLIST = 0, 1, 2

# Aligned range shared by every domain after preprocessing.
GLOBAL_RANGE = (-75.2, -75.2, -2.0, 75.2, 75.2, 4.0)
# std of background z around the ground plane, meters
GROUND_NOISE = 0.05


@dataclass(frozen=True)
class DatasetSpec:
    """Identity of one synthetic domain.

    ``class_stats`` maps class id to ``(mean_l, mean_w, mean_h, std_l, std_w, std_h)``.
    ``ground_z`` is where boxes rest; it defaults to the bottom of the range.
    """

    id: int
    name: str
    point_range: tuple
    points_per_object: int
    background_density: float
    class_stats: Mapping[int, tuple]
    objects_per_frame: tuple = (0, 0)
    ground_z: float | None = None

    def __post_init__(self):
        r = tuple(float(v) for v in self.point_range)
        if len(r) != 6:
            raise ValueError(f"{self.name}: point_range needs 6 values, got {len(r)}")
        object.__setattr__(self, "point_range", r)
        x1, y1, z1, x2, y2, z2 = r
        if not (x1 < x2 and y1 < y2 and z1 < z2):
            raise ValueError(f"{self.name}: point_range {r} is not ordered lower < upper")
        if self.points_per_object <= 0:
            raise ValueError(f"{self.name}: points_per_object must be positive")
        if self.background_density < 0:
            raise ValueError(f"{self.name}: background_density must be >= 0")
        stats = {int(k): tuple(float(v) for v in s) for k, s in self.class_stats.items()}
        for cls, s in stats.items():
            if len(s) != 6:
                raise ValueError(f"{self.name}: class {cls} stats need 6 values")
            if min(s[:3]) <= 0:
                raise ValueError(f"{self.name}: class {cls} mean sizes must be > 0")
            if min(s[3:]) < 0:
                raise ValueError(f"{self.name}: class {cls} std values must be >= 0")
        object.__setattr__(self, "class_stats", stats)
        lo, hi = (int(v) for v in self.objects_per_frame)
        if lo < 0 or hi < lo:
            raise ValueError(f"{self.name}: bad objects_per_frame {self.objects_per_frame}")
        object.__setattr__(self, "objects_per_frame", (lo, hi))
        gz = z1 if self.ground_z is None else float(self.ground_z)
        object.__setattr__(self, "ground_z", gz)

    @property
    def xy_range(self):
        x1, y1, _, x2, y2, _ = self.point_range
        return (x1, y1, x2, y2)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "point_range": list(self.point_range),
            "points_per_object": self.points_per_object,
            "background_density": self.background_density,
            "class_stats": {str(k): list(v) for k, v in sorted(self.class_stats.items())},
            "objects_per_frame": list(self.objects_per_frame),
            "ground_z": self.ground_z,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetSpec":
        return cls(
            id=int(d["id"]),
            name=str(d["name"]),
            point_range=tuple(d["point_range"]),
            points_per_object=int(d["points_per_object"]),
            background_density=float(d["background_density"]),
            class_stats={int(k): tuple(v) for k, v in d["class_stats"].items()},
            objects_per_frame=tuple(d.get("objects_per_frame", (0, 0))),
            ground_z=d.get("ground_z"),
        )


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple
    class_id: int = 0

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or len(s) != 3:
            raise ValueError("Box3D needs 3 center and 3 size values")
        if min(s) <= 0:
            raise ValueError(f"Box3D sizes must be positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "class_id", int(self.class_id))

    def as_array(self) -> np.ndarray:
        return np.array(self.center + self.size, dtype=np.float64)

    def contains(self, pts, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(pts)
        half = np.asarray(self.size) / 2 + tol
        return np.all(np.abs(pts[:, :3] - np.asarray(self.center)) <= half, axis=1)


def boxes_to_array(boxes: Sequence[Box3D]) -> np.ndarray:
    """[M, 7] array of (cx, cy, cz, l, w, h, class_id)."""
    if not boxes:
        return np.zeros((0, 7))
    return np.array([b.center + b.size + (b.class_id,) for b in boxes], dtype=np.float64)


def array_to_boxes(arr) -> tuple:
    return tuple(Box3D(tuple(r[:3]), tuple(r[3:6]), int(r[6])) for r in np.asarray(arr))


@dataclass(frozen=True, eq=False)
class Frame:
    points: np.ndarray
    boxes: tuple = ()
    dataset_id: int = 0

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 4)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "dataset_id", int(self.dataset_id))

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.dataset_id == other.dataset_id and self.boxes == other.boxes
                and self.points.shape == other.points.shape and np.array_equal(self.points, other.points))

    __hash__ = None

    def to_json(self) -> str:
        return json.dumps({
            "dataset_id": self.dataset_id,
            "points": self.points.tolist(),
            "boxes": [{"c": list(b.center), "s": list(b.size), "cls": b.class_id} for b in self.boxes],
        })

    @classmethod
    def from_json(cls, line: str) -> "Frame":
        d = json.loads(line)
        boxes = tuple(Box3D(tuple(b["c"]), tuple(b["s"]), int(b["cls"])) for b in d["boxes"])
        return cls(np.array(d["points"], dtype=np.float64).reshape(-1, 4), boxes, int(d["dataset_id"]))


# ---------------------------------------------------------------- generation

def _max_extent(spec: DatasetSpec):
    ext = np.zeros(3)
    for s in spec.class_stats.values():
        ext = np.maximum(ext, np.asarray(s[:3]) + 3 * np.asarray(s[3:]))
    return ext


def check_fits(spec: DatasetSpec) -> None:
    x1, y1, z1, x2, y2, z2 = spec.point_range
    l, w, h = _max_extent(spec)
    if l >= x2 - x1 or w >= y2 - y1 or spec.ground_z < z1 or spec.ground_z + h > z2:
        raise ValueError(
            f"{spec.name}: range {spec.point_range} cannot hold a {l:.2f}x{w:.2f}x{h:.2f} box "
            f"resting at z={spec.ground_z}")


def _sample_surface(rng, center, size, n):
    """``n`` points uniformly distributed over the six faces of a box."""
    l, w, h = size
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.random((n, 3))
    axis = face // 2
    u[np.arange(n), axis] = (face % 2).astype(np.float64)
    return np.asarray(center) + (u - 0.5) * np.asarray(size)


def generate_frame(spec: DatasetSpec, rng_seed: int) -> Frame:
    """One synthetic scene; bit-identical for a fixed ``(spec, rng_seed)``."""
    check_fits(spec)
    rng = np.random.default_rng([int(rng_seed), int(spec.id)])
    x1, y1, z1, x2, y2, z2 = spec.point_range
    classes = sorted(spec.class_stats)
    lo, hi = spec.objects_per_frame
    n_obj = int(rng.integers(lo, hi + 1)) if hi > 0 else 0

    boxes, obj_pts = [], []
    for _ in range(n_obj):
        cls = classes[int(rng.integers(len(classes)))]
        s = np.asarray(spec.class_stats[cls])
        mean, std = s[:3], s[3:]
        size = mean + std * np.clip(rng.standard_normal(3), -3, 3)
        size = np.maximum(size, 0.05)
        for _attempt in range(20):
            cx = rng.uniform(x1 + size[0] / 2, x2 - size[0] / 2)
            cy = rng.uniform(y1 + size[1] / 2, y2 - size[1] / 2)
            clash = any(abs(cx - b.center[0]) < (size[0] + b.size[0]) / 2 + 0.5
                        and abs(cy - b.center[1]) < (size[1] + b.size[1]) / 2 + 0.5 for b in boxes)
            if not clash:
                break
        else:
            continue
        center = (cx, cy, spec.ground_z + size[2] / 2)
        box = Box3D(center, tuple(size), cls)
        n_pts = max(8, int(rng.poisson(spec.points_per_object)))
        xyz = _sample_surface(rng, center, size, n_pts)
        # keep the upper face strictly inside the range (open upper bound)
        xyz = np.minimum(xyz, np.nextafter(np.array([x2, y2, z2]), -np.inf))
        boxes.append(box)
        obj_pts.append(xyz)

    # background: ground returns spread uniformly over the x-y footprint
    n_bg = int(rng.poisson(spec.background_density * (x2 - x1) * (y2 - y1)))
    bg = rng.uniform([x1, y1, 0.0], [x2, y2, 0.0], size=(n_bg, 3))
    z_hi = np.nextafter(z2, -np.inf)
    bg[:, 2] = np.clip(spec.ground_z + GROUND_NOISE * rng.standard_normal(n_bg), z1, z_hi)
    xyz = np.concatenate(obj_pts + [bg]) if obj_pts else bg
    intensity = rng.random((len(xyz), 1))
    return Frame(np.hstack([xyz, intensity]), tuple(boxes), spec.id)


def generate_frames(spec: DatasetSpec, count: int, seed: int = 0) -> list:
    """``count`` frames with per-frame seeds derived from ``seed``."""
    return [generate_frame(spec, seed * 1_000_003 + i) for i in range(count)]


# ---------------------------------------------------------------- transforms

def in_range(xyz, rng6) -> np.ndarray:
    """Closed-lower, open-upper membership of rows of ``xyz`` in a 6-tuple range."""
    xyz = np.asarray(xyz)
    lo = np.asarray(rng6[:3])
    hi = np.asarray(rng6[3:])
    return np.all((xyz[:, :3] >= lo) & (xyz[:, :3] < hi), axis=1)


def align_point_range(frame: Frame, global_range) -> Frame:
    keep = in_range(frame.points, global_range)
    boxes = tuple(b for b in frame.boxes if in_range(np.array([b.center]), global_range)[0])
    if keep.all() and len(boxes) == len(frame.boxes):
        return frame
    return Frame(frame.points[keep], boxes, frame.dataset_id)


def apply_statistical_normalization(frame: Frame, source: DatasetSpec, target: DatasetSpec) -> Frame:
    """Rescale every box (and the points inside it) toward the target domain's mean sizes."""
    pts = frame.points.copy()
    claimed = np.zeros(len(pts), dtype=bool)
    boxes = []
    for b in frame.boxes:
        for spec in (source, target):
            if b.class_id not in spec.class_stats:
                raise KeyError(f"{spec.name} has no statistics for class {_class_name(b.class_id)}")
        ratio = np.asarray(target.class_stats[b.class_id][:3]) / np.asarray(source.class_stats[b.class_id][:3])
        inside = b.contains(pts) & ~claimed
        claimed |= inside
        c = np.asarray(b.center)
        moved = c + (pts[inside, :3] - c) * ratio
        # unit-ratio axes stay bit-exact
        pts[inside, :3] = np.where(ratio == 1.0, pts[inside, :3], moved)
        boxes.append(Box3D(b.center, tuple(np.asarray(b.size) * ratio), b.class_id))
    return Frame(pts, tuple(boxes), frame.dataset_id)


def _class_name(cls: int) -> str:
    return CLASS_NAMES[cls] if 0 <= cls < len(CLASS_NAMES) else str(cls)


# ---------------------------------------------------------------- presets & io

def preset_specs() -> dict:
    """Three built-in domains loosely shaped like front-view, sparse and dense sensors.

    All values are arbitrary choices for synthetic experiments.
    """
    return {
        "K-like": DatasetSpec(
            id=0, name="K-like", point_range=(0.0, -40.0, -2.0, 70.4, 40.0, 2.0),
            points_per_object=80, background_density=0.12,
            class_stats={CAR: (3.9, 1.6, 1.55, 0.25, 0.1, 0.1),
                         PEDESTRIAN: (0.8, 0.65, 1.75, 0.1, 0.08, 0.1),
                         CYCLIST: (1.75, 0.6, 1.7, 0.12, 0.06, 0.1)},
            objects_per_frame=(6, 12), ground_z=-1.7),
        "N-like": DatasetSpec(
            id=1, name="N-like", point_range=(-51.2, -51.2, -2.0, 51.2, 51.2, 3.0),
            points_per_object=35, background_density=0.06,
            class_stats={CAR: (4.8, 2.0, 1.8, 0.3, 0.12, 0.12),
                         PEDESTRIAN: (0.75, 0.7, 1.8, 0.1, 0.08, 0.1),
                         CYCLIST: (1.85, 0.65, 1.45, 0.12, 0.06, 0.1)},
            objects_per_frame=(6, 12), ground_z=-1.8),
        "W-like": DatasetSpec(
            id=2, name="W-like", point_range=(-75.2, -75.2, -2.0, 75.2, 75.2, 4.0),
            points_per_object=80, background_density=0.05,
            class_stats={CAR: (4.4, 1.9, 1.7, 0.3, 0.12, 0.12),
                         PEDESTRIAN: (0.9, 0.85, 1.75, 0.1, 0.08, 0.1),
                         CYCLIST: (1.8, 0.8, 1.8, 0.12, 0.06, 0.1)},
            objects_per_frame=(8, 16), ground_z=0.0),
    }


def save_registry(path, specs: Iterable[DatasetSpec]) -> None:
    specs = list(specs)
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate dataset ids in registry: {ids}")
    doc = {"schema_version": 1, "datasets": [s.to_dict() for s in specs]}
    Path(path).write_text(json.dumps(doc, indent=2))


def load_registry(path) -> dict:
    doc = json.loads(Path(path).read_text())
    return registry_from_doc(doc)


def registry_from_doc(doc: Mapping) -> dict:
    specs = [DatasetSpec.from_dict(d) for d in doc["datasets"]]
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate dataset ids in registry: {ids}")
    return {s.name: s for s in specs}


def write_frames(path, frames: Iterable[Frame]) -> None:
    with open(path, "w") as fh:
        for f in frames:
            fh.write(f.to_json())
            fh.write("\n")


def read_frames(path) -> list:
    with open(path) as fh:
        return [Frame.from_json(line) for line in fh if line.strip()]


def with_range(spec: DatasetSpec, point_range) -> DatasetSpec:
    return replace(spec, point_range=tuple(point_range))
