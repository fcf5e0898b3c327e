"""Desk-scale voxel environment: pose kinematics, depth rendering and object queries.

Frame conventions: x/y span the ground plane, z is altitude. Yaw 0 points
along +x and grows counter-clockwise seen from above, so MoveLeft displaces
along yaw + 90 degrees. Image rows grow downward and columns grow to the right.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORWARD_STEP = 5.0
TURN_STEP = 15.0
VERTICAL_STEP = 2.0

DEFAULT_MAX_RANGE = 1000.0
MIN_DEPTH = 1e-3


class Action(enum.IntEnum):
    TASK_FINISH = 0
    MOVE_FORWARD = 1
    TURN_LEFT = 2
    TURN_RIGHT = 3
    ASCEND = 4
    DESCEND = 5
    MOVE_LEFT = 6
    MOVE_RIGHT = 7

    @property
    def magnitude(self) -> float:
        return _MAGNITUDES[self]

    @property
    def label(self) -> str:
        """The entry used in the valid-action list shown to the decision model."""
        return _LABELS[self]


_MAGNITUDES = {
    Action.TASK_FINISH: 0.0,
    Action.MOVE_FORWARD: FORWARD_STEP,
    Action.TURN_LEFT: TURN_STEP,
    Action.TURN_RIGHT: TURN_STEP,
    Action.ASCEND: VERTICAL_STEP,
    Action.DESCEND: VERTICAL_STEP,
    Action.MOVE_LEFT: FORWARD_STEP,
    Action.MOVE_RIGHT: FORWARD_STEP,
}

_LABELS = {
    Action.TASK_FINISH: "TASK_FINISH",
    Action.MOVE_FORWARD: "MOVE_FORWARD (5 meters)",
    Action.TURN_LEFT: "TURN_LEFT (15 degrees)",
    Action.TURN_RIGHT: "TURN_RIGHT (15 degrees)",
    Action.ASCEND: "ASCEND (2 meters)",
    Action.DESCEND: "DESCEND (2 meters)",
    Action.MOVE_LEFT: "MOVE_LEFT (5 meters)",
    Action.MOVE_RIGHT: "MOVE_RIGHT (5 meters)",
}


@dataclass(frozen=True)
class ActionCommand:
    kind: Action

    @property
    def magnitude(self) -> float:
        return self.kind.magnitude


def normalize_yaw(yaw: float) -> float:
    y = math.fmod(yaw, 360.0)
    if y < 0.0:
        y += 360.0
    # fmod of a tiny negative can round up to exactly 360
    return 0.0 if y >= 360.0 else y


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    z: float
    yaw: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite pose {vals}")
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.z, self.yaw]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Pose":
        if len(values) == 3:
            return cls(float(values[0]), float(values[1]), float(values[2]), 0.0)
        x, y, z, yaw = values
        return cls(float(x), float(y), float(z), float(yaw))


def _trig(yaw: float) -> tuple[float, float]:
    # exact values on the 15-degree lattice keep axis-aligned moves exact
    r = yaw % 90.0
    if r == 0.0:
        quarter = int(yaw // 90.0) % 4
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][quarter]
    rad = math.radians(yaw)
    return math.cos(rad), math.sin(rad)


def apply_action(pose: Pose, action: Action | ActionCommand) -> Pose:
    """Return the pose reached by executing one discrete action.

    Collisions are not enforced; motion is unconditional.
    """
    kind = action.kind if isinstance(action, ActionCommand) else Action(action)
    if kind is Action.TASK_FINISH:
        raise ValueError("TASK_FINISH has no kinematics; the episode loop handles it")
    c, s = _trig(pose.yaw)
    d = kind.magnitude
    if kind is Action.MOVE_FORWARD:
        return Pose(pose.x + d * c, pose.y + d * s, pose.z, pose.yaw)
    if kind is Action.MOVE_LEFT:
        return Pose(pose.x - d * s, pose.y + d * c, pose.z, pose.yaw)
    if kind is Action.MOVE_RIGHT:
        return Pose(pose.x + d * s, pose.y - d * c, pose.z, pose.yaw)
    if kind is Action.TURN_LEFT:
        return Pose(pose.x, pose.y, pose.z, pose.yaw + d)
    if kind is Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, pose.z, pose.yaw - d)
    if kind is Action.ASCEND:
        return Pose(pose.x, pose.y, pose.z + d, pose.yaw)
    return Pose(pose.x, pose.y, pose.z - d, pose.yaw)


@dataclass(frozen=True)
class WorldObject:
    label: str
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.min, dtype=float) + np.asarray(self.max, dtype=float)) / 2.0


@dataclass(frozen=True, eq=False)
class VoxelWorld:
    """Boolean occupancy grid anchored at the origin plus labelled solid boxes.

    Object boxes are rasterized into the occupancy at construction. The grid is
    treated as read-only afterwards.
    """

    voxel_edge: float
    occupancy: np.ndarray
    objects: tuple[WorldObject, ...] = ()

    def __post_init__(self):
        if self.voxel_edge <= 0:
            raise ValueError("voxel_edge must be positive")
        occ = np.array(self.occupancy, dtype=bool, copy=True)
        if occ.ndim != 3:
            raise ValueError("occupancy must be a 3D grid")
        ext = self.extent
        for obj in self.objects:
            lo, hi = np.asarray(obj.min, float), np.asarray(obj.max, float)
            if np.any(lo > hi) or np.any(lo < 0) or np.any(hi > ext * (1 + 1e-12)):
                raise ValueError(f"object {obj.label!r} lies outside the world extent")
            i0, i1 = self._box_index_range(lo, hi, occ.shape)
            occ[i0[0]:i1[0], i0[1]:i1[1], i0[2]:i1[2]] = True
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "objects", tuple(self.objects))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.occupancy.shape)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.occupancy.shape, dtype=float) * self.voxel_edge

    def _box_index_range(self, lo, hi, shape):
        i0 = np.floor(lo / self.voxel_edge).astype(int)
        i1 = np.ceil(hi / self.voxel_edge).astype(int)
        i1 = np.maximum(i1, i0 + 1)  # degenerate boxes still occupy one voxel
        return np.clip(i0, 0, shape), np.clip(i1, 0, shape)

    def voxel_of(self, point: Sequence[float]) -> tuple[int, int, int] | None:
        idx = np.floor(np.asarray(point, float) / self.voxel_edge).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.dims)):
            return None
        return tuple(int(i) for i in idx)

    def is_occupied(self, point: Sequence[float]) -> bool:
        v = self.voxel_of(point)
        return v is not None and bool(self.occupancy[v])

    def contains(self, point: Sequence[float]) -> bool:
        return self.voxel_of(point) is not None

    def with_occupied(self, indices: Iterable[Sequence[int]]) -> "VoxelWorld":
        occ = self.occupancy.copy()
        for i, j, k in indices:
            occ[i, j, k] = True
        return VoxelWorld(self.voxel_edge, occ, self.objects)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        occupied = np.argwhere(self.occupancy).tolist()
        return {
            "voxel_edge": self.voxel_edge,
            "dims": list(self.dims),
            "occupied": occupied,
            "objects": [
                {"label": o.label, "min": list(o.min), "max": list(o.max)} for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "VoxelWorld":
        dims = tuple(int(d) for d in doc["dims"])
        occ = np.zeros(dims, dtype=bool)
        occupied = np.asarray(doc.get("occupied", []), dtype=int).reshape(-1, 3)
        if len(occupied):
            if np.any(occupied < 0) or np.any(occupied >= np.asarray(dims)):
                raise ValueError("occupied voxel index outside dims")
            occ[occupied[:, 0], occupied[:, 1], occupied[:, 2]] = True
        objects = tuple(
            WorldObject(o["label"], tuple(map(float, o["min"])), tuple(map(float, o["max"])))
            for o in doc.get("objects", [])
        )
        return cls(float(doc["voxel_edge"]), occ, objects)

    def checksum(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "VoxelWorld":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class DepthImage:
    values: np.ndarray  # (height, width), meters
    max_range: float = DEFAULT_MAX_RANGE
    inside_geometry: bool = False
    fov: float = 90.0

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class Camera:
    fov: float = 90.0
    width: int = 672
    height: int = 672
    max_range: float = DEFAULT_MAX_RANGE

    def __post_init__(self):
        if not 0.0 < self.fov < 180.0:
            raise ValueError("fov must lie in (0, 180)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")


def camera_axes(pose: Pose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward, right and down unit vectors for a level camera at ``pose``."""
    c, s = _trig(pose.yaw)
    forward = np.array([c, s, 0.0])
    right = np.array([s, -c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    return forward, right, down


def pixel_rays(pose: Pose, cam: Camera) -> np.ndarray:
    """Unit ray directions, shape (height, width, 3), pinhole with square pixels."""
    f = (cam.width / 2.0) / math.tan(math.radians(cam.fov) / 2.0)
    u = (np.arange(cam.width) + 0.5 - cam.width / 2.0) / f
    v = (np.arange(cam.height) + 0.5 - cam.height / 2.0) / f
    fwd, right, down = camera_axes(pose)
    d = fwd[None, None, :] + u[None, :, None] * right[None, None, :] + v[:, None, None] * down[None, None, :]
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def cast_rays(world: VoxelWorld, origin: np.ndarray, dirs: np.ndarray, max_range: float) -> np.ndarray:
    """Distance along each unit ray to the first occupied voxel (inf on a miss).

    Vectorized Amanatides-Woo traversal. ``dirs`` has shape (N, 3).
    """
    origin = np.asarray(origin, dtype=float)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    n = dirs.shape[0]
    edge = world.voxel_edge
    dims = np.asarray(world.dims)
    ext = world.extent
    occ = world.occupancy
    out = np.full(n, np.inf)

    # clip each ray to the grid box
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (0.0 - origin) * inv
        t1 = (ext - origin) * inv
    tlo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    thi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # zero components: inside slab => unbounded, outside => empty
    zero = dirs == 0.0
    inside_slab = (origin >= 0.0) & (origin < ext)
    tlo = np.where(zero, np.where(inside_slab, -np.inf, np.inf), tlo)
    thi = np.where(zero, np.where(inside_slab, np.inf, -np.inf), thi)
    t_enter = np.maximum(tlo.max(axis=1), 0.0)
    t_exit = np.minimum(thi.min(axis=1), max_range)
    live = t_enter < t_exit
    if not np.any(live):
        return out

    ids = np.nonzero(live)[0]
    d = dirs[ids]
    t = t_enter[ids].copy()
    t_end = t_exit[ids]
    p = origin[None, :] + d * t[:, None]
    # nudge entry points inward so floor() lands in the entered voxel
    idx = np.floor(p / edge).astype(np.int64)
    step = np.where(d > 0, 1, np.where(d < 0, -1, 0)).astype(np.int64)
    entering = t > 0
    for ax in range(3):
        on_face = entering & (np.abs(p[:, ax] - np.round(p[:, ax] / edge) * edge) < 1e-9 * max(edge, 1.0))
        fix = on_face & (d[:, ax] < 0)
        idx[fix, ax] -= 1
    idx = np.clip(idx, 0, dims - 1)

    with np.errstate(divide="ignore", invalid="ignore"):
        next_bound = (idx + (step > 0)) * edge
        t_max = np.where(step != 0, t[:, None] + (next_bound - p) / d, np.inf)
        t_delta = np.where(step != 0, edge / np.abs(d), np.inf)

    active = np.ones(len(ids), dtype=bool)
    res = np.full(len(ids), np.inf)
    while np.any(active):
        a = np.nonzero(active)[0]
        hit = occ[idx[a, 0], idx[a, 1], idx[a, 2]]
        if np.any(hit):
            res[a[hit]] = t[a[hit]]
            active[a[hit]] = False
            a = a[~hit]
        if len(a) == 0:
            break
        axis = np.argmin(t_max[a], axis=1)
        t_next = t_max[a, axis]
        idx[a, axis] += step[a, axis]
        t[a] = t_next
        t_max[a, axis] += t_delta[a, axis]
        oob = np.any((idx[a] < 0) | (idx[a] >= dims), axis=1) | (t_next >= t_end[a])
        active[a[oob]] = False
    out[ids] = res
    return out


def render_depth(world: VoxelWorld, pose: Pose, fov: float = 90.0, width: int = 672,
                 height: int = 672, max_range: float = DEFAULT_MAX_RANGE) -> DepthImage:
    cam = Camera(fov, width, height, max_range)
    if world.is_occupied(pose.position):
        vals = np.full((height, width), MIN_DEPTH)
        return DepthImage(vals, max_range, inside_geometry=True, fov=fov)
    dirs = pixel_rays(pose, cam).reshape(-1, 3)
    dist = cast_rays(world, pose.position, dirs, max_range)
    vals = np.clip(dist, MIN_DEPTH, max_range).reshape(height, width)
    return DepthImage(vals, max_range, fov=fov)


@dataclass(frozen=True)
class VisibleObject:
    label: str
    bearing: float  # degrees, positive to the left of the heading
    distance: float
    occluded: bool

    def to_dict(self) -> dict:
        return {"label": self.label, "bearing": self.bearing, "distance": self.distance,
                "occluded": self.occluded}


def _occluded(world: VoxelWorld, origin: np.ndarray, target: WorldObject) -> bool:
    center = target.center
    seg = center - origin
    length = float(np.linalg.norm(seg))
    if length == 0.0:
        return False
    d = seg / length
    # the first voxel hit on the sight line must belong to the target's own footprint
    t = cast_rays(world, origin, d[None, :], length)[0]
    if not np.isfinite(t) or t >= length:
        return False
    hit = np.floor((origin + d * (t + 1e-6 * world.voxel_edge)) / world.voxel_edge).astype(int)
    i0, i1 = world._box_index_range(np.asarray(target.min, float), np.asarray(target.max, float),
                                    world.occupancy.shape)
    return not bool(np.all((hit >= i0) & (hit < i1)))


def visible_objects(world: VoxelWorld, pose: Pose, fov: float = 90.0) -> list[VisibleObject]:
    """Objects whose box center lies inside the (square) view frustum, nearest first."""
    origin = pose.position
    fwd, right, down = camera_axes(pose)
    tan_half = math.tan(math.radians(fov) / 2.0)
    found = []
    for obj in world.objects:
        rel = obj.center - origin
        x = float(rel @ fwd)
        if x <= 0.0:
            continue
        yr = float(rel @ right)
        zd = float(rel @ down)
        if abs(yr) > tan_half * x or abs(zd) > tan_half * x:
            continue
        bearing = math.degrees(math.atan2(-yr, x))
        dist = float(np.linalg.norm(rel))
        found.append(VisibleObject(obj.label, bearing, dist, _occluded(world, origin, obj)))
    found.sort(key=lambda o: (o.distance, o.label))
    return found


def empty_world(dims: Sequence[int], voxel_edge: float = 1.0, objects: Iterable[WorldObject] = ()) -> VoxelWorld:
    return VoxelWorld(voxel_edge, np.zeros(tuple(dims), dtype=bool), tuple(objects))
