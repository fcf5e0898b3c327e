"""Rule-based collision risk from a forward depth image.

Only MOVE_FORWARD, ASCEND and DESCEND are assessed. The warning strings are
fed to the decision prompt verbatim and must stay byte-exact.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import DepthImage

FORWARD_WARNING = "MOVE_FORWARD will collide with objects. "
ASCEND_WARNING = "ASCEND will collide with objects. "
DESCEND_WARNING = "DESCEND will collide with objects. "
NO_RISK = "None"


class ContractViolation(ValueError):
    pass


class CollisionMode(str, enum.Enum):
    CORRECTED = "corrected"
    # reproduces the original ascent indexing, which never reads a pixel
    FAITHFUL_BUG = "faithful-bug"


@dataclass(frozen=True)
class CollisionParams:
    img_width: int = 672
    img_height: int = 672
    drone_width: float = 1.0
    drone_height: float = 0.1
    fov: float = 90.0
    forward_distance: float = 5.1
    vertical_distance: float = 2.2
    gradient_threshold: float = 0.02
    band_fraction: float = 0.05
    mode: CollisionMode = CollisionMode.CORRECTED

    def __post_init__(self):
        object.__setattr__(self, "mode", CollisionMode(self.mode))
        positive = [self.img_width, self.img_height, self.drone_width, self.drone_height,
                    self.fov, self.forward_distance, self.vertical_distance,
                    self.gradient_threshold, self.band_fraction]
        if any(v <= 0 for v in positive):
            raise ValueError("collision parameters must be strictly positive")
        if self.fov >= 180:
            raise ValueError("fov must lie in (0, 180)")

    @property
    def pixel_angle(self) -> float:
        return self.fov / self.img_width

    def half_extent(self, distance: float) -> tuple[int, int]:
        """Half width/height in pixels of the region the drone body sweeps at ``distance``."""
        half_x = math.degrees(math.atan(self.drone_width / (2 * distance)))
        half_y = math.degrees(math.atan(self.drone_height / (2 * distance)))
        return math.ceil(half_x / self.pixel_angle), math.ceil(half_y / self.pixel_angle)

    def band_height(self) -> int:
        return math.ceil(self.img_height * self.band_fraction)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


def _values(depth: DepthImage | np.ndarray, params: CollisionParams) -> np.ndarray:
    arr = depth.values if isinstance(depth, DepthImage) else np.asarray(depth)
    if arr.ndim == 3:
        arr = arr[..., 0]
    if arr.shape != (params.img_height, params.img_width):
        raise ContractViolation(
            f"depth image is {arr.shape[1]}x{arr.shape[0]}, params expect "
            f"{params.img_width}x{params.img_height}")
    return np.asarray(arr, dtype=float)


def _window(center: int, half: int, size: int) -> slice:
    # offsets run over [-half, half): the upper edge is exclusive
    return slice(max(center - half, 0), max(min(center + half, size), 0))


def check_forward(depth: DepthImage | np.ndarray, params: CollisionParams) -> bool:
    vals = _values(depth, params)
    hw, hh = params.half_extent(params.forward_distance)
    rows = _window(params.img_height // 2, hh, params.img_height)
    cols = _window(params.img_width // 2, hw, params.img_width)
    region = vals[rows, cols]
    return bool(region.size and np.any(region < params.forward_distance))


def height_map(vals: np.ndarray, params: CollisionParams) -> np.ndarray:
    rows = np.arange(params.img_height)
    tan = np.tan(np.abs(rows - params.img_height // 2) * params.pixel_angle * (np.pi / 180))
    return tan[:, None] * vals


def check_vertical(depth: DepthImage | np.ndarray, params: CollisionParams, direction: str) -> bool:
    """Planar ceiling/floor inference from the top (up) or bottom (down) band."""
    if direction not in ("up", "down"):
        raise ValueError("direction must be 'up' or 'down'")
    vals = _values(depth, params)
    if params.mode is CollisionMode.FAITHFUL_BUG:
        return False
    hmap = height_map(vals, params)
    grad = np.gradient(hmap, axis=0) if params.img_height > 1 else np.zeros_like(hmap)
    band = min(params.band_height(), params.img_height)
    rows = slice(0, band) if direction == "up" else slice(params.img_height - band, params.img_height)
    hw, _ = params.half_extent(params.vertical_distance)
    cols = _window(params.img_width // 2, hw, params.img_width)
    h = hmap[rows, cols]
    g = np.abs(grad[rows, cols])
    return bool(np.any((h < params.vertical_distance) & (g <= params.gradient_threshold)))


def collision_warning(depth: DepthImage | np.ndarray, params: CollisionParams) -> str:
    risks = ""
    if check_forward(depth, params):
        risks += FORWARD_WARNING
    if check_vertical(depth, params, "up"):
        risks += ASCEND_WARNING
    if check_vertical(depth, params, "down"):
        risks += DESCEND_WARNING
    return risks or NO_RISK
