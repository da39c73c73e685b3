"""
Oriented box math in the LiDAR frame (x forward, y left, z up).

Box3D.center is the geometric center of the box and yaw rotates about +z.
Corner order returned by box3d_corners:

    0: (+dx/2, +dy/2, -dz/2)    4: (+dx/2, +dy/2, +dz/2)
    1: (-dx/2, +dy/2, -dz/2)    5: (-dx/2, +dy/2, +dz/2)
    2: (-dx/2, -dy/2, -dz/2)    6: (-dx/2, -dy/2, +dz/2)
    3: (+dx/2, -dy/2, -dz/2)    7: (+dx/2, -dy/2, +dz/2)

so corners 0-3 are the bottom face and 4-7 the top face, both counter-clockwise
seen from above.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np

if TYPE_CHECKING:
    from voxfuse.kitti import CalibrationSet

MIN_DEPTH = 1e-6

_CORNER_SIGNS = np.array(
    [
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, 1],
        [-1, 1, 1],
        [-1, -1, 1],
        [1, -1, 1],
    ],
    dtype=np.float64,
)

# wireframe edges over the corner order above
BOX_EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
)


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]"""
    wrapped = math.remainder(float(yaw), 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Box3D:
    center: Tuple[float, float, float]
    dims: Tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        dims = tuple(float(d) for d in self.dims)
        if len(center) != 3 or len(dims) != 3:
            raise ValueError("Box3D needs a 3-vector center and 3-vector dims")
        if not all(math.isfinite(v) for v in center + dims) or not math.isfinite(self.yaw):
            raise ValueError(f"Box3D values must be finite: {center} {dims} {self.yaw}")
        if any(d <= 0 for d in dims):
            raise ValueError(f"Box3D dims must be positive, got {dims}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def volume(self) -> float:
        dx, dy, dz = self.dims
        return dx * dy * dz

    @property
    def bev_area(self) -> float:
        return self.dims[0] * self.dims[1]

    @property
    def z_range(self) -> Tuple[float, float]:
        half = self.dims[2] / 2.0
        return (self.center[2] - half, self.center[2] + half)

    def to_list(self) -> List[float]:
        return [*self.center, *self.dims, self.yaw]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> Box3D:
        x, y, z, dx, dy, dz, yaw = values
        return cls(center=(x, y, z), dims=(dx, dy, dz), yaw=yaw)


@dataclass(frozen=True)
class Box2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        for name in ("u_min", "v_min", "u_max", "v_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.u_min > self.u_max or self.v_min > self.v_max:
            raise ValueError(f"Box2D corners out of order: {self.to_tuple()}")

    @property
    def width(self) -> float:
        return self.u_max - self.u_min

    @property
    def height(self) -> float:
        return self.v_max - self.v_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_tuple(self) -> Tuple[float, float, float, float]:
        return (self.u_min, self.v_min, self.u_max, self.v_max)


# --- projection --------------------------------------------------------------


def projection_matrix(calib: CalibrationSet) -> np.ndarray:
    """3x4 matrix mapping homogeneous LiDAR points to homogeneous pixels"""
    return calib.T_img_from_cam @ calib.T_cam_from_lidar


def lidar_to_image(p: Sequence[float], calib: CalibrationSet) -> Optional[Tuple[float, float, float]]:
    """
    Project a LiDAR point to (u, v, depth). `p` is (x, y, z) or homogeneous
    (x, y, z, w). Returns None when the point is at or behind the camera.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape == (3,):
        p = np.append(p, 1.0)
    h = projection_matrix(calib) @ p
    depth = float(h[2])
    if depth <= MIN_DEPTH:
        return None
    return (float(h[0] / depth), float(h[1] / depth), depth)


def project_points(points: np.ndarray, calib: CalibrationSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorized lidar_to_image over an (N, 3) array.
    Returns (uv (N, 2), depth (N,), in_front (N,) bool); uv is NaN where not in front.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    homog = np.hstack([points, np.ones((len(points), 1))])
    h = homog @ projection_matrix(calib).T
    depth = h[:, 2]
    in_front = depth > MIN_DEPTH
    uv = np.full((len(points), 2), np.nan)
    uv[in_front] = h[in_front, :2] / depth[in_front, None]
    return uv, depth, in_front


def rotation_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def box3d_corners(b: Box3D) -> np.ndarray:
    """(8, 3) corners in the fixed order documented at the top of this module"""
    half = _CORNER_SIGNS * (np.asarray(b.dims) / 2.0)
    return half @ rotation_z(b.yaw).T + np.asarray(b.center)


def project_box3d_to_2d(
    b: Box3D, calib: CalibrationSet, image_size: Tuple[int, int]
) -> Optional[Box2D]:
    """
    Axis-aligned hull of the projected corners, clipped to the image.
    image_size is (width, height). Corners behind the camera are dropped.
    """
    width, height = image_size
    uv, _, in_front = project_points(box3d_corners(b), calib)
    if np.count_nonzero(in_front) < 2:
        return None
    uv = uv[in_front]
    u_min, v_min = uv.min(axis=0)
    u_max, v_max = uv.max(axis=0)
    u_min, u_max = np.clip([u_min, u_max], 0.0, width - 1)
    v_min, v_max = np.clip([v_min, v_max], 0.0, height - 1)
    box = Box2D(u_min, v_min, u_max, v_max)
    if box.area <= 0.0:
        return None
    return box


def points_in_box3d(points: np.ndarray, b: Box3D, margin: float = 1e-9) -> np.ndarray:
    """Boolean mask of the (N, >=3) points lying inside the box"""
    points = np.asarray(points, dtype=np.float64)
    local = (points[:, :3] - np.asarray(b.center)) @ rotation_z(b.yaw)
    half = np.asarray(b.dims) / 2.0 + margin
    return np.all(np.abs(local) <= half, axis=1)


# --- IoU kernels ---------------------------------------------------------------


def bev_polygon(b: Box3D) -> List[Tuple[float, float]]:
    """Counter-clockwise footprint corners in the ground plane"""
    return [(float(x), float(y)) for x, y, _ in box3d_corners(b)[:4]]


def polygon_area(poly: Sequence[Tuple[float, float]]) -> float:
    """Shoelace area, positive for counter-clockwise polygons"""
    n = len(poly)
    if n < 3:
        return 0.0
    total = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        total += x1 * y2 - x2 * y1
    return 0.5 * total


def clip_polygon(
    subject: Sequence[Tuple[float, float]], clip: Sequence[Tuple[float, float]]
) -> List[Tuple[float, float]]:
    """
    Sutherland-Hodgman: cut `subject` by every edge of the convex,
    counter-clockwise `clip` polygon, keeping the part on the left of each edge.
    """
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        inputs, output = output, []

        def side(p):
            return (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax)

        prev = inputs[-1]
        prev_side = side(prev)
        for cur in inputs:
            cur_side = side(cur)
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    output.append(_edge_crossing(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0.0:
                output.append(_edge_crossing(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return output


def _edge_crossing(p, q, p_side, q_side):
    t = p_side / (p_side - q_side)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    if a.bev_area <= 0.0 or b.bev_area <= 0.0:
        return 0.0
    poly = clip_polygon(bev_polygon(a), bev_polygon(b))
    return max(polygon_area(poly), 0.0)


def bev_iou(a: Box3D, b: Box3D) -> float:
    area_a, area_b = a.bev_area, b.bev_area
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_2d(a: Box2D, b: Box2D) -> float:
    if a.area <= 0.0 or b.area <= 0.0:
        return 0.0
    iw = min(a.u_max, b.u_max) - max(a.u_min, b.u_min)
    ih = min(a.v_max, b.v_max) - max(a.v_min, b.v_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return float(inter / (a.area + b.area - inter))


def intersection_over_area(a: Box2D, region: Box2D) -> float:
    """Fraction of a's area lying inside region"""
    if a.area <= 0.0:
        return 0.0
    iw = min(a.u_max, region.u_max) - max(a.u_min, region.u_min)
    ih = min(a.v_max, region.v_max) - max(a.v_min, region.v_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return float(iw * ih / a.area)


def vertical_overlap(a: Box3D, b: Box3D) -> float:
    a_lo, a_hi = a.z_range
    b_lo, b_hi = b.z_range
    return max(0.0, min(a_hi, b_hi) - max(a_lo, b_lo))


def iou_3d(a: Box3D, b: Box3D) -> float:
    vol_a, vol_b = a.volume, b.volume
    if vol_a <= 0.0 or vol_b <= 0.0:
        return 0.0
    overlap = vertical_overlap(a, b)
    if overlap <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * overlap
    union = vol_a + vol_b - inter
    return float(min(max(inter / union, 0.0), 1.0))
