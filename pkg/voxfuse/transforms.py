"""
Global scene augmentations in the LiDAR frame: flip about the x axis, rotation
about z and uniform scaling. Each takes (points, boxes) and returns new ones.
"""
from typing import List, Sequence, Tuple

import numpy as np

from voxfuse.geometry import Box3D, rotation_z


def flip_along_x(points: np.ndarray, boxes: Sequence[Box3D]) -> Tuple[np.ndarray, List[Box3D]]:
    points = np.array(points)
    points[:, 1] = -points[:, 1]
    flipped = [Box3D((b.center[0], -b.center[1], b.center[2]), b.dims, -b.yaw) for b in boxes]
    return points, flipped


def rotate_global(points: np.ndarray, boxes: Sequence[Box3D], angle: float) -> Tuple[np.ndarray, List[Box3D]]:
    rot = rotation_z(angle)
    points = np.array(points)
    points[:, :3] = points[:, :3] @ rot.T
    rotated = [Box3D(tuple(rot @ np.asarray(b.center)), b.dims, b.yaw + angle) for b in boxes]
    return points, rotated


def scale_global(points: np.ndarray, boxes: Sequence[Box3D], factor: float) -> Tuple[np.ndarray, List[Box3D]]:
    points = np.array(points)
    points[:, :3] *= factor
    scaled = [
        Box3D(tuple(factor * np.asarray(b.center)), tuple(factor * np.asarray(b.dims)), b.yaw) for b in boxes
    ]
    return points, scaled


def random_global_augment(
    points: np.ndarray,
    boxes: Sequence[Box3D],
    rng: np.random.Generator,
    rot_range: Tuple[float, float] = (-np.pi / 4, np.pi / 4),
    scale_range: Tuple[float, float] = (0.95, 1.05),
) -> Tuple[np.ndarray, List[Box3D]]:
    """Random flip, then rotation and scaling drawn from the given ranges"""
    boxes = list(boxes)
    if rng.random() < 0.5:
        points, boxes = flip_along_x(points, boxes)
    points, boxes = rotate_global(points, boxes, rng.uniform(*rot_range))
    points, boxes = scale_global(points, boxes, rng.uniform(*scale_range))
    return points, boxes
