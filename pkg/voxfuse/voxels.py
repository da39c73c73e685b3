"""
Sparse voxel grids over a LiDAR cloud and the occupancy of a stride-2 regular
sparse convolution (3x3x3 kernel) between scales. Submanifold layers inside a
scale keep occupancy unchanged, so only the downsampling step is modeled.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from loguru import logger

from voxfuse.config import VoxelGridConfig
from voxfuse.kitti import PointCloud

_KERNEL_OFFSETS = np.array(
    [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.int64
)


@dataclass(frozen=True)
class VoxelLevel:
    """Occupied voxels of one scale: unique (N, 3) indices sorted lexicographically, (N, C) features"""

    indices: np.ndarray
    features: np.ndarray

    def __len__(self):
        return len(self.indices)

    @property
    def channels(self) -> int:
        return self.features.shape[1]


@dataclass
class SparseVoxelGrid:
    config: VoxelGridConfig
    levels: List[VoxelLevel] = field(default_factory=list)
    points_kept: int = 0
    points_dropped: int = 0

    @property
    def num_scales(self) -> int:
        return len(self.levels)

    def level(self, k: int) -> VoxelLevel:
        if not 0 <= k < len(self.levels):
            raise IndexError(f"scale {k} not built (have {len(self.levels)})")
        return self.levels[k]


def linear_keys(indices: np.ndarray, extents: Tuple[int, int, int]) -> np.ndarray:
    """Row-major linear index; sorting keys sorts indices lexicographically"""
    return np.ravel_multi_index(tuple(np.asarray(indices, dtype=np.int64).T), extents)


def keys_to_indices(keys: np.ndarray, extents: Tuple[int, int, int]) -> np.ndarray:
    return np.stack(np.unravel_index(keys, extents), axis=1).astype(np.int64)


def _group_mean(keys: np.ndarray, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Mean of `values` rows per key. `keys` must already be sorted, and rows with
    equal keys in a canonical order, so the summation order never depends on the
    caller's row order.
    """
    unique, starts, counts = np.unique(keys, return_index=True, return_counts=True)
    sums = np.add.reduceat(values, starts, axis=0)
    return unique, sums / counts[:, None]


def voxelize(cloud: PointCloud, cfg: VoxelGridConfig) -> SparseVoxelGrid:
    """
    Scale-0 grid: each occupied voxel's feature is the mean (x, y, z, intensity)
    of its points. Points outside the configured range are dropped and counted.
    """
    extents = cfg.extents(0)
    grid = SparseVoxelGrid(config=cfg)
    points = np.asarray(cloud.points, dtype=np.float64)
    if len(points) == 0:
        grid.levels.append(VoxelLevel(np.zeros((0, 3), np.int64), np.zeros((0, 4))))
        return grid
    idx = np.floor((points[:, :3] - np.asarray(cfg.range_min)) / np.asarray(cfg.voxel_size))
    inside = np.all((idx >= 0) & (idx < np.asarray(extents)), axis=1)
    grid.points_kept = int(np.count_nonzero(inside))
    grid.points_dropped = len(points) - grid.points_kept
    if grid.points_dropped:
        logger.debug(f"voxelize dropped {grid.points_dropped} out-of-range points")
    points, idx = points[inside], idx[inside].astype(np.int64)
    if len(points) == 0:
        grid.levels.append(VoxelLevel(np.zeros((0, 3), np.int64), np.zeros((0, 4))))
        return grid
    keys = linear_keys(idx, extents)
    # canonical order: by voxel, then by point values
    order = np.lexsort((points[:, 3], points[:, 2], points[:, 1], points[:, 0], keys))
    unique, means = _group_mean(keys[order], points[order])
    grid.levels.append(VoxelLevel(keys_to_indices(unique, extents), means))
    return grid


def downsample_dilate(grid: SparseVoxelGrid, k: int) -> VoxelLevel:
    """
    Output support of a 3x3x3 stride-2 regular sparse convolution on scale k:
    { floor((v + d) / 2) : v occupied, d in {-1, 0, 1}^3 } within scale k+1.
    Each output feature is the mean of its distinct contributing scale-k voxels.
    """
    cfg = grid.config
    if k + 1 >= cfg.num_scales:
        raise ValueError(f"scale {k + 1} exceeds num_scales={cfg.num_scales}")
    level = grid.level(k)
    ext_next = cfg.extents(k + 1)
    n = len(level)
    if n == 0:
        return VoxelLevel(np.zeros((0, 3), np.int64), np.zeros((0, level.channels)))
    cand = np.floor_divide(level.indices[:, None, :] + _KERNEL_OFFSETS[None], 2).reshape(-1, 3)
    src = np.repeat(np.arange(n, dtype=np.int64), len(_KERNEL_OFFSETS))
    inside = np.all((cand >= 0) & (cand < np.asarray(ext_next)), axis=1)
    cand, src = cand[inside], src[inside]
    # distinct (output voxel, source voxel) pairs, sorted by output then source
    pairs = np.unique(linear_keys(cand, ext_next) * n + src)
    out_keys, src = pairs // n, pairs % n
    unique, means = _group_mean(out_keys, level.features[src])
    return VoxelLevel(keys_to_indices(unique, ext_next), means)


def build_scales(grid: SparseVoxelGrid) -> SparseVoxelGrid:
    """Extend a grid with every scale up to config.num_scales"""
    while len(grid.levels) < grid.config.num_scales:
        grid.levels.append(downsample_dilate(grid, len(grid.levels) - 1))
    return grid


def voxel_centers(grid: SparseVoxelGrid, k: int) -> np.ndarray:
    """(N_k, 3) centers in meters: range_min + (index + 0.5) * voxel_size * 2^k"""
    cfg = grid.config
    level = grid.level(k)
    return np.asarray(cfg.range_min) + (level.indices + 0.5) * np.asarray(cfg.cell_size(k))


def grid_stats(grid: SparseVoxelGrid) -> Dict[str, int]:
    stats = {"points_kept": grid.points_kept, "points_dropped": grid.points_dropped}
    for k, level in enumerate(grid.levels):
        stats[f"voxels_scale{k}"] = len(level)
    return stats
