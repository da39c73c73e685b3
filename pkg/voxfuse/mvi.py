"""
Multi-scale voxel/image fusion: every occupied voxel of every scale is projected
into the image, samples the finest feature map, and an MLP folds the image
feature back into the voxel feature (same width as the voxel feature).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Set, Tuple, Union

import numpy as np

from voxfuse.errors import ContractError
from voxfuse.features import FeaturePyramid, bilinear_sample_many
from voxfuse.geometry import project_points
from voxfuse.kitti import CalibrationSet
from voxfuse.tinynet import DenseNet, forward
from voxfuse.voxels import SparseVoxelGrid, voxel_centers


@dataclass(frozen=True)
class FusedLevel:
    fused: np.ndarray  # (N_k, C_k)
    image_features: np.ndarray  # (N_k, C_img), zero where not valid
    valid: np.ndarray  # (N_k,) projection landed inside the image in front of the camera
    positions: np.ndarray  # (N_k, 2) image positions, NaN behind the camera


@dataclass(frozen=True)
class FusedGrid:
    levels: Tuple[FusedLevel, ...]


def make_fusion_net(voxel_channels: int, image_channels: int, hidden: int = 64, seed: int = 0) -> DenseNet:
    return DenseNet.init(
        [voxel_channels + image_channels, hidden, voxel_channels], ["relu", "identity"], seed=seed
    )


def fuse_scale(
    grid: SparseVoxelGrid,
    k: int,
    pyramid: FeaturePyramid,
    calib: CalibrationSet,
    net: DenseNet,
) -> FusedLevel:
    level = grid.level(k)
    finest = pyramid[0]
    c_k, c_img = level.channels, finest.channels
    if net.input_dim != c_k + c_img or net.output_dim != c_k:
        raise ContractError(
            f"fusion net is {net.input_dim}->{net.output_dim}, scale {k} needs {c_k + c_img}->{c_k}"
        )
    uv, _, in_front = project_points(voxel_centers(grid, k), calib)
    width, height = pyramid.image_size
    with np.errstate(invalid="ignore"):
        valid = in_front & (uv[:, 0] >= 0) & (uv[:, 0] < width) & (uv[:, 1] >= 0) & (uv[:, 1] < height)
    img = np.zeros((len(level), c_img))
    if valid.any():
        img[valid] = bilinear_sample_many(finest, uv[valid])
    fused = forward(net, np.concatenate([level.features, img], axis=1))
    return FusedLevel(fused=fused.reshape(len(level), c_k), image_features=img, valid=valid, positions=uv)


def fuse_grid(
    grid: SparseVoxelGrid,
    pyramid: FeaturePyramid,
    calib: CalibrationSet,
    nets: Union[DenseNet, Sequence[DenseNet]],
) -> FusedGrid:
    """Fuse every built scale; one shared net or one net per scale"""
    if isinstance(nets, DenseNet):
        nets = [nets] * grid.num_scales
    if len(nets) != grid.num_scales:
        raise ContractError(f"got {len(nets)} fusion nets for {grid.num_scales} scales")
    return FusedGrid(tuple(fuse_scale(grid, k, pyramid, calib, net) for k, net in enumerate(nets)))


def sampled_positions(fused: FusedGrid, scales: Sequence[int]) -> Set[Tuple[float, float]]:
    """Distinct image positions sampled by the valid voxels of the given scales"""
    positions: Set[Tuple[float, float]] = set()
    for k in scales:
        level = fused.levels[k]
        positions.update(map(tuple, level.positions[level.valid].tolist()))
    return positions


def valid_counts(fused: FusedGrid) -> List[int]:
    return [int(np.count_nonzero(level.valid)) for level in fused.levels]
