import numpy as np
import pytest

from voxfuse.config import VoxelGridConfig
from voxfuse.errors import ContractError
from voxfuse.features import bilinear_sample, build_pyramid
from voxfuse.geometry import lidar_to_image
from voxfuse.kitti import PointCloud
from voxfuse.mvi import fuse_grid, fuse_scale, make_fusion_net, sampled_positions, valid_counts
from voxfuse.synthetic import synthetic_scene
from voxfuse.tinynet import DenseLayer, DenseNet, forward
from voxfuse.voxels import build_scales, voxel_centers, voxelize

COARSE_GRID = VoxelGridConfig(voxel_size=(0.2, 0.2, 0.2))


@pytest.fixture(scope="module")
def scene():
    return synthetic_scene("000000", seed=5)


@pytest.fixture(scope="module")
def pyramid(scene):
    return build_pyramid(scene.image)


@pytest.fixture(scope="module")
def grid(scene):
    return build_scales(voxelize(scene.cloud, COARSE_GRID))


@pytest.fixture
def net():
    return make_fusion_net(4, 6, hidden=8, seed=3)


def test_fusion_net_shape(net):
    assert net.input_dim == 10
    assert net.output_dim == 4


def test_dimension_mismatch(grid, pyramid, scene):
    with pytest.raises(ContractError):
        fuse_scale(grid, 0, pyramid, scene.calib, make_fusion_net(4, 5, hidden=8))
    with pytest.raises(ContractError):
        fuse_scale(grid, 0, pyramid, scene.calib, DenseNet.init([10, 3], ["identity"]))


def test_voxels_behind_camera_get_zero_image_features(scene, pyramid, net, rng):
    cfg = VoxelGridConfig(range_min=(-10, -5, -3), range_max=(-2, 5, 1), voxel_size=(1, 1, 1), num_scales=2)
    xyz = rng.uniform((-10, -5, -3), (-2, 5, 1), size=(300, 3))
    grid = build_scales(voxelize(PointCloud(np.hstack([xyz, rng.uniform(size=(300, 1))])), cfg))
    fused = fuse_grid(grid, pyramid, scene.calib, net)
    for k, level in enumerate(fused.levels):
        assert not level.valid.any()
        assert (level.image_features == 0).all()
        voxels = grid.level(k).features
        expected = forward(net, np.hstack([voxels, np.zeros((len(voxels), 6))]))
        np.testing.assert_allclose(level.fused, expected, atol=1e-12)
    assert valid_counts(fused) == [0, 0]


def test_constant_net_outputs_its_bias(grid, pyramid, scene):
    bias = np.array([0.1, -0.2, 0.3, 0.4])
    net = DenseNet([DenseLayer(np.zeros((4, 10)), bias, "identity")])
    level = fuse_scale(grid, 1, pyramid, scene.calib, net)
    np.testing.assert_allclose(level.fused, np.tile(bias, (len(grid.level(1)), 1)))


def test_fusion_matches_manual_composition(grid, pyramid, scene, net):
    width, height = pyramid.image_size
    fused = fuse_grid(grid, pyramid, scene.calib, net)
    for k, level in enumerate(fused.levels):
        centers = voxel_centers(grid, k)
        features = grid.level(k).features
        assert level.fused.shape == (len(centers), 4)
        for i in range(0, len(centers), max(1, len(centers) // 150)):
            projected = lidar_to_image(centers[i], scene.calib)
            valid = projected is not None and 0 <= projected[0] < width and 0 <= projected[1] < height
            image = bilinear_sample(pyramid[0], projected[:2]) if valid else np.zeros(6)
            assert level.valid[i] == valid
            np.testing.assert_allclose(level.image_features[i], image, atol=1e-12)
            np.testing.assert_allclose(level.fused[i], forward(net, np.concatenate([features[i], image])), atol=1e-12)


def test_coarse_scales_sample_more_positions(grid, pyramid, scene, net):
    fused = fuse_grid(grid, pyramid, scene.calib, net)
    finest = sampled_positions(fused, [0])
    assert len(finest) > 0
    assert len(sampled_positions(fused, [0, 1, 2, 3])) > len(finest)
    assert valid_counts(fused)[0] == int(fused.levels[0].valid.sum())


def test_fusion_independent_of_point_order(scene, pyramid, net, rng):
    shuffled = PointCloud(scene.cloud.points[rng.permutation(len(scene.cloud))])
    a = fuse_grid(build_scales(voxelize(scene.cloud, COARSE_GRID)), pyramid, scene.calib, net)
    b = fuse_grid(build_scales(voxelize(shuffled, COARSE_GRID)), pyramid, scene.calib, net)
    for la, lb in zip(a.levels, b.levels):
        np.testing.assert_array_equal(la.fused, lb.fused)


def test_per_scale_nets(grid, pyramid, scene):
    nets = [make_fusion_net(4, 6, hidden=8, seed=s) for s in range(grid.num_scales)]
    fused = fuse_grid(grid, pyramid, scene.calib, nets)
    shared = fuse_grid(grid, pyramid, scene.calib, nets[0])
    np.testing.assert_array_equal(fused.levels[0].fused, shared.levels[0].fused)
    assert not np.allclose(fused.levels[1].fused, shared.levels[1].fused)
    with pytest.raises(ContractError):
        fuse_grid(grid, pyramid, scene.calib, nets[:2])
