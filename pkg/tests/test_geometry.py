import math

import numpy as np
import pytest

from voxfuse.geometry import (
    Box2D,
    Box3D,
    bev_iou,
    box3d_corners,
    iou_2d,
    iou_3d,
    lidar_to_image,
    normalize_yaw,
    project_box3d_to_2d,
    project_points,
)
from voxfuse.kitti import CalibrationSet


def pinhole(f=1.0, cu=0.0, cv=0.0):
    """Camera frame equal to the LiDAR frame, looking down +z"""
    p2 = np.array([[f, 0.0, cu, 0.0], [0.0, f, cv, 0.0], [0.0, 0.0, 1.0, 0.0]])
    return CalibrationSet.from_matrices(p2, np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))


def random_box(rng, near=None):
    center = rng.uniform(-5, 5, size=3) if near is None else np.asarray(near.center) + rng.uniform(-1.5, 1.5, size=3)
    return Box3D(tuple(center), tuple(rng.uniform(1.0, 4.0, size=3)), rng.uniform(-math.pi, math.pi))


def inside(points, box, dims=3):
    """Point-in-box test written out independently of the library"""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    d = points[:, :dims] - np.asarray(box.center[:dims])
    local_x = c * d[:, 0] + s * d[:, 1]
    local_y = -s * d[:, 0] + c * d[:, 1]
    mask = (np.abs(local_x) <= box.dims[0] / 2) & (np.abs(local_y) <= box.dims[1] / 2)
    if dims == 3:
        mask &= np.abs(d[:, 2]) <= box.dims[2] / 2
    return mask


def sample_in(box, rng, n, dims=3):
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.asarray(box.dims)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1]
    world[:, 1] = s * local[:, 0] + c * local[:, 1]
    world[:, 2] = local[:, 2]
    return (world + np.asarray(box.center))[:, :dims]


def monte_carlo_iou(a, b, rng, n=250_000, dims=3):
    """
    Estimate the intersection from both sides: the share of a's samples in b
    and of b's samples in a, each scaled by the sampled box's size
    """
    size_a = a.volume if dims == 3 else a.bev_area
    size_b = b.volume if dims == 3 else b.bev_area
    inter_a = inside(sample_in(a, rng, n, dims), b, dims).mean() * size_a
    inter_b = inside(sample_in(b, rng, n, dims), a, dims).mean() * size_b
    inter = (inter_a + inter_b) / 2.0
    return inter / (size_a + size_b - inter)


# --- boxes -----------------------------------------------------------------------


@pytest.mark.parametrize(
    "yaw, expected",
    [
        (0.0, 0.0),
        (math.pi, math.pi),
        (-math.pi, math.pi),
        (3 * math.pi / 2, -math.pi / 2),
        (7.0, 7.0 - 2 * math.pi),
    ],
)
def test_normalize_yaw(yaw, expected):
    assert normalize_yaw(yaw) == pytest.approx(expected)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"center": (0, 0, 0), "dims": (1, -1, 1)},
        {"center": (0, math.nan, 0), "dims": (1, 1, 1)},
        {"center": (0, 0), "dims": (1, 1, 1)},
    ],
)
def test_invalid_box3d(kwargs):
    with pytest.raises(ValueError):
        Box3D(**kwargs)


def test_invalid_box2d():
    with pytest.raises(ValueError):
        Box2D(5, 0, 4, 1)


def test_unit_cube_corners():
    corners = box3d_corners(Box3D((0, 0, 0), (1, 1, 1), 0.0))
    assert {tuple(c) for c in corners} == {(x, y, z) for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)}
    # bottom face first
    assert (corners[:4, 2] == -0.5).all()


def test_quarter_turn_swaps_extents():
    corners = box3d_corners(Box3D((0, 0, 0), (2, 1, 1), math.pi / 2))
    extent = corners.max(axis=0) - corners.min(axis=0)
    np.testing.assert_allclose(extent, [1, 2, 1], atol=1e-12)


def test_corner_centroid_is_center(rng):
    for _ in range(20):
        box = random_box(rng)
        np.testing.assert_allclose(box3d_corners(box).mean(axis=0), box.center, atol=1e-12)


# --- projection ----------------------------------------------------------------------


def test_pinhole_projection():
    assert lidar_to_image((1, 2, 4), pinhole()) == pytest.approx((0.25, 0.5, 4.0))


def test_optical_axis_hits_principal_point():
    u, v, depth = lidar_to_image((0, 0, 7), pinhole(f=700, cu=600, cv=170))
    assert (u, v, depth) == pytest.approx((600, 170, 7))


@pytest.mark.parametrize("point", [(0, 0, 0), (1, 1, -3), (0, 0, 1e-7)])
def test_behind_camera(point):
    assert lidar_to_image(point, pinhole()) is None


def test_projection_is_projective():
    calib = pinhole(f=500, cu=300, cv=100)
    u1, v1, _ = lidar_to_image((1.0, -2.0, 9.0, 1.0), calib)
    u2, v2, _ = lidar_to_image((3.0, -6.0, 27.0, 3.0), calib)
    assert (u1, v1) == pytest.approx((u2, v2), abs=1e-9)


def test_kitti_projection_matches_matrix_product(calib):
    p = np.array([12.3, -1.7, -0.4])
    r0 = np.eye(4)
    r0[:3, :3] = calib.r0_rect
    tr = np.eye(4)
    tr[:3, :] = calib.tr_velo_to_cam
    h = calib.p2 @ r0 @ tr @ np.append(p, 1.0)
    u, v, depth = lidar_to_image(p, calib)
    assert u == pytest.approx(h[0] / h[2], abs=1e-9)
    assert v == pytest.approx(h[1] / h[2], abs=1e-9)
    assert depth == pytest.approx(h[2], abs=1e-9)
    # roughly centered in the KITTI frame
    assert 0 < u < 1242
    assert 0 < v < 375


def test_project_points_marks_points_behind(calib):
    uv, depth, in_front = project_points(np.array([[10.0, 0.0, 0.0], [-10.0, 0.0, 0.0]]), calib)
    assert in_front.tolist() == [True, False]
    assert np.isnan(uv[1]).all()
    assert depth[0] > 0 > depth[1]


def test_box_behind_camera_has_no_projection():
    assert project_box3d_to_2d(Box3D((0, 0, -5), (1, 1, 1)), pinhole(f=100, cu=50, cv=40), (101, 81)) is None


def test_centered_box_projects_symmetrically():
    box2d = project_box3d_to_2d(Box3D((0, 0, 10), (2, 2, 2)), pinhole(f=100, cu=50, cv=40), (101, 81))
    assert box2d.u_min + box2d.u_max == pytest.approx(100)
    assert box2d.v_min + box2d.v_max == pytest.approx(80)
    assert box2d.u_max == pytest.approx(50 + 100 / 9)


def test_projection_matches_dense_surface_samples(calib, rng):
    grid = np.linspace(-0.5, 0.5, 21)
    local = np.array(np.meshgrid(grid, grid, grid)).reshape(3, -1).T
    surface = local[(np.abs(local) == 0.5).any(axis=1)]
    for _ in range(20):
        x = rng.uniform(8, 40)
        box = Box3D(
            (x, rng.uniform(-0.4, 0.4) * x, rng.uniform(-1.5, 0)),
            tuple(rng.uniform(0.5, 4.0, size=3)),
            rng.uniform(-math.pi, math.pi),
        )
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        points = (surface * np.asarray(box.dims)) @ rot.T + np.asarray(box.center)
        uv, _, in_front = project_points(points, calib)
        assert in_front.all()
        lo = np.clip(uv.min(axis=0), 0, [1241, 374])
        hi = np.clip(uv.max(axis=0), 0, [1241, 374])
        box2d = project_box3d_to_2d(box, calib, (1242, 375))
        assert box2d is not None
        np.testing.assert_allclose(box2d.to_tuple(), [lo[0], lo[1], hi[0], hi[1]], atol=1.0)


# --- IoU -------------------------------------------------------------------------------


def test_identical_boxes():
    box = Box3D((3, 1, -1), (4, 2, 1.5), 0.4)
    assert bev_iou(box, box) == pytest.approx(1.0)
    assert iou_3d(box, box) == pytest.approx(1.0)


def test_footprints_offset_half_a_side():
    a = Box3D((0, 0, 0), (1, 1, 1))
    b = Box3D((0.5, 0, 0), (1, 1, 1))
    assert bev_iou(a, b) == pytest.approx(1 / 3)


def test_square_rotated_45_degrees():
    a = Box3D((0, 0, 0), (1, 1, 1))
    b = Box3D((0, 0, 0), (1, 1, 1), math.pi / 4)
    assert bev_iou(a, b) == pytest.approx(math.sqrt(2) / 2, abs=1e-9)


def test_half_vertical_overlap():
    a = Box3D((0, 0, 0), (1, 1, 1))
    b = Box3D((0, 0, 0.5), (1, 1, 1))
    assert iou_3d(a, b) == pytest.approx(1 / 3)


def test_half_turn_is_the_same_footprint():
    a = Box3D((2, 3, 0), (4, 2, 1), 0.3)
    b = Box3D((2, 3, 0), (4, 2, 1), 0.3 + math.pi)
    assert bev_iou(a, b) == pytest.approx(1.0)


@pytest.mark.parametrize("dims", [(0, 1, 1), (1, 0, 1), (1, 1, 0), (0.0, 0.0, 0.0)])
def test_zero_extent_box_rejected(dims):
    with pytest.raises(ValueError, match="positive"):
        Box3D((0, 0, 0), dims)


def test_thin_box_has_vanishing_iou():
    thin = Box3D((0, 0, 0), (1, 1, 1e-9))
    unit = Box3D((0, 0, 0), (1, 1, 1))
    assert iou_3d(thin, unit) == pytest.approx(0.0, abs=1e-8)
    assert iou_3d(unit, thin) == pytest.approx(0.0, abs=1e-8)


def test_disjoint_boxes():
    a = Box3D((0, 0, 0), (1, 1, 1))
    assert bev_iou(a, Box3D((5, 0, 0), (1, 1, 1))) == 0.0
    assert iou_3d(a, Box3D((0, 0, 3), (1, 1, 1))) == 0.0


@pytest.mark.parametrize(
    "a, b, expected",
    [
        (Box2D(0, 0, 10, 10), Box2D(0, 0, 10, 10), 1.0),
        (Box2D(0, 0, 10, 10), Box2D(20, 20, 30, 30), 0.0),
        (Box2D(0, 0, 10, 10), Box2D(0, 0, 6, 10), 0.6),
        (Box2D(0, 0, 0, 10), Box2D(0, 0, 6, 10), 0.0),
        (Box2D(0, 0, 10, 10), Box2D(10, 0, 20, 10), 0.0),
    ],
)
def test_iou_2d(a, b, expected):
    assert iou_2d(a, b) == pytest.approx(expected)
    assert iou_2d(b, a) == pytest.approx(expected)


def test_axis_aligned_bev_equals_iou_2d(rng):
    for _ in range(50):
        a, b = random_box(rng), random_box(rng)
        a = Box3D(a.center, a.dims, 0.0)
        b = Box3D(b.center, b.dims, 0.0)

        def footprint(box):
            x, y, _ = box.center
            dx, dy, _ = box.dims
            return Box2D(x - dx / 2, y - dy / 2, x + dx / 2, y + dy / 2)

        assert bev_iou(a, b) == pytest.approx(iou_2d(footprint(a), footprint(b)), abs=1e-12)


def test_iou_symmetric_and_rigid_invariant(rng):
    for _ in range(50):
        a = random_box(rng)
        b = random_box(rng, near=a)
        assert bev_iou(a, b) == pytest.approx(bev_iou(b, a), abs=1e-12)
        assert iou_3d(a, b) == pytest.approx(iou_3d(b, a), abs=1e-12)
        angle = rng.uniform(-math.pi, math.pi)
        shift = rng.uniform(-10, 10, size=3)
        c, s = math.cos(angle), math.sin(angle)

        def move(box):
            x, y, z = box.center
            return Box3D((c * x - s * y + shift[0], s * x + c * y + shift[1], z + shift[2]), box.dims, box.yaw + angle)

        assert bev_iou(move(a), move(b)) == pytest.approx(bev_iou(a, b), abs=1e-6)
        assert iou_3d(move(a), move(b)) == pytest.approx(iou_3d(a, b), abs=1e-6)


def test_bev_iou_matches_monte_carlo(rng):
    for _ in range(200):
        a = random_box(rng)
        b = random_box(rng, near=a)
        value = bev_iou(a, b)
        assert 0.0 <= value <= 1.0
        assert value == pytest.approx(monte_carlo_iou(a, b, rng, dims=2), abs=0.01)


def test_iou_3d_matches_monte_carlo(rng):
    for _ in range(200):
        a = random_box(rng)
        b = random_box(rng, near=a)
        value = iou_3d(a, b)
        assert 0.0 <= value <= 1.0
        assert value == pytest.approx(monte_carlo_iou(a, b, rng), abs=0.01)


@pytest.mark.parametrize("dims", [2, 3])
def test_square_rotated_45_degrees_matches_monte_carlo(rng, dims):
    a = Box3D((0, 0, 0), (1, 1, 1))
    b = Box3D((0, 0, 0), (1, 1, 1), math.pi / 4)
    value = bev_iou(a, b) if dims == 2 else iou_3d(a, b)
    assert value == pytest.approx(monte_carlo_iou(a, b, rng, dims=dims), abs=0.005)
    assert value == pytest.approx(math.sqrt(2) / 2, abs=1e-9)
