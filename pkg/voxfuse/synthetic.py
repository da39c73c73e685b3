"""
Procedural KITTI-like worlds: calibration, labeled scenes with object points and
painted image regions, sample databases cut from those scenes, and small OGS
instances with occlusion chains.
"""
from __future__ import annotations

import math
import pathlib
from typing import List, Optional, Sequence, Tuple

import numpy as np

from voxfuse.geometry import Box2D, Box3D, bev_iou, points_in_box3d, project_box3d_to_2d, rotation_z
from voxfuse.kitti import (
    POINT_DTYPE,
    CalibrationSet,
    DatabaseEntry,
    PointCloud,
    SampleDatabase,
    Scene,
    box3d_to_label,
    parse_calibration,
    write_scene,
)
from voxfuse.ogs import ObjectBox, SampledObject
from voxfuse.utils import derive_seed

# calibration of KITTI training frame 000000
KITTI_CALIB_TEXT = """\
P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03
R0_rect: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 7.402527e-03 4.351614e-03 9.999631e-01
Tr_velo_to_cam: 7.533745e-03 -9.999714e-01 -6.166020e-04 -4.069766e-03 1.480249e-02 7.280733e-04 -9.998902e-01 -7.631618e-02 9.998621e-01 7.523790e-03 1.480755e-02 -2.717806e-01
"""

IMAGE_SIZE = (1242, 375)  # (width, height)
GROUND_Z = -1.73  # LiDAR mounting height above the road
CLASS_DIMS = {  # (l, w, h)
    "Car": (3.9, 1.6, 1.56),
    "Pedestrian": (0.8, 0.6, 1.73),
    "Cyclist": (1.76, 0.6, 1.73),
}
CLASS_COLORS = {"Car": (200, 40, 40), "Pedestrian": (40, 200, 40), "Cyclist": (40, 40, 200)}
SCENE_CLASSES = ("Car",) * 4 + ("Pedestrian",) * 2 + ("Cyclist",) * 2


def synthetic_calibration() -> CalibrationSet:
    return parse_calibration(KITTI_CALIB_TEXT)


def random_object_box(
    rng: np.random.Generator,
    class_name: str = "Car",
    x_range: Tuple[float, float] = (6.0, 45.0),
) -> Box3D:
    """Box standing on the ground inside the camera field of view"""
    x = rng.uniform(*x_range)
    y = rng.uniform(-0.35 * x, 0.35 * x)
    l, w, h = (d * (1.0 + 0.05 * rng.standard_normal()) for d in CLASS_DIMS[class_name])
    return Box3D(center=(x, y, GROUND_Z + h / 2.0), dims=(l, w, h), yaw=rng.uniform(-math.pi, math.pi))


def object_points(rng: np.random.Generator, box: Box3D, count: int) -> np.ndarray:
    """(count, 4) float32 points uniformly inside the box"""
    local = (rng.uniform(-0.5, 0.5, size=(count, 3)) * 0.98) * np.asarray(box.dims)
    pts = np.empty((count, 4))
    pts[:, :3] = local @ rotation_z(box.yaw).T + np.asarray(box.center)
    pts[:, 3] = rng.uniform(0.0, 1.0, size=count)
    return pts.astype(POINT_DTYPE)


def ground_points(rng: np.random.Generator, count: int) -> np.ndarray:
    pts = np.empty((count, 4))
    pts[:, 0] = rng.uniform(0.0, 70.0, size=count)
    pts[:, 1] = rng.uniform(-40.0, 40.0, size=count)
    pts[:, 2] = GROUND_Z + rng.normal(0.0, 0.02, size=count)
    pts[:, 3] = rng.uniform(0.0, 1.0, size=count)
    return pts.astype(POINT_DTYPE)


def background_image(image_size: Tuple[int, int] = IMAGE_SIZE) -> np.ndarray:
    width, height = image_size
    rows = np.linspace(60, 180, height).astype(np.uint8)
    image = np.empty((height, width, 3), dtype=np.uint8)
    image[...] = rows[:, None, None]
    return image


def paint_boxes(image: np.ndarray, boxes: Sequence[Tuple[Box2D, Tuple[int, int, int], float]]) -> np.ndarray:
    """Fill (box2d, color, depth) rectangles, farthest first"""
    image = np.array(image)
    for box, color, _ in sorted(boxes, key=lambda item: -item[2]):
        u0, v0, u1, v1 = (int(round(v)) for v in box.to_tuple())
        image[v0:v1 + 1, u0:u1 + 1] = color
    return image


def synthetic_scene(
    scene_id: str,
    seed: int,
    classes: Sequence[str] = SCENE_CLASSES,
    n_ground: int = 2000,
    calib: Optional[CalibrationSet] = None,
    image_size: Tuple[int, int] = IMAGE_SIZE,
) -> Scene:
    """
    A labeled scene: ground points plus one point cluster per object, with each
    object's image region painted in its class color.
    """
    rng = np.random.default_rng(seed)
    calib = calib or synthetic_calibration()
    boxes: List[Tuple[str, Box3D]] = []
    for class_name in classes:
        for _ in range(50):
            box = random_object_box(rng, class_name)
            if all(bev_iou(box, other) == 0.0 for _, other in boxes):
                boxes.append((class_name, box))
                break
    ground = ground_points(rng, n_ground)
    for _, box in boxes:
        ground = ground[~points_in_box3d(ground, box)]
    clouds = [ground]
    labels, painted = [], []
    for class_name, box in boxes:
        count = int(np.clip(3000.0 / box.center[0], 10, 400))
        clouds.append(object_points(rng, box, count))
        label = box3d_to_label(box, calib, class_name, image_size)
        labels.append(label)
        painted.append((label.bbox2d, CLASS_COLORS[class_name], box.center[0]))
    image = paint_boxes(background_image(image_size), painted)
    return Scene(
        id=scene_id,
        cloud=PointCloud(np.concatenate(clouds)),
        image=image,
        labels=labels,
        calib=calib,
    )


def scene_ids(count: int) -> List[str]:
    return [f"{i:06d}" for i in range(count)]


def write_synthetic_dataset(root, ids: Sequence[str], seed: int = 0) -> List[Scene]:
    scenes = [synthetic_scene(scene_id, derive_seed(seed, "scene", scene_id)) for scene_id in ids]
    for scene in scenes:
        write_scene(scene, root)
    return scenes


def synthetic_database(seed: int = 0, n_scenes: int = 6) -> SampleDatabase:
    scenes = [synthetic_scene(f"db{i:04d}", derive_seed(seed, "database", i)) for i in range(n_scenes)]
    return SampleDatabase.from_scenes(scenes)


def write_synthetic_database(root, seed: int = 0, n_scenes: int = 6) -> SampleDatabase:
    db = synthetic_database(seed, n_scenes)
    db.write(pathlib.Path(root))
    db.root = pathlib.Path(root)
    return db


def occlusion_chain_database(seed: int = 0) -> SampleDatabase:
    """
    One Car close to the sensor whose image box covers two distant Pedestrians.
    The Pedestrians do not overlap each other in the image and no two entries
    touch in BEV. With the Car drawn first, greedy acceptance keeps only the Car
    while removing the most occluded sample keeps both Pedestrians.
    """
    rng = np.random.default_rng(seed)
    calib = synthetic_calibration()
    layout = (
        ("Car", "hub", (8.0, 0.0)),
        ("Pedestrian", "left", (20.0, 0.5)),
        ("Pedestrian", "right", (20.0, -0.5)),
    )
    db = SampleDatabase()
    for class_name, name, (x, y) in layout:
        l, w, h = CLASS_DIMS[class_name]
        box = Box3D(center=(x, y, GROUND_Z + h / 2.0), dims=(l, w, h), yaw=0.0)
        canonical = Box3D(center=(0.0, 0.0, 0.0), dims=box.dims, yaw=0.0)
        db.save_entry(
            DatabaseEntry(
                id=f"chain_{name}",
                class_name=class_name,
                points=object_points(rng, canonical, 64),
                box3d=box,
                patch=np.full((8, 4, 3), CLASS_COLORS[class_name], dtype=np.uint8),
                box2d=project_box3d_to_2d(box, calib, IMAGE_SIZE),
            )
        )
    return db


def write_occlusion_chain_corpus(dataset_root, database_root, ids: Sequence[str], seed: int = 0) -> SampleDatabase:
    """Unlabeled scenes plus the occlusion chain database"""
    for scene_id in ids:
        write_scene(synthetic_scene(scene_id, derive_seed(seed, "scene", scene_id), classes=()), dataset_root)
    db = occlusion_chain_database(seed)
    db.write(pathlib.Path(database_root))
    db.root = pathlib.Path(database_root)
    return db


# --- OGS instances -------------------------------------------------------------


def _bev_slot(slot: int) -> Box3D:
    """Boxes on a 4 m lattice never touch in BEV"""
    l, w, h = CLASS_DIMS["Pedestrian"]
    return Box3D(center=(10.0 + 4.0 * (slot % 10), -20.0 + 4.0 * (slot // 10), GROUND_Z + h / 2.0),
                 dims=(l, w, h), yaw=0.0)


def star_instance(
    rng: np.random.Generator, n_stars: int = 3, n_gts: int = 2
) -> Tuple[List[SampledObject], List[ObjectBox]]:
    """
    Image-plane occlusion chains leaf-hub-leaf: the hub conflicts with both
    leaves (IoU 0.6) while the leaves overlap only at IoU 0.2. BEV footprints are
    disjoint and GTs conflict with nothing. Sample order is shuffled.
    """
    samples: List[SampledObject] = []
    slot = 0
    for star in range(n_stars):
        u = 30.0 * star
        for name, (u0, u1) in (("hub", (0.0, 10.0)), ("left", (0.0, 6.0)), ("right", (4.0, 10.0))):
            samples.append(
                SampledObject(
                    box3d=_bev_slot(slot),
                    box2d=Box2D(u + u0, 0.0, u + u1, 10.0),
                    entry_id=f"star{star}_{name}",
                    class_name="Pedestrian",
                )
            )
            slot += 1
    order = rng.permutation(len(samples))
    samples = [samples[i] for i in order]
    gts = [
        ObjectBox(box3d=_bev_slot(slot + i), box2d=Box2D(500.0 + 30.0 * i, 100.0, 510.0 + 30.0 * i, 110.0))
        for i in range(n_gts)
    ]
    return samples, gts


def random_instance(
    rng: np.random.Generator, max_samples: int = 8, max_gts: int = 8
) -> Tuple[List[SampledObject], List[ObjectBox]]:
    """Crowded random boxes so that both planes produce conflicts"""

    def draw():
        box3d = Box3D(
            center=(rng.uniform(0.0, 12.0), rng.uniform(-6.0, 6.0), rng.uniform(-1.0, 0.0)),
            dims=(rng.uniform(0.5, 4.5), rng.uniform(0.5, 2.0), rng.uniform(1.0, 2.0)),
            yaw=rng.uniform(-math.pi, math.pi),
        )
        u, v = rng.uniform(0.0, 80.0), rng.uniform(0.0, 40.0)
        box2d = Box2D(u, v, u + rng.uniform(5.0, 40.0), v + rng.uniform(5.0, 30.0))
        return box3d, box2d

    samples = []
    for i in range(int(rng.integers(0, max_samples + 1))):
        box3d, box2d = draw()
        samples.append(SampledObject(box3d=box3d, box2d=box2d, entry_id=f"s{i}"))
    gts = [ObjectBox(*draw()) for _ in range(int(rng.integers(0, max_gts + 1)))]
    return samples, gts
