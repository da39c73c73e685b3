"""
Occlusion-aware GT sampling and the baselines it is compared with.

Two boxes occlude each other when their BEV IoU exceeds tau1 or their image IoU
exceeds tau2 (OgsConfig.combine switches to requiring both). Only sampled
objects are ever removed; ground-truth objects stay in the scene.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from voxfuse.config import OgsConfig
from voxfuse.geometry import Box2D, Box3D, bev_iou, iou_2d, points_in_box3d, project_box3d_to_2d
from voxfuse.kitti import POINT_DTYPE, PointCloud, SampleDatabase, Scene, box3d_to_label, label_to_box3d


@dataclass(frozen=True)
class ObjectBox:
    box3d: Box3D
    box2d: Box2D


@dataclass(frozen=True)
class SampledObject(ObjectBox):
    """A database object placed in a scene; box2d is its projection under the scene calibration"""

    entry_id: str = ""
    class_name: str = "Car"


def occludes(a: ObjectBox, b: ObjectBox, cfg: OgsConfig) -> bool:
    bev = bev_iou(a.box3d, b.box3d) > cfg.tau1
    image = iou_2d(a.box2d, b.box2d) > cfg.tau2
    return (bev or image) if cfg.combine == "or" else (bev and image)


def occlusion_tables(
    samples: Sequence[ObjectBox], gts: Sequence[ObjectBox], cfg: OgsConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """(n, n) sample-sample and (n, m) sample-GT occlusion tables; the diagonal is False"""
    n, m = len(samples), len(gts)
    pairs = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            pairs[i, j] = pairs[j, i] = occludes(samples[i], samples[j], cfg)
    against_gt = np.zeros((n, m), dtype=bool)
    for i in range(n):
        for j in range(m):
            against_gt[i, j] = occludes(samples[i], gts[j], cfg)
    return pairs, against_gt


def occlusion_counts(
    samples: Sequence[ObjectBox], gts: Sequence[ObjectBox], cfg: Optional[OgsConfig] = None
) -> List[int]:
    """Number of distinct other samples and GTs each sample is occluded with"""
    pairs, against_gt = occlusion_tables(samples, gts, cfg or OgsConfig())
    return (pairs.sum(axis=1) + against_gt.sum(axis=1)).astype(int).tolist()


def ogs_select(
    samples: Sequence[SampledObject], gts: Sequence[ObjectBox], cfg: Optional[OgsConfig] = None
) -> List[SampledObject]:
    """
    Remove the most heavily occluded sample (lowest index on ties) until no
    sample is occluded. Survivors keep their input order.
    """
    pairs, against_gt = occlusion_tables(samples, gts, cfg or OgsConfig())
    alive = np.ones(len(samples), dtype=bool)
    counts = pairs.sum(axis=1) + against_gt.sum(axis=1)
    while alive.any():
        live = np.where(alive, counts, -1)
        worst = int(np.argmax(live))
        if live[worst] <= 0:
            break
        logger.debug(f"OGS removes sample {worst} occluded with {live[worst]} objects")
        alive[worst] = False
        counts = counts - pairs[:, worst]
    return [s for s, keep in zip(samples, alive) if keep]


def vanilla_select(
    samples: Sequence[SampledObject], gts: Sequence[ObjectBox], cfg: Optional[OgsConfig] = None
) -> List[SampledObject]:
    """Accept samples in input order when they occlude no GT and no accepted sample"""
    cfg = cfg or OgsConfig()
    accepted: List[SampledObject] = []
    for s in samples:
        if any(occludes(s, g, cfg) for g in gts) or any(occludes(s, a, cfg) for a in accepted):
            continue
        accepted.append(s)
    return accepted


def lidar_only_select(
    samples: Sequence[SampledObject], gts: Sequence[ObjectBox], cfg: Optional[OgsConfig] = None
) -> List[SampledObject]:
    """LiDAR-only GT sampling: greedy in input order, BEV collisions only"""
    cfg = cfg or OgsConfig()
    accepted: List[SampledObject] = []
    for s in samples:
        others = [*gts, *accepted]
        if any(bev_iou(s.box3d, o.box3d) > cfg.tau1 for o in others):
            continue
        accepted.append(s)
    return accepted


SELECTORS = {"lidar_only": lidar_only_select, "vanilla": vanilla_select, "ogs": ogs_select}


def count_by_class(objects: Sequence[SampledObject]) -> Dict[str, int]:
    return dict(sorted(Counter(o.class_name for o in objects).items()))


def scene_objects(scene: Scene) -> List[ObjectBox]:
    """GT objects of a scene, DontCare regions excluded"""
    return [
        ObjectBox(box3d=label_to_box3d(label, scene.calib), box2d=label.bbox2d)
        for label in scene.labels
        if not label.is_dontcare
    ]


def sample_from_database(
    db: SampleDatabase, scene: Scene, cfg: OgsConfig, rng: np.random.Generator
) -> List[SampledObject]:
    """
    Draw up to max_samples[class] distinct entries per class. Entries keep their
    recorded pose; box2d is the projection under the scene calibration and
    entries that do not project into the image are skipped.
    """
    sampled: List[SampledObject] = []
    for class_name, limit in cfg.max_samples.items():
        entries = db.get_entries_by_class(class_name)
        if not entries or limit <= 0:
            continue
        for idx in rng.choice(len(entries), size=min(limit, len(entries)), replace=False):
            entry = entries[int(idx)]
            box2d = project_box3d_to_2d(entry.box3d, scene.calib, scene.image_size)
            if box2d is None:
                logger.debug(f"Entry {entry.id} does not project into scene {scene.id}")
                continue
            sampled.append(SampledObject(entry.box3d, box2d, entry_id=entry.id, class_name=class_name))
    return sampled


def _resize_nearest(patch: np.ndarray, height: int, width: int) -> np.ndarray:
    rows = (np.arange(height) * patch.shape[0] // height).astype(np.int64)
    cols = (np.arange(width) * patch.shape[1] // width).astype(np.int64)
    return patch[rows][:, cols]


def paste_samples(scene: Scene, retained: Sequence[SampledObject], db: SampleDatabase) -> Scene:
    """
    Paste retained samples: scene points inside any pasted box are removed, the
    object points are appended in their pose, image patches are composited far
    to near at box2d (clipped to the image) and labels are appended.
    """
    if not retained:
        return scene
    points = scene.cloud.points
    removed = np.zeros(len(points), dtype=bool)
    for s in retained:
        removed |= points_in_box3d(points, s.box3d)
    clouds = [points[~removed]]
    image = np.array(scene.image)
    width, height = scene.image_size
    for s in sorted(retained, key=lambda s: -s.box3d.center[0]):
        entry = db.entries[s.entry_id]
        clouds.append(entry.points_in_pose(s.box3d).astype(POINT_DTYPE))
        u0, v0, u1, v1 = (int(round(v)) for v in s.box2d.to_tuple())
        u0, u1 = max(u0, 0), min(u1, width - 1)
        v0, v1 = max(v0, 0), min(v1, height - 1)
        if u1 < u0 or v1 < v0 or entry.patch.size == 0:
            continue
        image[v0:v1 + 1, u0:u1 + 1] = _resize_nearest(entry.patch, v1 - v0 + 1, u1 - u0 + 1)
    labels = list(scene.labels) + [
        box3d_to_label(s.box3d, scene.calib, s.class_name, scene.image_size) for s in retained
    ]
    logger.debug(f"Pasted {len(retained)} objects into scene {scene.id}, removed {int(removed.sum())} points")
    return Scene(
        id=scene.id,
        cloud=PointCloud(np.concatenate(clouds)),
        image=image,
        labels=labels,
        calib=scene.calib,
    )
