"""
KITTI-style 3D detection evaluation: greedy matching, 11/40 recall-position AP,
difficulty buckets, RoI recall and 3D NMS.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from voxfuse.config import DifficultyRule, EvalConfig
from voxfuse.errors import ContractError
from voxfuse.geometry import Box3D, intersection_over_area, iou_3d, project_box3d_to_2d
from voxfuse.kitti import CalibrationSet, LabelRecord, label_to_box3d
from voxfuse.utils import none_to_empty_string

RECALL_EPS = 1e-12
RESULT_COLUMNS = ("class", "difficulty", "metric", "positions", "value")


class Difficulty(Enum):
    easy = 0
    moderate = 1
    hard = 2
    ignored = 3


LEVELS = (Difficulty.easy, Difficulty.moderate, Difficulty.hard)


@dataclass
class PRCurve:
    """(score, is_tp) operating points in descending score order"""

    entries: List[Tuple[float, bool]] = field(default_factory=list)
    gt_count: int = 0

    def __post_init__(self):
        if self.num_tp > self.gt_count:
            raise ContractError(f"curve has {self.num_tp} true positives but only {self.gt_count} GTs")

    @property
    def num_tp(self) -> int:
        return sum(1 for _, tp in self.entries if tp)

    @classmethod
    def from_scores(cls, scores: Sequence[float], is_tp: Sequence[bool], gt_count: Optional[int] = None) -> PRCurve:
        """Sort by descending score, ties keep input order"""
        order = sorted(range(len(scores)), key=lambda i: -scores[i])
        entries = [(float(scores[i]), bool(is_tp[i])) for i in order]
        if gt_count is None:
            gt_count = sum(1 for tp in is_tp if tp)
        return cls(entries, gt_count)

    def precision_recall(self) -> Tuple[np.ndarray, np.ndarray]:
        tp = np.cumsum([1 if hit else 0 for _, hit in self.entries], dtype=np.float64)
        ranks = np.arange(1, len(self.entries) + 1, dtype=np.float64)
        precision = tp / ranks if len(ranks) else np.zeros(0)
        recall = tp / self.gt_count if self.gt_count else np.zeros_like(tp)
        return precision, recall


def merge_curves(curves: Iterable[PRCurve]) -> PRCurve:
    """Pool per-scene curves; equal scores keep scene order"""
    curves = list(curves)
    entries = [entry for curve in curves for entry in curve.entries]
    order = sorted(range(len(entries)), key=lambda i: -entries[i][0])
    return PRCurve([entries[i] for i in order], sum(c.gt_count for c in curves))


def _best_match(box: Box3D, gts: Sequence[Box3D], candidates: Iterable[int], thresh: float) -> Optional[int]:
    best, best_iou = None, thresh
    for j in candidates:
        iou = iou_3d(box, gts[j])
        if iou >= best_iou and (best is None or iou > best_iou):
            best, best_iou = j, iou
    return best


def match_detections(
    dets: Sequence[Tuple[Box3D, float]],
    gts: Sequence[Box3D],
    iou_thresh: float,
    gt_ignored: Optional[Sequence[bool]] = None,
    det_ignored: Optional[Sequence[bool]] = None,
) -> PRCurve:
    """
    Greedy matching in descending score order. Each detection takes the unmatched
    GT with the highest 3D IoU >= iou_thresh, at most one detection per GT.
    Detections matching an ignored GT, or unmatched detections flagged in
    det_ignored, are left off the curve.
    """
    gt_ignored = list(gt_ignored) if gt_ignored is not None else [False] * len(gts)
    det_ignored = list(det_ignored) if det_ignored is not None else [False] * len(dets)
    if any(not np.isfinite(score) for _, score in dets):
        raise ContractError("detection scores must be finite")
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    matched = [False] * len(gts)
    entries = []
    for i in order:
        box, score = dets[i]
        free = [j for j in range(len(gts)) if not matched[j]]
        j = _best_match(box, gts, (j for j in free if not gt_ignored[j]), iou_thresh)
        if j is not None:
            matched[j] = True
            entries.append((float(score), True))
            continue
        j = _best_match(box, gts, (j for j in free if gt_ignored[j]), iou_thresh)
        if j is not None:
            matched[j] = True
            continue
        if det_ignored[i]:
            continue
        entries.append((float(score), False))
    gt_count = sum(1 for ignored in gt_ignored if not ignored)
    return PRCurve(entries, gt_count)


def recall_anchors(positions: int) -> np.ndarray:
    if positions == 11:
        return np.arange(0, 11) / 10.0
    if positions == 40:
        return np.arange(1, 41) / 40.0
    raise ContractError(f"recall positions must be 11 or 40, got {positions}")


def average_precision(curve: PRCurve, positions: int = 11) -> Optional[float]:
    """
    Mean interpolated precision over the recall anchors; p(r) is the best
    precision at any operating point with recall >= r, 0 when unreachable.
    None when the curve has no ground truth.
    """
    anchors = recall_anchors(positions)
    if curve.gt_count == 0:
        return None
    precision, recall = curve.precision_recall()
    total = 0.0
    for r in anchors:
        reachable = precision[recall >= r - RECALL_EPS]
        total += float(reachable.max()) if len(reachable) else 0.0
    return total / len(anchors)


def assign_difficulty(label: LabelRecord, rules=None) -> Difficulty:
    """Easiest KITTI difficulty level the label satisfies"""
    if label.is_dontcare:
        return Difficulty.ignored
    rules = rules if rules is not None else EvalConfig().difficulty
    height = label.bbox2d.height
    for level in LEVELS:
        rule: DifficultyRule = getattr(rules, level.name)
        if (
            height >= rule.min_height
            and label.occlusion_level <= rule.max_occlusion
            and label.truncation <= rule.max_truncation
        ):
            return level
    return Difficulty.ignored


def roi_hits(rois: Sequence[Box3D], gts: Sequence[Box3D], tau: float) -> int:
    """Number of GTs covered by at least one RoI with 3D IoU >= tau"""
    if not 0.0 < tau <= 1.0:
        raise ContractError(f"RoI recall threshold must be in (0, 1], got {tau}")
    return sum(1 for gt in gts if any(iou_3d(roi, gt) >= tau for roi in rois))


def roi_recall(rois: Sequence[Box3D], gts: Sequence[Box3D], tau: float) -> Optional[float]:
    hits = roi_hits(rois, gts, tau)
    if not gts:
        return None
    return hits / len(gts)


def nms_3d(dets: Sequence[Tuple[Box3D, float]], iou_thresh: float) -> List[Tuple[Box3D, float]]:
    """Greedy by descending score; drop boxes with 3D IoU > iou_thresh against a kept box"""
    if any(not np.isfinite(score) for _, score in dets):
        raise ContractError("detection scores must be finite")
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    kept: List[Tuple[Box3D, float]] = []
    for i in order:
        box, score = dets[i]
        if all(iou_3d(box, k) <= iou_thresh for k, _ in kept):
            kept.append((box, score))
    return kept


# --- scene-level evaluation ----------------------------------------------------


@dataclass(frozen=True)
class Detection:
    scene_id: str
    class_name: str
    box3d: Box3D
    score: float


@dataclass(frozen=True)
class SceneTruth:
    scene_id: str
    labels: Tuple[LabelRecord, ...]
    calib: CalibrationSet
    image_size: Tuple[int, int]


def _scene_curve(
    truth: SceneTruth,
    dets: Sequence[Detection],
    class_name: str,
    level: Difficulty,
    cfg: EvalConfig,
) -> Tuple[PRCurve, List[Box3D]]:
    rule: DifficultyRule = getattr(cfg.difficulty, level.name)
    neighbors = cfg.neighbor_classes.get(class_name, [])
    gts, gt_ignored = [], []
    for label in truth.labels:
        if label.class_name == class_name:
            gts.append(label_to_box3d(label, truth.calib))
            gt_ignored.append(assign_difficulty(label, cfg.difficulty).value > level.value)
        elif label.class_name in neighbors:
            gts.append(label_to_box3d(label, truth.calib))
            gt_ignored.append(True)
    dontcare = [label.bbox2d for label in truth.labels if label.is_dontcare]
    class_dets = [d for d in dets if d.class_name == class_name]
    det_ignored = []
    for det in class_dets:
        box2d = project_box3d_to_2d(det.box3d, truth.calib, truth.image_size)
        if box2d is None or box2d.height < rule.min_height:
            det_ignored.append(True)
        else:
            det_ignored.append(any(intersection_over_area(box2d, dc) > cfg.dontcare_overlap for dc in dontcare))
    curve = match_detections(
        [(d.box3d, d.score) for d in class_dets],
        gts,
        cfg.iou_threshold[class_name],
        gt_ignored=gt_ignored,
        det_ignored=det_ignored,
    )
    valid_gts = [gt for gt, ignored in zip(gts, gt_ignored) if not ignored]
    return curve, valid_gts


def evaluate_scenes(
    truths: Sequence[SceneTruth],
    detections: Sequence[Detection],
    cfg: Optional[EvalConfig] = None,
) -> List[Dict[str, object]]:
    """Result table rows: AP per class x difficulty plus RoI recall at each configured tau"""
    cfg = cfg or EvalConfig()
    by_scene: Dict[str, List[Detection]] = {t.scene_id: [] for t in truths}
    for det in detections:
        if det.scene_id not in by_scene:
            logger.warning(f"Detection for unknown scene {det.scene_id} ignored")
            continue
        by_scene[det.scene_id].append(det)
    rows = []
    for class_name in cfg.iou_threshold:
        for level in LEVELS:
            curves, hits, total = [], {tau: 0 for tau in cfg.roi_recall_taus}, 0
            for truth in truths:
                scene_dets = by_scene[truth.scene_id]
                curve, valid_gts = _scene_curve(truth, scene_dets, class_name, level, cfg)
                curves.append(curve)
                rois = [d.box3d for d in scene_dets if d.class_name == class_name]
                total += len(valid_gts)
                for tau in cfg.roi_recall_taus:
                    hits[tau] += roi_hits(rois, valid_gts, tau)
            ap = average_precision(merge_curves(curves), cfg.recall_positions)
            rows.append(_row(class_name, level, "AP_3D", cfg.recall_positions, ap))
            for tau in cfg.roi_recall_taus:
                recall = hits[tau] / total if total else None
                rows.append(_row(class_name, level, f"recall@{tau}", "", recall))
    return rows


def _row(class_name, level, metric, positions, value) -> Dict[str, object]:
    return {
        "class": class_name,
        "difficulty": level.name,
        "metric": metric,
        "positions": positions,
        "value": value,
    }


def write_result_table(rows: Sequence[Dict[str, object]]) -> str:
    """CSV with columns class, difficulty, metric, positions, value; undefined values are empty"""
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        cells = dict(row)
        if isinstance(cells["value"], float):
            cells["value"] = f"{cells['value']:.6f}"
        writer.writerow({k: none_to_empty_string(cells[k]) for k in RESULT_COLUMNS})
    return out.getvalue()
