"""
Feature-cued confidence rectification.

A candidate's 3D and 2D RoI features are average pooled over their rows and
concatenated; its two confidences are lifted by a small MLP; a sigmoid MLP over
both yields the rectified score. Box geometry is never touched.
"""
from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, ValidationError

from voxfuse.config import FcrConfig
from voxfuse.errors import ContractError, SchemaError
from voxfuse.evaluation import PRCurve, average_precision
from voxfuse.geometry import Box2D, Box3D, iou_2d, iou_3d, project_box3d_to_2d
from voxfuse.kitti import CalibrationSet
from voxfuse.synthetic import IMAGE_SIZE, random_object_box, synthetic_calibration
from voxfuse.tinynet import (
    DenseLayer,
    DenseNet,
    NetRecord,
    backward_batch,
    forward,
    net_to_record,
    record_to_net,
    step,
)
from voxfuse.utils import derive_seed

PROB_EPS = 1e-12


@dataclass(frozen=True)
class DetectionCandidate:
    box3d: Box3D
    box2d: Optional[Box2D]
    s_3d: float
    s_2d: float
    feat3d: np.ndarray  # (m, c3) RoI features from the voxel branch
    feat2d: np.ndarray  # (n, c2) RoI features from the image branch
    s_rect: Optional[float] = None
    class_name: str = "Car"
    scene_id: str = ""

    def __post_init__(self):
        for name in ("s_3d", "s_2d", "s_rect"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ContractError(f"{name}={value} is not a probability")
        for name in ("feat3d", "feat2d"):
            feat = np.array(getattr(self, name), dtype=np.float64, ndmin=2)
            feat.setflags(write=False)
            object.__setattr__(self, name, feat)

    @property
    def score(self) -> float:
        """Rectified score when present, otherwise the 3D confidence"""
        return self.s_3d if self.s_rect is None else self.s_rect


@dataclass
class FcrHead:
    score_lift: DenseNet  # 2 -> d_s
    rectifier: DenseNet  # c3 + c2 + d_s -> 1, sigmoid output

    def __post_init__(self):
        if self.score_lift.input_dim != 2:
            raise ContractError(f"score lift takes 2 scores, not {self.score_lift.input_dim}")
        if self.rectifier.output_dim != 1 or self.rectifier.layers[-1].activation != "sigmoid":
            raise ContractError("rectifier must end in a single sigmoid unit")
        if self.roi_dim < 0:
            raise ContractError("rectifier input is narrower than the lifted score")

    @property
    def roi_dim(self) -> int:
        return self.rectifier.input_dim - self.score_lift.output_dim

    @classmethod
    def init(cls, c3: int, c2: int, d_s: int = 16, hidden: int = 64, seed: int = 0) -> FcrHead:
        """Xavier init; the output layer starts at zero so every score is 0.5"""
        score_lift = DenseNet.init([2, d_s], ["relu"], seed=derive_seed(seed, "score_lift"))
        rectifier = DenseNet.init([c3 + c2 + d_s, hidden, 1], ["relu", "sigmoid"], seed=derive_seed(seed, "rectifier"))
        rectifier.layers[-1] = DenseLayer(np.zeros((1, hidden)), np.zeros(1), "sigmoid")
        return cls(score_lift, rectifier)


def pool_roi_features(feat) -> Tuple[np.ndarray, bool]:
    """
    Average pool an (m, c) feature matrix over its rows.
    Returns (c-vector, True), or (zero vector, False) when m = 0.
    """
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 2:
        raise ContractError(f"RoI features must be m x c, got shape {feat.shape}")
    if feat.shape[0] == 0:
        return np.zeros(feat.shape[1]), False
    return feat.mean(axis=0), True


def roi_vector(cand: DetectionCandidate) -> np.ndarray:
    return np.concatenate([pool_roi_features(cand.feat3d)[0], pool_roi_features(cand.feat2d)[0]])


def _check_dims(roi: np.ndarray, head: FcrHead):
    if roi.shape[-1] != head.roi_dim:
        raise ContractError(f"pooled RoI features have {roi.shape[-1]} channels, head expects {head.roi_dim}")


def rectify(cand: DetectionCandidate, head: FcrHead) -> float:
    roi = roi_vector(cand)
    _check_dims(roi, head)
    lifted = forward(head.score_lift, [cand.s_3d, cand.s_2d])
    return float(forward(head.rectifier, np.concatenate([roi, lifted]))[0])


def rectify_all(cands: Sequence[DetectionCandidate], head: FcrHead) -> List[DetectionCandidate]:
    """Copies of the candidates with s_rect filled in"""
    if not cands:
        return []
    rects = _head_forward(head, *_design(cands))
    return [dataclasses.replace(c, s_rect=float(s)) for c, s in zip(cands, rects)]


def _design(cands: Sequence[DetectionCandidate]) -> Tuple[np.ndarray, np.ndarray]:
    rois = np.stack([roi_vector(c) for c in cands])
    scores = np.array([[c.s_3d, c.s_2d] for c in cands])
    return rois, scores


def _head_forward(head: FcrHead, rois: np.ndarray, scores: np.ndarray) -> np.ndarray:
    _check_dims(rois, head)
    lifted = forward(head.score_lift, scores)
    return forward(head.rectifier, np.concatenate([rois, lifted], axis=1))[:, 0]


def bce_loss(s: np.ndarray, y: np.ndarray) -> float:
    s = np.clip(s, PROB_EPS, 1.0 - PROB_EPS)
    return float(np.mean(-(y * np.log(s) + (1.0 - y) * np.log(1.0 - s))))


def train_fcr(
    cands: Sequence[DetectionCandidate],
    labels: Sequence[int],
    head: FcrHead,
    epochs: int,
    lr: float,
    batch_size: Optional[int] = None,
    seed: int = 0,
) -> Tuple[FcrHead, List[float]]:
    """
    Minimize mean binary cross-entropy between s_rect and the labels by gradient
    descent. batch_size=None uses the whole set per step; otherwise mini-batches
    follow a seeded shuffle. Returns the new head and the full-set loss after
    every epoch.
    """
    if not cands:
        raise ContractError("cannot train on an empty candidate set")
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (len(cands),) or not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("labels must be one 0/1 value per candidate")
    rois, scores = _design(cands)
    _check_dims(rois, head)
    rng = np.random.default_rng(seed)
    n = len(cands)
    size = n if batch_size is None else max(1, min(batch_size, n))
    trace: List[float] = []
    for epoch in range(epochs):
        order = np.arange(n) if size == n else rng.permutation(n)
        for start in range(0, n, size):
            batch = order[start:start + size]
            head = _sgd_step(head, rois[batch], scores[batch], y[batch], lr)
        trace.append(bce_loss(_head_forward(head, rois, scores), y))
        logger.debug(f"FCR epoch {epoch + 1}/{epochs} loss {trace[-1]:.6f}")
    if trace:
        logger.info(f"FCR training loss {trace[0]:.4f} -> {trace[-1]:.4f} over {epochs} epochs")
    return head, trace


def _sgd_step(head: FcrHead, rois: np.ndarray, scores: np.ndarray, y: np.ndarray, lr: float) -> FcrHead:
    lifted = forward(head.score_lift, scores)
    x = np.concatenate([rois, lifted], axis=1)
    s = forward(head.rectifier, x)[:, 0]
    clipped = np.clip(s, PROB_EPS, 1.0 - PROB_EPS)
    # d(mean BCE)/ds
    upstream = ((clipped - y) / (clipped * (1.0 - clipped)) / len(y))[:, None]
    rect_grads, dx = backward_batch(head.rectifier, x, upstream)
    lift_grads, _ = backward_batch(head.score_lift, scores, dx[:, rois.shape[1]:])
    return FcrHead(step(head.score_lift, lift_grads, lr), step(head.rectifier, rect_grads, lr))


# --- synthetic candidates --------------------------------------------------------


def _jitter(rng: np.random.Generator, box: Box3D, cfg: FcrConfig) -> Box3D:
    dx, dy = rng.normal(0.0, cfg.jitter_center, size=2)
    scale = np.clip(1.0 + rng.normal(0.0, cfg.jitter_dims, size=3), 0.2, None)
    return Box3D(
        center=(box.center[0] + dx, box.center[1] + dy, box.center[2]),
        dims=tuple(np.asarray(box.dims) * scale),
        yaw=box.yaw + rng.normal(0.0, cfg.jitter_yaw),
    )


def roi_features(rng: np.random.Generator, iou: float, rows: int, channels: int, noise: float) -> np.ndarray:
    """
    Stand-in RoI features: channel c of every row holds iou when c is even and
    1 - iou when c is odd, plus independent Gaussian noise.
    """
    base = np.where(np.arange(channels) % 2 == 0, iou, 1.0 - iou)
    return base[None, :] + rng.normal(0.0, noise, size=(rows, channels))


def make_candidates(
    cfg: FcrConfig,
    seed: int,
    calib: Optional[CalibrationSet] = None,
    image_size: Tuple[int, int] = IMAGE_SIZE,
    scene_id: str = "",
) -> Tuple[List[DetectionCandidate], List[Box3D]]:
    """
    One synthetic scene: n_gt Car boxes, k_jitter jittered copies of each, then
    k_noise free boxes. s_3D and s_2D are the true best 3D / 2D IoU plus
    independent Gaussian noise, clamped to [0, 1].
    """
    rng = np.random.default_rng(seed)
    calib = calib or synthetic_calibration()
    gts = [random_object_box(rng, "Car") for _ in range(cfg.n_gt)]
    gt2d = [project_box3d_to_2d(g, calib, image_size) for g in gts]
    boxes = [_jitter(rng, g, cfg) for g in gts for _ in range(cfg.k_jitter)]
    boxes += [random_object_box(rng, "Car") for _ in range(cfg.k_noise)]
    cands = []
    for box in boxes:
        box2d = project_box3d_to_2d(box, calib, image_size)
        true3d = max(iou_3d(box, g) for g in gts)
        true2d = max((iou_2d(box2d, g) for g in gt2d if g is not None), default=0.0) if box2d else 0.0
        cands.append(
            DetectionCandidate(
                box3d=box,
                box2d=box2d,
                s_3d=float(np.clip(true3d + rng.normal(0.0, cfg.noise_3d), 0.0, 1.0)),
                s_2d=float(np.clip(true2d + rng.normal(0.0, cfg.noise_2d), 0.0, 1.0)),
                feat3d=roi_features(rng, true3d, cfg.m_rows, cfg.c3, cfg.feature_noise),
                feat2d=roi_features(rng, true2d, cfg.n_rows, cfg.c2, cfg.feature_noise),
                scene_id=scene_id,
            )
        )
    return cands, gts


def candidate_labels(cands: Sequence[DetectionCandidate], gts: Sequence[Box3D], positive_iou: float = 0.7) -> List[int]:
    """1 when a candidate reaches positive_iou 3D IoU with some GT"""
    return [int(any(iou_3d(c.box3d, g) >= positive_iou for g in gts)) for c in cands]


def make_candidate_set(
    cfg: FcrConfig, seed: int, split: str, n_scenes: int, jobs: int = 1
) -> Tuple[List[DetectionCandidate], List[int]]:
    """Candidates and labels over n_scenes synthetic scenes, each with its own derived seed"""

    def one(i: int):
        scene_id = f"{split}{i:04d}"
        cands, gts = make_candidates(cfg, derive_seed(seed, split, i), scene_id=scene_id)
        return cands, candidate_labels(cands, gts, cfg.positive_iou)

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(one, range(n_scenes)))
    cands = [c for scene_cands, _ in results for c in scene_cands]
    labels = [y for _, scene_labels in results for y in scene_labels]
    return cands, labels


# --- candidate / detection files -------------------------------------------------


class CandidateRecord(BaseModel):
    """One detection candidate; also the record type of detection files for evaluation"""

    scene_id: str = ""
    class_name: str = "Car"
    box3d: List[float] = Field(min_length=7, max_length=7)  # x, y, z, l, w, h, yaw
    box2d: Optional[List[float]] = Field(None, min_length=4, max_length=4)
    s_3d: float = Field(ge=0.0, le=1.0)
    s_2d: float = Field(0.0, ge=0.0, le=1.0)
    s_rect: Optional[float] = Field(None, ge=0.0, le=1.0)
    feat3d: List[List[float]] = Field(default_factory=list)
    feat2d: List[List[float]] = Field(default_factory=list)

    @property
    def score(self) -> float:
        return self.s_3d if self.s_rect is None else self.s_rect


def candidate_to_record(cand: DetectionCandidate) -> CandidateRecord:
    return CandidateRecord(
        scene_id=cand.scene_id,
        class_name=cand.class_name,
        box3d=cand.box3d.to_list(),
        box2d=list(cand.box2d.to_tuple()) if cand.box2d is not None else None,
        s_3d=cand.s_3d,
        s_2d=cand.s_2d,
        s_rect=cand.s_rect,
        feat3d=cand.feat3d.tolist(),
        feat2d=cand.feat2d.tolist(),
    )


def _matrix(rows: List[List[float]]) -> np.ndarray:
    if not rows:
        return np.zeros((0, 0))
    if len({len(row) for row in rows}) != 1:
        raise ValueError("feature rows differ in length")
    return np.array(rows, dtype=np.float64)


def record_to_candidate(record: CandidateRecord) -> DetectionCandidate:
    return DetectionCandidate(
        box3d=Box3D.from_list(record.box3d),
        box2d=Box2D(*record.box2d) if record.box2d is not None else None,
        s_3d=record.s_3d,
        s_2d=record.s_2d,
        feat3d=_matrix(record.feat3d),
        feat2d=_matrix(record.feat2d),
        s_rect=record.s_rect,
        class_name=record.class_name,
        scene_id=record.scene_id,
    )


def write_candidates(cands: Sequence[DetectionCandidate]) -> str:
    return json.dumps([candidate_to_record(c).model_dump() for c in cands], indent=2) + "\n"


def read_candidate_records(text: str) -> List[CandidateRecord]:
    """Parse a JSON list of candidate records; SchemaError names the first bad record"""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"candidate file is not valid JSON: {e}") from None
    if not isinstance(raw, list):
        raise SchemaError("candidate file must hold a JSON list of records")
    records = []
    for i, item in enumerate(raw):
        try:
            record = CandidateRecord.model_validate(item)
            record_to_candidate(record)
        except (ValidationError, ValueError) as e:
            raise SchemaError(f"record {i}: {e}") from None
        records.append(record)
    return records


def read_candidates(text: str) -> List[DetectionCandidate]:
    return [record_to_candidate(r) for r in read_candidate_records(text)]


# --- head files ----------------------------------------------------------------------


class HeadRecord(BaseModel):
    score_lift: NetRecord
    rectifier: NetRecord


def save_head(head: FcrHead) -> str:
    record = HeadRecord(score_lift=net_to_record(head.score_lift), rectifier=net_to_record(head.rectifier))
    return json.dumps(record.model_dump(), indent=2) + "\n"


def load_head(text: str) -> FcrHead:
    record = HeadRecord.model_validate_json(text)
    return FcrHead(record_to_net(record.score_lift), record_to_net(record.rectifier))


# --- demo --------------------------------------------------------------------------


@dataclass
class FcrReport:
    head: FcrHead
    loss_trace: List[float]
    ap: Dict[str, Optional[float]]  # score name -> held-out AP
    train_size: int
    heldout_size: int
    heldout: List[DetectionCandidate]


def score_ap(scores: Sequence[float], labels: Sequence[int], positions: int = 11) -> Optional[float]:
    """AP of a ranking against 0/1 labels; every positive counts as one GT"""
    curve = PRCurve.from_scores(list(scores), [bool(y) for y in labels])
    return average_precision(curve, positions)


def run_fcr_demo(cfg: FcrConfig, seed: int = 0, jobs: int = 1, positions: int = 11) -> FcrReport:
    """
    Train a fresh head on synthetic training scenes and compare held-out AP of
    s_3D, s_2D, s_rect and a constant score.
    """
    train, train_labels = make_candidate_set(cfg, seed, "train", cfg.train_scenes, jobs)
    heldout, heldout_labels = make_candidate_set(cfg, seed, "heldout", cfg.heldout_scenes, jobs)
    logger.info(f"FCR demo: {len(train)} training and {len(heldout)} held-out candidates")
    head = FcrHead.init(cfg.c3, cfg.c2, cfg.d_s, cfg.hidden, seed=derive_seed(seed, "head"))
    head, trace = train_fcr(
        train, train_labels, head, cfg.epochs, cfg.lr, batch_size=cfg.batch_size, seed=derive_seed(seed, "shuffle")
    )
    heldout = rectify_all(heldout, head)
    ap = {
        "s_3d": score_ap([c.s_3d for c in heldout], heldout_labels, positions),
        "s_2d": score_ap([c.s_2d for c in heldout], heldout_labels, positions),
        "s_rect": score_ap([c.s_rect for c in heldout], heldout_labels, positions),
        "constant": score_ap([0.5] * len(heldout), heldout_labels, positions),
    }
    return FcrReport(head, trace, ap, len(train), len(heldout), heldout)
