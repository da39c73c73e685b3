from __future__ import annotations

import pathlib
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

Vec3 = Tuple[float, float, float]


def ceil_half(n: int) -> int:
    return -(-n // 2)


class VoxelGridConfig(BaseModel):
    """
    Voxel grid over the LiDAR frame. Defaults are the usual KITTI front-view range.
    """

    range_min: Vec3 = (0.0, -40.0, -3.0)
    range_max: Vec3 = (70.4, 40.0, 1.0)
    voxel_size: Vec3 = (0.05, 0.05, 0.1)
    num_scales: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _check_grid(self):
        for lo, hi, size in zip(self.range_min, self.range_max, self.voxel_size):
            if not hi > lo:
                raise ValueError(f"range_max must exceed range_min ({hi} <= {lo})")
            if not size > 0:
                raise ValueError(f"voxel size must be positive, got {size}")
            n = (hi - lo) / size
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"range extent {hi - lo} is not a multiple of voxel size {size}")
        return self

    def extents(self, k: int = 0) -> Tuple[int, int, int]:
        """Grid extents at scale k; each scale halves the previous one (ceiling)"""
        ext = [int(round((hi - lo) / size)) for lo, hi, size in
               zip(self.range_min, self.range_max, self.voxel_size)]
        for _ in range(k):
            ext = [ceil_half(n) for n in ext]
        return tuple(ext)

    def cell_size(self, k: int = 0) -> Vec3:
        return tuple(s * 2 ** k for s in self.voxel_size)


class OgsConfig(BaseModel):
    tau1: float = 0.05  # BEV IoU occlusion threshold
    tau2: float = 0.5  # image IoU occlusion threshold
    combine: Literal["or", "and"] = "or"
    max_samples: Dict[str, int] = Field(
        default_factory=lambda: {"Car": 15, "Pedestrian": 10, "Cyclist": 10}
    )

    @field_validator("tau1", "tau2")
    def _threshold_range(cls, value):
        if not 0.0 <= value < 1.0:
            raise ValueError(f"occlusion threshold must be in [0, 1), got {value}")
        return value


class DifficultyRule(BaseModel):
    min_height: float
    max_occlusion: int
    max_truncation: float


class DifficultyRules(BaseModel):
    easy: DifficultyRule = DifficultyRule(min_height=40, max_occlusion=0, max_truncation=0.15)
    moderate: DifficultyRule = DifficultyRule(min_height=25, max_occlusion=1, max_truncation=0.30)
    hard: DifficultyRule = DifficultyRule(min_height=25, max_occlusion=2, max_truncation=0.50)


class EvalConfig(BaseModel):
    iou_threshold: Dict[str, float] = Field(
        default_factory=lambda: {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}
    )
    recall_positions: Literal[11, 40] = 11
    difficulty: DifficultyRules = Field(default_factory=DifficultyRules)
    roi_recall_taus: Tuple[float, ...] = (0.5, 0.7)
    # fraction of a detection's 2D area inside a DontCare region that drops it
    dontcare_overlap: float = 0.5
    neighbor_classes: Dict[str, List[str]] = Field(
        default_factory=lambda: {"Car": ["Van"], "Pedestrian": ["Person_sitting"]}
    )

    @field_validator("iou_threshold")
    def _thresholds_in_range(cls, value):
        for name, tau in value.items():
            if not 0.0 < tau <= 1.0:
                raise ValueError(f"IoU threshold for {name} must be in (0, 1], got {tau}")
        return value

    @field_validator("roi_recall_taus")
    def _taus_in_range(cls, value):
        if any(not 0.0 < tau <= 1.0 for tau in value):
            raise ValueError("RoI recall thresholds must be in (0, 1]")
        return value


class FcrConfig(BaseModel):
    """
    Synthetic candidate world, head shape and training schedule for the
    confidence rectification demo. Hidden widths are guesses; nothing pins them.
    """

    n_gt: int = Field(6, ge=1)
    k_jitter: int = Field(6, ge=0)
    k_noise: int = Field(4, ge=0)
    jitter_center: float = 0.5  # meters, std of center jitter
    jitter_dims: float = 0.12  # relative std of dimension jitter
    jitter_yaw: float = 0.15  # radians
    noise_3d: float = 0.15  # std of noise on s_3D
    noise_2d: float = 0.15  # std of noise on s_2D
    feature_noise: float = 0.3  # std of per-entry noise on RoI features
    m_rows: int = Field(8, ge=1)
    n_rows: int = Field(8, ge=1)
    c3: int = Field(4, ge=1)
    c2: int = Field(4, ge=1)
    d_s: int = Field(16, ge=1)
    hidden: int = Field(64, ge=1)
    epochs: int = Field(200, ge=0)
    lr: float = Field(0.5, ge=0.0)
    batch_size: Optional[int] = Field(None, ge=1)  # None: full-batch gradient descent
    train_scenes: int = Field(60, ge=1)
    heldout_scenes: int = Field(40, ge=1)
    positive_iou: float = 0.7


class RunConfig(BaseModel):
    dataset_root: Optional[pathlib.Path] = None
    database_root: Optional[pathlib.Path] = None
    scene_ids: List[str] = Field(default_factory=list)
    ogs: OgsConfig = Field(default_factory=OgsConfig)
    voxel: VoxelGridConfig = Field(default_factory=VoxelGridConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    fcr: FcrConfig = Field(default_factory=FcrConfig)
    seed: int = 0
    output_dir: pathlib.Path = pathlib.Path("out")
    jobs: int = Field(1, ge=1)
    image_ext: Literal["ppm"] = "ppm"

    @classmethod
    def load(cls, path) -> RunConfig:
        text = pathlib.Path(path).read_text(encoding="utf-8")
        return cls.model_validate_json(text)
