"""
KITTI scenes: velodyne point blobs, calib text, label text, P6 pixmaps, and the
per-class sample database used by GT sampling.
"""
from __future__ import annotations

import json
import math
import pathlib
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel

from voxfuse.errors import DatabaseMissingError, KittiFormatError
from voxfuse.geometry import (
    Box2D,
    Box3D,
    normalize_yaw,
    points_in_box3d,
    project_box3d_to_2d,
    rotation_z,
)
from voxfuse.utils import format_float, parse_float_fields, write_output_to_file

PathLike = Union[str, pathlib.Path]

POINT_DTYPE = np.dtype("<f4")
CALIB_KEYS = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}
LABEL_FIELDS = 15


class ObjectClass(Enum):
    car = "Car"
    pedestrian = "Pedestrian"
    cyclist = "Cyclist"
    dontcare = "DontCare"
    other = "other"


def class_name_to_enum(class_name: str) -> ObjectClass:
    for member in ObjectClass:
        if member.value == class_name:
            return member
    return ObjectClass.other


# --- point clouds ------------------------------------------------------------


@dataclass(frozen=True)
class PointCloud:
    """(N, 4) little-endian float32 rows of x, y, z, intensity in the LiDAR frame"""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=POINT_DTYPE))

    def __post_init__(self):
        points = np.array(self.points, dtype=POINT_DTYPE).reshape(-1, 4)
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3].astype(np.float64)


def parse_point_cloud(blob: bytes) -> PointCloud:
    """
    Decode a KITTI velodyne .bin blob: little-endian float32 quadruples
    """
    if len(blob) % 16 != 0:
        raise KittiFormatError(f"point blob length {len(blob)} is not divisible by 16")
    points = np.frombuffer(blob, dtype=POINT_DTYPE).reshape(-1, 4)
    finite = np.isfinite(points).all(axis=1)
    if not finite.all():
        raise KittiFormatError("non-finite point value", index=int(np.argmin(finite)))
    intensity = points[:, 3]
    in_range = (intensity >= 0.0) & (intensity <= 1.0)
    if not in_range.all():
        raise KittiFormatError("intensity outside [0, 1]", index=int(np.argmin(in_range)))
    return PointCloud(points.copy())


def write_point_cloud(cloud: PointCloud) -> bytes:
    return np.ascontiguousarray(cloud.points, dtype=POINT_DTYPE).tobytes()


# --- calibration -------------------------------------------------------------


def lift4(matrix: np.ndarray) -> np.ndarray:
    """Embed a 3x3 or 3x4 matrix into a 4x4 homogeneous transform"""
    out = np.eye(4)
    rows, cols = matrix.shape
    out[:rows, :cols] = matrix
    return out


@dataclass(frozen=True)
class CalibrationSet:
    """
    T_cam_from_lidar maps LiDAR points into the rectified camera frame
    (R0_rect folded in), T_img_from_cam is the left color camera projection P2.
    """

    T_cam_from_lidar: np.ndarray
    T_img_from_cam: np.ndarray
    p2: np.ndarray
    r0_rect: np.ndarray
    tr_velo_to_cam: np.ndarray
    source_text: Optional[str] = None

    @classmethod
    def from_matrices(
        cls,
        p2: np.ndarray,
        r0_rect: np.ndarray,
        tr_velo_to_cam: np.ndarray,
        source_text: Optional[str] = None,
        tol: float = 1e-6,
    ) -> CalibrationSet:
        p2 = np.asarray(p2, dtype=np.float64).reshape(3, 4)
        r0_rect = np.asarray(r0_rect, dtype=np.float64).reshape(3, 3)
        tr_velo_to_cam = np.asarray(tr_velo_to_cam, dtype=np.float64).reshape(3, 4)
        t_cam = lift4(r0_rect) @ lift4(tr_velo_to_cam)
        check_rigid_transform(t_cam, tol)
        return cls(
            T_cam_from_lidar=t_cam,
            T_img_from_cam=p2,
            p2=p2,
            r0_rect=r0_rect,
            tr_velo_to_cam=tr_velo_to_cam,
            source_text=source_text,
        )

    @property
    def T_lidar_from_cam(self) -> np.ndarray:
        rot = self.T_cam_from_lidar[:3, :3]
        inv = np.eye(4)
        inv[:3, :3] = rot.T
        inv[:3, 3] = -rot.T @ self.T_cam_from_lidar[:3, 3]
        return inv


def check_rigid_transform(transform: np.ndarray, tol: float = 1e-6):
    if not np.array_equal(transform[3], [0.0, 0.0, 0.0, 1.0]):
        raise KittiFormatError(f"transform bottom row is {transform[3].tolist()}, not (0,0,0,1)")
    rot = transform[:3, :3]
    deviation = float(np.abs(rot.T @ rot - np.eye(3)).max())
    if deviation > tol:
        raise KittiFormatError(f"rotation block is not orthonormal (deviation {deviation:.3g})")


def parse_calibration(text: str, tol: float = 1e-6) -> CalibrationSet:
    """
    Parse a KITTI object calib file. Only P2, R0_rect and Tr_velo_to_cam are used;
    other keys (P0, P1, P3, Tr_imu_to_velo) are skipped.
    """
    values: Dict[str, List[float]] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if ":" not in line:
            raise KittiFormatError("expected 'key: values'", line=line_no)
        key, rest = line.split(":", maxsplit=1)
        key = key.strip()
        if key not in CALIB_KEYS:
            continue
        floats = parse_float_fields(rest.split(), line=line_no)
        if len(floats) != CALIB_KEYS[key]:
            raise KittiFormatError(
                f"{key} has {len(floats)} values, expected {CALIB_KEYS[key]}", line=line_no
            )
        values[key] = floats
    for key in CALIB_KEYS:
        if key not in values:
            raise KittiFormatError("missing calibration key", key=key)
    return CalibrationSet.from_matrices(
        np.array(values["P2"]),
        np.array(values["R0_rect"]),
        np.array(values["Tr_velo_to_cam"]),
        source_text=text,
        tol=tol,
    )


def write_calibration(calib: CalibrationSet) -> str:
    if calib.source_text is not None:
        return calib.source_text
    lines = []
    for key, matrix in (
        ("P2", calib.p2),
        ("R0_rect", calib.r0_rect),
        ("Tr_velo_to_cam", calib.tr_velo_to_cam),
    ):
        lines.append(f"{key}: " + " ".join(format_float(v) for v in matrix.ravel()))
    return "\n".join(lines) + "\n"


# --- labels ------------------------------------------------------------------


@dataclass(frozen=True)
class LabelRecord:
    """
    One line of a KITTI label file. dims are (h, w, l) and location is the
    bottom center of the object in the rectified camera frame.
    """

    class_name: str
    truncation: float
    occlusion_level: int
    alpha: float
    bbox2d: Box2D
    dims: Tuple[float, float, float]
    location: Tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(float(v) for v in self.dims))
        object.__setattr__(self, "location", tuple(float(v) for v in self.location))
        if self.is_dontcare:
            return
        if any(d < 0 for d in self.dims):
            raise ValueError(f"label dims must be nonnegative, got {self.dims}")
        if not -math.pi <= self.yaw <= math.pi:
            raise ValueError(f"label rotation_y {self.yaw} outside [-pi, pi]")
        if self.occlusion_level not in (0, 1, 2, 3):
            raise ValueError(f"occlusion level {self.occlusion_level} not in 0..3")

    @property
    def category(self) -> ObjectClass:
        return class_name_to_enum(self.class_name)

    @property
    def is_dontcare(self) -> bool:
        return self.class_name == ObjectClass.dontcare.value

    def write(self) -> str:
        fields = [
            self.class_name,
            format_float(self.truncation),
            str(self.occlusion_level),
            format_float(self.alpha),
            *(format_float(v) for v in self.bbox2d.to_tuple()),
            *(format_float(v) for v in self.dims),
            *(format_float(v) for v in self.location),
            format_float(self.yaw),
        ]
        return " ".join(fields)


def parse_label_line(line: str, line_no: Optional[int] = None) -> LabelRecord:
    tokens = line.split()
    if len(tokens) != LABEL_FIELDS:
        raise KittiFormatError(
            f"label has {len(tokens)} fields, expected {LABEL_FIELDS}", line=line_no
        )
    class_name = tokens[0]
    try:
        occlusion = int(tokens[2])
    except ValueError:
        raise KittiFormatError(f"malformed occlusion level '{tokens[2]}'", line=line_no) from None
    truncation, alpha = parse_float_fields([tokens[1], tokens[3]], line=line_no)
    nums = parse_float_fields(tokens[4:], line=line_no)
    try:
        return LabelRecord(
            class_name=class_name,
            truncation=truncation,
            occlusion_level=occlusion,
            alpha=alpha,
            bbox2d=Box2D(*nums[0:4]),
            dims=tuple(nums[4:7]),
            location=tuple(nums[7:10]),
            yaw=nums[10],
        )
    except ValueError as e:
        raise KittiFormatError(str(e), line=line_no) from None


def parse_labels(text: str) -> List[LabelRecord]:
    """Parse a KITTI label file; DontCare regions are kept (see LabelRecord.is_dontcare)"""
    return [
        parse_label_line(line, line_no)
        for line_no, line in enumerate(text.splitlines(), start=1)
        if line.strip()
    ]


def write_labels(labels: Sequence[LabelRecord]) -> str:
    return "".join(label.write() + "\n" for label in labels)


def label_to_box3d(label: LabelRecord, calib: CalibrationSet) -> Box3D:
    """Camera-frame bottom-center label to a LiDAR-frame center box"""
    h, w, l = label.dims
    x, y, z = label.location
    center_cam = np.array([x, y - h / 2.0, z, 1.0])
    center = calib.T_lidar_from_cam @ center_cam
    return Box3D(center=tuple(center[:3]), dims=(l, w, h), yaw=-label.yaw - math.pi / 2.0)


def box3d_to_label(
    box: Box3D,
    calib: CalibrationSet,
    class_name: str,
    image_size: Tuple[int, int],
    truncation: float = 0.0,
    occlusion_level: int = 0,
) -> LabelRecord:
    l, w, h = box.dims
    center_cam = calib.T_cam_from_lidar @ np.append(np.asarray(box.center), 1.0)
    x, y, z = center_cam[0], center_cam[1] + h / 2.0, center_cam[2]
    rotation_y = normalize_yaw(-box.yaw - math.pi / 2.0)
    alpha = normalize_yaw(rotation_y - math.atan2(x, z))
    bbox = project_box3d_to_2d(box, calib, image_size) or Box2D(0.0, 0.0, 0.0, 0.0)
    return LabelRecord(
        class_name=class_name,
        truncation=truncation,
        occlusion_level=occlusion_level,
        alpha=alpha,
        bbox2d=bbox,
        dims=(h, w, l),
        location=(x, y, z),
        yaw=rotation_y,
    )


# --- images ------------------------------------------------------------------


def read_ppm(blob: bytes) -> np.ndarray:
    """Decode a binary portable pixmap (P6, maxval 255) to an (H, W, 3) uint8 array"""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(blob):
            raise KittiFormatError("truncated pixmap header")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos:pos + 1].isspace():
                pos += 1
            tokens.append(blob[start:pos])
    magic, width, height, maxval = tokens
    if magic != b"P6":
        raise KittiFormatError(f"unsupported pixmap magic {magic!r}, expected P6")
    width, height, maxval = int(width), int(height), int(maxval)
    if maxval != 255:
        raise KittiFormatError(f"unsupported pixmap maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    size = width * height * 3
    data = blob[pos:pos + size]
    if len(data) != size:
        raise KittiFormatError(f"pixmap data has {len(data)} bytes, expected {size}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(image: np.ndarray) -> bytes:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    height, width = image.shape[:2]
    return f"P6\n{width} {height}\n255\n".encode("ascii") + image.tobytes()


# --- scenes ------------------------------------------------------------------


@dataclass(frozen=True)
class Scene:
    id: str
    cloud: PointCloud
    image: np.ndarray
    labels: Tuple[LabelRecord, ...]
    calib: CalibrationSet

    def __post_init__(self):
        image = np.array(self.image, dtype=np.uint8)
        if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] < 1 or image.shape[1] < 1:
            raise ValueError(f"scene {self.id}: image must be HxWx3 with positive size")
        if self.calib is None:
            raise ValueError(f"scene {self.id}: calibration required")
        image.setflags(write=False)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def image_size(self) -> Tuple[int, int]:
        """(width, height)"""
        return (self.image.shape[1], self.image.shape[0])


class KittiDataset:
    """
    KITTI object layout under one root:
        velodyne/<id>.bin  calib/<id>.txt  label_2/<id>.txt  image_2/<id>.ppm
    """

    def __init__(self, root: PathLike):
        self.root = pathlib.Path(root)

    def path(self, kind: str, scene_id: str) -> pathlib.Path:
        folder, ext = {
            "velodyne": ("velodyne", ".bin"),
            "calib": ("calib", ".txt"),
            "label": ("label_2", ".txt"),
            "image": ("image_2", ".ppm"),
        }[kind]
        return self.root / folder / f"{scene_id}{ext}"

    def scene_ids(self) -> List[str]:
        return sorted(p.stem for p in (self.root / "velodyne").glob("*.bin"))

    def exists(self, scene_id: str) -> bool:
        return self.path("velodyne", scene_id).exists() and self.path("calib", scene_id).exists()

    def load(self, scene_id: str) -> Scene:
        logger.debug(f"Loading scene {scene_id} from {self.root}")
        cloud = parse_point_cloud(self.path("velodyne", scene_id).read_bytes())
        calib = parse_calibration(self.path("calib", scene_id).read_text(encoding="utf-8"))
        label_path = self.path("label", scene_id)
        labels = parse_labels(label_path.read_text(encoding="utf-8")) if label_path.exists() else []
        image = read_ppm(self.path("image", scene_id).read_bytes())
        return Scene(id=scene_id, cloud=cloud, image=image, labels=labels, calib=calib)

    def load_labels(self, scene_id: str) -> List[LabelRecord]:
        return parse_labels(self.path("label", scene_id).read_text(encoding="utf-8"))

    def load_calibration(self, scene_id: str) -> CalibrationSet:
        return parse_calibration(self.path("calib", scene_id).read_text(encoding="utf-8"))


def write_scene(scene: Scene, destination: PathLike):
    """Write the scene into `destination` using the KittiDataset layout"""
    dataset = KittiDataset(destination)
    write_output_to_file(dataset.path("velodyne", scene.id), write_point_cloud(scene.cloud))
    write_output_to_file(dataset.path("calib", scene.id), write_calibration(scene.calib))
    write_output_to_file(dataset.path("label", scene.id), write_labels(scene.labels))
    write_output_to_file(dataset.path("image", scene.id), write_ppm(scene.image))


# --- sample database ---------------------------------------------------------


@dataclass(frozen=True)
class DatabaseEntry:
    """
    One object for GT sampling. `points` are in canonical pose: relative to the
    box center with the box yaw removed.
    """

    id: str
    class_name: str
    points: np.ndarray
    box3d: Box3D
    patch: np.ndarray
    box2d: Box2D

    @property
    def canonical_box(self) -> Box3D:
        return Box3D(center=(0.0, 0.0, 0.0), dims=self.box3d.dims, yaw=0.0)

    def points_in_pose(self, box: Box3D) -> np.ndarray:
        """Object points moved into the pose of `box`"""
        pts = np.asarray(self.points, dtype=np.float64).copy()
        pts[:, :3] = pts[:, :3] @ rotation_z(box.yaw).T + np.asarray(box.center)
        return pts


class DatabaseIndexRecord(BaseModel):
    id: str
    class_name: str
    box3d: List[float]
    box2d: List[float]
    num_points: int
    points_file: str
    patch_file: str


class SampleDatabase:
    """
    Sampled-object database: one directory per class, each with index.json plus
    a point blob and a patch pixmap per entry.
    """

    index_name = "index.json"

    def __init__(self, root: Optional[PathLike] = None):
        self.root = pathlib.Path(root) if root is not None else None
        self.entries: Dict[str, DatabaseEntry] = {}
        self.classes = defaultdict(list)  # class name -> entry ids in insertion order

    def __len__(self):
        return len(self.entries)

    def parse(self):
        """Read every class directory under root"""
        if self.root is None or not self.root.is_dir():
            raise DatabaseMissingError(f"sample database '{self.root}' does not exist")
        for class_dir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            index_path = class_dir / self.index_name
            if not index_path.exists():
                continue
            records = json.loads(index_path.read_text(encoding="utf-8"))
            for raw in records:
                record = DatabaseIndexRecord(**raw)
                points = parse_point_cloud((class_dir / record.points_file).read_bytes()).points
                if len(points) != record.num_points:
                    raise KittiFormatError(
                        f"database entry {record.id} has {len(points)} points, index says {record.num_points}"
                    )
                patch = read_ppm((class_dir / record.patch_file).read_bytes())
                self.save_entry(
                    DatabaseEntry(
                        id=record.id,
                        class_name=record.class_name,
                        points=points,
                        box3d=Box3D.from_list(record.box3d),
                        patch=patch,
                        box2d=Box2D(*record.box2d),
                    )
                )
        logger.info(f"Loaded {len(self.entries)} database entries from {self.root}")

    def save_entry(self, entry: DatabaseEntry):
        inside = points_in_box3d(entry.points[:, :3], entry.canonical_box, margin=1e-4)
        if not inside.all():
            raise ValueError(f"database entry {entry.id} has points outside its box")
        if entry.id in self.entries:
            raise ValueError(f"duplicate database entry id {entry.id}")
        self.entries[entry.id] = entry
        self.classes[entry.class_name].append(entry.id)

    def get_entries_by_class(self, class_name: str) -> List[DatabaseEntry]:
        return [self.entries[id_] for id_ in self.classes.get(class_name, [])]

    def write(self, root: Optional[PathLike] = None):
        root = pathlib.Path(root) if root is not None else self.root
        for class_name, ids in sorted(self.classes.items()):
            class_dir = root / class_name
            records = []
            for id_ in ids:
                entry = self.entries[id_]
                points_file, patch_file = f"{id_}.bin", f"{id_}.ppm"
                write_output_to_file(class_dir / points_file, write_point_cloud(PointCloud(entry.points)))
                write_output_to_file(class_dir / patch_file, write_ppm(entry.patch))
                records.append(
                    DatabaseIndexRecord(
                        id=id_,
                        class_name=class_name,
                        box3d=entry.box3d.to_list(),
                        box2d=list(entry.box2d.to_tuple()),
                        num_points=len(entry.points),
                        points_file=points_file,
                        patch_file=patch_file,
                    ).model_dump()
                )
            write_output_to_file(class_dir / self.index_name, json.dumps(records, indent=2) + "\n")

    @classmethod
    def from_scenes(
        cls,
        scenes: Sequence[Scene],
        classes: Sequence[str] = ("Car", "Pedestrian", "Cyclist"),
    ) -> SampleDatabase:
        """Cut every labeled object of the given classes out of the scenes"""
        db = cls()
        for scene in scenes:
            counter = 0
            xyz = scene.cloud.xyz
            for label in scene.labels:
                if label.class_name not in classes:
                    continue
                box = label_to_box3d(label, scene.calib)
                mask = points_in_box3d(xyz, box)
                if not mask.any():
                    continue
                u0, v0, u1, v1 = (int(round(v)) for v in label.bbox2d.to_tuple())
                patch = scene.image[v0:v1 + 1, u0:u1 + 1]
                if patch.size == 0:
                    continue
                pts = scene.cloud.points[mask].astype(np.float64)
                pts[:, :3] = (pts[:, :3] - np.asarray(box.center)) @ rotation_z(box.yaw)
                counter += 1
                db.save_entry(
                    DatabaseEntry(
                        id=f"{scene.id}_{label.class_name}_{counter}",
                        class_name=label.class_name,
                        points=pts.astype(POINT_DTYPE),
                        box3d=box,
                        patch=np.array(patch),
                        box2d=label.bbox2d,
                    )
                )
        return db
