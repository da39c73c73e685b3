# KITTI scenes in, augmented scenes / projections / metric tables out
from __future__ import annotations

import csv
import functools
import io
import pathlib
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional

import click
import numpy as np
from loguru import logger
from pydantic import BaseModel, ValidationError

from voxfuse.config import RunConfig
from voxfuse.errors import VoxfuseError
from voxfuse.evaluation import Detection, SceneTruth, evaluate_scenes, write_result_table
from voxfuse.fcr import read_candidate_records, run_fcr_demo, save_head, write_candidates
from voxfuse.features import build_pyramid
from voxfuse.geometry import BOX_EDGES, Box3D, box3d_corners, project_points
from voxfuse.kitti import KittiDataset, SampleDatabase, label_to_box3d, read_ppm, write_ppm, write_scene
from voxfuse.mvi import fuse_grid, make_fusion_net, valid_counts
from voxfuse.ogs import SELECTORS, count_by_class, paste_samples, sample_from_database, scene_objects
from voxfuse.utils import canonical_json, config_hash, derive_seed, none_to_empty_string, write_output_to_file
from voxfuse.voxels import build_scales, grid_stats, voxel_centers, voxelize

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2

# fields that do not change results
HASH_EXCLUDE = {"output_dir", "jobs"}

SCALE_COLORS = ((255, 0, 0), (255, 160, 0), (0, 200, 255), (200, 0, 255), (255, 255, 255))
BOX_COLOR = (0, 255, 0)


class SceneIds(click.ParamType):
    """
    Comma separated scene ids and numeric ranges, e.g. "0-3,7,db0001".
    Numeric ids are zero padded to KITTI's six digits.
    """

    name = "scenes"

    def get_metavar(self, param, *args):
        return "IDS"

    @staticmethod
    def _pad(token: str) -> str:
        return token.zfill(6) if token.isdigit() else token

    def convert(self, value, param, ctx):
        if isinstance(value, list):
            return value
        ids: List[str] = []
        for token in filter(None, (t.strip() for t in value.split(","))):
            first, sep, last = token.partition("-")
            if sep and first.isdigit() and last.isdigit():
                if int(last) < int(first):
                    self.fail(f"empty scene range: {token}", param, ctx)
                ids.extend(self._pad(str(i)) for i in range(int(first), int(last) + 1))
            elif sep:
                self.fail(f"invalid scene range: {token}. (ranges need numeric ends)", param, ctx)
            else:
                ids.append(self._pad(token))
        return ids

    def __repr__(self):
        return "SceneIds"


def select_scene_ids(cfg: RunConfig, scenes: Optional[List[str]], dataset: Optional[KittiDataset]) -> List[str]:
    """
    Scene ids for a run.
    Order of precedence:
        --scenes
        config scene_ids
        every scene under dataset_root
    """
    if scenes is not None:
        return scenes
    if cfg.scene_ids:
        return list(cfg.scene_ids)
    if dataset is not None:
        return dataset.scene_ids()
    return []


def setup_logging(verbose: int):
    level = "WARNING" if verbose == 0 else "INFO" if verbose == 1 else "DEBUG"
    logger.remove()
    logger.add(lambda msg: click.echo(msg, err=True, nl=False), level=level, format="{level}: {message}")


def load_run_config(config_file, **overrides) -> RunConfig:
    cfg = RunConfig.load(config_file) if config_file else RunConfig()
    updates = {k: v for k, v in overrides.items() if v is not None}
    if updates:
        cfg = RunConfig.model_validate({**cfg.model_dump(), **updates})
    return cfg


def common_options(f):
    """--config/--seed/--out/--jobs/--scenes/-v shared by every command"""
    options = [
        click.option("-c", "--config", "config_file", type=click.Path(exists=True, dir_okay=False),
                     help="JSON run configuration"),
        click.option("--seed", type=int, help="override the configured seed"),
        click.option("-o", "--out", "output_dir", type=click.Path(file_okay=False), help="output directory"),
        click.option("-j", "--jobs", type=click.IntRange(min=1), help="worker threads"),
        click.option("--scenes", type=SceneIds(), help="scene ids, e.g. 0-3,7"),
        click.option("-v", "--verbose", count=True),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def handle_errors(f):
    """Input and contract errors end the run with exit code 2"""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except (VoxfuseError, ValidationError, FileNotFoundError) as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_USAGE)

    return wrapper


def prepare(config_file, seed, output_dir, jobs, scenes, verbose, need_dataset=True):
    setup_logging(verbose)
    cfg = load_run_config(config_file, seed=seed, output_dir=output_dir, jobs=jobs)
    dataset = None
    if cfg.dataset_root is not None:
        if not cfg.dataset_root.is_dir():
            raise FileNotFoundError(f"dataset root '{cfg.dataset_root}' does not exist")
        dataset = KittiDataset(cfg.dataset_root)
    elif need_dataset:
        raise VoxfuseError("dataset_root is not configured")
    ids = select_scene_ids(cfg, scenes, dataset)
    return cfg, dataset, ids


def run_pool(fn, items, jobs: int) -> list:
    """Map over items with a bounded thread pool; results keep item order"""
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def csv_text(header, rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([none_to_empty_string(v) for v in row])
    return out.getvalue()


@click.group()
@click.pass_context
def cli(ctx):
    """Voxel/image fusion detection toolkit for KITTI-format data"""
    pass


# --- augment -------------------------------------------------------------------


class SceneAugmentRecord(BaseModel):
    scene_id: str
    requested: Dict[str, int]
    retained: Dict[str, Dict[str, int]]  # method -> class -> count


class AugmentManifest(BaseModel):
    seed: int
    config_hash: str
    tau1: float
    tau2: float
    combine: str
    scenes: List[SceneAugmentRecord]
    failed: List[str]
    mean_requested: Dict[str, float]
    mean_retained: Dict[str, Dict[str, float]]
    mean_retained_total: Dict[str, float]  # summed over classes, per selector


def augment_scene(scene_id: str, dataset: KittiDataset, db: SampleDatabase, cfg: RunConfig) -> SceneAugmentRecord:
    rng = np.random.default_rng(derive_seed(cfg.seed, "augment", scene_id))
    scene = dataset.load(scene_id)
    samples = sample_from_database(db, scene, cfg.ogs, rng)
    gts = scene_objects(scene)
    retained = {name: select(samples, gts, cfg.ogs) for name, select in SELECTORS.items()}
    write_scene(paste_samples(scene, retained["ogs"], db), cfg.output_dir / "scenes")
    logger.info(
        f"Scene {scene_id}: sampled {len(samples)}, retained "
        + ", ".join(f"{name} {len(objs)}" for name, objs in retained.items())
    )
    return SceneAugmentRecord(
        scene_id=scene_id,
        requested=count_by_class(samples),
        retained={name: count_by_class(objs) for name, objs in retained.items()},
    )


def mean_counts(records: List[SceneAugmentRecord], classes: List[str], pick) -> Dict[str, float]:
    if not records:
        return {}
    return {c: sum(pick(r).get(c, 0) for r in records) / len(records) for c in classes}


@cli.command()
@common_options
@handle_errors
def augment(config_file, seed, output_dir, jobs, scenes, verbose):
    """Paste database objects into scenes with occlusion-aware GT sampling"""
    cfg, dataset, ids = prepare(config_file, seed, output_dir, jobs, scenes, verbose)
    db = SampleDatabase(cfg.database_root)
    db.parse()

    def work(scene_id):
        try:
            return augment_scene(scene_id, dataset, db, cfg)
        except Exception as e:
            logger.warning(f"Scene {scene_id} failed: {e}")
            return scene_id

    results = run_pool(work, ids, cfg.jobs)
    records = [r for r in results if isinstance(r, SceneAugmentRecord)]
    failed = [r for r in results if isinstance(r, str)]
    classes = list(cfg.ogs.max_samples)
    mean_retained = {
        name: mean_counts(records, classes, lambda r, name=name: r.retained[name]) for name in SELECTORS
    }
    manifest = AugmentManifest(
        seed=cfg.seed,
        config_hash=config_hash(cfg, exclude=HASH_EXCLUDE),
        tau1=cfg.ogs.tau1,
        tau2=cfg.ogs.tau2,
        combine=cfg.ogs.combine,
        scenes=records,
        failed=failed,
        mean_requested=mean_counts(records, classes, lambda r: r.requested),
        mean_retained=mean_retained,
        mean_retained_total={name: sum(means.values()) for name, means in mean_retained.items() if records},
    )
    write_output_to_file(cfg.output_dir / "augment_manifest.json", canonical_json(manifest.model_dump(mode="json")))
    rows = [
        (name, c, manifest.mean_requested.get(c), manifest.mean_retained[name].get(c))
        for name in SELECTORS
        for c in classes
    ]
    write_output_to_file(
        cfg.output_dir / "sample_num.csv", csv_text(("method", "class", "mean_requested", "mean_retained"), rows)
    )
    click.echo(f"Augmented {len(records)} scenes into {cfg.output_dir}")
    for name in SELECTORS:
        means = manifest.mean_retained[name]
        if means:
            click.echo(
                f"  {name}: total {manifest.mean_retained_total[name]:.2f} ("
                + ", ".join(f"{c} {means[c]:.2f}" for c in means)
                + ")"
            )
    if failed:
        click.echo(f"{len(failed)} scenes failed: {', '.join(failed)}", err=True)
        sys.exit(EXIT_PARTIAL)


# --- project -------------------------------------------------------------------


def _put_pixel(image: np.ndarray, u: float, v: float, color):
    col, row = int(round(u)), int(round(v))
    if 0 <= row < image.shape[0] and 0 <= col < image.shape[1]:
        image[row, col] = color


def draw_box(image: np.ndarray, box: Box3D, calib, color=BOX_COLOR):
    """Wireframe of the box; edges with an endpoint behind the camera are skipped"""
    uv, _, in_front = project_points(box3d_corners(box), calib)
    for a, b in BOX_EDGES:
        if not (in_front[a] and in_front[b]):
            continue
        steps = int(np.ceil(np.abs(uv[b] - uv[a]).max())) + 1
        for t in np.linspace(0.0, 1.0, min(steps, 10000)):
            _put_pixel(image, *(uv[a] + t * (uv[b] - uv[a])), color)


@cli.command()
@common_options
@click.argument("scene_id")
@handle_errors
def project(config_file, seed, output_dir, jobs, scenes, verbose, scene_id):
    """Draw projected voxel centers of every scale and GT boxes onto the scene image"""
    cfg, dataset, _ = prepare(config_file, seed, output_dir, jobs, scenes, verbose)
    if not dataset.exists(scene_id):
        raise VoxfuseError(f"scene '{scene_id}' not found under {dataset.root}")
    scene = dataset.load(scene_id)
    grid = build_scales(voxelize(scene.cloud, cfg.voxel))
    image = np.array(scene.image)
    height, width = image.shape[:2]
    # coarse scales first so the finest stays on top
    for k in reversed(range(grid.num_scales)):
        uv, _, in_front = project_points(voxel_centers(grid, k), scene.calib)
        color = SCALE_COLORS[k % len(SCALE_COLORS)]
        for u, v in uv[in_front]:
            _put_pixel(image, u, v, color)
    for label in scene.labels:
        if not label.is_dontcare:
            draw_box(image, label_to_box3d(label, scene.calib), scene.calib)
    target = cfg.output_dir / f"project_{scene_id}.ppm"
    write_output_to_file(target, write_ppm(image))
    click.echo(f"Wrote {target} ({width}x{height})")


# --- eval ----------------------------------------------------------------------


@cli.command("eval")
@common_options
@click.option("-d", "--detections", "detections_file", type=click.Path(exists=True, dir_okay=False), required=True)
@handle_errors
def eval_(config_file, seed, output_dir, jobs, scenes, verbose, detections_file):
    """3D AP per class and difficulty plus RoI recall for a detections file"""
    cfg, dataset, ids = prepare(config_file, seed, output_dir, jobs, scenes, verbose)
    records = read_candidate_records(pathlib.Path(detections_file).read_text(encoding="utf-8"))
    detections = [Detection(r.scene_id, r.class_name, Box3D.from_list(r.box3d), r.score) for r in records]

    def truth(scene_id):
        calib = dataset.load_calibration(scene_id)
        label_path = dataset.path("label", scene_id)
        labels = dataset.load_labels(scene_id) if label_path.exists() else []
        image = read_ppm(dataset.path("image", scene_id).read_bytes())
        return SceneTruth(scene_id, tuple(labels), calib, (image.shape[1], image.shape[0]))

    truths = run_pool(truth, ids, cfg.jobs)
    rows = evaluate_scenes(truths, detections, cfg.eval)
    table = write_result_table(rows)
    write_output_to_file(cfg.output_dir / "eval.csv", table)
    manifest = {
        "seed": cfg.seed,
        "config_hash": config_hash(cfg, exclude=HASH_EXCLUDE),
        "scenes": len(truths),
        "detections": len(detections),
        "recall_positions": cfg.eval.recall_positions,
    }
    write_output_to_file(cfg.output_dir / "eval_manifest.json", canonical_json(manifest))
    click.echo(table, nl=False)


# --- fcr-demo ------------------------------------------------------------------


@cli.command("fcr-demo")
@common_options
@handle_errors
def fcr_demo(config_file, seed, output_dir, jobs, scenes, verbose):
    """Train the confidence rectification head on synthetic candidates"""
    cfg, _, _ = prepare(config_file, seed, output_dir, jobs, scenes, verbose, need_dataset=False)
    report = run_fcr_demo(cfg.fcr, cfg.seed, cfg.jobs, cfg.eval.recall_positions)
    header = ("row", "epoch", "loss", "ap_s3d", "ap_s2d", "ap_rect", "ap_constant")
    rows = [("epoch", i + 1, loss, None, None, None, None) for i, loss in enumerate(report.loss_trace)]
    final = report.loss_trace[-1] if report.loss_trace else None
    ap = report.ap
    rows.append(("summary", len(report.loss_trace), final, ap["s_3d"], ap["s_2d"], ap["s_rect"], ap["constant"]))
    write_output_to_file(cfg.output_dir / "fcr_report.csv", csv_text(header, rows))
    write_output_to_file(cfg.output_dir / "fcr_head.json", save_head(report.head))
    write_output_to_file(cfg.output_dir / "fcr_candidates.json", write_candidates(report.heldout))
    manifest = {
        "seed": cfg.seed,
        "config_hash": config_hash(cfg, exclude=HASH_EXCLUDE),
        "train_candidates": report.train_size,
        "heldout_candidates": report.heldout_size,
        "final_loss": final,
        "ap": ap,
    }
    write_output_to_file(cfg.output_dir / "fcr_manifest.json", canonical_json(manifest))
    for name, value in ap.items():
        click.echo(f"AP({name}) = {'undefined' if value is None else f'{value:.4f}'}")


# --- voxel-stats ---------------------------------------------------------------


@cli.command("voxel-stats")
@common_options
@handle_errors
def voxel_stats(config_file, seed, output_dir, jobs, scenes, verbose):
    """Points kept/dropped, occupied voxels and image-projected voxels per scale"""
    cfg, dataset, ids = prepare(config_file, seed, output_dir, jobs, scenes, verbose)
    num_scales = cfg.voxel.num_scales

    def stats(scene_id):
        scene = dataset.load(scene_id)
        grid = build_scales(voxelize(scene.cloud, cfg.voxel))
        pyramid = build_pyramid(scene.image)
        net = make_fusion_net(4, pyramid[0].channels, seed=derive_seed(cfg.seed, "fusion"))
        fused = fuse_grid(grid, pyramid, scene.calib, net)
        row = grid_stats(grid)
        return [scene_id, row["points_kept"], row["points_dropped"]] + [
            row[f"voxels_scale{k}"] for k in range(num_scales)
        ] + valid_counts(fused)

    rows = run_pool(stats, ids, cfg.jobs)
    header = ["scene_id", "points_kept", "points_dropped"]
    header += [f"voxels_scale{k}" for k in range(num_scales)] + [f"in_image_scale{k}" for k in range(num_scales)]
    table = csv_text(header, rows)
    write_output_to_file(cfg.output_dir / "voxel_stats.csv", table)
    click.echo(table, nl=False)
