import os
from pathlib import Path
import shutil

import numpy as np
import pytest

from voxfuse.kitti import parse_calibration
from voxfuse.synthetic import scene_ids, write_synthetic_database, write_synthetic_dataset

DATA_DIR = Path(__file__).parent / "data"
LABEL_FILES = sorted(p.name for p in DATA_DIR.glob("label_*.txt"))
CALIB_FILES = sorted(p.name for p in DATA_DIR.glob("calib_*.txt"))


def copy_data_file(filename, tmp_path):
    """
    Copy a sample file to the pytest temporary directory
    """
    dest_path = tmp_path / filename
    shutil.copy(DATA_DIR / filename, dest_path)
    return dest_path


@pytest.fixture
def calib_file(tmp_path):
    return copy_data_file("calib_000000.txt", tmp_path)


@pytest.fixture
def calib(calib_file):
    """
    Parsed calibration of KITTI training frame 000000
    """
    return parse_calibration(calib_file.read_text())


@pytest.fixture(params=CALIB_FILES)
def any_calib_file(request, tmp_path):
    """
    Every KITTI calibration frame under tests/data
    """
    return copy_data_file(request.param, tmp_path)


@pytest.fixture(params=LABEL_FILES)
def label_file(request, tmp_path):
    return copy_data_file(request.param, tmp_path)


@pytest.fixture
def kitti_root():
    """
    A KITTI object training split (velodyne/, calib/, label_2/) named by
    VOXFUSE_KITTI_ROOT. Tests that need it are skipped when it is unset.
    """
    root = os.environ.get("VOXFUSE_KITTI_ROOT")
    if not root:
        pytest.skip("VOXFUSE_KITTI_ROOT is not set")
    return Path(root)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def dataset_root(tmp_path):
    """
    Three synthetic scenes in the KITTI layout
    """
    root = tmp_path / "kitti"
    write_synthetic_dataset(root, scene_ids(3), seed=7)
    return root


@pytest.fixture
def database_root(tmp_path):
    root = tmp_path / "gt_database"
    write_synthetic_database(root, seed=11, n_scenes=4)
    return root
