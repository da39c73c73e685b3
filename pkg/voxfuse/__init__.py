"""Voxel/image fusion detection core: KITTI I/O, geometry, fusion, rectification, GT sampling, evaluation"""

__version__ = "0.1"
