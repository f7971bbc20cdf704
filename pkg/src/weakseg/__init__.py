"""Weakly supervised semantic segmentation of point clouds with pseudo-labels."""

from .geometry import UNLABELED, PointCloud, build_index, grid_subsample, nearest_label_transfer
from .trainer import PL, PL_ALL, TrainerConfig

__version__ = "0.1.0"
