"""Keypoint-driven LiDAR odometry with saliency-aware subsampling, RANSAC
scan-to-scan initialization and robust scan-to-map refinement."""

from .cloud import PointCloud
from .config import PipelineConfig, load_config
from .features import FeatureSet, compute_builtin_features, load_external_features
from .geometry import Pose, Twist
from .odometry import OdometryState, process_scan, run_sequence
from .voxelmap import VoxelHashMap

__version__ = "0.1.0"

__all__ = [
    "FeatureSet",
    "OdometryState",
    "PipelineConfig",
    "PointCloud",
    "Pose",
    "Twist",
    "VoxelHashMap",
    "compute_builtin_features",
    "load_config",
    "load_external_features",
    "process_scan",
    "run_sequence",
]
