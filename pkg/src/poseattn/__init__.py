"""Two-stream action recognition with pose-conditioned spatial and
temporal attention, built on a self-contained reverse-mode autodiff core."""

from .tensor import GraphError, NumericError, ShapeError, Tape, Tensor
from .gradcheck import GradCheckResult, grad_check, grad_check_params
from .model import PoseStream, RgbStream, StreamOutput, WindowBatch, fuse_logits
from .pose import PoseSequence, augment_pose, motion_stats, normalize_pose
from .data import Dataset, DatasetManifest, load_dataset, save_dataset
from .synth import SyntheticSpec, generate
from .training import RunConfig, evaluate, run_train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DatasetManifest",
    "GradCheckResult",
    "GraphError",
    "NumericError",
    "PoseSequence",
    "PoseStream",
    "RgbStream",
    "RunConfig",
    "ShapeError",
    "StreamOutput",
    "SyntheticSpec",
    "Tape",
    "Tensor",
    "WindowBatch",
    "augment_pose",
    "evaluate",
    "fuse_logits",
    "generate",
    "grad_check",
    "grad_check_params",
    "load_dataset",
    "motion_stats",
    "normalize_pose",
    "run_train",
    "save_dataset",
]
