"""Camera pose regression toolkit.

A from-scratch CPU stack: a minimal reverse-mode tensor library, the
four-way LSTM pose-regression head and its FC baseline, the weighted
position/quaternion loss, Adam training, dataset plumbing, and a CLI
for training, evaluation, ablation, and report generation.
"""

from .autodiff import GradTape, ModelParams, Tensor, finite_diff_check
from .data import DatasetManifest, FeatureStore, Sample, load_manifest, save_manifest, synth_scene
from .layers import HeadParams, FcHeadParams, fc_baseline_head, init_fc_head_params, init_head_params, lstm_head
from .optim import AdamState, OptimConfig, adam_step, train_step
from .pose import Pose, angular_error_deg, median_errors, pose_loss, quat_canonicalize, quat_normalize

__version__ = "0.1.0"

__all__ = [
    "GradTape",
    "ModelParams",
    "Tensor",
    "finite_diff_check",
    "DatasetManifest",
    "FeatureStore",
    "Sample",
    "load_manifest",
    "save_manifest",
    "synth_scene",
    "HeadParams",
    "FcHeadParams",
    "fc_baseline_head",
    "init_fc_head_params",
    "init_head_params",
    "lstm_head",
    "AdamState",
    "OptimConfig",
    "adam_step",
    "train_step",
    "Pose",
    "angular_error_deg",
    "median_errors",
    "pose_loss",
    "quat_canonicalize",
    "quat_normalize",
    "__version__",
]
