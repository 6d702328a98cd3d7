"""Unsupervised scene flow with odometry assistance, on a small numpy autograd."""

from .data import FramePair, SceneRecipe, make_synthetic_dataset
from .geometry import Pose, pose_apply
from .kernels import BACKEND as KERNEL_BACKEND
from .losses import LossWeights
from .metrics import flow_metrics, mask_metrics, pose_metrics
from .model import NetConfig, SceneFlowNet
from .tensor import Tensor
from .train import TrainConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "FramePair", "SceneRecipe", "make_synthetic_dataset", "Pose", "pose_apply", "KERNEL_BACKEND",
    "LossWeights", "flow_metrics", "mask_metrics", "pose_metrics", "NetConfig", "SceneFlowNet",
    "Tensor", "TrainConfig", "load_checkpoint", "save_checkpoint",
]
