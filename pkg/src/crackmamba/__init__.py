"""Crack segmentation with snake-scan and cross-scan selective state-space blocks, on numpy."""
from . import data, scan, ssm
from ._kernels import BACKEND
from .errors import EmptyProfile, InvalidArgument, InvalidMode, NumericFault, ParseError
from .model import CrackMamba, ModelConfig, build, load_checkpoint, save_checkpoint
from .train import TrainConfig, compute_metrics, fit

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CrackMamba", "EmptyProfile", "InvalidArgument", "InvalidMode", "ModelConfig",
    "NumericFault", "ParseError", "TrainConfig", "build", "compute_metrics", "data", "fit",
    "load_checkpoint", "save_checkpoint", "scan", "ssm",
]
