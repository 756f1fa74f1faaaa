"""Facial emotion recognition with a squeeze-and-excitation residual network.

A small numpy autograd engine, the network, FER-style data loading, a synthetic
rebalancing planner, the training loop, and evaluation reports.
"""

from .augment import AugmentationPlan, AugmentationScheme, compute_plan, emit_manifest, merge_and_verify, run_generation
from .checkpoint import load_checkpoint, save_checkpoint
from .data import CLASS_NAMES, EmotionClass, LabeledDataset, Split, load_fer2013_csv, load_image_folder
from .evaluation import ConfusionMatrix, EvalReport, evaluate
from .model import ModelConfig, ResEmoteNet, build
from .tensor import Parameter, Tensor
from .training import TrainConfig, TrainReport, fit

__version__ = "0.1.0"

__all__ = [
    "AugmentationPlan", "AugmentationScheme", "CLASS_NAMES", "ConfusionMatrix", "EmotionClass", "EvalReport",
    "LabeledDataset", "ModelConfig", "Parameter", "ResEmoteNet", "Split", "Tensor", "TrainConfig", "TrainReport",
    "build", "compute_plan", "emit_manifest", "evaluate", "fit", "load_checkpoint", "load_fer2013_csv",
    "load_image_folder", "merge_and_verify", "run_generation", "save_checkpoint",
]
