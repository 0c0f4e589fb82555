"""Multi-scale semantic segmentation with per-patch scale gating.

A small, self-contained stack: a reverse-mode autodiff tensor core, a
hierarchical attention encoder, gate-weighted cross-scale fusion in both
encoder and decoder, a synthetic segmentation benchmark, and a training
CLI with ablation suites.
"""

from .tensor import ShapeError, Tensor
from .module import Linear, LayerNorm, Mlp, Module, Parameter
from .model import ModelConfig, SegModel, build_model
from .segbench import DatasetConfig, SegSample, generate, miou, size_bucketed_iou
from .config import RunConfig, resolve_config
from .train import ablate, evaluate_model, train_run

__all__ = [
    "ShapeError", "Tensor",
    "Linear", "LayerNorm", "Mlp", "Module", "Parameter",
    "ModelConfig", "SegModel", "build_model",
    "DatasetConfig", "SegSample", "generate", "miou", "size_bucketed_iou",
    "RunConfig", "resolve_config",
    "ablate", "evaluate_model", "train_run",
]

__version__ = "0.1.0"
