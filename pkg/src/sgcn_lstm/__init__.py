"""SGCN-LSTM: graph convolutions feeding an LSTM for traffic speed forecasting, in numpy."""

from .graph import EdgeList, SparseAdjacency, build_adjacency, normalize_adjacency, spmm
from .model import ModelParams, init_params, model_backward, model_forward
from .train import TrainConfig, combined_loss, fit

__all__ = [
    "EdgeList",
    "ModelParams",
    "SparseAdjacency",
    "TrainConfig",
    "build_adjacency",
    "combined_loss",
    "fit",
    "init_params",
    "model_backward",
    "model_forward",
    "normalize_adjacency",
    "spmm",
]

__version__ = "0.1.0"
