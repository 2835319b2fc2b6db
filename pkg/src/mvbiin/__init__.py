"""Multi-view classification with cross-view bilinear interactions and sparse
selective view-weight fusion, plus linear multi-view baselines."""

from .data import MultiViewBatch, MultiViewDataset, load_dataset, split_dataset, synth_generate
from .fusion import ViewWeights, fused_objective, predict, solve_alpha
from .model import MvNNBiInModel, architecture, init_model, model_forward
from .trainer import TrainConfig, evaluate, fit

__all__ = [
    "MultiViewBatch", "MultiViewDataset", "load_dataset", "split_dataset", "synth_generate",
    "ViewWeights", "fused_objective", "predict", "solve_alpha",
    "MvNNBiInModel", "architecture", "init_model", "model_forward",
    "TrainConfig", "evaluate", "fit",
]
