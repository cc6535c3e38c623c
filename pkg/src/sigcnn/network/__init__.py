"""DeepCNet networks: construction, dense oracle, sparse evaluation, training."""

from .model import (
    ACTIVATIONS,
    DeepCNet,
    DeepCNetConfig,
    apply_dropout,
    architecture_string,
    build_network,
    compute_ground_states,
    forward_dense,
    spatial_sizes,
)
from .sparse import (
    DivergenceError,
    SparseLayerState,
    classify,
    error_rate,
    forward_batch,
    forward_sparse,
    loss_and_grads,
    train_batch,
)
from .analysis import PathCountGrid, path_count_grid
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "ACTIVATIONS",
    "DeepCNet",
    "DeepCNetConfig",
    "DivergenceError",
    "PathCountGrid",
    "SparseLayerState",
    "apply_dropout",
    "architecture_string",
    "build_network",
    "classify",
    "compute_ground_states",
    "error_rate",
    "forward_batch",
    "forward_dense",
    "forward_sparse",
    "load_checkpoint",
    "loss_and_grads",
    "path_count_grid",
    "save_checkpoint",
    "spatial_sizes",
    "train_batch",
]
