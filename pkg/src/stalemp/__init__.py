"""Mini-batch graph attention training with staleness-aware historical embeddings."""

from .autodiff import Parameter, Tensor, backward, grad_check
from .checkpoint import FormatError
from .graph import Graph, GraphFormatError, from_edges, load_edge_list, synth_sbm
from .history import HistoryStore
from .layer import AugmentMode, forward_batch, init_params
from .training import Trainer, TrainConfig

__all__ = [
    "AugmentMode", "FormatError", "Graph", "GraphFormatError", "HistoryStore", "Parameter",
    "Tensor", "TrainConfig", "Trainer", "backward", "forward_batch", "from_edges", "grad_check",
    "init_params", "load_edge_list", "synth_sbm",
]
__version__ = "0.1.0"
