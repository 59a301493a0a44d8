"""Semantic segmentation with a ShuffleNet encoder and light decoders, in numpy."""
from .errors import ConfigError, FormatError, NumericError, ShapeError, SegmentationError
from .flops import CostReport, count_graph
from .graph import VARIANTS, ArchConfig, Graph, WeightStore, build_graph, graph_backward, graph_forward, init_weights
from .train import TrainConfig, grad_check, train_loop

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "ConfigError", "CostReport", "FormatError", "Graph", "NumericError", "ShapeError",
    "SegmentationError", "TrainConfig", "VARIANTS", "WeightStore", "build_graph", "count_graph", "grad_check",
    "graph_backward", "graph_forward", "init_weights", "train_loop",
]
