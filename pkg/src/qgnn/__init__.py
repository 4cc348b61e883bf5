"""Quantized full-graph GNN training (GCN and GAT) on CPU."""

from .data import Dataset, gen_synthetic, load_dataset, synthetic_dataset
from .graph import DataError, EdgeList, GraphViews
from .quant import QuantizedTensor, dequantize_tensor, quantize_tensor, select_bits
from .rng import RngState, rng_seed
from .train import ConfigError, TrainConfig, derive_bits, run_train, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "Dataset", "EdgeList", "GraphViews", "QuantizedTensor", "RngState",
    "TrainConfig", "dequantize_tensor", "derive_bits", "gen_synthetic", "load_dataset",
    "quantize_tensor", "rng_seed", "run_train", "select_bits", "synthetic_dataset", "train",
]
