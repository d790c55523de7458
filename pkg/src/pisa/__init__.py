"""Piecewise sparse attention: exact attention on routed key blocks, Taylor-approximated tail."""

from .attention import AttentionConfig, dense_naive, dense_online, sparse_masked
from .block_stats import BlockStatistics, prepare
from .engine import PisaOutput, Variant, pisa_multihead, pisa_reference, pisa_streaming, run_head
from .router import SelectionPlan, Strategy, sparsity_to_k
from .tensor_io import TensorBundle, gen_clustered, gen_gaussian, load_bundle, save_bundle

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "BlockStatistics", "PisaOutput", "SelectionPlan", "Strategy", "TensorBundle",
    "Variant", "dense_naive", "dense_online", "gen_clustered", "gen_gaussian", "load_bundle",
    "pisa_multihead", "pisa_reference", "pisa_streaming", "prepare", "run_head", "save_bundle",
    "sparse_masked", "sparsity_to_k",
]
