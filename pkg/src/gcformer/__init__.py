"""Tokenized graph Transformer with positive/negative token sequences and contrastive training."""

from .graph_core import (
    Graph,
    SplitMask,
    edge_homophily,
    load_graph,
    make_splits,
    normalize_adjacency,
    pca_reduce,
    sbm_generate,
)
from .model import GCFormer, ModelConfig
from .tokens import TokenSequences, cosine_topk, generate_tokens, propagate_features, sample_negatives
from .training import TrainConfig, evaluate, fit, train_once

__version__ = "0.1.0"

__all__ = [
    "GCFormer",
    "Graph",
    "ModelConfig",
    "SplitMask",
    "TokenSequences",
    "TrainConfig",
    "cosine_topk",
    "edge_homophily",
    "evaluate",
    "fit",
    "generate_tokens",
    "load_graph",
    "make_splits",
    "normalize_adjacency",
    "pca_reduce",
    "propagate_features",
    "sample_negatives",
    "sbm_generate",
    "train_once",
]
