"""Attention pruning with data-informed global masks, at desk scale."""
from .attention import AttentionConfig, AttentionKind, HeadKey
from .model import Checkpoint, TransformerConfig, init_params
from .pruning import AttentionStats, MaskSet, PruneSpec
from .train import TrainConfig, run_ap

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "AttentionKind", "AttentionStats", "Checkpoint", "HeadKey", "MaskSet",
    "PruneSpec", "TrainConfig", "TransformerConfig", "init_params", "run_ap",
]
