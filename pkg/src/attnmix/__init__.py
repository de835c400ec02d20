"""Attention-guided weight mixup with bi-level optimization, at desk scale."""

from .blo import SearchConfig, finetune_phase, k_replicate_search, search_phase
from .data import Dataset, SyntheticTaskSpec, make_synthetic_transfer, split_dataset, subsample
from .model import MixupLinear, Network, TaskKind, build_downstream
from .tensor import Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "Dataset", "MixupLinear", "Network", "SearchConfig", "SyntheticTaskSpec", "TaskKind", "Tensor",
    "backward", "build_downstream", "finetune_phase", "k_replicate_search", "make_synthetic_transfer",
    "search_phase", "split_dataset", "subsample",
]
