"""pruneplan: layer-wise pruning-ratio search and one-shot prediction.

The package pipeline: pretrain a small prunable block stack, score neuron
importance on a calibration set, search layer-wise pruning ratios under a
budget with Monte-Carlo tree search, then train a predictor that maps a
budget straight to a ratio vector in a single forward pass.
"""

__version__ = "0.1.0"

from . import autodiff, importance, mcts, pipeline, predictor, target
from .seeds import derive_seed

__all__ = [
    "autodiff",
    "derive_seed",
    "importance",
    "mcts",
    "pipeline",
    "predictor",
    "target",
    "__version__",
]
