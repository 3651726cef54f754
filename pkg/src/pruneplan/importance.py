"""Per-neuron importance scores and ratio-vector to mask conversion.

Scores rank the intermediate neurons of each block; a pruning config (one
pruned fraction per layer) keeps the top-scoring neurons layer by layer.
All functions are pure over immutable inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

METRICS = ("activation-l2", "magnitude", "wanda")


@dataclass
class ImportanceTable:
    metric: str
    layers: list  # per-layer arrays of non-negative scores

    def __post_init__(self):
        self.layers = [np.asarray(s, dtype=np.float64) for s in self.layers]
        for l, s in enumerate(self.layers):
            if not np.isfinite(s).all() or (s < 0).any():
                raise ValueError(f"layer {l}: scores must be finite and >= 0")

    def to_dict(self):
        return {
            "metric": self.metric,
            "layers": [[float(v) for v in s] for s in self.layers],
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["metric"], [np.array(s) for s in doc["layers"]])


def score_activation_l2(traces) -> ImportanceTable:
    """Root-mean-square of each neuron's activations over the samples."""
    if not traces:
        raise ValueError("no activation traces given")
    layers = []
    for t in traces:
        t = np.asarray(t, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] < 1:
            raise ValueError("each trace must be a non-empty (N, d) array")
        layers.append(np.sqrt((t**2).mean(axis=0)))
    return ImportanceTable("activation-l2", layers)


def _weight_group_norms(model):
    """L2 norm of each neuron's weight group: its input row, output column
    and input bias."""
    norms = []
    for l in range(model.spec.num_layers):
        sq = (model.w1[l] ** 2).sum(axis=1)
        sq += (model.w2[l] ** 2).sum(axis=0)
        sq += model.b1[l] ** 2
        norms.append(np.sqrt(sq))
    return norms


def score_magnitude(model) -> ImportanceTable:
    return ImportanceTable("magnitude", _weight_group_norms(model))


def score_wanda(model, traces) -> ImportanceTable:
    """Weight-group norm times calibration activation norm, per neuron."""
    act = score_activation_l2(traces)
    weights = _weight_group_norms(model)
    if len(weights) != len(act.layers):
        raise ValueError("model depth does not match trace depth")
    layers = [w * a for w, a in zip(weights, act.layers)]
    return ImportanceTable("wanda", layers)


def keep_count(theta: float, width: int) -> int:
    """floor((1 - theta) * width), evaluated in exact rational arithmetic.

    Fraction(theta) is the exact binary value of the float, so the floor
    never suffers double-rounding at representability boundaries.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"pruning ratio {theta} outside [0, 1]")
    return int((1 - Fraction(theta)) * width)


def config_to_masks(config, table: ImportanceTable, widths):
    """Keep the floor((1-theta)*d) highest-scoring neurons per layer.

    Score ties keep the lower neuron index first.  Returns per-layer 0/1
    int8 vectors.
    """
    config = np.asarray(config, dtype=np.float64)
    widths = tuple(int(w) for w in widths)
    if len(config) != len(widths) or len(table.layers) != len(widths):
        raise ValueError(
            f"length mismatch: config {len(config)}, table {len(table.layers)}, "
            f"widths {len(widths)}"
        )
    masks = []
    for l, (theta, d) in enumerate(zip(config, widths)):
        scores = table.layers[l]
        if len(scores) != d:
            raise ValueError(f"layer {l}: {len(scores)} scores for width {d}")
        k = keep_count(float(theta), d)
        # stable argsort of -scores: descending score, index ascending on ties
        order = np.argsort(-scores, kind="stable")
        mask = np.zeros(d, dtype=np.int8)
        mask[order[:k]] = 1
        masks.append(mask)
    return masks


def save_importance(path, table: ImportanceTable):
    with open(path, "w") as fh:
        json.dump(table.to_dict(), fh)


def load_importance(path) -> ImportanceTable:
    with open(path) as fh:
        return ImportanceTable.from_dict(json.load(fh))
