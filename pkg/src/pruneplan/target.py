"""A small prunable stack of feed-forward blocks with structured neuron masks.

Each block maps the feature vector through an expansion projection, a
nonlinearity and a contraction projection; pruning removes intermediate
neurons (rows of the first projection, columns of the second).  A masked
forward slices the kept neurons out explicitly, so it is bit-identical to
the forward of a physically shrunken model.

Models are immutable after pretraining; evaluation and activation
collection are read-only and safe to run concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


@dataclass(frozen=True)
class TargetModelSpec:
    num_layers: int
    hidden_widths: tuple
    input_dim: int
    num_classes: int
    activation: str = "relu"
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if len(self.hidden_widths) != self.num_layers:
            raise ValueError("hidden_widths length must equal num_layers")
        if any(w < 2 for w in self.hidden_widths):
            raise ValueError("every hidden width must be >= 2")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    def to_dict(self):
        return {
            "num_layers": self.num_layers,
            "hidden_widths": list(self.hidden_widths),
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "activation": self.activation,
            "residual": self.residual,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            num_layers=doc["num_layers"],
            hidden_widths=tuple(doc["hidden_widths"]),
            input_dim=doc["input_dim"],
            num_classes=doc["num_classes"],
            activation=doc.get("activation", "relu"),
            residual=doc.get("residual", True),
        )


def default_spec() -> TargetModelSpec:
    """Desk-scale default: 6 residual blocks of width 64 on 16-dim inputs."""
    return TargetModelSpec(
        num_layers=6,
        hidden_widths=(64,) * 6,
        input_dim=16,
        num_classes=4,
        activation="relu",
        residual=True,
    )


@dataclass
class CalibrationSet:
    inputs: np.ndarray  # (N, input_dim)
    labels: np.ndarray  # (N,) int class indices

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be 2-D (N, input_dim)")
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels must have equal length")
        if len(self.inputs) < 1:
            raise ValueError("calibration set must be non-empty")

    def __len__(self):
        return len(self.inputs)

    def to_dict(self):
        return {
            "inputs": [[float(v) for v in row] for row in self.inputs],
            "labels": [int(y) for y in self.labels],
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["inputs"], dtype=np.float64), np.array(doc["labels"]))


@dataclass
class EvalResult:
    accuracy: float
    per_class_correct: np.ndarray
    n: int


class TargetModel:
    """Dense parameters for the block stack plus a linear classifier head.

    The contraction bias of every block is kept at zero (and excluded from
    training) so that a fully pruned block is exactly the identity under
    residual wiring.
    """

    def __init__(self, spec: TargetModelSpec, w1, b1, w2, b2, head_w, head_b):
        self.spec = spec
        self.w1 = w1  # list of (d_l, input_dim)
        self.b1 = b1  # list of (d_l,)
        self.w2 = w2  # list of (input_dim, d_l)
        self.b2 = b2  # list of (input_dim,), kept zero
        self.head_w = head_w  # (num_classes, input_dim)
        self.head_b = head_b  # (num_classes,)
        self._check_shapes()

    def _check_shapes(self):
        s = self.spec
        for l, d in enumerate(s.hidden_widths):
            if self.w1[l].shape != (d, s.input_dim):
                raise ValueError(f"layer {l}: w1 shape {self.w1[l].shape}")
            if self.b1[l].shape != (d,):
                raise ValueError(f"layer {l}: b1 shape {self.b1[l].shape}")
            if self.w2[l].shape != (s.input_dim, d):
                raise ValueError(f"layer {l}: w2 shape {self.w2[l].shape}")
            if self.b2[l].shape != (s.input_dim,):
                raise ValueError(f"layer {l}: b2 shape {self.b2[l].shape}")
        if self.head_w.shape != (s.num_classes, s.input_dim):
            raise ValueError(f"head_w shape {self.head_w.shape}")
        if self.head_b.shape != (s.num_classes,):
            raise ValueError(f"head_b shape {self.head_b.shape}")

    def forward(self, inputs: np.ndarray, masks=None) -> np.ndarray:
        """Logits for a batch; with ``masks``, kept neurons are sliced out."""
        keep = None if masks is None else masks_to_indices(masks, self.spec)
        return _stack_forward(self, inputs, keep)

    def copy(self) -> "TargetModel":
        return TargetModel(
            self.spec,
            [w.copy() for w in self.w1],
            [b.copy() for b in self.b1],
            [w.copy() for w in self.w2],
            [b.copy() for b in self.b2],
            self.head_w.copy(),
            self.head_b.copy(),
        )


def _activate(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    inner = np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _stack_forward(model, inputs, keep=None, capture=False):
    """Shared forward used by dense, masked and shrunken evaluation paths.

    ``keep`` is a per-layer list of kept-neuron index arrays or None for
    dense.  The slicing here is the only difference between the paths, so
    identical kept weights give bit-identical outputs.
    """
    s = model.spec
    x = np.asarray(inputs, dtype=np.float64)
    traces = []
    for l in range(s.num_layers):
        if keep is None:
            w1, b1, w2 = model.w1[l], model.b1[l], model.w2[l]
        else:
            idx = keep[l]
            w1, b1, w2 = model.w1[l][idx], model.b1[l][idx], model.w2[l][:, idx]
        h = _activate(x @ w1.T + b1, s.activation)
        if capture:
            traces.append(h)
        y = h @ w2.T + model.b2[l]
        x = x + y if s.residual else y
    logits = x @ model.head_w.T + model.head_b
    return (logits, traces) if capture else logits


def build_model(spec: TargetModelSpec, seed: int) -> TargetModel:
    """Deterministic init: projections uniform in +-sqrt(6/(fan_in+fan_out))."""
    rng = np.random.default_rng(seed)
    w1, b1, w2, b2 = [], [], [], []
    for d in spec.hidden_widths:
        w1.append(ad.glorot_uniform(rng, d, spec.input_dim, fan_in=spec.input_dim, fan_out=d))
        b1.append(np.zeros(d))
        w2.append(ad.glorot_uniform(rng, spec.input_dim, d, fan_in=d, fan_out=spec.input_dim))
        b2.append(np.zeros(spec.input_dim))
    head_w = ad.glorot_uniform(
        rng, spec.num_classes, spec.input_dim, fan_in=spec.input_dim, fan_out=spec.num_classes
    )
    head_b = np.zeros(spec.num_classes)
    return TargetModel(spec, w1, b1, w2, b2, head_w, head_b)


def make_blobs(n_samples, input_dim=16, num_classes=4, seed=0, separation=4.0):
    """Balanced Gaussian blobs; class i centered at separation * e_i."""
    if num_classes > input_dim:
        raise ValueError("need input_dim >= num_classes for orthogonal class means")
    rng = np.random.default_rng(seed)
    means = np.zeros((num_classes, input_dim))
    for i in range(num_classes):
        means[i, i] = separation
    labels = np.arange(n_samples) % num_classes
    rng.shuffle(labels)
    inputs = means[labels] + rng.standard_normal((n_samples, input_dim))
    return CalibrationSet(inputs, labels)


def pretrain(model, train_set, epochs, batch_size, learning_rate, seed=0):
    """Minibatch Adam on mean squared error against one-hot labels.

    Returns ``(model, final_train_accuracy)``; the model is updated in
    place on a fixed shuffle order derived from ``seed``.
    """
    if len(train_set) < 1:
        raise ValueError("train set must be non-empty")
    s = model.spec
    params = {}
    nodes = {}
    for l in range(s.num_layers):
        nodes[f"layer{l}.w1"] = ad.parameter(model.w1[l], name=f"layer{l}.w1")
        nodes[f"layer{l}.b1"] = ad.parameter(model.b1[l].reshape(1, -1), name=f"layer{l}.b1")
        nodes[f"layer{l}.w2"] = ad.parameter(model.w2[l], name=f"layer{l}.w2")
    nodes["head.w"] = ad.parameter(model.head_w, name="head.w")
    nodes["head.b"] = ad.parameter(model.head_b.reshape(1, -1), name="head.b")
    params = {name: n.value for name, n in nodes.items()}
    state = ad.OptimizerState.adam(learning_rate, params)
    onehot = np.eye(s.num_classes)[train_set.labels]
    rng = np.random.default_rng(seed)
    n = len(train_set)
    act = ad.relu if s.activation == "relu" else ad.gelu

    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = ad.input_node(train_set.inputs[idx])
            for l in range(s.num_layers):
                h = act(ad.add(ad.matmul(x, nodes[f"layer{l}.w1"], transpose_b=True),
                               nodes[f"layer{l}.b1"]))
                y = ad.matmul(h, nodes[f"layer{l}.w2"], transpose_b=True)
                x = ad.add(x, y) if s.residual else y
            logits = ad.add(ad.matmul(x, nodes["head.w"], transpose_b=True), nodes["head.b"])
            loss = ad.mse(logits, ad.input_node(onehot[idx]))
            try:
                ad.forward(loss)
                grads = ad.backward(loss)
            except ad.GraphError as err:
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch}: {err}"
                ) from err
            ad.optimizer_step(params, grads, state)

    # graph biases are (1, d) views of fresh arrays; copy back flat
    for l in range(s.num_layers):
        model.w1[l] = params[f"layer{l}.w1"]
        model.b1[l] = params[f"layer{l}.b1"].reshape(-1)
        model.w2[l] = params[f"layer{l}.w2"]
    model.head_w = params["head.w"]
    model.head_b = params["head.b"].reshape(-1)
    final = evaluate(model, None, train_set).accuracy
    return model, final


def masks_to_indices(masks, spec):
    """Kept-neuron index arrays from per-layer 0/1 keep vectors."""
    if len(masks) != spec.num_layers:
        raise ValueError(f"expected {spec.num_layers} masks, got {len(masks)}")
    keep = []
    for l, m in enumerate(masks):
        m = np.asarray(m)
        if m.shape != (spec.hidden_widths[l],):
            raise ValueError(
                f"layer {l}: mask length {m.shape} vs width {spec.hidden_widths[l]}"
            )
        keep.append(np.flatnonzero(m))
    return keep


class MaskedModel:
    """Read-only view of a model with per-layer kept-neuron slices."""

    def __init__(self, model: TargetModel, masks):
        self.base = model
        self.masks = [np.asarray(m).astype(np.int8) for m in masks]
        self.keep = masks_to_indices(self.masks, model.spec)

    def forward(self, inputs):
        return _stack_forward(self.base, inputs, self.keep)


def apply_masks(model: TargetModel, masks) -> MaskedModel:
    return MaskedModel(model, masks)


def shrink_model(model: TargetModel, masks) -> TargetModel:
    """Physically smaller model with pruned rows/columns deleted."""
    keep = masks_to_indices(masks, model.spec)
    widths = tuple(max(len(k), 2) for k in keep)  # spec floor; pad below
    # A zero-width layer cannot satisfy the width->=2 spec floor, so pad the
    # weights with zero rows/columns only when a layer keeps fewer than 2
    # neurons; zero rows produce zero activations and change nothing.
    w1, b1, w2, b2 = [], [], [], []
    for l, k in enumerate(keep):
        nw1 = model.w1[l][k]
        nb1 = model.b1[l][k]
        nw2 = model.w2[l][:, k]
        pad = widths[l] - len(k)
        if pad > 0:
            nw1 = np.vstack([nw1, np.zeros((pad, model.spec.input_dim))])
            nb1 = np.concatenate([nb1, np.full(pad, -1e9)])  # relu(-1e9)=0 stays dead
            nw2 = np.hstack([nw2, np.zeros((model.spec.input_dim, pad))])
        w1.append(nw1)
        b1.append(nb1)
        w2.append(nw2)
        b2.append(model.b2[l].copy())
    spec = TargetModelSpec(
        num_layers=model.spec.num_layers,
        hidden_widths=widths,
        input_dim=model.spec.input_dim,
        num_classes=model.spec.num_classes,
        activation=model.spec.activation,
        residual=model.spec.residual,
    )
    return TargetModel(spec, w1, b1, w2, b2, model.head_w.copy(), model.head_b.copy())


def evaluate(model, masks, eval_set: CalibrationSet) -> EvalResult:
    """Accuracy of argmax predictions; ties break to the lowest class index."""
    if eval_set is None or len(eval_set) == 0:
        raise ValueError("eval set must be non-empty")
    logits = model.forward(eval_set.inputs, masks=masks)
    preds = np.argmax(logits, axis=1)
    correct = preds == eval_set.labels
    per_class = np.zeros(model.spec.num_classes, dtype=np.int64)
    for c in range(model.spec.num_classes):
        per_class[c] = int(np.sum(correct & (eval_set.labels == c)))
    return EvalResult(
        accuracy=float(np.sum(correct)) / len(eval_set),
        per_class_correct=per_class,
        n=len(eval_set),
    )


def collect_activations(model: TargetModel, calibration: CalibrationSet):
    """Post-activation traces, one (N, d_l) array per layer."""
    _, traces = _stack_forward(model, calibration.inputs, capture=True)
    return traces


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def model_to_doc(model: TargetModel) -> dict:
    tensors = {}
    for l in range(model.spec.num_layers):
        tensors[f"layer{l}.w1"] = model.w1[l]
        tensors[f"layer{l}.b1"] = model.b1[l]
        tensors[f"layer{l}.w2"] = model.w2[l]
        tensors[f"layer{l}.b2"] = model.b2[l]
    tensors["head.w"] = model.head_w
    tensors["head.b"] = model.head_b
    doc = ad.tensors_to_doc(tensors)
    doc["spec"] = model.spec.to_dict()
    return doc


def model_from_doc(doc: dict) -> TargetModel:
    spec = TargetModelSpec.from_dict(doc["spec"])
    tensors = ad.tensors_from_doc(doc)
    w1 = [tensors[f"layer{l}.w1"] for l in range(spec.num_layers)]
    b1 = [tensors[f"layer{l}.b1"].reshape(-1) for l in range(spec.num_layers)]
    w2 = [tensors[f"layer{l}.w2"] for l in range(spec.num_layers)]
    b2 = [tensors[f"layer{l}.b2"].reshape(-1) for l in range(spec.num_layers)]
    return TargetModel(
        spec, w1, b1, w2, b2, tensors["head.w"], tensors["head.b"].reshape(-1)
    )


def save_model(path, model):
    with open(path, "w") as fh:
        json.dump(model_to_doc(model), fh)


def load_model(path) -> TargetModel:
    with open(path) as fh:
        return model_from_doc(json.load(fh))


def save_calibration(path, cal: CalibrationSet):
    with open(path, "w") as fh:
        json.dump(cal.to_dict(), fh)


def load_calibration(path) -> CalibrationSet:
    with open(path) as fh:
        return CalibrationSet.from_dict(json.load(fh))
