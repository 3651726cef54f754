"""Neural predictors mapping a pruning budget to layer-wise ratios.

The canonical backbone is a causally masked Transformer encoder that
emits one ratio per position, each conditioned on the budget embedding
and the ratios already produced.  A parallel (non-causal) Transformer, a
bidirectional LSTM and a plain MLP are kept as ablation backbones.

Training minimizes mean squared error against search-produced ratio
vectors, with teacher forcing for the autoregressive backbone.  Training
is single-writer over the parameters; prediction is read-only.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .mcts import RATIO_CEIL, RATIO_FLOOR, VALIDITY_TOL, InfeasibleBudgetError

BACKBONES = ("transformer-ar", "transformer-parallel", "bilstm", "mlp")
_LSTM_GATES = ("i", "f", "g", "o")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class PredictorConfig:
    backbone: str = "transformer-ar"
    num_positions: int = 28
    hidden_dim: int = 128
    encoder_layers: int = 2
    num_heads: int = 4
    ff_multiplier: int = 4
    activation: str = "gelu"

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.backbone == "bilstm" and self.hidden_dim % 2 != 0:
            raise ValueError("bilstm needs an even hidden_dim (two directions)")
        if self.num_positions < 1:
            raise ValueError("num_positions must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


@dataclass
class TrainingSample:
    """One supervision pair: budget in, ratio vector out."""

    b: float
    theta: np.ndarray
    source_reward: float = 0.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.ndim != 1:
            raise ValueError("theta must be a flat vector")
        if (self.theta < RATIO_FLOOR - VALIDITY_TOL).any() or (
            self.theta > RATIO_CEIL + VALIDITY_TOL
        ).any():
            raise ValueError(f"theta outside [{RATIO_FLOOR}, {RATIO_CEIL}]")
        if self.theta.mean() > self.b + VALIDITY_TOL:
            raise ValueError(f"theta mean {self.theta.mean()} exceeds budget {self.b}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 40
    epochs: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    teacher_forcing: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class PredictorParams:
    config: PredictorConfig
    tensors: dict
    trained: bool = False
    dataset_fingerprint: str | None = None


@dataclass
class PredictResult:
    theta: np.ndarray
    seconds: float


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def init_params(config: PredictorConfig, seed: int) -> PredictorParams:
    """Deterministic init: projections Glorot uniform, embeddings N(0, 0.02),
    norms at identity, biases zero."""
    rng = np.random.default_rng(seed)
    d = config.hidden_dim
    L = config.num_positions
    t = {}
    if config.backbone == "mlp":
        t["mlp.w1"] = ad.glorot_uniform(rng, 1, d)
        t["mlp.b1"] = np.zeros((1, d))
        t["mlp.w2"] = ad.glorot_uniform(rng, d, d)
        t["mlp.b2"] = np.zeros((1, d))
        t["mlp.w3"] = ad.glorot_uniform(rng, d, L)
        t["mlp.b3"] = np.zeros((1, L))
        return PredictorParams(config, t)
    if config.backbone == "bilstm":
        h = d // 2
        t["proj.w"] = ad.glorot_uniform(rng, 1, d)
        t["proj.b"] = np.zeros((1, d))
        for direction in ("fw", "bw"):
            for gate in _LSTM_GATES:
                t[f"{direction}.w{gate}"] = ad.glorot_uniform(rng, d, h)
                t[f"{direction}.u{gate}"] = ad.glorot_uniform(rng, h, h)
                t[f"{direction}.b{gate}"] = np.zeros((1, h))
        t["out.w"] = ad.glorot_uniform(rng, d, 1)
        t["out.b"] = np.zeros((1, 1))
        return PredictorParams(config, t)

    # transformer variants
    dh = d // config.num_heads
    t["embed.w1"] = ad.glorot_uniform(rng, 1, d)
    t["embed.b1"] = np.zeros((1, d))
    t["embed.w2"] = ad.glorot_uniform(rng, d, d)
    t["embed.b2"] = np.zeros((1, d))
    if config.backbone == "transformer-ar":
        for i in range(1, L):
            t[f"layer_embed.{i}"] = rng.normal(0.0, 0.02, size=(1, d))
    else:
        for i in range(1, L + 1):
            t[f"pos_embed.{i}"] = rng.normal(0.0, 0.02, size=(1, d))
    for j in range(config.encoder_layers):
        for hd in range(config.num_heads):
            t[f"enc{j}.head{hd}.wq"] = ad.glorot_uniform(rng, d, dh)
            t[f"enc{j}.head{hd}.wk"] = ad.glorot_uniform(rng, d, dh)
            t[f"enc{j}.head{hd}.wv"] = ad.glorot_uniform(rng, d, dh)
        t[f"enc{j}.attn.wo"] = ad.glorot_uniform(rng, d, d)
        t[f"enc{j}.ln1.gain"] = np.ones((1, d))
        t[f"enc{j}.ln1.bias"] = np.zeros((1, d))
        t[f"enc{j}.ffn.w1"] = ad.glorot_uniform(rng, d, config.ff_multiplier * d)
        t[f"enc{j}.ffn.b1"] = np.zeros((1, config.ff_multiplier * d))
        t[f"enc{j}.ffn.w2"] = ad.glorot_uniform(rng, config.ff_multiplier * d, d)
        t[f"enc{j}.ffn.b2"] = np.zeros((1, d))
        t[f"enc{j}.ln2.gain"] = np.ones((1, d))
        t[f"enc{j}.ln2.bias"] = np.zeros((1, d))
    t["out.w"] = ad.glorot_uniform(rng, d, 1)
    t["out.b"] = np.zeros((1, 1))
    return PredictorParams(config, t)


# ---------------------------------------------------------------------------
# numpy forward paths (inference)
# ---------------------------------------------------------------------------


def _np_act(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    inner = math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _np_layer_norm(x, gain, bias):
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered**2).mean(axis=1, keepdims=True)
    return centered / np.sqrt(var + ad.LAYER_NORM_EPS) * gain + bias


def _np_masked_softmax(s, mask):
    shifted = s + (1.0 - mask) * ad.MASK_SENTINEL
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted) * mask
    return e / e.sum(axis=1, keepdims=True)


def embed_constraint(b: float, params: PredictorParams) -> np.ndarray:
    """Budget to latent row vector through the two-layer embedding MLP."""
    if not 0.0 <= b <= 1.0:
        raise ValueError(f"budget {b} outside [0, 1]")
    t = params.tensors
    x = np.array([[float(b)]])
    h = _np_act(x @ t["embed.w1"] + t["embed.b1"], params.config.activation)
    return h @ t["embed.w2"] + t["embed.b2"]


def _np_encoder(tokens: np.ndarray, params: PredictorParams, causal: bool) -> np.ndarray:
    cfg = params.config
    t = params.tensors
    n = tokens.shape[0]
    mask = np.tril(np.ones((n, n))) if causal else np.ones((n, n))
    dh = cfg.hidden_dim // cfg.num_heads
    x = tokens
    for j in range(cfg.encoder_layers):
        heads = []
        for hd in range(cfg.num_heads):
            q = x @ t[f"enc{j}.head{hd}.wq"]
            k = x @ t[f"enc{j}.head{hd}.wk"]
            v = x @ t[f"enc{j}.head{hd}.wv"]
            scores = (q @ k.T) * (1.0 / math.sqrt(dh))
            heads.append(_np_masked_softmax(scores, mask) @ v)
        attn = np.concatenate(heads, axis=1) @ t[f"enc{j}.attn.wo"]
        x = _np_layer_norm(x + attn, t[f"enc{j}.ln1.gain"], t[f"enc{j}.ln1.bias"])
        hidden = _np_act(x @ t[f"enc{j}.ffn.w1"] + t[f"enc{j}.ffn.b1"], cfg.activation)
        ffn = hidden @ t[f"enc{j}.ffn.w2"] + t[f"enc{j}.ffn.b2"]
        x = _np_layer_norm(x + ffn, t[f"enc{j}.ln2.gain"], t[f"enc{j}.ln2.bias"])
    return x


def _np_readout(h, params):
    t = params.tensors
    return _np_sigmoid(h @ t["out.w"] + t["out.b"])


def forward_autoregressive(b, params: PredictorParams, known_prefix=None) -> np.ndarray:
    """Free-running prediction; with a prefix, those input positions use the
    given ratios instead of the model's own outputs (teacher forcing)."""
    cfg = params.config
    L = cfg.num_positions
    if known_prefix is not None:
        known_prefix = np.asarray(known_prefix, dtype=np.float64)
        if len(known_prefix) >= L:
            raise ValueError(f"prefix length {len(known_prefix)} must be < {L}")
        if (known_prefix <= 0.0).any() or (known_prefix >= 1.0).any():
            raise ValueError("prefix values must lie strictly inside (0, 1)")
    t = params.tensors
    x0 = embed_constraint(b, params)
    theta = np.empty(L)
    for step in range(1, L + 1):
        rows = [x0]
        for i in range(1, step):
            if known_prefix is not None and i - 1 < len(known_prefix):
                value = known_prefix[i - 1]
            else:
                value = theta[i - 1]
            rows.append(value * t[f"layer_embed.{i}"])
        h = _np_encoder(np.vstack(rows), params, causal=True)
        theta[step - 1] = _np_readout(h[-1:], params)[0, 0]
    return theta


def teacher_forced_outputs(b, theta_in, params: PredictorParams) -> np.ndarray:
    """All positions in one causal pass with the given ratios as inputs."""
    cfg = params.config
    L = cfg.num_positions
    theta_in = np.asarray(theta_in, dtype=np.float64)
    if len(theta_in) != L:
        raise ValueError(f"need {L} input ratios, got {len(theta_in)}")
    t = params.tensors
    rows = [embed_constraint(b, params)]
    for i in range(1, L):
        rows.append(theta_in[i - 1] * t[f"layer_embed.{i}"])
    h = _np_encoder(np.vstack(rows), params, causal=True)
    return _np_readout(h, params).reshape(-1)


def forward_transformer_parallel(b, params: PredictorParams) -> np.ndarray:
    """Non-causal ablation: the budget embedding replicated across positions
    plus learned position offsets, decoded in parallel."""
    cfg = params.config
    t = params.tensors
    x0 = embed_constraint(b, params)
    rows = [x0 + t[f"pos_embed.{i}"] for i in range(1, cfg.num_positions + 1)]
    h = _np_encoder(np.vstack(rows), params, causal=False)
    return _np_readout(h, params).reshape(-1)


def forward_mlp(b, params: PredictorParams) -> np.ndarray:
    if not 0.0 <= b <= 1.0:
        raise ValueError(f"budget {b} outside [0, 1]")
    t = params.tensors
    x = np.array([[float(b)]])
    h1 = np.maximum(x @ t["mlp.w1"] + t["mlp.b1"], 0.0)
    h2 = np.maximum(h1 @ t["mlp.w2"] + t["mlp.b2"], 0.0)
    return _np_sigmoid(h2 @ t["mlp.w3"] + t["mlp.b3"]).reshape(-1)


def _np_lstm_direction(z, params, direction, steps):
    """Hidden rows for one direction over identical replicated inputs."""
    t = params.tensors
    h_dim = params.config.hidden_dim // 2
    h = np.zeros((1, h_dim))
    c = np.zeros((1, h_dim))
    out = []
    for _ in range(steps):
        gi = _np_sigmoid(z @ t[f"{direction}.wi"] + h @ t[f"{direction}.ui"] + t[f"{direction}.bi"])
        gf = _np_sigmoid(z @ t[f"{direction}.wf"] + h @ t[f"{direction}.uf"] + t[f"{direction}.bf"])
        gg = np.tanh(z @ t[f"{direction}.wg"] + h @ t[f"{direction}.ug"] + t[f"{direction}.bg"])
        go = _np_sigmoid(z @ t[f"{direction}.wo"] + h @ t[f"{direction}.uo"] + t[f"{direction}.bo"])
        c = gf * c + gi * gg
        h = go * np.tanh(c)
        out.append(h)
    return out


def forward_bilstm(b, params: PredictorParams) -> np.ndarray:
    """Budget projected once, replicated across positions, then read by a
    forward and a backward recurrent stream."""
    if not 0.0 <= b <= 1.0:
        raise ValueError(f"budget {b} outside [0, 1]")
    cfg = params.config
    t = params.tensors
    L = cfg.num_positions
    z = np.array([[float(b)]]) @ t["proj.w"] + t["proj.b"]
    fw = _np_lstm_direction(z, params, "fw", L)
    bw = _np_lstm_direction(z, params, "bw", L)
    rows = [np.concatenate([fw[i], bw[L - 1 - i]], axis=1) for i in range(L)]
    return _np_readout(np.vstack(rows), params).reshape(-1)


def forward_backbone(b, params: PredictorParams, known_prefix=None) -> np.ndarray:
    backbone = params.config.backbone
    if backbone == "transformer-ar":
        return forward_autoregressive(b, params, known_prefix)
    if backbone == "transformer-parallel":
        return forward_transformer_parallel(b, params)
    if backbone == "bilstm":
        return forward_bilstm(b, params)
    return forward_mlp(b, params)


# ---------------------------------------------------------------------------
# graph construction (training)
# ---------------------------------------------------------------------------


def _make_param_nodes(params: PredictorParams):
    return {name: ad.parameter(arr, name=name) for name, arr in params.tensors.items()}


def _graph_embed(b_node, nodes, activation):
    act = ad.relu if activation == "relu" else ad.gelu
    h = act(ad.add(ad.matmul(b_node, nodes["embed.w1"]), nodes["embed.b1"]))
    return ad.add(ad.matmul(h, nodes["embed.w2"]), nodes["embed.b2"])


def _graph_encoder(x, nodes, cfg, causal, n_tokens):
    act = ad.relu if cfg.activation == "relu" else ad.gelu
    mask = np.tril(np.ones((n_tokens, n_tokens))) if causal else np.ones((n_tokens, n_tokens))
    dh = cfg.hidden_dim // cfg.num_heads
    for j in range(cfg.encoder_layers):
        heads = []
        for hd in range(cfg.num_heads):
            q = ad.matmul(x, nodes[f"enc{j}.head{hd}.wq"])
            k = ad.matmul(x, nodes[f"enc{j}.head{hd}.wk"])
            v = ad.matmul(x, nodes[f"enc{j}.head{hd}.wv"])
            scores = ad.scale(ad.matmul(q, k, transpose_b=True), 1.0 / math.sqrt(dh))
            heads.append(ad.matmul(ad.masked_softmax(scores, mask), v))
        attn = ad.matmul(ad.concat(heads, axis=1), nodes[f"enc{j}.attn.wo"])
        x = ad.add(
            ad.mul(ad.layer_norm(ad.add(x, attn)), nodes[f"enc{j}.ln1.gain"]),
            nodes[f"enc{j}.ln1.bias"],
        )
        hidden = act(ad.add(ad.matmul(x, nodes[f"enc{j}.ffn.w1"]), nodes[f"enc{j}.ffn.b1"]))
        ffn = ad.add(ad.matmul(hidden, nodes[f"enc{j}.ffn.w2"]), nodes[f"enc{j}.ffn.b2"])
        x = ad.add(
            ad.mul(ad.layer_norm(ad.add(x, ffn)), nodes[f"enc{j}.ln2.gain"]),
            nodes[f"enc{j}.ln2.bias"],
        )
    return x


def _graph_readout(h, nodes):
    return ad.sigmoid(ad.add(ad.matmul(h, nodes["out.w"]), nodes["out.b"]))


def _graph_lstm_direction(z, nodes, direction, steps, h_dim):
    h = ad.input_node(np.zeros((1, h_dim)))
    c = ad.input_node(np.zeros((1, h_dim)))
    out = []
    for _ in range(steps):
        def gate(g, fn):
            pre = ad.add(
                ad.add(ad.matmul(z, nodes[f"{direction}.w{g}"]),
                       ad.matmul(h, nodes[f"{direction}.u{g}"])),
                nodes[f"{direction}.b{g}"],
            )
            return fn(pre)

        gi = gate("i", ad.sigmoid)
        gf = gate("f", ad.sigmoid)
        gg = gate("g", ad.tanh)
        go = gate("o", ad.sigmoid)
        c = ad.add(ad.mul(gf, c), ad.mul(gi, gg))
        h = ad.mul(go, ad.tanh(c))
        out.append(h)
    return out


def build_loss_graph(nodes, cfg: PredictorConfig, b: float, theta_target,
                     theta_inputs=None):
    """Loss graph for one sample.  ``theta_inputs`` feeds the autoregressive
    input positions (teacher forcing); other backbones ignore it."""
    theta_target = np.asarray(theta_target, dtype=np.float64)
    L = cfg.num_positions
    b_node = ad.input_node([[float(b)]])
    if cfg.backbone == "mlp":
        h1 = ad.relu(ad.add(ad.matmul(b_node, nodes["mlp.w1"]), nodes["mlp.b1"]))
        h2 = ad.relu(ad.add(ad.matmul(h1, nodes["mlp.w2"]), nodes["mlp.b2"]))
        pred = ad.sigmoid(ad.add(ad.matmul(h2, nodes["mlp.w3"]), nodes["mlp.b3"]))
        target = ad.input_node(theta_target.reshape(1, L))
        return ad.mse(pred, target), pred
    if cfg.backbone == "bilstm":
        h_dim = cfg.hidden_dim // 2
        z = ad.add(ad.matmul(b_node, nodes["proj.w"]), nodes["proj.b"])
        fw = _graph_lstm_direction(z, nodes, "fw", L, h_dim)
        bw = _graph_lstm_direction(z, nodes, "bw", L, h_dim)
        rows = [ad.concat([fw[i], bw[L - 1 - i]], axis=1) for i in range(L)]
        pred = _graph_readout(ad.concat(rows, axis=0), nodes)
        target = ad.input_node(theta_target.reshape(L, 1))
        return ad.mse(pred, target), pred
    x0 = _graph_embed(b_node, nodes, cfg.activation)
    if cfg.backbone == "transformer-ar":
        if theta_inputs is None:
            theta_inputs = theta_target
        theta_inputs = np.asarray(theta_inputs, dtype=np.float64)
        rows = [x0]
        for i in range(1, L):
            rows.append(ad.scale(nodes[f"layer_embed.{i}"], float(theta_inputs[i - 1])))
        h = _graph_encoder(ad.concat(rows, axis=0), nodes, cfg, causal=True, n_tokens=L)
    else:
        rows = [ad.add(x0, nodes[f"pos_embed.{i}"]) for i in range(1, L + 1)]
        h = _graph_encoder(ad.concat(rows, axis=0), nodes, cfg, causal=False, n_tokens=L)
    pred = _graph_readout(h, nodes)
    target = ad.input_node(theta_target.reshape(L, 1))
    return ad.mse(pred, target), pred


# ---------------------------------------------------------------------------
# loss / training / prediction
# ---------------------------------------------------------------------------


def compute_loss(pred, target) -> float:
    """Mean squared error between two ratio vectors."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    return float(((pred - target) ** 2).mean())


def train(samples, config: PredictorConfig, train_config: TrainConfig):
    """Minibatch Adam over the sample set; returns (params, per-epoch loss).

    The shuffle order is fixed by the seed, so training is deterministic.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one training sample")
    for s in samples:
        if len(s.theta) != config.num_positions:
            raise ValueError(
                f"sample has {len(s.theta)} ratios, config expects {config.num_positions}"
            )
    params = init_params(config, train_config.seed)
    nodes = _make_param_nodes(params)
    values = {name: n.value for name, n in nodes.items()}
    state = ad.OptimizerState.adam(train_config.learning_rate, values)
    rng = np.random.default_rng(train_config.seed)
    n = len(samples)
    loss_curve = []
    for epoch in range(train_config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, train_config.batch_size):
            batch = [samples[i] for i in order[start : start + train_config.batch_size]]
            for node in nodes.values():
                node.grad = None
            for k, sample in enumerate(batch):
                theta_inputs = None
                if config.backbone == "transformer-ar" and not train_config.teacher_forcing:
                    theta_inputs = forward_autoregressive(sample.b, params)
                loss_node, _ = build_loss_graph(
                    nodes, config, sample.b, sample.theta, theta_inputs
                )
                try:
                    loss_val = ad.forward(loss_node)[0, 0]
                    ad.backward(loss_node, accumulate=True)
                except ad.GraphError as err:
                    raise TrainingDivergedError(
                        f"training diverged at epoch {epoch}, batch sample {k}: {err}"
                    ) from err
                epoch_losses.append(loss_val)
            m = float(len(batch))
            grads = {
                name: (node.grad / m if node.grad is not None else np.zeros_like(node.value))
                for name, node in nodes.items()
            }
            ad.optimizer_step(values, grads, state)
        loss_curve.append(float(np.mean(epoch_losses)))
    params.trained = train_config.epochs > 0
    return params, loss_curve


def predict(b: float, params: PredictorParams) -> PredictResult:
    """One-shot inference; wall-clock time of the forward pass is recorded."""
    if not 0.0 <= b <= 1.0:
        raise ValueError(f"budget {b} outside [0, 1]")
    t0 = time.perf_counter()
    theta = forward_backbone(b, params)
    return PredictResult(theta=theta, seconds=time.perf_counter() - t0)


def project_to_constraint(theta, budget: float) -> np.ndarray:
    """Smallest uniform downward shift that brings the mean within budget.

    Output always lies in [0.1, 1.0]; values are first clipped into that
    range, so an already-feasible in-range input is returned unchanged.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if (theta <= 0.0).any() or (theta >= 1.0).any():
        raise ValueError("ratios must lie strictly inside (0, 1)")
    if budget < RATIO_FLOOR:
        raise InfeasibleBudgetError(
            f"budget {budget} below the ratio floor {RATIO_FLOOR}"
        )
    out = np.clip(theta, RATIO_FLOOR, RATIO_CEIL)
    # Water-filling: spread the excess over entries still above the floor.
    # Each pass either finishes or floors at least one more entry, so the
    # fixed point is reached within len(out) passes.
    for _ in range(len(out) + 1):
        excess_total = out.sum() - budget * len(out)
        if excess_total <= VALIDITY_TOL * len(out):
            return out
        free = out > RATIO_FLOOR
        if not free.any():
            return out  # all at the floor: mean is 0.1 <= budget
        out[free] -= excess_total / free.sum()
        out = np.clip(out, RATIO_FLOOR, RATIO_CEIL)
    return out


def evaluate_loss(params: PredictorParams, samples, teacher_forcing=True) -> float:
    """Mean loss over samples; teacher-forced or free-running inputs."""
    losses = []
    for s in samples:
        if params.config.backbone == "transformer-ar" and teacher_forcing:
            outputs = teacher_forced_outputs(s.b, s.theta, params)
        else:
            outputs = forward_backbone(s.b, params)
        losses.append(compute_loss(outputs, s.theta))
    return float(np.mean(losses))


def per_layer_mad(params: PredictorParams, samples) -> np.ndarray:
    """Mean absolute deviation between predictions and labels, per position."""
    devs = []
    for s in samples:
        devs.append(np.abs(forward_backbone(s.b, params) - s.theta))
    return np.mean(devs, axis=0)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def params_to_doc(params: PredictorParams) -> dict:
    doc = ad.tensors_to_doc(params.tensors)
    doc["backbone"] = params.config.backbone
    doc["config"] = params.config.to_dict()
    doc["trained"] = bool(params.trained)
    doc["dataset_fingerprint"] = params.dataset_fingerprint
    return doc


def params_from_doc(doc: dict) -> PredictorParams:
    config = PredictorConfig.from_dict(doc["config"])
    return PredictorParams(
        config=config,
        tensors=ad.tensors_from_doc(doc),
        trained=doc.get("trained", False),
        dataset_fingerprint=doc.get("dataset_fingerprint"),
    )


def save_params(path, params: PredictorParams):
    with open(path, "w") as fh:
        json.dump(params_to_doc(params), fh)


def load_params(path) -> PredictorParams:
    with open(path) as fh:
        return params_from_doc(json.load(fh))
