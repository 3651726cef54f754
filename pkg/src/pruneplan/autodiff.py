"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value in a graph is a 2-D float64 array (vectors are 1 x d rows).
Graphs are built bottom-up from :func:`input_node` / :func:`parameter`
leaves and the op builders below, evaluated with :func:`forward` and
differentiated with :func:`backward`.  :func:`grad_check` compares the
analytic gradients against central finite differences.

A graph instance is single-writer: forward/backward walk it sequentially
in topological order.  Independent graphs share no mutable state and may
run on independent threads; parameter updates must be serialized by the
caller.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GraphError",
    "GradCheckReport",
    "Node",
    "OptimizerState",
    "ShapeError",
    "add",
    "backward",
    "concat",
    "forward",
    "gelu",
    "glorot_uniform",
    "grad_check",
    "input_node",
    "layer_norm",
    "load_tensors",
    "masked_softmax",
    "matmul",
    "mse",
    "mul",
    "optimizer_step",
    "parameter",
    "relu",
    "save_tensors",
    "scale",
    "sigmoid",
    "tanh",
    "tensors_from_doc",
    "tensors_to_doc",
]

# Additive sentinel for masked attention scores: large enough that
# exp(sentinel - rowmax) underflows to exactly 0.0 in float64.
MASK_SENTINEL = -1e30

# Added to the per-row variance before the inverse square root.  Must be
# tiny relative to typical row variances so that normalized rows keep unit
# variance to high precision while constant rows still map to zeros.
LAYER_NORM_EPS = 1e-12

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes incompatible for an op; names the offending nodes."""


class GraphError(RuntimeError):
    """Graph misuse: missing values, non-scalar root, non-finite results."""


def as_matrix(values) -> np.ndarray:
    """Coerce to a 2-D float64 array; 1-D input becomes a single row."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Node:
    """One vertex of a computation DAG.

    ``op`` is one of: input, parameter, matmul, add, mul, activation,
    layer_norm, masked_softmax, concat, mse, scale.  ``opts`` carries
    non-differentiable attributes (transpose flags, masks, factors).
    """

    __slots__ = ("id", "op", "inputs", "value", "grad", "name", "opts")

    def __init__(self, op, inputs=(), value=None, name=None, opts=None):
        self.id = next(_ids)
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.grad = None
        self.name = name
        self.opts = opts or {}

    @property
    def shape(self):
        return None if self.value is None else self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"


def input_node(values, name=None) -> Node:
    return Node("input", value=as_matrix(values), name=name)


def parameter(values, name=None) -> Node:
    return Node("parameter", value=as_matrix(values), name=name)


def matmul(a: Node, b: Node, transpose_a=False, transpose_b=False) -> Node:
    return Node("matmul", (a, b), opts={"ta": transpose_a, "tb": transpose_b})


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may be a single row (or 1x1) broadcast over rows."""
    return Node("add", (a, b))


def mul(a: Node, b: Node) -> Node:
    """Elementwise (Hadamard) product with the same broadcast rule as add."""
    return Node("mul", (a, b))


def relu(x: Node) -> Node:
    return Node("activation", (x,), opts={"fn": "relu"})


def gelu(x: Node) -> Node:
    """Gaussian error linear unit, tanh approximation (closed-form gradient)."""
    return Node("activation", (x,), opts={"fn": "gelu"})


def sigmoid(x: Node) -> Node:
    return Node("activation", (x,), opts={"fn": "sigmoid"})


def tanh(x: Node) -> Node:
    return Node("activation", (x,), opts={"fn": "tanh"})


def layer_norm(x: Node, eps=LAYER_NORM_EPS) -> Node:
    """Normalize each row to zero mean and unit variance (no affine part).

    Constant rows map to all-zero rows; ``eps`` only guards the division.
    """
    return Node("layer_norm", (x,), opts={"eps": float(eps)})


def masked_softmax(scores: Node, mask) -> Node:
    """Row-wise softmax over positions where ``mask`` is 1.

    Masked positions receive exactly zero probability.  ``mask`` is a
    constant 0/1 array of the same shape, not a graph input.
    """
    mask = as_matrix(mask)
    if not ((mask == 0.0) | (mask == 1.0)).all():
        raise ShapeError("mask entries must be 0 or 1")
    if (mask.sum(axis=1) == 0).any():
        raise ShapeError("every row must keep at least one unmasked position")
    return Node("masked_softmax", (scores,), opts={"mask": mask})


def concat(nodes, axis=0) -> Node:
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    nodes = tuple(nodes)
    if not nodes:
        raise ShapeError("concat requires at least one input")
    return Node("concat", nodes, opts={"axis": axis})


def mse(pred: Node, target: Node) -> Node:
    """Mean of elementwise squared differences, as a 1x1 node."""
    return Node("mse", (pred, target))


def scale(x: Node, factor: float) -> Node:
    return Node("scale", (x,), opts={"factor": float(factor)})


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def topo_order(root: Node) -> list[Node]:
    """Dependencies-first ordering of the DAG under ``root``."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in node.inputs:
            stack.append((child, False))
    return order


def _shape_after_transpose(shape, t):
    return (shape[1], shape[0]) if t else shape


def _check_second_operand(node, a, b):
    ok = (
        b.shape == a.shape
        or b.shape == (1, 1)
        or (b.shape[0] == 1 and b.shape[1] == a.shape[1])
    )
    if not ok:
        ia, ib = node.inputs
        raise ShapeError(
            f"{node.op} node {node.id}: cannot broadcast {b.shape} (node {ib.id}) "
            f"onto {a.shape} (node {ia.id})"
        )


def _forward_one(node: Node) -> np.ndarray:
    op = node.op
    vals = [n.value for n in node.inputs]
    if op == "matmul":
        a, b = vals
        sa = _shape_after_transpose(a.shape, node.opts["ta"])
        sb = _shape_after_transpose(b.shape, node.opts["tb"])
        if sa[1] != sb[0]:
            ia, ib = node.inputs
            raise ShapeError(
                f"matmul node {node.id}: {sa} x {sb} "
                f"(node {ia.id} shape {a.shape}, node {ib.id} shape {b.shape}, "
                f"ta={node.opts['ta']}, tb={node.opts['tb']})"
            )
        return (a.T if node.opts["ta"] else a) @ (b.T if node.opts["tb"] else b)
    if op == "add":
        a, b = vals
        _check_second_operand(node, a, b)
        return a + b
    if op == "mul":
        a, b = vals
        _check_second_operand(node, a, b)
        return a * b
    if op == "activation":
        (x,) = vals
        fn = node.opts["fn"]
        if fn == "relu":
            return np.maximum(x, 0.0)
        if fn == "sigmoid":
            return 1.0 / (1.0 + np.exp(-x))
        if fn == "tanh":
            return np.tanh(x)
        if fn == "gelu":
            inner = _GELU_C * (x + _GELU_A * x**3)
            return 0.5 * x * (1.0 + np.tanh(inner))
        raise GraphError(f"unknown activation {fn!r}")
    if op == "layer_norm":
        (x,) = vals
        mu = x.mean(axis=1, keepdims=True)
        centered = x - mu
        var = (centered**2).mean(axis=1, keepdims=True)
        return centered / np.sqrt(var + node.opts["eps"])
    if op == "masked_softmax":
        (s,) = vals
        mask = node.opts["mask"]
        if mask.shape != s.shape:
            raise ShapeError(
                f"masked_softmax node {node.id}: mask shape {mask.shape} "
                f"vs scores shape {s.shape}"
            )
        # masked entries get the sentinel added; unmasked are untouched
        shifted = s + (1.0 - mask) * MASK_SENTINEL
        shifted = shifted - shifted.max(axis=1, keepdims=True)
        e = np.exp(shifted) * mask  # force exact zeros at masked positions
        return e / e.sum(axis=1, keepdims=True)
    if op == "concat":
        axis = node.opts["axis"]
        other = 1 - axis
        first = vals[0].shape[other]
        for n, v in zip(node.inputs, vals):
            if v.shape[other] != first:
                raise ShapeError(
                    f"concat node {node.id}: node {n.id} shape {v.shape} does not "
                    f"match size {first} on axis {other}"
                )
        return np.concatenate(vals, axis=axis)
    if op == "mse":
        p, t = vals
        if p.shape != t.shape:
            ia, ib = node.inputs
            raise ShapeError(
                f"mse node {node.id}: {p.shape} (node {ia.id}) vs "
                f"{t.shape} (node {ib.id})"
            )
        return np.array([[((p - t) ** 2).mean()]])
    if op == "scale":
        (x,) = vals
        return x * node.opts["factor"]
    raise GraphError(f"unknown op {op!r}")


def forward(root: Node) -> np.ndarray:
    """Evaluate every node under ``root`` and return the root value."""
    for node in topo_order(root):
        if node.op in ("input", "parameter"):
            if node.value is None:
                raise GraphError(f"node {node.id} ({node.op}) has no value assigned")
            continue
        node.value = _forward_one(node)
        if not np.isfinite(node.value).all():
            raise GraphError(
                f"node {node.id} ({node.op}) produced non-finite values"
            )
    return root.value


def _reduce_like(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    return g.sum(axis=0, keepdims=True)


def _backward_one(node: Node, g: np.ndarray) -> list[np.ndarray]:
    op = node.op
    vals = [n.value for n in node.inputs]
    if op == "matmul":
        a, b = vals
        ta, tb = node.opts["ta"], node.opts["tb"]
        if not ta and not tb:
            return [g @ b.T, a.T @ g]
        if not ta and tb:
            return [g @ b, g.T @ a]
        if ta and not tb:
            return [b @ g.T, a @ g]
        return [b.T @ g.T, g.T @ a.T]
    if op == "add":
        a, b = vals
        return [g, _reduce_like(g, b.shape)]
    if op == "mul":
        a, b = vals
        return [g * b, _reduce_like(g * a, b.shape)]
    if op == "activation":
        (x,) = vals
        fn = node.opts["fn"]
        if fn == "relu":
            return [g * (x > 0.0)]
        if fn == "sigmoid":
            s = node.value
            return [g * s * (1.0 - s)]
        if fn == "tanh":
            return [g * (1.0 - node.value**2)]
        if fn == "gelu":
            inner = _GELU_C * (x + _GELU_A * x**3)
            t = np.tanh(inner)
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (
                1.0 + 3.0 * _GELU_A * x**2
            )
            return [g * d]
    if op == "layer_norm":
        (x,) = vals
        y = node.value
        mu = x.mean(axis=1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + node.opts["eps"])
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        return [inv_std * (g - gm - y * gym)]
    if op == "masked_softmax":
        p = node.value
        dot = (g * p).sum(axis=1, keepdims=True)
        return [p * (g - dot)]
    if op == "concat":
        axis = node.opts["axis"]
        grads, offset = [], 0
        for v in vals:
            size = v.shape[axis]
            if axis == 0:
                grads.append(g[offset : offset + size, :])
            else:
                grads.append(g[:, offset : offset + size])
            offset += size
        return grads
    if op == "mse":
        p, t = vals
        coeff = g[0, 0] * 2.0 / p.size
        diff = p - t
        return [coeff * diff, -coeff * diff]
    if op == "scale":
        return [g * node.opts["factor"]]
    raise GraphError(f"unknown op {op!r}")


def backward(root: Node, accumulate=False, retain_all=False) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar root; returns gradients of named parameters.

    Parameter nodes get ``.grad`` set (added to, when ``accumulate``);
    other nodes keep their gradient only when ``retain_all``.
    """
    if root.value is None:
        raise GraphError("backward called before forward")
    if root.value.shape != (1, 1):
        raise GraphError(f"root must be scalar (1x1), got shape {root.value.shape}")
    order = topo_order(root)
    for node in order:
        if node.op not in ("input", "parameter") and node.value is None:
            raise GraphError("backward called before forward")
    grads: dict[int, np.ndarray] = {id(root): np.ones((1, 1))}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or not node.inputs:
            continue
        for child, contrib in zip(node.inputs, _backward_one(node, g)):
            prev = grads.get(id(child))
            grads[id(child)] = contrib if prev is None else prev + contrib
    out = {}
    for node in order:
        g = grads.get(id(node))
        if node.op == "parameter":
            local = g if g is not None else np.zeros_like(node.value)
            if accumulate and node.grad is not None:
                node.grad = node.grad + local
            else:
                node.grad = local.copy() if g is not None else local
            if node.name is not None:
                out[node.name] = node.grad
        elif retain_all:
            node.grad = g
        else:
            node.grad = None
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class TensorCheck:
    name: str
    max_rel_err: float
    mean_rel_err: float
    n_entries: int


@dataclass
class GradCheckReport:
    tensors: list[TensorCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((t.max_rel_err for t in self.tensors), default=0.0)

    @property
    def mean_rel_err(self) -> float:
        if not self.tensors:
            return 0.0
        return sum(t.mean_rel_err * t.n_entries for t in self.tensors) / sum(
            t.n_entries for t in self.tensors
        )


def grad_check(
    root: Node,
    params=None,
    fd_step=1e-5,
    max_entries_per_tensor=None,
    rng=None,
) -> GradCheckReport:
    """Compare analytic parameter gradients with central finite differences.

    ``params`` defaults to every parameter node in the graph.  With
    ``max_entries_per_tensor`` set, a random subset of entries is probed
    per tensor (seeded through ``rng``).
    """
    if params is None:
        params = [n for n in topo_order(root) if n.op == "parameter"]
    forward(root)
    backward(root)
    analytic = {id(p): p.grad.copy() for p in params}
    report = GradCheckReport()
    for p in params:
        size = p.value.size
        idx = np.arange(size)
        if max_entries_per_tensor is not None and size > max_entries_per_tensor:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(size, size=max_entries_per_tensor, replace=False)
        errs = []
        flat = p.value.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + fd_step
            f_plus = forward(root)[0, 0]
            flat[i] = orig - fd_step
            f_minus = forward(root)[0, 0]
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * fd_step)
            a = analytic[id(p)].reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-6)
            errs.append(abs(a - numeric) / denom)
        name = p.name if p.name is not None else f"param{p.id}"
        report.tensors.append(
            TensorCheck(name, float(np.max(errs)), float(np.mean(errs)), len(errs))
        )
    forward(root)  # restore clean values after the probes
    return report


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """SGD or Adam state; Adam keeps per-parameter moment tables by name."""

    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict | None = None
    second_moment: dict | None = None

    @classmethod
    def sgd(cls, learning_rate):
        return cls(kind="sgd", learning_rate=learning_rate)

    @classmethod
    def adam(cls, learning_rate, params, beta1=0.9, beta2=0.999, eps=1e-8):
        """``params``: dict of name -> array whose moments are tracked."""
        return cls(
            kind="adam",
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
        )


def optimizer_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """Update ``params`` in place from ``grads``, then zero the gradients."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(
                f"parameter {name!r}: grad shape {g.shape} vs value shape {p.shape}"
            )
    state.step_count += 1
    if state.kind == "sgd":
        for name, p in params.items():
            p -= state.learning_rate * grads[name]
    elif state.kind == "adam":
        t = state.step_count
        for name, p in params.items():
            if name not in state.first_moment:
                raise ValueError(f"no Adam moment table for parameter {name!r}")
            g = grads[name]
            m = state.first_moment[name]
            v = state.second_moment[name]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g**2
            m_hat = m / (1.0 - state.beta1**t)
            v_hat = v / (1.0 - state.beta2**t)
            p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    else:
        raise ValueError(f"unknown optimizer kind {state.kind!r}")
    for g in grads.values():
        g[...] = 0.0
    return params


def glorot_uniform(rng, rows, cols, fan_in=None, fan_out=None) -> np.ndarray:
    """Uniform init in [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    fi = rows if fan_in is None else fan_in
    fo = cols if fan_out is None else fan_out
    a = math.sqrt(6.0 / (fi + fo))
    return rng.uniform(-a, a, size=(rows, cols))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def tensors_to_doc(tensors: dict) -> dict:
    """JSON document for named tensors; names sorted for stable bytes."""
    entries = []
    for name in sorted(tensors):
        arr = as_matrix(tensors[name])
        entries.append(
            {
                "name": name,
                "rows": int(arr.shape[0]),
                "cols": int(arr.shape[1]),
                "values": [float(v) for v in arr.reshape(-1)],
            }
        )
    return {"tensors": entries}


def tensors_from_doc(doc: dict) -> dict:
    out = {}
    for entry in doc["tensors"]:
        arr = np.array(entry["values"], dtype=np.float64).reshape(
            entry["rows"], entry["cols"]
        )
        out[entry["name"]] = arr
    return out


def save_tensors(path, tensors: dict) -> None:
    with open(path, "w") as fh:
        json.dump(tensors_to_doc(tensors), fh)


def load_tensors(path) -> dict:
    with open(path) as fh:
        return tensors_from_doc(json.load(fh))
