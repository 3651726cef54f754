"""Monte-Carlo tree search over layer-wise pruning configurations.

States are complete ratio vectors; children are perturbed copies of the
parent with a perturbation scale that decays with tree depth.  Rewards
are held-out accuracies of the masked model; a configuration is valid
when its mean ratio stays within the target budget.  Exhaustive-grid and
random-search oracles are included for validation.

Tree mutation is single-writer; searches with distinct seeds are
independent and may run concurrently.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import importance as imp
from . import target as tg
from .seeds import derive_seed

RATIO_FLOOR = 0.1
RATIO_CEIL = 1.0
VALIDITY_TOL = 1e-12


class InfeasibleBudgetError(ValueError):
    """Budget below the ratio floor: no valid configuration exists."""


class NoValidConfigError(RuntimeError):
    pass


class SearchSpaceTooLargeError(ValueError):
    pass


class RejectionRateError(RuntimeError):
    """Uniform sampling almost never satisfies the budget constraint."""


@dataclass(frozen=True)
class ConstraintSpec:
    """Target mean pruning ratio; a config is valid when mean <= budget."""

    budget: float

    def __post_init__(self):
        if self.budget < 0.0:
            raise ValueError(f"budget must be >= 0, got {self.budget}")


@dataclass(frozen=True)
class SearchBudget:
    simulations: int = 300
    eval_cap: int = 200
    max_children: int = 5
    exploration_c: float = math.sqrt(2.0)
    seed: int = 0

    def __post_init__(self):
        if self.simulations < 1:
            raise ValueError("simulations must be >= 1")
        if self.eval_cap < 1:
            raise ValueError("eval_cap must be >= 1")
        if self.max_children < 1:
            raise ValueError("max_children must be >= 1")


def perturbation_scale(depth: int) -> float:
    """Expansion noise half-width at a given tree depth: 0.1 * 0.9^depth."""
    return 0.1 * 0.9**depth


class SearchNode:
    """Tree node holding a complete config plus edge statistics.

    Edge statistics for the edge from the parent live on the child
    (``edge_visits`` / ``edge_reward_sum``); a node's visit count is the
    sum over its child edges plus one if the node itself was evaluated.
    """

    __slots__ = ("config", "depth", "children", "edge_visits", "edge_reward_sum",
                 "reward", "valid")

    def __init__(self, config, depth=0):
        self.config = np.asarray(config, dtype=np.float64)
        self.depth = depth
        self.children = []
        self.edge_visits = 0
        self.edge_reward_sum = 0.0
        self.reward = None
        self.valid = True

    @property
    def visits(self) -> int:
        n = sum(c.edge_visits for c in self.children)
        return n + (1 if self.reward is not None else 0)

    def __repr__(self):
        return (f"SearchNode(depth={self.depth}, children={len(self.children)}, "
                f"visits={self.visits}, reward={self.reward})")


def ucb_select(node: SearchNode, exploration_c: float) -> int:
    """Index of the child maximizing mean reward plus exploration bonus.

    Unvisited children rank as +inf; ties go to the lowest index.
    """
    if not node.children:
        raise NoValidConfigError("ucb_select on a node without children")
    n_parent = node.visits
    scores = np.empty(len(node.children))
    for i, child in enumerate(node.children):
        if child.edge_visits == 0:
            scores[i] = np.inf
        else:
            q = child.edge_reward_sum / child.edge_visits
            scores[i] = q + exploration_c * math.sqrt(
                math.log(n_parent) / child.edge_visits
            )
    return int(np.argmax(scores))


def expand(node: SearchNode, rng, max_children=5) -> SearchNode:
    """Append a child whose config perturbs every layer of the parent's.

    Per-layer noise is uniform in +-scale with the scale taken at the
    parent's depth, then clipped into [0.1, 1.0].
    """
    if len(node.children) >= max_children:
        raise NoValidConfigError(
            f"node already has {len(node.children)} children (max {max_children})"
        )
    scale = perturbation_scale(node.depth)
    delta = rng.uniform(-scale, scale, size=node.config.shape)
    child_config = np.clip(node.config + delta, RATIO_FLOOR, RATIO_CEIL)
    child = SearchNode(child_config, depth=node.depth + 1)
    node.children.append(child)
    return child


def check_valid(config, constraint: ConstraintSpec) -> bool:
    config = np.asarray(config, dtype=np.float64)
    if config.size == 0:
        raise ValueError("empty config")
    return bool(config.mean() <= constraint.budget + VALIDITY_TOL)


def backpropagate(path, reward: float) -> None:
    """Add one visit and the reward to every edge along the path."""
    for node in path[1:]:  # path[0] is the root; it has no incoming edge
        node.edge_visits += 1
        node.edge_reward_sum += reward


class ConfigEvaluator:
    """Memoized reward oracle: accuracy of the masked model on an eval set."""

    def __init__(self, model, table, eval_set):
        self.model = model
        self.table = table
        self.eval_set = eval_set
        self.memo = {}

    @property
    def n_unique(self) -> int:
        return len(self.memo)

    def __call__(self, config) -> float:
        config = np.asarray(config, dtype=np.float64)
        key = config.tobytes()
        if key in self.memo:
            return self.memo[key]
        masks = imp.config_to_masks(config, self.table, self.model.spec.hidden_widths)
        reward = tg.evaluate(self.model, masks, self.eval_set).accuracy
        self.memo[key] = reward
        return reward


def evaluate_config(config, model, table, eval_set, evaluator=None) -> float:
    """Reward for one config; pass an evaluator to share its memo table."""
    if evaluator is None:
        evaluator = ConfigEvaluator(model, table, eval_set)
    return evaluator(config)


@dataclass
class SearchResult:
    best_config: np.ndarray
    best_reward: float
    evaluations: list = field(default_factory=list)  # (config, reward, valid)
    seconds: float = 0.0
    n_model_evals: int = 0
    root: SearchNode | None = None


def run_search(model, table, eval_set, constraint: ConstraintSpec,
               budget: SearchBudget) -> SearchResult:
    """Full search loop: select, expand, evaluate, backpropagate.

    The root holds the uniform config clip(budget, 0.1, 1.0) and is
    evaluated first so it is always a fallback candidate.  Deterministic
    for a fixed budget seed.
    """
    if constraint.budget < RATIO_FLOOR:
        raise InfeasibleBudgetError(
            f"budget {constraint.budget} below the ratio floor {RATIO_FLOOR}; "
            f"every layer is always pruned by at least {RATIO_FLOOR:.0%}"
        )
    L = model.spec.num_layers
    rng = np.random.default_rng(budget.seed)
    evaluator = ConfigEvaluator(model, table, eval_set)
    t0 = time.perf_counter()
    evaluations = []

    def eval_node(node):
        node.valid = check_valid(node.config, constraint)
        node.reward = evaluator(node.config) if node.valid else 0.0
        evaluations.append((node.config.copy(), node.reward, node.valid))

    root = SearchNode(np.clip(np.full(L, constraint.budget), RATIO_FLOOR, RATIO_CEIL))
    eval_node(root)
    for _ in range(budget.simulations):
        if evaluator.n_unique >= budget.eval_cap:
            break
        path = [root]
        node = root
        while len(node.children) >= budget.max_children:
            node = node.children[ucb_select(node, budget.exploration_c)]
            path.append(node)
        child = expand(node, rng, budget.max_children)
        path.append(child)
        eval_node(child)
        backpropagate(path, child.reward)

    # Reward ties are common once accuracy saturates (it is quantized by the
    # eval-set size); break them toward the config nearest the root so the
    # selected optimum is the most regular one, which also keeps the emitted
    # supervision pairs smooth across budgets.
    best = None
    best_dist = None
    for config, reward, valid in evaluations:
        if not valid:
            continue
        dist = float(np.abs(config - root.config).sum())
        if best is None or reward > best[1] or (reward == best[1] and dist < best_dist):
            best = (config, reward)
            best_dist = dist
    if best is None:
        raise NoValidConfigError(
            f"no valid configuration found for budget {constraint.budget}; "
            f"increase simulations or choose a larger budget"
        )
    return SearchResult(
        best_config=best[0],
        best_reward=best[1],
        evaluations=evaluations,
        seconds=time.perf_counter() - t0,
        n_model_evals=evaluator.n_unique,
        root=root,
    )


def grid_values(step: float):
    """Ratio grid {0.1, 0.1+step, ...} strictly below 1.0."""
    values = []
    v = RATIO_FLOOR
    k = 0
    while v < RATIO_CEIL - 1e-9:
        values.append(round(v, 10))
        k += 1
        v = RATIO_FLOOR + k * step
    return values


def brute_force_oracle(model, table, eval_set, constraint: ConstraintSpec,
                       grid_step: float, evaluator=None):
    """Exhaustive search over the ratio grid; ties keep the lexicographically
    smallest config.  Refuses spaces above one million grid points."""
    if constraint.budget < RATIO_FLOOR:
        raise InfeasibleBudgetError(f"budget {constraint.budget} below {RATIO_FLOOR}")
    L = model.spec.num_layers
    values = grid_values(grid_step)
    if len(values) ** L > 1_000_000:
        raise SearchSpaceTooLargeError(
            f"{len(values)}^{L} grid configurations exceed the 1e6 cap"
        )
    if evaluator is None:
        evaluator = ConfigEvaluator(model, table, eval_set)
    best = None
    for combo in itertools.product(values, repeat=L):
        config = np.array(combo)
        if not check_valid(config, constraint):
            continue
        reward = evaluator(config)
        if best is None or reward > best[1]:
            best = (config, reward)
    if best is None:
        raise NoValidConfigError(f"no grid config satisfies budget {constraint.budget}")
    return best


def random_search_baseline(model, table, eval_set, constraint: ConstraintSpec,
                           n_samples: int, seed: int):
    """Best of n uniform configs rejection-sampled to the budget constraint."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    L = model.spec.num_layers
    rng = np.random.default_rng(seed)
    evaluator = ConfigEvaluator(model, table, eval_set)
    accepted = []
    draws = 0
    while len(accepted) < n_samples:
        batch = rng.uniform(RATIO_FLOOR, RATIO_CEIL, size=(512, L))
        draws += len(batch)
        ok = batch.mean(axis=1) <= constraint.budget + VALIDITY_TOL
        accepted.extend(batch[ok])
        if draws >= 10_000 and len(accepted) / draws < 0.001:
            raise RejectionRateError(
                f"rejection rate above 99.9% for budget {constraint.budget} "
                f"({len(accepted)}/{draws} accepted)"
            )
    best = None
    for config in accepted[:n_samples]:
        reward = evaluator(config)
        if best is None or reward > best[1]:
            best = (config, reward)
    return best


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def default_budget_grid():
    """Budgets 0.10 to 0.70 in steps of 0.025 (25 values)."""
    return [(100 + 25 * i) / 1000.0 for i in range(25)]


def seed_for_budget(base_seed: int, b: float) -> int:
    """Per-budget stream seed; shared by dataset generation and re-runs of
    a single budget so both produce identical search results."""
    return derive_seed(base_seed, f"search:{b:.6f}")


def generate_dataset(model, table, eval_set, budget_grid, budget: SearchBudget):
    """One search per budget; emits (budget, best config, reward) samples
    sorted by budget ascending.  Per-budget seeds derive from the budget
    value so that later re-runs of a single budget reproduce its sample."""
    from .predictor import TrainingSample

    if len(budget_grid) == 0:
        raise ValueError("budget grid must be non-empty")
    samples = []
    for b in sorted(float(x) for x in budget_grid):
        per_b = replace(budget, seed=seed_for_budget(budget.seed, b))
        result = run_search(model, table, eval_set, ConstraintSpec(b), per_b)
        samples.append(
            TrainingSample(b=b, theta=result.best_config, source_reward=result.best_reward)
        )
    return samples


def dataset_to_doc(samples, model_fingerprint: str, metric: str) -> dict:
    return {
        "model_fingerprint": model_fingerprint,
        "metric": metric,
        "samples": [
            {
                "b": float(s.b),
                "theta": [float(v) for v in s.theta],
                "reward": float(s.source_reward),
            }
            for s in samples
        ],
    }


def dataset_from_doc(doc: dict):
    from .predictor import TrainingSample

    return [
        TrainingSample(b=s["b"], theta=np.array(s["theta"]), source_reward=s["reward"])
        for s in doc["samples"]
    ]


def save_dataset(path, samples, model_fingerprint: str, metric: str):
    with open(path, "w") as fh:
        json.dump(dataset_to_doc(samples, model_fingerprint, metric), fh)


def load_dataset(path):
    with open(path) as fh:
        return dataset_from_doc(json.load(fh))
