"""End-to-end orchestration with reproducible artifacts on disk.

Each stage writes its artifact (atomically) plus an updated run manifest.
Downstream artifacts embed the SHA-256 of their inputs, and stages refuse
to run when the chain does not match.  All randomness derives from the
manifest seed through named streams, so one seed reproduces every
artifact byte for byte; wall-clock timings never enter hashed artifacts.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import statistics
import time
from dataclasses import replace

import numpy as np

from . import __version__
from . import importance as imp
from . import mcts
from . import predictor as pred
from . import target as tg
from .seeds import derive_seed

DEFAULT_PRETRAIN_EPOCHS = 30
DEFAULT_PRETRAIN_BATCH = 64
DEFAULT_PRETRAIN_LR = 1e-3
TRAIN_SAMPLES = 2000
EVAL_SAMPLES = 500
CALIBRATION_SAMPLES = 500

BENCH_METHODS = ("lop", "mcts", "magnitude", "wanda", "uniform", "random")
BENCH_HEADER = "method,b,accuracy,acc_drop,strategy_seconds,speedup"


class PipelineError(RuntimeError):
    """Failure with a machine-readable kind for the CLI error channel."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# ---------------------------------------------------------------------------
# files and manifest
# ---------------------------------------------------------------------------


def write_text_atomic(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json_atomic(path: str, doc) -> None:
    write_text_atomic(path, json.dumps(doc, sort_keys=True, separators=(",", ":")))


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def manifest_path(out_dir: str) -> str:
    return os.path.join(out_dir, "manifest.json")


def load_manifest(out_dir: str) -> dict:
    path = manifest_path(out_dir)
    if not os.path.exists(path):
        raise PipelineError("missing-manifest", f"no manifest at {path}; run pretrain first")
    with open(path) as fh:
        return json.load(fh)


def save_manifest(out_dir: str, manifest: dict) -> None:
    write_json_atomic(manifest_path(out_dir), manifest)


def _record_artifact(out_dir, manifest, name, filename, hashed=True):
    path = os.path.join(out_dir, filename)
    entry = {"path": filename}
    if hashed:
        entry["sha256"] = file_sha256(path)
    manifest.setdefault("artifacts", {})[name] = entry
    save_manifest(out_dir, manifest)
    return entry


def _artifact_path(out_dir, manifest, name):
    art = manifest.get("artifacts", {})
    if name not in art:
        raise PipelineError(
            "missing-artifact", f"artifact {name!r} not found in manifest; run earlier stages"
        )
    path = os.path.join(out_dir, art[name]["path"])
    if not os.path.exists(path):
        raise PipelineError("missing-file", f"artifact file {path} is missing")
    return path


def _verify_fingerprint(out_dir, manifest, name, expected, what):
    actual = file_sha256(_artifact_path(out_dir, manifest, name))
    if actual != expected:
        raise PipelineError(
            "fingerprint-mismatch",
            f"{what}: expected {name} sha256 {expected}, found {actual}; "
            f"artifacts are out of sync, regenerate them in order",
        )


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------


def cmd_pretrain(out_dir: str, seed: int = 0, model_spec: dict | None = None,
                 epochs: int = DEFAULT_PRETRAIN_EPOCHS,
                 batch_size: int = DEFAULT_PRETRAIN_BATCH,
                 learning_rate: float = DEFAULT_PRETRAIN_LR) -> dict:
    """Build, train and store the target model plus its data splits."""
    os.makedirs(out_dir, exist_ok=True)
    spec = tg.TargetModelSpec.from_dict(model_spec) if model_spec else tg.default_spec()
    train_set = tg.make_blobs(
        TRAIN_SAMPLES, spec.input_dim, spec.num_classes, seed=derive_seed(seed, "data.train")
    )
    eval_set = tg.make_blobs(
        EVAL_SAMPLES, spec.input_dim, spec.num_classes, seed=derive_seed(seed, "data.eval")
    )
    model = tg.build_model(spec, derive_seed(seed, "model"))
    model, train_acc = tg.pretrain(
        model, train_set, epochs, batch_size, learning_rate,
        seed=derive_seed(seed, "train.model"),
    )
    eval_acc = tg.evaluate(model, None, eval_set).accuracy

    manifest = {
        "tool_version": __version__,
        "seed": seed,
        "model_spec": spec.to_dict(),
        "pretrain": {"epochs": epochs, "batch_size": batch_size,
                     "learning_rate": learning_rate},
        "artifacts": {},
    }
    write_json_atomic(os.path.join(out_dir, "model.json"), tg.model_to_doc(model))
    write_json_atomic(os.path.join(out_dir, "train_set.json"), train_set.to_dict())
    write_json_atomic(os.path.join(out_dir, "eval_set.json"), eval_set.to_dict())
    _record_artifact(out_dir, manifest, "model", "model.json")
    _record_artifact(out_dir, manifest, "train_set", "train_set.json")
    _record_artifact(out_dir, manifest, "eval_set", "eval_set.json")
    return {"train_accuracy": train_acc, "eval_accuracy": eval_acc,
            "model_fingerprint": manifest["artifacts"]["model"]["sha256"]}


def _load_stage_inputs(out_dir, manifest):
    model = tg.load_model(_artifact_path(out_dir, manifest, "model"))
    eval_set = tg.load_calibration(_artifact_path(out_dir, manifest, "eval_set"))
    return model, eval_set


def cmd_calibrate(out_dir: str, metric: str = "activation-l2") -> dict:
    """Score neuron importance on a calibration subset of the train split."""
    if metric not in imp.METRICS:
        raise PipelineError("bad-metric", f"metric must be one of {imp.METRICS}")
    manifest = load_manifest(out_dir)
    model = tg.load_model(_artifact_path(out_dir, manifest, "model"))
    train_set = tg.load_calibration(_artifact_path(out_dir, manifest, "train_set"))
    rng = np.random.default_rng(derive_seed(manifest["seed"], "data.calib"))
    n = min(CALIBRATION_SAMPLES, len(train_set))
    idx = np.sort(rng.choice(len(train_set), size=n, replace=False))
    calib = tg.CalibrationSet(train_set.inputs[idx], train_set.labels[idx])
    traces = tg.collect_activations(model, calib)
    if metric == "activation-l2":
        table = imp.score_activation_l2(traces)
    elif metric == "magnitude":
        table = imp.score_magnitude(model)
    else:
        table = imp.score_wanda(model, traces)
    write_json_atomic(os.path.join(out_dir, "calib_set.json"), calib.to_dict())
    write_json_atomic(os.path.join(out_dir, "importance.json"), table.to_dict())
    manifest["metric"] = metric
    _record_artifact(out_dir, manifest, "calib_set", "calib_set.json")
    _record_artifact(out_dir, manifest, "importance", "importance.json")
    return {"metric": metric, "layers": len(table.layers)}


def _search_inputs(out_dir, manifest):
    model, eval_set = _load_stage_inputs(out_dir, manifest)
    table = imp.load_importance(_artifact_path(out_dir, manifest, "importance"))
    return model, table, eval_set


def cmd_search(out_dir: str, b: float, simulations: int = 300, eval_cap: int = 200,
               trace: bool = False) -> dict:
    """One tree search at a single budget; optional JSONL evaluation trace."""
    manifest = load_manifest(out_dir)
    model, table, eval_set = _search_inputs(out_dir, manifest)
    budget = mcts.SearchBudget(
        simulations=simulations, eval_cap=eval_cap,
        seed=mcts.seed_for_budget(derive_seed(manifest["seed"], "search"), b),
    )
    result = mcts.run_search(model, table, eval_set, mcts.ConstraintSpec(b), budget)
    name = f"search_b{b:.3f}"
    doc = {
        "b": b,
        "theta": [float(v) for v in result.best_config],
        "reward": result.best_reward,
        "n_model_evals": result.n_model_evals,
        "simulations": simulations,
        "eval_cap": eval_cap,
    }
    write_json_atomic(os.path.join(out_dir, f"{name}.json"), doc)
    _record_artifact(out_dir, manifest, name, f"{name}.json")
    if trace:
        lines = [
            json.dumps(
                {"theta": [float(v) for v in c], "reward": r, "valid": v},
                sort_keys=True,
            )
            for c, r, v in result.evaluations
        ]
        write_text_atomic(os.path.join(out_dir, f"{name}.trace.jsonl"),
                          "\n".join(lines) + "\n")
        _record_artifact(out_dir, manifest, f"{name}.trace", f"{name}.trace.jsonl")
    return doc


def cmd_gen_dataset(out_dir: str, b_grid=None, simulations: int = 300,
                    eval_cap: int = 200) -> dict:
    """One search per budget in the grid; emits the supervision dataset."""
    manifest = load_manifest(out_dir)
    model, table, eval_set = _search_inputs(out_dir, manifest)
    grid = mcts.default_budget_grid() if b_grid is None else [float(b) for b in b_grid]
    budget = mcts.SearchBudget(
        simulations=simulations, eval_cap=eval_cap,
        seed=derive_seed(manifest["seed"], "search"),
    )
    samples = mcts.generate_dataset(model, table, eval_set, grid, budget)
    fingerprint = manifest["artifacts"]["model"]["sha256"]
    write_json_atomic(
        os.path.join(out_dir, "dataset.json"),
        mcts.dataset_to_doc(samples, fingerprint, manifest.get("metric", "activation-l2")),
    )
    manifest["b_grid"] = grid
    manifest["search_budget"] = {"simulations": simulations, "eval_cap": eval_cap}
    _record_artifact(out_dir, manifest, "dataset", "dataset.json")
    return {"n_samples": len(samples), "b_grid": grid}


def cmd_train_predictor(out_dir: str, backbone: str = "transformer-ar",
                        epochs: int = 64, batch_size: int = 40,
                        learning_rate: float = 1e-3) -> dict:
    """Fit the budget-to-ratios predictor on the search dataset."""
    manifest = load_manifest(out_dir)
    dataset_path = _artifact_path(out_dir, manifest, "dataset")
    with open(dataset_path) as fh:
        dataset_doc = json.load(fh)
    _verify_fingerprint(out_dir, manifest, "model", dataset_doc["model_fingerprint"],
                        "dataset was generated from a different model")
    samples = mcts.dataset_from_doc(dataset_doc)
    num_positions = len(samples[0].theta)
    config = pred.PredictorConfig(backbone=backbone, num_positions=num_positions)
    train_config = pred.TrainConfig(
        batch_size=batch_size, epochs=epochs, learning_rate=learning_rate,
        seed=derive_seed(manifest["seed"], "train"),
    )
    params, curve = pred.train(samples, config, train_config)
    params.dataset_fingerprint = file_sha256(dataset_path)
    write_json_atomic(os.path.join(out_dir, "predictor.json"), pred.params_to_doc(params))
    write_text_atomic(
        os.path.join(out_dir, "loss_curve.csv"),
        "epoch,mean_loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(curve)),
    )
    manifest["predictor_config"] = config.to_dict()
    manifest["train_config"] = train_config.to_dict()
    _record_artifact(out_dir, manifest, "predictor", "predictor.json")
    _record_artifact(out_dir, manifest, "loss_curve", "loss_curve.csv")
    return {
        "final_loss": curve[-1] if curve else None,
        "epochs": epochs,
        "trained": params.trained,
    }


def cmd_predict(out_dir: str, b: float) -> dict:
    """One-shot prediction at a budget, projected into the feasible set."""
    manifest = load_manifest(out_dir)
    predictor_path = _artifact_path(out_dir, manifest, "predictor")
    params = pred.load_params(predictor_path)
    if params.dataset_fingerprint is not None:
        _verify_fingerprint(out_dir, manifest, "dataset", params.dataset_fingerprint,
                            "predictor was trained on a different dataset")
    result = pred.predict(b, params)
    projected = pred.project_to_constraint(result.theta, b)
    name = f"prediction_b{b:.3f}"
    doc = {
        "b": b,
        "theta_raw": [float(v) for v in result.theta],
        "theta": [float(v) for v in projected],
        "trained": params.trained,
        "predictor_fingerprint": file_sha256(predictor_path),
    }
    write_json_atomic(os.path.join(out_dir, f"{name}.json"), doc)
    _record_artifact(out_dir, manifest, name, f"{name}.json")
    return {**doc, "inference_seconds": result.seconds}


def baseline_uniform(b: float, num_layers: int) -> np.ndarray:
    """Every layer pruned at exactly the budget ratio."""
    if b < mcts.RATIO_FLOOR:
        raise mcts.InfeasibleBudgetError(
            f"budget {b} below the ratio floor {mcts.RATIO_FLOOR}"
        )
    if b > mcts.RATIO_CEIL:
        raise ValueError(f"budget {b} above {mcts.RATIO_CEIL}")
    return np.full(num_layers, float(b))


def measure_speedup(producers: dict, b: float, repetitions: int = 3,
                    reference: str = "mcts") -> list[dict]:
    """Median wall-clock per strategy producer and speedup vs the reference.

    A zero median triggers a retry with doubled repetitions, up to five
    attempts.
    """
    if reference not in producers:
        raise ValueError(f"reference {reference!r} not among producers")
    results = {}
    for name, fn in producers.items():
        reps = max(1, repetitions)
        for _attempt in range(5):
            times = []
            config = None
            for _ in range(reps):
                t0 = time.perf_counter()
                config = fn()
                times.append(time.perf_counter() - t0)
            median = statistics.median(times)
            if median > 0.0:
                break
            reps *= 2
        else:
            raise PipelineError("zero-time", f"strategy {name!r} measured zero time")
        results[name] = {"config": np.asarray(config), "seconds": median}
    ref_seconds = results[reference]["seconds"]
    rows = []
    for name, r in results.items():
        rows.append(
            {
                "method": name,
                "b": b,
                "strategy_seconds": r["seconds"],
                "speedup": ref_seconds / r["seconds"],
                "config": r["config"],
            }
        )
    return rows


def cmd_bench(out_dir: str, b: float, methods=BENCH_METHODS,
              repetitions: int = 3) -> dict:
    """Accuracy/time comparison of strategies at one budget.

    The tree search is always run as the timing reference.  Scoring-metric
    baselines (magnitude, wanda) use a uniform ratio vector but their own
    importance tables for neuron selection.
    """
    methods = list(methods)
    unknown = [m for m in methods if m not in BENCH_METHODS]
    if unknown:
        raise PipelineError("bad-method", f"unknown methods {unknown}")
    manifest = load_manifest(out_dir)
    model, table, eval_set = _search_inputs(out_dir, manifest)
    L = model.spec.num_layers
    warnings = []

    search_budget = manifest.get("search_budget", {})
    budget = mcts.SearchBudget(
        simulations=search_budget.get("simulations", 300),
        eval_cap=search_budget.get("eval_cap", 200),
        seed=mcts.seed_for_budget(derive_seed(manifest["seed"], "search"), b),
    )

    def run_mcts():
        return mcts.run_search(model, table, eval_set, mcts.ConstraintSpec(b), budget)

    first = run_mcts()
    n_search_evals = first.n_model_evals

    producers = {"mcts": lambda: run_mcts().best_config}
    method_tables = {m: table for m in methods}
    if "lop" in methods:
        params = pred.load_params(_artifact_path(out_dir, manifest, "predictor"))
        if not params.trained:
            warnings.append("lop predictor is untrained")
        producers["lop"] = lambda: pred.project_to_constraint(
            pred.forward_backbone(b, params), b
        )
    if "uniform" in methods:
        producers["uniform"] = lambda: baseline_uniform(b, L)
    if "magnitude" in methods or "wanda" in methods:
        calib = tg.load_calibration(_artifact_path(out_dir, manifest, "calib_set"))
        traces = tg.collect_activations(model, calib)
        if "magnitude" in methods:
            method_tables["magnitude"] = imp.score_magnitude(model)
            producers["magnitude"] = lambda: baseline_uniform(b, L)
        if "wanda" in methods:
            method_tables["wanda"] = imp.score_wanda(model, traces)
            producers["wanda"] = lambda: baseline_uniform(b, L)
    if "random" in methods:
        rand_seed = derive_seed(manifest["seed"], f"bench.random:{b:.6f}")

        def run_random():
            return mcts.random_search_baseline(
                model, table, eval_set, mcts.ConstraintSpec(b), n_search_evals, rand_seed
            )[0]

        try:  # probe once: uniform sampling may be infeasible at tight budgets
            run_random()
            producers["random"] = run_random
        except mcts.RejectionRateError:
            pass

    timing_rows = measure_speedup(producers, b, repetitions=repetitions)
    dense_acc = tg.evaluate(model, None, eval_set).accuracy

    dataset_reward = None
    if "dataset" in manifest.get("artifacts", {}):
        with open(_artifact_path(out_dir, manifest, "dataset")) as fh:
            for s in json.load(fh)["samples"]:
                if abs(s["b"] - b) < 1e-9:
                    dataset_reward = s["reward"]

    rows = []
    order = {m: i for i, m in enumerate(["mcts"] + [m for m in methods if m != "mcts"])}
    for trow in sorted(timing_rows, key=lambda r: order.get(r["method"], 99)):
        name = trow["method"]
        if name == "mcts" and "mcts" not in methods:
            continue  # ran only as the timing reference
        masks = imp.config_to_masks(trow["config"], method_tables.get(name, table),
                                    model.spec.hidden_widths)
        acc = tg.evaluate(model, masks, eval_set).accuracy
        if name == "mcts":
            if acc != first.best_reward:
                raise PipelineError(
                    "reward-drift",
                    f"re-evaluated search accuracy {acc} != recorded {first.best_reward}",
                )
            if dataset_reward is not None and acc != dataset_reward:
                raise PipelineError(
                    "reward-drift",
                    f"bench search accuracy {acc} != dataset reward {dataset_reward} "
                    f"for b={b}",
                )
        rows.append(
            {
                "method": name,
                "b": b,
                "accuracy": acc,
                "acc_drop": dense_acc - acc,
                "strategy_seconds": trow["strategy_seconds"],
                "speedup": trow["speedup"],
            }
        )

    requested_random = "random" in methods and "random" not in producers
    if requested_random:
        warnings.append(
            f"random-search baseline infeasible at b={b}: rejection rate above 99.9%"
        )

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(BENCH_HEADER.split(","))
    for r in rows:
        writer.writerow(
            [r["method"], repr(r["b"]), repr(r["accuracy"]), repr(r["acc_drop"]),
             f"{r['strategy_seconds']:.6f}", f"{r['speedup']:.3f}"]
        )
    name = f"bench_b{b:.3f}"
    write_text_atomic(os.path.join(out_dir, f"{name}.csv"), buf.getvalue())
    write_json_atomic(
        os.path.join(out_dir, f"{name}.meta.json"),
        {"reference": "mcts", "n_search_evals": n_search_evals,
         "repetitions": repetitions, "warnings": warnings},
    )
    # timing varies run to run, so bench artifacts are recorded unhashed
    _record_artifact(out_dir, manifest, name, f"{name}.csv", hashed=False)
    _record_artifact(out_dir, manifest, f"{name}.meta", f"{name}.meta.json", hashed=False)
    return {"rows": rows, "warnings": warnings, "dense_accuracy": dense_acc}
