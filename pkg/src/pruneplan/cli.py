"""Command line interface over the pipeline stages.

Each subcommand writes its artifacts plus an updated manifest under the
output directory and exits 0 on success.  Failures print one JSON object
to stderr ({"error": kind, "message": text}) and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__, mcts, pipeline, predictor, target


def _parse_b_grid(text: str):
    """start:stop:step, stop inclusive within float tolerance."""
    try:
        start, stop, step = (float(x) for x in text.split(":"))
    except ValueError as err:
        raise pipeline.PipelineError(
            "bad-flag", f"--b-grid must look like 0.1:0.7:0.025, got {text!r}"
        ) from err
    if step <= 0 or stop < start:
        raise pipeline.PipelineError("bad-flag", f"degenerate grid {text!r}")
    values = []
    k = 0
    while True:
        v = start + k * step
        if v > stop + 1e-9:
            break
        values.append(round(v, 9))
        k += 1
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pruneplan",
        description="Search layer-wise pruning ratios under a budget and train "
                    "a predictor that emits them in one shot.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="build and train the target model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-spec", help="JSON file with a model spec")
    p.add_argument("--out", default="runs")

    p = sub.add_parser("calibrate", help="compute neuron importance scores")
    p.add_argument("--metric", choices=["activation-l2", "magnitude", "wanda"],
                   default="activation-l2")
    p.add_argument("--out", default="runs")

    p = sub.add_parser("search", help="tree search at one budget")
    p.add_argument("--b", type=float, required=True)
    p.add_argument("--simulations", type=int, default=300)
    p.add_argument("--eval-cap", type=int, default=200)
    p.add_argument("--trace", action="store_true", help="dump a JSONL eval trace")
    p.add_argument("--out", default="runs")

    p = sub.add_parser("gen-dataset", help="search every budget in a grid")
    p.add_argument("--b-grid", default="0.1:0.7:0.025")
    p.add_argument("--simulations", type=int, default=300)
    p.add_argument("--eval-cap", type=int, default=200)
    p.add_argument("--out", default="runs")

    p = sub.add_parser("train-predictor", help="fit the budget-to-ratios predictor")
    p.add_argument("--backbone", choices=list(predictor.BACKBONES),
                   default="transformer-ar")
    p.add_argument("--epochs", type=int, default=64)
    p.add_argument("--batch-size", type=int, default=40)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--out", default="runs")

    p = sub.add_parser("predict", help="one-shot prediction at a budget")
    p.add_argument("--b", type=float, required=True)
    p.add_argument("--out", default="runs")

    p = sub.add_parser("bench", help="compare strategies at a budget")
    p.add_argument("--b", type=float, required=True)
    p.add_argument("--methods", default=",".join(pipeline.BENCH_METHODS))
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--out", default="runs")
    return parser


def _run(args) -> int:
    if args.command == "pretrain":
        spec = None
        if args.model_spec:
            with open(args.model_spec) as fh:
                spec = json.load(fh)
        out = pipeline.cmd_pretrain(args.out, seed=args.seed, model_spec=spec)
        print(f"train accuracy {out['train_accuracy']:.4f}, "
              f"eval accuracy {out['eval_accuracy']:.4f}")
    elif args.command == "calibrate":
        out = pipeline.cmd_calibrate(args.out, metric=args.metric)
        print(f"scored {out['layers']} layers with {out['metric']}")
    elif args.command == "search":
        out = pipeline.cmd_search(args.out, b=args.b, simulations=args.simulations,
                                  eval_cap=args.eval_cap, trace=args.trace)
        print(f"b={args.b}: reward {out['reward']:.4f} "
              f"after {out['n_model_evals']} evaluations")
    elif args.command == "gen-dataset":
        out = pipeline.cmd_gen_dataset(
            args.out, b_grid=_parse_b_grid(args.b_grid),
            simulations=args.simulations, eval_cap=args.eval_cap,
        )
        print(f"dataset with {out['n_samples']} samples")
    elif args.command == "train-predictor":
        out = pipeline.cmd_train_predictor(
            args.out, backbone=args.backbone, epochs=args.epochs,
            batch_size=args.batch_size, learning_rate=args.lr,
        )
        loss = "n/a" if out["final_loss"] is None else f"{out['final_loss']:.6f}"
        print(f"final training loss {loss}")
    elif args.command == "predict":
        out = pipeline.cmd_predict(args.out, b=args.b)
        theta = ", ".join(f"{v:.3f}" for v in out["theta"])
        flag = "" if out["trained"] else " (untrained predictor)"
        print(f"b={args.b}: [{theta}] in {out['inference_seconds'] * 1e3:.2f} ms{flag}")
    elif args.command == "bench":
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        out = pipeline.cmd_bench(args.out, b=args.b, methods=methods,
                                 repetitions=args.repetitions)
        print(pipeline.BENCH_HEADER)
        for r in out["rows"]:
            print(f"{r['method']},{r['b']!r},{r['accuracy']:.4f},{r['acc_drop']:.4f},"
                  f"{r['strategy_seconds']:.6f},{r['speedup']:.3f}")
        for w in out["warnings"]:
            print(f"warning: {w}", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except pipeline.PipelineError as err:
        print(json.dumps({"error": err.kind, "message": str(err)}), file=sys.stderr)
        return 2
    except (mcts.InfeasibleBudgetError, mcts.NoValidConfigError,
            mcts.RejectionRateError, mcts.SearchSpaceTooLargeError) as err:
        print(json.dumps({"error": "search-error", "message": str(err)}), file=sys.stderr)
        return 2
    except (target.TrainingDivergedError, predictor.TrainingDivergedError) as err:
        print(json.dumps({"error": "training-diverged", "message": str(err)}), file=sys.stderr)
        return 2
    except (OSError, ValueError) as err:
        print(json.dumps({"error": "invalid-input", "message": str(err)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
