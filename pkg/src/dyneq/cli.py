"""Command-line interface.

Subcommands: gen, train, eval, bench, oracle-check. Every run that writes
output also drops a run.json capturing the resolved arguments, the package
version, and the active kernel backend; the file contains no timestamps so
identical invocations produce identical bytes. Any subcommand accepts
``--config file.json`` holding default argument values (a previous run.json
works as-is); flags given on the command line override the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DyneqError
from .graphs import (
    Dataset,
    gen_toy_binary,
    gen_toy_longrange,
    load_dataset,
    normalize_01,
    save_dataset,
    split_dataset,
)
from .harness import TrainConfig, bench, evaluate, oracle_check, train
from .kernels import BACKEND
from .model import FixedPointConfig, load_params, save_params


def _write_run_json(out_dir, command, args):
    payload = {
        "command": command,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "package_version": __version__,
        "backend": BACKEND,
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _add_split_flags(p):
    p.add_argument(
        "--split",
        choices=["none", "transductive", "inductive"],
        default="none",
        help="how to partition the data (default: train on every labeled node)",
    )
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument(
        "--split-ratios",
        default="0.7,0.1,0.2",
        help="comma-separated train,val,test fractions summing to 1",
    )


def _resolve_split(dataset, args):
    if args.split == "none":
        return None
    ratios = tuple(float(x) for x in args.split_ratios.split(","))
    if len(ratios) != 3:
        raise ValueError("--split-ratios needs exactly three comma-separated values")
    return split_dataset(dataset, args.split, ratios=ratios, seed=args.split_seed)


def _maybe_normalize(dataset, split, enabled):
    if not enabled:
        return dataset
    if split is None:
        return normalize_01(dataset)
    if split.mode == "transductive":
        return normalize_01(dataset, train_nodes=split.train)
    return normalize_01(dataset, train_graphs=split.train)


def cmd_gen(args):
    if args.name == "toy-longrange":
        graph = gen_toy_longrange(
            args.num_snapshots,
            num_classes=args.num_classes,
            label_snapshot=args.label_snapshot,
            seed=args.seed,
        )
    elif args.name == "toy-binary":
        graph = gen_toy_binary(args.num_snapshots, seed=args.seed)
    else:
        raise ValueError(f"unknown generator {args.name!r}")
    dataset = Dataset([graph], graph.task, graph.target_dim)
    save_dataset(dataset, args.out)
    _write_run_json(args.out, "gen", args)
    print(
        f"wrote {dataset.num_graphs} graph(s) with n={graph.num_nodes} "
        f"T={graph.num_snapshots} l={graph.feat_dim} to {args.out}"
    )
    return 0


def _val_score(metrics, task):
    if task == "classification":
        return metrics["accuracy"]
    return -metrics["mse"]


def cmd_train(args):
    dataset = load_dataset(args.data)
    split = _resolve_split(dataset, args)
    dataset = _maybe_normalize(dataset, split, args.normalize)
    cfg = TrainConfig(
        trainer=args.trainer,
        steps=args.steps,
        lr=args.lr,
        damping=args.damping,
        v_lr=args.v_lr,
        grad_avg=args.grad_avg,
        contraction_target=args.contraction_target,
        hidden_dim=args.hidden_dim,
        activation=args.activation,
        tied_weights=args.tied_weights,
        shared_input_map=not args.untied_input_maps,
        seed=args.seed,
        tol=args.tol,
        max_sweeps=args.max_sweeps,
        gradient_route="forward" if args.forward_gradients else "adjoint",
        allow_large_sensitivity=args.forward_gradients,
        target_train_accuracy=args.target_train_acc,
        log_every=args.log_every,
        batch_size=args.batch_size,
        random_block_init=args.random_block_init,
    )
    eval_cfg = FixedPointConfig(tol=args.tol, max_sweeps=args.max_sweeps)

    # Periodic validation: remember the parameters that scored best on the
    # held-out validation portion, and prefer them over the final step's.
    best = {"score": None, "params": None, "step": None}
    hook = None
    if split is not None and len(split.val):

        def hook(step, params, row):
            if step % args.val_every and step != cfg.steps:
                return
            metrics = evaluate(
                dataset, params, split=split, which="val", solver_config=eval_cfg
            )
            score = _val_score(metrics, dataset.task)
            if best["score"] is None or score > best["score"]:
                best.update(score=score, params=params.copy(), step=step)

    result = train(dataset, cfg, split=split, post_step_hook=hook)
    chosen = result.params if best["params"] is None else best["params"]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.csv", "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "residual", "wall_ms"])
        for row in result.log:
            wall = 0.0 if args.deterministic else row["wall_ms"]
            writer.writerow([row["step"], repr(row["loss"]), repr(row["residual"]), repr(wall)])
    save_params(chosen, out / "params.npz")
    which = "val" if (split is not None and len(split.val)) else "all"
    metrics = evaluate(dataset, chosen, split=split, which=which, solver_config=eval_cfg)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_run_json(out, "train", args)
    last = result.log[-1] if result.log else {"loss": float("nan"), "residual": float("nan")}
    tag = " (stopped early)" if result.stopped_early else ""
    if best["step"] is not None:
        tag += f"; kept step-{best['step']} params (best validation)"
    print(
        f"trained {args.trainer} for {result.steps_run} step(s){tag}: "
        f"loss={last['loss']:.6f} residual={last['residual']:.3e}"
    )
    return 0


def _write_embeddings_csv(path, embeddings):
    """One row per node (graphs stacked in evaluation order), one column
    per embedding dimension."""
    dim = embeddings[0].shape[0]
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"dim_{i}" for i in range(dim)])
        for Z in embeddings:
            for col in Z.T:
                writer.writerow([repr(float(x)) for x in col])


def cmd_eval(args):
    dataset = load_dataset(args.data)
    split = _resolve_split(dataset, args)
    dataset = _maybe_normalize(dataset, split, args.normalize)
    params = load_params(args.params)
    which = args.which if split is not None else "all"
    metrics, embeddings = evaluate(
        dataset,
        params,
        split=split,
        which=which,
        equilibrium=not args.no_equilibrium,
        solver_config=FixedPointConfig(tol=args.tol, max_sweeps=args.max_sweeps),
        with_embeddings=True,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_embeddings_csv(out / "embeddings.csv", embeddings)
    _write_run_json(out, "eval", args)
    for key in sorted(metrics):
        print(f"{key}: {metrics[key]}")
    return 0


def cmd_bench(args):
    sizes = tuple(int(x) for x in args.sizes.split(","))
    trainers = tuple(args.trainers.split(","))
    rows, slopes = bench(
        sizes=sizes,
        trainers=trainers,
        oracle=args.oracle,
        hidden_dim=args.hidden_dim,
        num_snapshots=args.num_snapshots,
        timed_steps=args.timed_steps,
        warmup_steps=args.warmup_steps,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "timings.csv", "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trainer", "num_nodes", "step_ms", "backend"])
        for r in rows:
            writer.writerow([r.trainer, r.num_nodes, repr(r.step_ms), r.backend])
    (out / "slopes.json").write_text(
        json.dumps({"slopes": slopes, "sizes": list(sizes)}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    _write_run_json(out, "bench", args)
    print(f"{'trainer':<10} {'n':>6} {'step_ms':>12}  backend")
    for r in rows:
        print(f"{r.trainer:<10} {r.num_nodes:>6} {r.step_ms:>12.3f}  {r.backend}")
    for tr, slope in slopes.items():
        print(f"slope[{tr}] = {slope:.3f}")
    return 0


def cmd_oracle_check(args):
    ok, rows = oracle_check(seed=args.seed)
    for row in rows:
        status = "PASS" if row["ok"] else "FAIL"
        print(f"{status} {row['name']}: diff={row['diff']:.3e} tol={row['tol']:.1e}")
    print("all checks passed" if ok else "some checks FAILED")
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dyneq",
        description="Equilibrium models over dynamic graph snapshots",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    by_name = {}

    p = by_name["gen"] = sub.add_parser("gen", help="generate a synthetic dataset directory")
    p.add_argument("name", choices=["toy-longrange", "toy-binary"])
    p.add_argument("--out", required=True)
    p.add_argument("--num-snapshots", "--T", dest="num_snapshots", type=int, required=True)
    p.add_argument("--num-classes", type=int, default=10, help="toy-longrange only")
    p.add_argument("--label-snapshot", type=int, default=1, help="toy-longrange only")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    p = by_name["train"] = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trainer", choices=["bilevel", "sgd", "noloop"], default="bilevel")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--damping", type=float, default=0.9, help="embedding-estimate step size")
    p.add_argument("--v-lr", type=float, default=0.01, help="curvature-direction step size")
    p.add_argument("--grad-avg", type=float, default=0.9, help="hypergradient momentum factor")
    p.add_argument("--contraction-target", type=float, default=0.95)
    p.add_argument("--hidden-dim", type=int, default=16)
    p.add_argument("--activation", default="tanh")
    p.add_argument("--tied-weights", action="store_true")
    p.add_argument("--untied-input-maps", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-sweeps", type=int, default=500)
    p.add_argument(
        "--forward-gradients",
        action="store_true",
        help="use the forward-sensitivity gradient route (slow; for verification)",
    )
    p.add_argument("--target-train-acc", type=float, default=None)
    p.add_argument("--log-every", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=None, help="graphs per step (default: all)")
    p.add_argument("--random-block-init", action="store_true", help="random instead of zero running estimates")
    p.add_argument("--val-every", type=int, default=10, help="steps between validation passes")
    p.add_argument("--normalize", action="store_true", help="min-max scale features and edge weights")
    p.add_argument("--deterministic", action="store_true", help="write wall_ms as 0 for byte-identical logs")
    _add_split_flags(p)
    p.set_defaults(func=cmd_train)

    p = by_name["eval"] = sub.add_parser("eval", help="evaluate saved parameters on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--which", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--no-equilibrium", action="store_true", help="evaluate the feedforward variant")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-sweeps", type=int, default=500)
    p.add_argument("--normalize", action="store_true")
    _add_split_flags(p)
    p.set_defaults(func=cmd_eval)

    p = by_name["bench"] = sub.add_parser("bench", help="per-step wall-time scaling of the trainers")
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", default="50,100,200")
    p.add_argument("--trainers", default="sgd,bilevel")
    p.add_argument(
        "--oracle",
        action="store_true",
        help="time the gradient-descent trainer on its forward-sensitivity route",
    )
    p.add_argument("--hidden-dim", type=int, default=16)
    p.add_argument("--num-snapshots", "--T", dest="num_snapshots", type=int, default=5)
    p.add_argument("--timed-steps", "--repeats", dest="timed_steps", type=int, default=5)
    p.add_argument("--warmup-steps", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = by_name["oracle-check"] = sub.add_parser(
        "oracle-check", help="cross-check the independent gradient routes"
    )
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_check)

    for sp in by_name.values():
        sp.add_argument("--config", default=None, help="JSON file with argument defaults")
    parser.sub_by_name = by_name
    return parser


def _flag_given(argv, option_strings):
    for opt in option_strings:
        for token in argv:
            if token == opt or token.startswith(opt + "="):
                return True
    return False


def _apply_config(argv, parser):
    """Expand ``--config file.json`` into extra command-line tokens.

    The file holds a flat mapping of argument names to values (a run.json
    from a previous invocation also works; its "args" entry is used). Any
    option already present on the command line wins. Returns the augmented
    argument list.
    """
    if not argv:
        return argv
    path = None
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif token.startswith("--config="):
            path = token.split("=", 1)[1]
    if path is None:
        return argv
    sub = parser.sub_by_name.get(argv[0])
    if sub is None:
        return argv
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(payload, dict) and isinstance(payload.get("args"), dict):
        payload = payload["args"]
    if not isinstance(payload, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    extra = []
    for action in sub._actions:
        if not action.option_strings or action.dest in ("help", "config"):
            continue
        if action.dest not in payload or payload[action.dest] is None:
            continue
        if _flag_given(argv[1:], action.option_strings):
            continue
        value = payload[action.dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if bool(value) == bool(getattr(action, "const", True)):
                extra.append(action.option_strings[0])
        else:
            extra.extend([action.option_strings[0], str(value)])
    return argv + extra


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        argv = _apply_config(list(argv), parser)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DyneqError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
