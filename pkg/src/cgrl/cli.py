"""Command-line front end: validate, selector-train, train, eval, plot.

Every failure prints one machine-parsable line, ``error: <category>:
<detail>``, and exits with a category-specific code so scripts can branch
on what went wrong (config trouble vs. each checkpoint corruption class).
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (BadMagicError, CheckpointError,
                         FingerprintMismatchError, TensorShapeError,
                         TruncatedCheckpointError, load_checkpoint,
                         save_checkpoint)
from .config import ConfigError, RunConfig, build_graph, load_config
from .envs import make_env
from .metrics import emit_plot

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_BAD_MAGIC = 4
EXIT_TRUNCATED = 5
EXIT_FINGERPRINT = 6
EXIT_TENSOR_SHAPE = 7
EXIT_CHECKPOINT = 8

_CHECKPOINT_EXITS = (
    (BadMagicError, "bad magic", EXIT_BAD_MAGIC),
    (TruncatedCheckpointError, "truncated checkpoint", EXIT_TRUNCATED),
    (FingerprintMismatchError, "graph fingerprint mismatch",
     EXIT_FINGERPRINT),
    (TensorShapeError, "tensor shape", EXIT_TENSOR_SHAPE),
    (CheckpointError, "checkpoint", EXIT_CHECKPOINT),
)


def _fail(category: str, exc) -> None:
    detail = " ".join(str(exc).split())
    print(f"error: {category}: {detail}", file=sys.stderr)


def _load_run_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif getattr(args, "env", None):
        cfg = RunConfig()
        cfg.env.name = args.env
        if cfg.env.name == "cartstem":
            cfg.env.eval_overrides = {"goal_contact_prob": 1.0}
    else:
        raise ConfigError("need --config or --env")
    if getattr(args, "mode", None):
        cfg.training.mode = args.mode.replace("-", "_")
        from .config import validate_config
        problems = validate_config(cfg)
        if problems:
            raise ConfigError("; ".join(problems))
    return cfg


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    base = os.environ.get("CGRL_OUT_DIR", "runs")
    return Path(base) / default_name


def _seed(args, cfg: RunConfig) -> int:
    return cfg.training.seed if args.seed is None else args.seed


def cmd_validate(args) -> int:
    cfg = _load_run_config(args)
    graph = build_graph(cfg)
    problems = graph.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    print(f"ok: {cfg.env.name} [{cfg.training.mode}] with "
          f"{graph.n_nodes} nodes, {len(graph.edges)} edges")
    return 0


def cmd_selector_train(args) -> int:
    from .selector import (SelectorModel, SelectorTrainConfig,
                           collect_labelled_states, selector_train)
    cfg = _load_run_config(args)
    seed = _seed(args, cfg)
    env = make_env(cfg.env.name, **cfg.env.overrides)
    graph = build_graph(cfg)
    data = collect_labelled_states(env, cfg.selector.states,
                                   np.random.default_rng(seed))
    model = SelectorModel(graph, "learned", hidden=cfg.selector.hidden,
                          rng=np.random.default_rng(seed + 1))
    report = selector_train(model, data, SelectorTrainConfig(
        epochs=cfg.selector.epochs, batch_size=cfg.selector.batch_size,
        learning_rate=cfg.selector.learning_rate, seed=seed))
    out = _out_dir(args, f"selector-{cfg.env.name}")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "selector.ckpt"
    save_checkpoint(path, {"graph_fingerprint": graph.fingerprint(),
                           "env": cfg.env.name, "seed": seed,
                           "states": cfg.selector.states,
                           "train_accuracy": report.train_acc,
                           "val_accuracy": report.val_acc},
                    model.named_tensors("selector"))
    print(f"selector: train_acc={report.train_acc:.4f} "
          f"val_acc={report.val_acc:.4f} epochs={report.epochs_run} "
          f"checkpoint={path}")
    return 0


def cmd_train(args) -> int:
    from .orchestrator import train
    cfg = _load_run_config(args)
    seed = _seed(args, cfg)
    init = None
    if args.checkpoint:
        graph = build_graph(cfg)
        _, init = load_checkpoint(args.checkpoint,
                                  expect_fingerprint=graph.fingerprint())
    out = _out_dir(args, f"{cfg.env.name}-{cfg.training.mode}-seed{seed}")
    result = train(cfg, out, seed=seed, init_tensors=init)
    last = result.eval_history[-1][1] if result.eval_history else None
    tail = (f" eval_return={last.mean_return:.3f} "
            f"success_rate={last.success_rate:.2f}" if last else "")
    print(f"train: mode={cfg.training.mode} iterations={result.iterations} "
          f"episodes={result.episodes} metrics={result.metrics_path} "
          f"checkpoint={result.checkpoint_path}{tail}")
    return 0


def cmd_eval(args) -> int:
    from .orchestrator import evaluate_checkpoint
    cfg = _load_run_config(args)
    mode = args.mode.replace("-", "_") if args.mode else None
    summary = evaluate_checkpoint(cfg, args.checkpoint, seed=args.seed,
                                  mode=mode)
    visits = ",".join(f"{k}:{v}" for k, v in summary.visits.items())
    choices = ",".join(str(c) for c in summary.choice_counts)
    print(f"eval: mean_return={summary.mean_return:.4f} "
          f"success_rate={summary.success_rate:.3f} "
          f"visits={visits or '-'} choices={choices or '-'} "
          f"mislabel_rate={summary.mislabel_rate:.4f}")
    return 0


def cmd_plot(args) -> int:
    run_dir = Path(args.out) if args.out else Path(
        os.environ.get("CGRL_OUT_DIR", "runs"))
    metrics = run_dir / "metrics.csv"
    if not metrics.is_file():
        raise FileNotFoundError(f"no metrics file at {metrics}")
    out = emit_plot(metrics, run_dir / "curve.svg",
                    window_fraction=args.window_fraction)
    print(f"plot: {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cgrl",
        description="hierarchical control over configuration-space graphs")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", help="output directory "
                       "(default: $CGRL_OUT_DIR or ./runs)")
        p.add_argument("--env", choices=("cartstem", "rod"),
                       help="environment shorthand when no config is given")
        p.add_argument("--mode",
                       choices=("graph", "flat", "graph-convex"),
                       help="override the training mode")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint path")

    common(sub.add_parser("validate", help="check config and graph"))
    common(sub.add_parser("selector-train",
                          help="pre-train the configuration classifier"))
    common(sub.add_parser("train", help="run the training loop"),
           checkpoint=True)
    common(sub.add_parser("eval", help="evaluate a checkpoint"),
           checkpoint=True)
    plot = sub.add_parser("plot", help="emit the learning-curve SVG")
    plot.add_argument("--out", help="run directory containing metrics.csv")
    plot.add_argument("--window-fraction", type=float, default=0.025)
    return parser


_COMMANDS = {
    "validate": cmd_validate,
    "selector-train": cmd_selector_train,
    "train": cmd_train,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        _fail("config", exc)
        return EXIT_CONFIG
    except tuple(cls for cls, _, _ in _CHECKPOINT_EXITS) as exc:
        for cls, category, code in _CHECKPOINT_EXITS:
            if isinstance(exc, cls):
                _fail(category, exc)
                return code
        raise  # unreachable: CheckpointError is the catch-all base
    except FileNotFoundError as exc:
        _fail("not found", exc)
        return EXIT_FAILURE
    except (ValueError, RuntimeError) as exc:
        _fail("runtime", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
