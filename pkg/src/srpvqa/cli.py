"""Command-line interface: gen | train | eval | matrix | visualize.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
3 numeric failure.  Heavy imports are deferred until ``--threads`` has
been applied to the BLAS environment variables.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

METRICS_SCHEMA_VERSION = 1

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="JSON run-config file")
    p.add_argument("--profile", default="desk", choices=("desk", "paper-scale"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    p.add_argument("--out", help="output path")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="srpvqa", description="Relationship-aware VQA on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--n-scenes", type=int)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="train", choices=("train", "all"))

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("test", "train", "all"))
    p.add_argument("--dump", help="per-question JSON-lines output")

    p = sub.add_parser("matrix", help="run the ablation and relation-source matrix")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--cells", help="comma-separated subset of cell names")

    p = sub.add_parser("visualize", help="attention heatmaps and triplet report")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--example", type=int, required=True)
    p.add_argument("--question", type=int, default=0)
    return parser


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _config(args):
    from .config import RunConfig, load_config

    overrides = {}
    for item in args.set:
        key, eq, value = item.partition("=")
        if not eq:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = _parse_value(value)
    unknown = set(overrides) - set(RunConfig.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, args.profile, **overrides)


def _require_out(args):
    if not args.out:
        raise UsageError("--out is required")
    return args.out


def _select(examples, cfg, which):
    from .train import split

    if which == "all":
        return examples
    train, test = split(examples, cfg.holdout, cfg.seed)
    return train if which == "train" else test


def cmd_gen(args):
    from . import data
    from .checkpoint import atomic_write

    cfg = _config(args)
    out = _require_out(args)
    n = args.n_scenes if args.n_scenes is not None else cfg.n_scenes
    if n < 1:
        raise UsageError("--n-scenes must be positive")
    scene_cfg = data.SceneConfig(d_v=cfg.d_v)
    examples = data.generate_dataset(n, seed=cfg.seed, config=scene_cfg)
    atomic_write(out, data.dumps_dataset(examples, scene_cfg))
    print(f"wrote {n} scenes, {sum(len(e.questions) for e in examples)} questions to {out}")


def _load_for(cfg, path):
    from . import data

    examples, scene_cfg, vocab = data.load_dataset(path)
    if scene_cfg.d_v != cfg.d_v:
        raise data.SchemaError(f"dataset feature width {scene_cfg.d_v} != config d_v {cfg.d_v}")
    return examples, vocab


def cmd_train(args):
    from .checkpoint import atomic_write, save_checkpoint
    from .train import train_model

    cfg = _config(args)
    out = _require_out(args)
    examples, vocab = _load_for(cfg, args.dataset)
    train = _select(examples, cfg, args.split)

    def report(result, entry):
        print(f"epoch {entry['epoch']:3d}  loss {entry['loss']:.4f}  train acc {entry['train_acc']:.4f}")

    result = train_model(cfg, train, vocab, epoch_callback=report)
    save_checkpoint(out, result.model, result.optimizer, result.epoch, result.history,
                    result.detector, vocab)
    atomic_write(out + ".log.jsonl", "".join(json.dumps(h, sort_keys=True) + "\n" for h in result.history))
    print(f"checkpoint written to {out}")


def format_metrics(metrics):
    rows = [("Acc.", "accuracy"), ("Binary", "binary"), ("Open", "open"), ("Relation", "relation")]
    lines = [f"{'metric':<10} {'value':>8}"]
    for label, key in rows:
        v = metrics[key]
        lines.append(f"{label:<10} {'n/a' if v is None else f'{100 * v:.2f}':>8}")
    lines.append(f"{'questions':<10} {metrics['n']:>8}")
    return "\n".join(lines)


def cmd_eval(args):
    from . import data
    from .checkpoint import atomic_write, load_checkpoint
    from .train import metrics_from_records, predict

    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    examples, vocab = _load_for(cfg, args.dataset)
    model_vocab = ckpt.answer_vocab or vocab
    missing = sorted(set(vocab) - set(model_vocab))
    if missing:
        raise data.SchemaError(f"answers not in the checkpoint vocabulary: {missing[:5]}")
    part = _select(examples, cfg, args.split)
    records = predict(ckpt.model, part, model_vocab, ckpt.detector)
    metrics = metrics_from_records(records)
    report = {"schema_version": METRICS_SCHEMA_VERSION, "dataset_schema_version": data.SCHEMA_VERSION,
              "checkpoint": os.path.abspath(args.checkpoint), "split": args.split, "metrics": metrics}
    print(format_metrics(metrics))
    if args.out:
        atomic_write(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    if args.dump:
        inverse = {i: a for a, i in model_vocab.items()}
        lines = []
        for r in records:
            qa = part[r["example"]].questions[r["question"]]
            lines.append(json.dumps(dict(r, question_text=qa.question, answer_text=qa.answer,
                                         prediction_text=inverse[r["prediction"]]), sort_keys=True) + "\n")
        atomic_write(args.dump, "".join(lines))


def cmd_matrix(args):
    from .checkpoint import atomic_write
    from .experiments import format_table, grid_cells, majority_relation_baseline, ordering_checks, run_matrix
    from .train import split

    cfg = _config(args)
    out = _require_out(args)
    examples, vocab = _load_for(cfg, args.dataset)
    try:
        seeds = tuple(int(s) for s in args.seeds.split(","))
    except ValueError as err:
        raise UsageError(f"bad --seeds {args.seeds!r}") from err
    cells = grid_cells()
    if args.cells:
        wanted = args.cells.split(",")
        unknown = set(wanted) - {name for name, _ in cells}
        if unknown:
            raise UsageError(f"unknown cells: {sorted(unknown)}")
        cells = [c for c in cells if c[0] in wanted]

    def progress(name, entry):
        state = "failed" if "error" in entry else f"acc {entry['accuracy']:.4f}"
        print(f"{name:<16} seed {entry['seed']}: {state}", flush=True)

    table = run_matrix(cfg, examples, vocab, seeds, cells, progress)
    majority = majority_relation_baseline(split(examples, cfg.holdout, cfg.seed)[1])
    report = {"schema_version": METRICS_SCHEMA_VERSION, "seeds": list(seeds), "config": cfg.to_dict(),
              "cells": table, "majority_relation": majority, "checks": ordering_checks(table, majority)}
    text = format_table(table)
    print(text)
    atomic_write(out, json.dumps(report, indent=2, sort_keys=True) + "\n")
    atomic_write(os.path.splitext(out)[0] + ".txt", text + "\n")


def cmd_visualize(args):
    from .checkpoint import load_checkpoint
    from .visualize import visualize_example

    ckpt = load_checkpoint(args.checkpoint)
    examples, vocab = _load_for(ckpt.config, args.dataset)
    if not 0 <= args.example < len(examples):
        raise UsageError(f"example {args.example} not in dataset of {len(examples)}")
    model_vocab = ckpt.answer_vocab or vocab
    out = args.out or "visualize"
    for path in visualize_example(ckpt.model, examples[args.example], model_vocab, out,
                                  args.question, ckpt.detector):
        print(path)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "matrix": cmd_matrix,
            "visualize": cmd_visualize}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    for var in _THREAD_VARS:
        os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .data import PlacementError, SchemaError
    from .train import NumericError

    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, CheckpointError, PlacementError, OSError, KeyError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
