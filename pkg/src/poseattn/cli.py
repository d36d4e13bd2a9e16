"""Command-line harness.

Subcommands: ``synth`` (generate a dataset), ``train``, ``eval``,
``ablate``, ``gradcheck``, ``dump-attention``.  Configuration comes from a
versioned JSON file with flag overrides; ``POSEATTN_OUTPUT_ROOT`` anchors
relative output paths.  Exit codes: 0 success, 1 usage, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .ablation import GRID_ROWS, format_table, run_ablation
from .data import DatasetError, export_manifest_json, load_dataset, save_dataset
from .synth import SyntheticSpec, generate
from .tensor import GraphError, NumericError, ShapeError
from .training import (
    RunConfig,
    dump_attention,
    evaluate,
    load_checkpoint,
    prepare_sequences,
    run_train,
)
from .verify import TinyDims, format_report, run_gradcheck

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _out_path(path: str) -> Path:
    root = os.environ.get("POSEATTN_OUTPUT_ROOT")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags below override it")
    p.add_argument("--dataset", help="dataset file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--variant", choices=["rgb", "pose", "two_stream"])
    p.add_argument("--conditioning", choices=["hidden", "pose", "both", "sum", "concat"])
    ta = p.add_mutually_exclusive_group()
    ta.add_argument("--temporal", dest="use_temporal", action="store_true", default=None)
    ta.add_argument("--no-temporal", dest="use_temporal", action="store_false", default=None)
    p.add_argument("--pooling", choices=["average", "last"])
    p.add_argument("--clip-len", type=int)
    p.add_argument("--feat-dim", type=int)
    p.add_argument("--rgb-hidden", type=int)
    p.add_argument("--pose-hidden", type=int)
    p.add_argument("--pose-layers", type=int)
    p.add_argument("--attn-hidden", type=int)
    p.add_argument("--temporal-hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)


_CONFIG_KEYS = (
    "dataset", "variant", "conditioning", "use_temporal", "pooling",
    "clip_len", "feat_dim", "rgb_hidden", "pose_hidden", "pose_layers",
    "attn_hidden", "temporal_hidden", "lr", "batch_size", "dropout",
    "max_epochs", "patience", "seed",
)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "out", None):
        overrides["out_dir"] = str(_out_path(args.out))
    if args.config:
        return RunConfig.load(args.config, overrides)
    return RunConfig.from_json({**RunConfig().to_json(), **overrides})


def _cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        kind=args.kind,
        n_classes=args.classes,
        feat_dim=args.feat_dim,
        clip_len=args.clip_len,
        seq_len=args.seq_len,
        event_width=args.event_width,
        noise=args.noise,
        distractor=args.distractor,
        template_scale=args.template_scale,
        motion_amp=args.motion_amp,
        slot_motion_amp=args.slot_amp,
        counts=tuple(args.counts),
        seed=args.seed,
        kind_mix=tuple(args.kind_mix),
        fake_events=args.fake_events,
        fix_window_at_end=args.fix_window_at_end,
        equal_slots=args.equal_slots,
    )
    dataset = generate(spec)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, dataset)
    if args.manifest_out:
        export_manifest_json(out, _out_path(args.manifest_out))
    counts = {s: len(dataset.manifest.split_ids(s)) for s in ("train", "val", "test_seeds", "test_pool")}
    print(f"wrote {out} ({counts})")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    if not config.dataset:
        raise DatasetError("train needs --dataset or a config with one")
    result = run_train(config)
    for name, trained in result.streams.items():
        print(
            f"{name}: best val acc {trained.best_val_acc:.4f} at epoch {trained.best_epoch} "
            f"({len(trained.rows)} epochs run)"
        )
    for split, acc in result.test_acc.items():
        print(f"test accuracy [{split}]: {acc:.4f}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    config, dims, streams = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    if dataset.manifest.feature_dim != dims.feat_dim:
        raise DatasetError(
            f"checkpoint feature dim {dims.feat_dim} != dataset {dataset.manifest.feature_dim}"
        )
    prepared = prepare_sequences(dataset)
    ids = dataset.manifest.split_ids(args.split)
    if not ids:
        raise DatasetError(f"split {args.split!r} is empty")
    models = [s["stream"] for s in streams.values()]
    acc = evaluate(models, prepared, ids, config.clip_len)
    print(f"accuracy [{args.split}]: {acc:.4f}")
    return EXIT_OK


def _cmd_ablate(args: argparse.Namespace) -> int:
    base = _config_from_args(args)
    if not base.dataset:
        raise DatasetError("ablate needs --dataset or a config with one")
    out = _out_path(args.out) if args.out else Path(base.out_dir or "ablation")
    base = replace(base, out_dir="")
    rows = args.rows.split(",") if args.rows else None
    results = run_ablation(
        base,
        seeds=args.seeds,
        out_dir=out,
        two_stream=args.two_stream,
        workers=args.workers,
        rows=rows,
        attention_dumps=not args.no_dumps,
    )
    print(format_table(results, rows or [name for name, _, _ in GRID_ROWS]))
    failed = [c for c in results if c.status != "ok"]
    for c in failed:
        print(f"cell {c.row}/seed{c.seed}: {c.status}", file=sys.stderr)
    return EXIT_OK


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    cells = run_gradcheck(TinyDims(), eps=args.eps, tol=args.tol, seed=args.seed or 0)
    print(format_report(cells))
    if all(c.passed for c in cells):
        print("all cells pass")
        return EXIT_OK
    return EXIT_NUMERIC


def _cmd_dump_attention(args: argparse.Namespace) -> int:
    config, dims, streams = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    prepared = prepare_sequences(dataset)
    ids = dataset.manifest.split_ids(args.split)
    if not ids:
        raise DatasetError(f"split {args.split!r} is empty")
    if args.limit:
        ids = ids[: args.limit]
    models = [s["stream"] for s in streams.values()]
    out = _out_path(args.out)
    dump_attention(models, prepared, ids, config.clip_len, out_path=out)
    print(f"wrote {len(ids)} records to {out}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="poseattn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--kind", required=True, choices=["active_hand", "temporal_event", "combined"])
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--feat-dim", type=int, default=16)
    p.add_argument("--clip-len", type=int, default=20)
    p.add_argument("--seq-len", type=int, default=None)
    p.add_argument("--event-width", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--distractor", type=float, default=0.8)
    p.add_argument("--template-scale", type=float, default=1.0)
    p.add_argument("--motion-amp", type=float, default=2.0)
    p.add_argument("--slot-amp", type=float, default=0.4)
    p.add_argument("--counts", type=int, nargs=3, default=[2000, 500, 500])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind-mix", type=float, nargs=3, default=[0.35, 0.25, 0.40])
    p.add_argument("--fake-events", type=int, default=None)
    p.add_argument("--fix-window-at-end", action="store_true")
    p.add_argument("--equal-slots", action="store_true")
    p.add_argument("--manifest-out")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="train a model variant")
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test_seeds")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="run the conditioning ablation grid")
    _add_config_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--two-stream", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--rows", help="comma-separated subset of grid rows")
    p.add_argument("--no-dumps", action="store_true")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every variant")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("dump-attention", help="write per-sequence attention records")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test_seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(fn=_cmd_dump_attention)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (NumericError,) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, ShapeError, GraphError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
