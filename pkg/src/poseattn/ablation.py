"""Ablation grid over attention conditioning variants.

Nine RGB-stream rows: sum and concat integration baselines, spatial
attention under three conditionings, temporal attention alone (over sum
integration), and the three spatio-temporal combinations.  Every cell
trains with the same budget and per-seed identical initial conditions and
is evaluated on the two held-out splits.  In two-stream mode one pose
stream per seed is shared by every row and fused at the logit level.
"""
from __future__ import annotations

import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .data import load_dataset
from .training import (
    RunConfig,
    TrainResult,
    dump_attention,
    evaluate,
    load_checkpoint,
    prepare_sequences,
    run_train,
)

# row name -> (conditioning, temporal attention)
GRID_ROWS: tuple[tuple[str, str, bool], ...] = (
    ("sum", "sum", False),
    ("concat", "concat", False),
    ("sa_hidden", "hidden", False),
    ("sa_pose", "pose", False),
    ("sa_both", "both", False),
    ("ta", "sum", True),
    ("sta_hidden", "hidden", True),
    ("sta_pose", "pose", True),
    ("sta_both", "both", True),
)

TEST_SPLITS = ("test_seeds", "test_pool")


def cell_config(base: RunConfig, row: str, seed: int, out_dir: str | Path | None = None) -> RunConfig:
    """Cells differ from the base config only in conditioning, pooling and seed."""
    spec = {name: (cond, ta) for name, cond, ta in GRID_ROWS}
    if row not in spec:
        raise ValueError(f"unknown grid row {row!r}")
    cond, ta = spec[row]
    return replace(
        base,
        variant="rgb",
        conditioning=cond,
        use_temporal=ta,
        seed=seed,
        out_dir=str(out_dir) if out_dir else "",
    )


@dataclass
class CellResult:
    row: str
    seed: int
    status: str  # "ok" or "failed: ..."
    acc: dict[str, float]

    @property
    def avg(self) -> float:
        return sum(self.acc.values()) / len(self.acc) if self.acc else float("nan")


def _run_cell(payload: dict) -> dict:
    """Train one grid cell; module-level so a process pool can pickle it."""
    base = RunConfig.from_json(payload["base"])
    config = cell_config(base, payload["row"], payload["seed"], payload["out_dir"])
    try:
        result = run_train(config)
        return {
            "row": payload["row"],
            "seed": payload["seed"],
            "status": "ok",
            "acc": result.test_acc,
        }
    except Exception as e:  # a failed cell must not sink the grid
        return {
            "row": payload["row"],
            "seed": payload["seed"],
            "status": f"failed: {type(e).__name__}: {e}",
            "acc": {},
            "trace": traceback.format_exc(),
        }


def run_ablation(
    base: RunConfig,
    seeds: list[int],
    out_dir: str | Path,
    two_stream: bool = False,
    workers: int = 1,
    rows: list[str] | None = None,
    attention_dumps: bool = True,
) -> list[CellResult]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    row_names = rows if rows is not None else [name for name, _, _ in GRID_ROWS]
    payloads = [
        {
            "base": base.to_json(),
            "row": row,
            "seed": seed,
            "out_dir": str(out_dir / f"{row}-seed{seed}"),
        }
        for row in row_names
        for seed in seeds
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(_run_cell, payloads))
    else:
        raw = [_run_cell(p) for p in payloads]
    results = [
        CellResult(row=r["row"], seed=r["seed"], status=r["status"], acc=r["acc"]) for r in raw
    ]

    if two_stream:
        results = _fuse_with_pose(base, seeds, out_dir, results)

    if attention_dumps:
        _write_dumps(base, out_dir, results)
    _write_grid(out_dir, results, row_names, seeds)
    return results


def _fuse_with_pose(
    base: RunConfig, seeds: list[int], out_dir: Path, results: list[CellResult]
) -> list[CellResult]:
    """Re-score every completed cell fused with one shared pose stream per seed."""
    dataset = load_dataset(base.dataset)
    pose_by_seed: dict[int, TrainResult] = {}
    for seed in seeds:
        config = replace(
            base, variant="pose", seed=seed, out_dir=str(out_dir / f"pose-seed{seed}")
        )
        pose_by_seed[seed] = run_train(config, dataset=dataset)
    fused: list[CellResult] = []
    for cell in results:
        if cell.status != "ok":
            fused.append(cell)
            continue
        _, _, streams = load_checkpoint(out_dir / f"{cell.row}-seed{cell.seed}" / "checkpoint.bin")
        pose_result = pose_by_seed[cell.seed]
        models = [pose_result.streams["pose"].stream, streams["rgb"]["stream"]]
        acc = {
            split: evaluate(
                models, pose_result.prepared, dataset.manifest.split_ids(split), base.clip_len
            )
            for split in TEST_SPLITS
            if dataset.manifest.split_ids(split)
        }
        fused.append(CellResult(row=cell.row, seed=cell.seed, status="ok", acc=acc))
    return fused


def _write_dumps(base: RunConfig, out_dir: Path, results: list[CellResult]) -> None:
    dataset = load_dataset(base.dataset)
    prepared = prepare_sequences(dataset)
    ids = dataset.manifest.split_ids("test_seeds")[:50]
    for cell in results:
        if cell.status != "ok":
            continue
        ckpt = out_dir / f"{cell.row}-seed{cell.seed}" / "checkpoint.bin"
        if not ckpt.exists():
            continue
        _, _, streams = load_checkpoint(ckpt)
        dump_attention(
            [streams["rgb"]["stream"]],
            prepared,
            ids,
            base.clip_len,
            out_path=out_dir / f"{cell.row}-seed{cell.seed}" / "attention.jsonl",
        )


def _write_grid(out_dir: Path, results: list[CellResult], rows: list[str], seeds: list[int]) -> None:
    lines = ["row,seed,status,acc_test_seeds,acc_test_pool,avg"]
    for cell in sorted(results, key=lambda c: (rows.index(c.row), c.seed)):
        a = cell.acc.get("test_seeds", float("nan"))
        b = cell.acc.get("test_pool", float("nan"))
        lines.append(f"{cell.row},{cell.seed},{cell.status},{a!r},{b!r},{cell.avg!r}")
    (out_dir / "grid.csv").write_text("\n".join(lines) + "\n")
    (out_dir / "grid.txt").write_text(format_table(results, rows) + "\n")
    (out_dir / "grid.json").write_text(
        json.dumps(
            [
                {"row": c.row, "seed": c.seed, "status": c.status, "acc": c.acc}
                for c in results
            ],
            indent=2,
        )
    )


def mean_accuracies(results: list[CellResult]) -> dict[str, dict[str, float]]:
    """Per-row mean accuracy over seeds, per split and averaged; failed cells excluded."""
    table: dict[str, dict[str, float]] = {}
    rows = {c.row for c in results}
    for row in rows:
        ok = [c for c in results if c.row == row and c.status == "ok"]
        if not ok:
            table[row] = {}
            continue
        entry = {
            split: sum(c.acc[split] for c in ok) / len(ok)
            for split in ok[0].acc
        }
        entry["avg"] = sum(c.avg for c in ok) / len(ok)
        table[row] = entry
    return table


def format_table(results: list[CellResult], rows: list[str]) -> str:
    means = mean_accuracies(results)
    failed = {
        c.row for c in results if c.status != "ok"
    }
    out = [f"{'row':<12}{'test_seeds':>12}{'test_pool':>12}{'avg':>12}"]
    for row in rows:
        entry = means.get(row, {})
        if not entry:
            out.append(f"{row:<12}{'failed':>12}{'failed':>12}{'failed':>12}")
            continue
        a = entry.get("test_seeds", float("nan"))
        b = entry.get("test_pool", float("nan"))
        mark = " *" if row in failed else ""
        out.append(f"{row:<12}{100*a:>11.1f}%{100*b:>11.1f}%{100*entry['avg']:>11.1f}%{mark}")
    return "\n".join(out)
