"""Training and evaluation harness.

One epoch presents one freshly sampled window per training sequence,
shuffled.  Validation and test use the fixed protocol: five evenly spaced
windows per sequence, logits averaged per stream, streams fused by summing,
then argmax.  Early stopping keeps the parameters of the best validation
epoch.  Every derived random stream hangs off the config seed, so a rerun
with the same config reproduces metrics bitwise.
"""
from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, DatasetError, dataset_content_hash, load_dataset
from .model import PoseStream, RgbStream, WindowBatch, fuse_logits
from .nn import AdamState, adam_step, collect_grads, zero_grads
from .pose import (
    augment_pose,
    eval_window_starts,
    motion_stats,
    normalize_pose,
    sample_windows,
    window_indices,
)
from .tensor import NumericError, Tape, read_array, write_array

CONFIG_VERSION = 1


@dataclass
class RunConfig:
    """Run description; defaults follow the reference training recipe."""

    variant: str = "rgb"  # "rgb" | "pose" | "two_stream"
    conditioning: str = "pose"  # "hidden" | "pose" | "both" | "sum" | "concat"
    use_temporal: bool = True
    pooling: str = "average"  # per-step pooling when temporal attention is off
    clip_len: int = 20
    feat_dim: int = 2048
    rgb_hidden: int = 1024
    pose_hidden: int = 150
    pose_layers: int = 3
    attn_hidden: int = 256
    temporal_hidden: int = 32
    lr: float = 1e-4
    batch_size: int = 32
    dropout: float = 0.5
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    dataset: str = ""
    out_dir: str = ""
    mask_absent: bool = False
    stack_dropout: bool = True
    config_version: int = CONFIG_VERSION

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        version = d.get("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise DatasetError(f"config version {version} != supported {CONFIG_VERSION}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DatasetError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path, overrides: dict | None = None) -> "RunConfig":
        d = json.loads(Path(path).read_text())
        if overrides:
            d.update(overrides)
        return cls.from_json(d)


@dataclass
class PreparedSequence:
    """One sequence with all model inputs precomputed on the full length."""

    seq_id: str
    label: int
    length: int
    pose_raw: np.ndarray  # (L, P)
    pose_aug: np.ndarray  # (L, 3P)
    motion: np.ndarray  # (L, 2)
    features: np.ndarray  # (L, 4, D) f64
    hand_mask: np.ndarray  # (L, 4) f64
    gt_slot: np.ndarray | None = None
    gt_window: np.ndarray | None = None


def prepare_sequences(dataset: Dataset) -> dict[str, PreparedSequence]:
    """Normalize, augment, and flatten every sequence once up front."""
    spine = dataset.manifest.spine_joint
    out: dict[str, PreparedSequence] = {}
    for record in dataset.manifest.records:
        seqdata = dataset.sequences[record.seq_id]
        seq = normalize_pose(seqdata.seq, spine_joint=spine)
        mask = np.repeat(seq.subject_present.astype(np.float64), 2)
        length = seq.n_frames
        out[record.seq_id] = PreparedSequence(
            seq_id=record.seq_id,
            label=record.label,
            length=length,
            pose_raw=seq.pose_vectors(),
            pose_aug=augment_pose(seq),
            motion=motion_stats(seq),
            features=seqdata.features.astype(np.float64),
            hand_mask=np.broadcast_to(mask, (length, 4)).copy(),
            gt_slot=seqdata.gt_slot,
            gt_window=seqdata.gt_window,
        )
    return out


def make_batch(samples: list[PreparedSequence], windows: list[np.ndarray]) -> WindowBatch:
    return WindowBatch(
        pose_raw=np.stack([s.pose_raw[w] for s, w in zip(samples, windows)]),
        pose_aug=np.stack([s.pose_aug[w] for s, w in zip(samples, windows)]),
        motion=np.stack([s.motion[w] for s, w in zip(samples, windows)]),
        hand_mask=np.stack([s.hand_mask[w] for s, w in zip(samples, windows)]),
        labels=np.array([s.label for s in samples]),
        features=np.stack([s.features[w] for s, w in zip(samples, windows)]),
    )


@dataclass
class ModelDims:
    pose_dim: int
    n_classes: int
    feat_dim: int
    clip_len: int

    @classmethod
    def from_dataset(cls, dataset: Dataset, config: RunConfig) -> "ModelDims":
        manifest = dataset.manifest
        if config.feat_dim != manifest.feature_dim:
            raise DatasetError(
                f"config feat_dim {config.feat_dim} != dataset feature dim {manifest.feature_dim}"
            )
        return cls(
            pose_dim=2 * manifest.n_joints * 3,
            n_classes=manifest.n_classes,
            feat_dim=manifest.feature_dim,
            clip_len=config.clip_len,
        )


def build_rgb_stream(config: RunConfig, dims: ModelDims, rng: np.random.Generator) -> RgbStream:
    return RgbStream(
        rng=rng,
        conditioning=config.conditioning,
        use_temporal=config.use_temporal,
        n_frames=dims.clip_len,
        feat_dim=dims.feat_dim,
        pose_aug_dim=3 * dims.pose_dim,
        hidden_dim=config.rgb_hidden,
        n_classes=dims.n_classes,
        attn_hidden=config.attn_hidden,
        temporal_hidden=config.temporal_hidden,
        pooling=config.pooling,
        dropout_rate=config.dropout,
        mask_absent=config.mask_absent,
    )


def build_pose_stream(config: RunConfig, dims: ModelDims, rng: np.random.Generator) -> PoseStream:
    return PoseStream(
        rng=rng,
        pose_dim=dims.pose_dim,
        hidden_dim=config.pose_hidden,
        n_layers=config.pose_layers,
        n_classes=dims.n_classes,
        dropout_rate=config.dropout,
        stack_dropout=config.stack_dropout,
    )


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


_STREAM_TAG = {"rgb": 11, "pose": 13}


def evaluate(
    streams: list,
    prepared: dict[str, PreparedSequence],
    ids: list[str],
    clip_len: int,
    chunk: int = 16,
) -> float:
    """Top-1 accuracy under the fixed multi-window protocol."""
    logits = predict_logits(streams, prepared, ids, clip_len, chunk=chunk)
    labels = np.array([prepared[i].label for i in ids])
    return float((logits.argmax(axis=1) == labels).mean())


def predict_logits(
    streams: list,
    prepared: dict[str, PreparedSequence],
    ids: list[str],
    clip_len: int,
    chunk: int = 16,
) -> np.ndarray:
    """Fused sequence logits: per stream, average logits over the five eval
    windows; then sum streams."""
    fused_rows: list[np.ndarray] = []
    for lo in range(0, len(ids), chunk):
        batch_ids = ids[lo : lo + chunk]
        samples: list[PreparedSequence] = []
        windows: list[np.ndarray] = []
        for i in batch_ids:
            s = prepared[i]
            starts = eval_window_starts(s.length, clip_len)
            for st in starts:
                samples.append(s)
                windows.append(window_indices(s.length, st, clip_len))
        batch = make_batch(samples, windows)
        per_stream: list[np.ndarray] = []
        for stream in streams:
            out = stream.forward(batch, training=False)
            logits = out.logits.data.reshape(len(batch_ids), -1, out.logits.shape[-1])
            per_stream.append(logits.mean(axis=1))
        fused = per_stream[0]
        for extra in per_stream[1:]:
            fused = fuse_logits(fused, extra)
        fused_rows.append(fused)
    return np.concatenate(fused_rows, axis=0)


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_acc: float


@dataclass
class TrainedStream:
    name: str
    stream: object
    adam: AdamState
    rows: list[EpochRow]
    best_epoch: int
    best_val_acc: float


class TrainingAborted(NumericError):
    """Numeric failure during training; carries the best state reached so far."""

    def __init__(self, message: str, partial: "TrainedStream | None"):
        super().__init__(message)
        self.partial = partial


def train_stream(
    name: str,
    stream,
    config: RunConfig,
    prepared: dict[str, PreparedSequence],
    train_ids: list[str],
    val_ids: list[str],
) -> TrainedStream:
    params = stream.parameters()
    adam = AdamState(lr=config.lr)
    tag = _STREAM_TAG[name]
    best_val = -1.0
    best_epoch = -1
    best_snapshot: dict[str, np.ndarray] = {}
    stall = 0
    rows: list[EpochRow] = []

    def restore_best() -> None:
        for k, p in params.items():
            p.data = best_snapshot[k].copy()

    try:
        for epoch in range(config.max_epochs):
            rng = _rng(config.seed, tag, 1, epoch)
            order = rng.permutation(len(train_ids))
            total_loss = 0.0
            total_n = 0
            for lo in range(0, len(order), config.batch_size):
                batch_ids = [train_ids[j] for j in order[lo : lo + config.batch_size]]
                samples = [prepared[i] for i in batch_ids]
                windows = [
                    sample_windows(s.length, config.clip_len, "train", rng)[0]
                    for s in samples
                ]
                batch = make_batch(samples, windows)
                with Tape() as tape:
                    out = stream.forward(batch, training=True, rng=rng)
                    loss = stream.loss(out, batch.labels)
                tape.backward(loss)
                grads = collect_grads(params)
                zero_grads(params)
                adam_step(adam, params, grads)
                total_loss += loss.item() * len(batch_ids)
                total_n += len(batch_ids)
            val_acc = evaluate([stream], prepared, val_ids, config.clip_len)
            rows.append(EpochRow(epoch=epoch, train_loss=total_loss / total_n, val_acc=val_acc))
            if val_acc > best_val:
                best_val = val_acc
                best_epoch = epoch
                best_snapshot = {k: p.data.copy() for k, p in params.items()}
                stall = 0
            else:
                stall += 1
                if stall >= config.patience:
                    break
    except NumericError as e:
        partial = None
        if best_snapshot:
            restore_best()
            partial = TrainedStream(
                name=name, stream=stream, adam=adam, rows=rows,
                best_epoch=best_epoch, best_val_acc=best_val,
            )
        raise TrainingAborted(str(e), partial) from e
    restore_best()
    return TrainedStream(
        name=name, stream=stream, adam=adam, rows=rows, best_epoch=best_epoch, best_val_acc=best_val
    )


@dataclass
class TrainResult:
    config: RunConfig
    streams: dict[str, TrainedStream]
    prepared: dict[str, PreparedSequence]
    dataset: Dataset
    dataset_hash: str
    test_acc: dict[str, float] = field(default_factory=dict)

    def stream_models(self) -> list:
        return [t.stream for t in self.streams.values()]


def run_train(config: RunConfig, dataset: Dataset | None = None) -> TrainResult:
    """Train the configured variant end to end and evaluate on the test splits.

    Writes config, dataset hash, per-epoch metrics, results, and the best
    checkpoint into ``config.out_dir`` when it is set.  On a numeric failure
    the best checkpoint so far is preserved before the error propagates.
    """
    if dataset is None:
        dataset = load_dataset(config.dataset)
    ds_hash = dataset_content_hash(config.dataset) if config.dataset else ""
    dims = ModelDims.from_dataset(dataset, config)
    prepared = prepare_sequences(dataset)
    train_ids = dataset.manifest.split_ids("train")
    val_ids = dataset.manifest.split_ids("val")
    if not train_ids or not val_ids:
        raise DatasetError("dataset needs non-empty train and val splits")

    wanted = {"rgb": config.variant in ("rgb", "two_stream"), "pose": config.variant in ("pose", "two_stream")}
    if not any(wanted.values()):
        raise DatasetError(f"unknown variant {config.variant!r}")

    result = TrainResult(
        config=config, streams={}, prepared=prepared, dataset=dataset, dataset_hash=ds_hash
    )
    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_json(), indent=2, sort_keys=True))
        (out_dir / "dataset_hash.txt").write_text(ds_hash + "\n")

    t0 = time.monotonic()
    try:
        # Streams are trained separately, then fused only at evaluation time.
        if wanted["pose"]:
            stream = build_pose_stream(config, dims, _rng(config.seed, _STREAM_TAG["pose"], 0))
            result.streams["pose"] = train_stream(
                "pose", stream, config, prepared, train_ids, val_ids
            )
        if wanted["rgb"]:
            stream = build_rgb_stream(config, dims, _rng(config.seed, _STREAM_TAG["rgb"], 0))
            result.streams["rgb"] = train_stream(
                "rgb", stream, config, prepared, train_ids, val_ids
            )
    except NumericError as e:
        # Preserve the best state reached before the numeric failure.
        if isinstance(e, TrainingAborted) and e.partial is not None:
            result.streams[e.partial.name] = e.partial
        if out_dir and result.streams:
            save_checkpoint(out_dir / "checkpoint.bin", config, dims, result, partial=True)
        raise
    wall = time.monotonic() - t0

    models = result.stream_models()
    for split in ("test_seeds", "test_pool"):
        ids = dataset.manifest.split_ids(split)
        if ids:
            result.test_acc[split] = evaluate(models, prepared, ids, config.clip_len)

    if out_dir:
        _write_metrics(out_dir / "metrics.csv", result)
        (out_dir / "result.json").write_text(
            json.dumps(
                {
                    "test_acc": result.test_acc,
                    "best": {
                        k: {"epoch": t.best_epoch, "val_acc": t.best_val_acc}
                        for k, t in result.streams.items()
                    },
                },
                indent=2,
                sort_keys=True,
            )
        )
        # Wall-clock lives outside metrics.csv so reruns stay bitwise comparable.
        (out_dir / "timing.json").write_text(json.dumps({"train_seconds": wall}))
        save_checkpoint(out_dir / "checkpoint.bin", config, dims, result)
    return result


def _write_metrics(path: Path, result: TrainResult) -> None:
    lines = ["stream,epoch,train_loss,val_acc"]
    for name, trained in result.streams.items():
        for row in trained.rows:
            lines.append(f"{name},{row.epoch},{row.train_loss!r},{row.val_acc!r}")
    for split, acc in result.test_acc.items():
        lines.append(f"final,{split},," + repr(acc))
    path.write_text("\n".join(lines) + "\n")


CHECKPOINT_MAGIC = b"POSECKP1"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path, config: RunConfig, dims: ModelDims, result: TrainResult, partial: bool = False
) -> None:
    payload = bytearray()
    streams_meta = {}
    for name, trained in result.streams.items():
        params = trained.stream.parameters()
        order = sorted(params)
        offset_names = []
        for pname in order:
            offset_names.append(pname)
            write_array(payload, params[pname].data)
        for pname in order:
            write_array(payload, trained.adam.m.get(pname, np.zeros_like(params[pname].data)))
            write_array(payload, trained.adam.v.get(pname, np.zeros_like(params[pname].data)))
        streams_meta[name] = {
            "params": offset_names,
            "adam_step": trained.adam.step,
            "best_epoch": trained.best_epoch,
            "best_val_acc": trained.best_val_acc,
        }
    header = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "partial": partial,
            "config": config.to_json(),
            "dims": dataclasses.asdict(dims),
            "dataset_hash": result.dataset_hash,
            "streams": streams_meta,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        f.write(bytes(payload))


def load_checkpoint(path: str | Path) -> tuple[RunConfig, ModelDims, dict[str, dict]]:
    """Rebuild stream models and optimizer state from a checkpoint file."""
    blob = Path(path).read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DatasetError(f"{path}: not a checkpoint file")
    header_len = int.from_bytes(blob[8:16], "little")
    meta = json.loads(blob[16 : 16 + header_len].decode())
    if meta["version"] != CHECKPOINT_VERSION:
        raise DatasetError(f"checkpoint version {meta['version']} != {CHECKPOINT_VERSION}")
    config = RunConfig.from_json(meta["config"])
    dims = ModelDims(**meta["dims"])
    pos = 16 + header_len
    streams: dict[str, dict] = {}
    for name, smeta in meta["streams"].items():
        if name == "pose":
            stream = build_pose_stream(config, dims, _rng(config.seed, _STREAM_TAG["pose"], 0))
        else:
            stream = build_rgb_stream(config, dims, _rng(config.seed, _STREAM_TAG["rgb"], 0))
        params = stream.parameters()
        adam = AdamState(lr=config.lr, step=smeta["adam_step"])
        for pname in smeta["params"]:
            arr, pos = read_array(blob, pos)
            if arr.shape != params[pname].data.shape:
                raise DatasetError(f"checkpoint param {pname}: shape {arr.shape} mismatch")
            params[pname].data = arr
        for pname in smeta["params"]:
            adam.m[pname], pos = read_array(blob, pos)
            adam.v[pname], pos = read_array(blob, pos)
        streams[name] = {
            "stream": stream,
            "adam": adam,
            "best_epoch": smeta["best_epoch"],
            "best_val_acc": smeta["best_val_acc"],
            "dataset_hash": meta["dataset_hash"],
        }
    return config, dims, streams


def dump_attention(
    streams: list,
    prepared: dict[str, PreparedSequence],
    ids: list[str],
    clip_len: int,
    out_path: str | Path | None = None,
) -> list[dict]:
    """Per-sequence attention record over the first eval window, plus the
    prediction from the full protocol.  JSON-lines when ``out_path`` is set."""
    rgb = next((s for s in streams if isinstance(s, RgbStream)), None)
    if rgb is None:
        raise ValueError("attention dumps need an RGB stream")
    logits = predict_logits(streams, prepared, ids, clip_len)
    records = []
    for row, seq_id in enumerate(ids):
        s = prepared[seq_id]
        start = eval_window_starts(s.length, clip_len)[0]
        window = window_indices(s.length, start, clip_len)
        batch = make_batch([s], [window])
        out = rgb.forward(batch, training=False)
        rec = {
            "sequence_id": seq_id,
            "window_start": int(start),
            "frames": [int(i) for i in window],
            "p": out.spatial_attention.data[0].tolist()
            if out.spatial_attention is not None
            else None,
            "p_prime": out.temporal_attention.data[0].tolist()
            if out.temporal_attention is not None
            else None,
            "predicted": int(logits[row].argmax()),
            "true": int(s.label),
            "gt_active_slot": s.gt_slot[window].tolist() if s.gt_slot is not None else None,
            "gt_window": s.gt_window.tolist() if s.gt_window is not None else None,
        }
        records.append(rec)
    if out_path is not None:
        with open(out_path, "w") as f:
            for rec in records:
                f.write(json.dumps(rec) + "\n")
    return records
