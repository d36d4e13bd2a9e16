import dataclasses
import json

import numpy as np
import pytest

import poseattn.training as training
from poseattn.data import DatasetError, save_dataset
from poseattn.model import StreamOutput
from poseattn.synth import SyntheticSpec, generate
from poseattn.tensor import NumericError, Tensor
from poseattn.training import (
    ModelDims,
    PreparedSequence,
    RunConfig,
    evaluate,
    load_checkpoint,
    predict_logits,
    prepare_sequences,
    run_train,
)

TINY = dict(counts=(40, 10, 10))


@pytest.fixture(scope="module")
def tiny_dataset_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.bin"
    save_dataset(path, generate(SyntheticSpec(kind="active_hand", seed=0, **TINY)))
    return str(path)


def tiny_config(path, **kw):
    base = dict(
        variant="rgb",
        conditioning="pose",
        use_temporal=False,
        feat_dim=16,
        rgb_hidden=12,
        attn_hidden=12,
        temporal_hidden=8,
        pose_hidden=8,
        pose_layers=2,
        lr=2e-3,
        batch_size=16,
        dropout=0.0,
        max_epochs=2,
        patience=5,
        seed=0,
        dataset=path,
    )
    base.update(kw)
    return RunConfig(**base)


class RecordingStub:
    """Stream stand-in that records the windows it was shown and returns
    logits keyed on the window start frame."""

    def __init__(self, n_classes=4):
        self.n_classes = n_classes
        self.batches = []

    def forward(self, batch, training=False, rng=None):
        self.batches.append(batch)
        starts = batch.pose_raw[:, 0, 0]  # frame index planted in the fixture
        logits = np.zeros((len(starts), self.n_classes))
        logits[:, 0] = starts
        return StreamOutput(logits=Tensor(logits), hidden_states=Tensor(np.zeros((len(starts), 1, 1))))


def planted_sequences(lengths, n_classes=4):
    prepared = {}
    for i, length in enumerate(lengths):
        # pose_raw[t, 0] stores t so the stub can report which frames it saw
        pose = np.zeros((length, 2))
        pose[:, 0] = np.arange(length)
        prepared[f"s{i}"] = PreparedSequence(
            seq_id=f"s{i}",
            label=i % n_classes,
            length=length,
            pose_raw=pose,
            pose_aug=np.zeros((length, 6)),
            motion=np.zeros((length, 2)),
            features=np.zeros((length, 4, 2)),
            hand_mask=np.ones((length, 4)),
        )
    return prepared


class TestEvalProtocol:
    def test_five_evenly_spaced_windows_and_mean_aggregation(self):
        # The protocol contract: exactly 5 windows at starts round(k*(L-T)/4),
        # logits averaged per stream across those windows.
        stub = RecordingStub()
        prepared = planted_sequences([100])
        logits = predict_logits([stub], prepared, ["s0"], clip_len=20)
        batch = stub.batches[0]
        assert batch.pose_raw.shape[0] == 5  # five windows, one sequence
        starts = batch.pose_raw[:, 0, 0].tolist()
        assert starts == [0, 20, 40, 60, 80]
        assert logits[0, 0] == np.mean([0, 20, 40, 60, 80])

    def test_degenerate_length_gives_identical_windows(self):
        stub = RecordingStub()
        prepared = planted_sequences([20])
        predict_logits([stub], prepared, ["s0"], clip_len=20)
        assert stub.batches[0].pose_raw[:, 0, 0].tolist() == [0, 0, 0, 0, 0]

    def test_streams_fused_by_logit_sum(self):
        a, b = RecordingStub(), RecordingStub()
        prepared = planted_sequences([100])
        fused = predict_logits([a, b], prepared, ["s0"], clip_len=20)
        single = predict_logits([RecordingStub()], prepared, ["s0"], clip_len=20)
        assert np.allclose(fused, 2 * single)

    def test_accuracy_argmax(self):
        stub = RecordingStub()
        prepared = planted_sequences([40, 40], n_classes=4)
        # starts average > 0 so argmax is class 0; labels are 0 and 1
        acc = evaluate([stub], prepared, ["s0", "s1"], clip_len=20)
        assert acc == 0.5


class TestTraining:
    def test_lr_zero_train_loss_constant(self, tmp_path):
        # Sequences of exactly clip length: every epoch sees the same windows,
        # so with lr=0 the loss can only move by summation reordering.
        path = tmp_path / "flat.bin"
        save_dataset(
            path,
            generate(
                SyntheticSpec(kind="temporal_event", seed=1, counts=(30, 6, 6))
            ),
        )
        config = tiny_config(str(path), lr=0.0, max_epochs=3, use_temporal=True, conditioning="sum")
        result = run_train(config)
        losses = [r.train_loss for r in result.streams["rgb"].rows]
        assert max(losses) - min(losses) < 1e-9

    def test_bitwise_determinism_across_runs(self, tiny_dataset_path, tmp_path):
        out = tmp_path / "run"
        config = tiny_config(tiny_dataset_path, dropout=0.5, max_epochs=2, out_dir=str(out))
        outs, metrics, ckpts = [], [], []
        for _ in range(2):
            outs.append(run_train(config))
            metrics.append((out / "metrics.csv").read_bytes())
            ckpts.append((out / "checkpoint.bin").read_bytes())
        rows_a = [(r.epoch, r.train_loss, r.val_acc) for r in outs[0].streams["rgb"].rows]
        rows_b = [(r.epoch, r.train_loss, r.val_acc) for r in outs[1].streams["rgb"].rows]
        assert rows_a == rows_b
        assert outs[0].test_acc == outs[1].test_acc
        assert metrics[0] == metrics[1]
        assert ckpts[0] == ckpts[1]

    def test_early_stopping_restores_best(self, tiny_dataset_path):
        config = tiny_config(tiny_dataset_path, max_epochs=6, patience=2)
        result = run_train(config)
        trained = result.streams["rgb"]
        best_from_rows = max(r.val_acc for r in trained.rows)
        assert trained.best_val_acc == best_from_rows
        val_ids = result.dataset.manifest.split_ids("val")
        acc = evaluate([trained.stream], result.prepared, val_ids, config.clip_len)
        assert acc == trained.best_val_acc

    def test_early_stopping_patience_bounds_epochs(self, tiny_dataset_path):
        config = tiny_config(tiny_dataset_path, lr=0.0, max_epochs=50, patience=3)
        result = run_train(config)
        # lr=0: no improvement after the first epoch, so 1 + patience epochs run.
        assert len(result.streams["rgb"].rows) == 4

    def test_two_stream_trains_both_separately(self, tiny_dataset_path):
        config = tiny_config(tiny_dataset_path, variant="two_stream", max_epochs=1)
        result = run_train(config)
        assert set(result.streams) == {"pose", "rgb"}
        assert "test_seeds" in result.test_acc

    def test_feat_dim_mismatch_rejected(self, tiny_dataset_path):
        config = tiny_config(tiny_dataset_path, feat_dim=32)
        with pytest.raises(DatasetError, match="feat_dim"):
            run_train(config)

    def test_nan_gradient_aborts_preserving_checkpoint(
        self, tiny_dataset_path, tmp_path, monkeypatch
    ):
        calls = {"n": 0}
        real = training.adam_step

        def poisoned(state, params, grads):
            calls["n"] += 1
            if calls["n"] == 3:
                grads = dict(grads)
                name = next(iter(grads))
                grads[name] = np.full_like(grads[name], np.nan)
            return real(state, params, grads)

        monkeypatch.setattr(training, "adam_step", poisoned)
        out_dir = tmp_path / "nanrun"
        config = tiny_config(tiny_dataset_path, max_epochs=3, out_dir=str(out_dir))
        with pytest.raises(NumericError):
            run_train(config)
        assert not (out_dir / "checkpoint.bin").exists()  # died before epoch 1 finished

        # Poison after the first epoch completed: the best-so-far checkpoint
        # must be preserved.
        late = {"n": 0}

        def late_poison(state, params, grads):
            late["n"] += 1
            if late["n"] == 5:  # 3 batches per epoch, so this is epoch 2
                bad = {k: np.full_like(v, np.nan) for k, v in grads.items()}
                return real(state, params, bad)
            return real(state, params, grads)

        monkeypatch.setattr(training, "adam_step", late_poison)
        with pytest.raises(NumericError):
            run_train(config)
        assert (out_dir / "checkpoint.bin").exists()
        _, _, streams = load_checkpoint(out_dir / "checkpoint.bin")
        assert "rgb" in streams

    def test_run_dir_contains_config_and_dataset_hash(self, tiny_dataset_path, tmp_path):
        out = tmp_path / "run"
        run_train(tiny_config(tiny_dataset_path, max_epochs=1, out_dir=str(out)))
        config = json.loads((out / "config.json").read_text())
        assert config["dataset"] == tiny_dataset_path
        digest = (out / "dataset_hash.txt").read_text().strip()
        assert len(digest) == 64
        assert (out / "metrics.csv").exists()
        assert (out / "result.json").exists()
        assert (out / "timing.json").exists()


class TestCheckpoint:
    def test_round_trip_restores_parameters_and_accuracy(self, tiny_dataset_path, tmp_path):
        config = tiny_config(tiny_dataset_path, max_epochs=2, out_dir=str(tmp_path / "ck"))
        result = run_train(config)
        loaded_config, dims, streams = load_checkpoint(tmp_path / "ck" / "checkpoint.bin")
        assert loaded_config == config
        orig = result.streams["rgb"].stream.parameters()
        back = streams["rgb"]["stream"].parameters()
        assert sorted(orig) == sorted(back)
        for name in orig:
            assert np.array_equal(orig[name].data, back[name].data)
        ids = result.dataset.manifest.split_ids("test_seeds")
        acc = evaluate([streams["rgb"]["stream"]], result.prepared, ids, config.clip_len)
        assert acc == result.test_acc["test_seeds"]
        assert streams["rgb"]["adam"].step == result.streams["rgb"].adam.step

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"garbage!" * 4)
        with pytest.raises(DatasetError, match="checkpoint"):
            load_checkpoint(path)


class TestConfig:
    def test_json_round_trip(self):
        config = RunConfig(conditioning="both", seed=9, dropout=0.25)
        assert RunConfig.from_json(config.to_json()) == config

    def test_unknown_field_rejected(self):
        with pytest.raises(DatasetError, match="unknown config"):
            RunConfig.from_json({**RunConfig().to_json(), "rate": 3})

    def test_version_mismatch_rejected(self):
        with pytest.raises(DatasetError, match="version"):
            RunConfig.from_json({**RunConfig().to_json(), "config_version": 2})

    def test_file_load_with_overrides(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps(RunConfig(seed=1).to_json()))
        config = RunConfig.load(path, {"seed": 7, "conditioning": "sum"})
        assert config.seed == 7
        assert config.conditioning == "sum"

    def test_defaults_match_reference_recipe(self):
        config = RunConfig()
        assert dataclasses.asdict(config) | {} == {
            **dataclasses.asdict(config),
            "clip_len": 20,
            "feat_dim": 2048,
            "rgb_hidden": 1024,
            "pose_hidden": 150,
            "pose_layers": 3,
            "attn_hidden": 256,
            "temporal_hidden": 32,
            "lr": 1e-4,
            "batch_size": 32,
            "dropout": 0.5,
            "max_epochs": 100,
        }


class TestPrepare:
    def test_prepared_shapes(self, tiny_dataset_path):
        from poseattn.data import load_dataset

        dataset = load_dataset(tiny_dataset_path)
        prepared = prepare_sequences(dataset)
        sample = next(iter(prepared.values()))
        length = sample.length
        assert sample.pose_raw.shape == (length, 48)
        assert sample.pose_aug.shape == (length, 144)
        assert sample.motion.shape == (length, 2)
        assert sample.features.shape == (length, 4, 16)
        assert sample.hand_mask.shape == (length, 4)

    def test_dims_from_dataset(self, tiny_dataset_path):
        from poseattn.data import load_dataset

        dataset = load_dataset(tiny_dataset_path)
        dims = ModelDims.from_dataset(dataset, tiny_config(tiny_dataset_path))
        assert dims.pose_dim == 48
        assert dims.n_classes == 4
        assert dims.feat_dim == 16
