import json

import numpy as np
import pytest

from poseattn.cli import main


@pytest.fixture(scope="module")
def dataset_path(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ah.bin"
    code = main([
        "synth", "--kind", "active_hand", "--out", str(out),
        "--counts", "40", "10", "10", "--seed", "0",
        "--manifest-out", str(out.with_suffix(".json")),
    ])
    assert code == 0
    return out


TRAIN_FLAGS = [
    "--conditioning", "pose", "--no-temporal", "--feat-dim", "16",
    "--rgb-hidden", "10", "--attn-hidden", "10", "--lr", "0.002",
    "--dropout", "0", "--max-epochs", "1", "--batch-size", "16", "--seed", "0",
]


def test_synth_writes_dataset_and_manifest(dataset_path):
    assert dataset_path.exists()
    manifest = json.loads(dataset_path.with_suffix(".json").read_text())
    assert manifest["n_classes"] == 4
    assert len(manifest["records"]) == 60


def test_train_eval_and_dump_attention(dataset_path, tmp_path, capsys):
    run_dir = tmp_path / "run"
    code = main(
        ["train", "--dataset", str(dataset_path), "--out", str(run_dir)] + TRAIN_FLAGS
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "test accuracy" in out
    assert (run_dir / "checkpoint.bin").exists()

    code = main([
        "eval", "--checkpoint", str(run_dir / "checkpoint.bin"),
        "--dataset", str(dataset_path), "--split", "test_seeds",
    ])
    assert code == 0
    assert "accuracy" in capsys.readouterr().out

    dump = tmp_path / "attn.jsonl"
    code = main([
        "dump-attention", "--checkpoint", str(run_dir / "checkpoint.bin"),
        "--dataset", str(dataset_path), "--split", "test_seeds",
        "--out", str(dump), "--limit", "5",
    ])
    assert code == 0
    records = [json.loads(line) for line in dump.read_text().splitlines()]
    assert len(records) == 5
    for rec in records:
        assert len(rec["p"]) == 20 and len(rec["p"][0]) == 4
        assert {"sequence_id", "predicted", "true", "gt_active_slot"} <= set(rec)
        np.testing.assert_allclose(np.sum(rec["p"], axis=1), 1.0, atol=1e-9)


def test_cli_determinism_bitwise(dataset_path, tmp_path):
    run_dir = tmp_path / "det"
    argv = ["train", "--dataset", str(dataset_path), "--out", str(run_dir)] + TRAIN_FLAGS
    assert main(argv) == 0
    first = (run_dir / "metrics.csv").read_bytes()
    first_ckpt = (run_dir / "checkpoint.bin").read_bytes()
    assert main(argv) == 0
    assert (run_dir / "metrics.csv").read_bytes() == first
    assert (run_dir / "checkpoint.bin").read_bytes() == first_ckpt


def test_ablate_subset(dataset_path, tmp_path, capsys):
    code = main([
        "ablate", "--dataset", str(dataset_path), "--out", str(tmp_path / "grid"),
        "--rows", "sum,sa_pose", "--seeds", "0", "--no-dumps",
        "--feat-dim", "16", "--rgb-hidden", "8", "--attn-hidden", "8",
        "--max-epochs", "1", "--dropout", "0", "--batch-size", "16",
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "sa_pose" in out
    assert (tmp_path / "grid" / "grid.csv").exists()


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "all cells pass" in out


def test_usage_error_exit_code_1():
    assert main(["train", "--no-such-flag"]) == 1
    assert main([]) == 1


def test_data_error_exit_code_2(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "missing.bin")]) == 2
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a dataset")
    assert main(["eval", "--checkpoint", str(bad), "--dataset", str(bad)]) == 2


def test_numeric_failure_exit_code_3(monkeypatch):
    import poseattn.cli
    from poseattn.verify import GradCheckCell

    def failing(*args, **kwargs):
        return [
            GradCheckCell(
                name="pose", passed=False, max_rel_error=0.5,
                worst_param="gru.W_c", n_params=1, failures=[("gru.W_c", 0.5)],
            )
        ]

    monkeypatch.setattr(poseattn.cli, "run_gradcheck", failing)
    assert main(["gradcheck"]) == 3


def test_output_root_env_var(dataset_path, tmp_path, monkeypatch):
    monkeypatch.setenv("POSEATTN_OUTPUT_ROOT", str(tmp_path))
    code = main(["train", "--dataset", str(dataset_path), "--out", "rooted"] + TRAIN_FLAGS)
    assert code == 0
    assert (tmp_path / "rooted" / "checkpoint.bin").exists()
