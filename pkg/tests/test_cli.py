"""Command-line pipeline: subcommands, exit codes, artifact plumbing."""
import json
from pathlib import Path

import pytest

from sopmt.cli import main

TINY = [
    "--set", "data.train_size=10",
    "--set", "data.dev_size=4",
    "--set", "data.eval_size=4",
    "--set", "data.talker_counts=[2]",
    "--set", "model.encoder_dim=16",
    "--set", "model.conv_dim=16",
    "--set", "model.decoder_dim=16",
    "--set", "model.decoder_layers=2",
    "--set", "model.decoder_heads=2",
    "--set", "model.decoder_ff_dim=32",
    "--set", "model.lora_rank=2",
    "--set", "train.batch_size=4",
    "--set", 'train.steps={"stage1":3,"stage2":3,"stage3":3,"single":3}',
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Generate data and train all stages once via the CLI."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    ckpts = root / "ckpts"
    assert main(["gen-data", "--out", str(data), "--seed", "0", *TINY]) == 0
    train_args = ["--seed", "0", *TINY, "--set", f"train.data_dir={data}"]
    assert main(["train", "--stage", "1", "--out", str(ckpts), *train_args]) == 0
    assert main(["train", "--stage", "2", "--from", str(ckpts / "stage1.ckpt"),
                 "--out", str(ckpts), *train_args]) == 0
    assert main(["train", "--stage", "3", "--from", str(ckpts / "stage2.ckpt"),
                 "--out", str(ckpts), *train_args]) == 0
    return root, data, ckpts


def test_gen_data_layout(pipeline):
    _, data, _ = pipeline
    for split in ("train", "dev", "eval"):
        for cond in ("clean", "noisy"):
            assert (data / "2spk" / f"{split}_{cond}.jsonl").exists()
    assert not (data / "3spk").exists()


def test_gen_data_refuses_nonempty_without_force(pipeline):
    _, data, _ = pipeline
    assert main(["gen-data", "--out", str(data), "--seed", "0", *TINY]) == 2


def test_gen_data_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["--seed", "3", "--set", "data.train_size=3", "--set",
            "data.dev_size=2", "--set", "data.eval_size=2",
            "--set", "data.talker_counts=[2]"]
    assert main(["gen-data", "--out", str(a), *args]) == 0
    assert main(["gen-data", "--out", str(b), *args]) == 0
    ma = (a / "2spk" / "train_noisy.jsonl").read_bytes()
    mb = (b / "2spk" / "train_noisy.jsonl").read_bytes()
    assert ma == mb


def test_train_stage2_without_from_is_usage_error():
    assert main(["train", "--stage", "2", "--out", "/tmp/x"]) == 1


def test_train_stage_order_violation_is_data_error(pipeline):
    root, data, ckpts = pipeline
    code = main(["train", "--stage", "3", "--from", str(ckpts / "stage1.ckpt"),
                 "--out", str(root / "bad"), "--seed", "0", *TINY,
                 "--set", f"train.data_dir={data}"])
    assert code == 2


def test_unknown_config_key_is_usage_error():
    assert main(["gen-data", "--out", "/tmp/y", "--set", "data.bogus=1"]) == 1


def test_missing_checkpoint_is_data_error(pipeline):
    root, data, _ = pipeline
    code = main(["eval", "--ckpt", str(root / "nope.ckpt"),
                 "--data", str(data / "2spk" / "dev_noisy.jsonl"),
                 "--out", str(root / "r.jsonl")])
    assert code == 2


def test_eval_all_input_forms(pipeline):
    root, data, ckpts = pipeline
    dev = str(data / "2spk" / "dev_noisy.jsonl")
    r1 = root / "s1.jsonl"
    assert main(["eval", "--ckpt", str(ckpts / "stage1.ckpt"), "--data", dev,
                 "--input-form", "sot", "--out", str(r1)]) == 0
    meta = json.loads(r1.read_text().splitlines()[0])["result_meta"]
    assert meta["input_form"] == "sot"
    assert meta["num_samples"] == 4

    r3 = root / "s3.jsonl"
    assert main(["eval", "--ckpt", str(ckpts / "stage3.ckpt"), "--data", dev,
                 "--input-form", "sop", "--out", str(r3)]) == 0
    r3o = root / "s3o.jsonl"
    assert main(["eval", "--ckpt", str(ckpts / "stage3.ckpt"), "--data", dev,
                 "--input-form", "sop-only", "--out", str(r3o)]) == 0


def test_eval_sop_on_stage1_is_data_error(pipeline):
    root, data, ckpts = pipeline
    code = main(["eval", "--ckpt", str(ckpts / "stage1.ckpt"),
                 "--data", str(data / "2spk" / "dev_noisy.jsonl"),
                 "--input-form", "sop", "--out", str(root / "x.jsonl")])
    assert code == 2


def test_dump_alignments(pipeline):
    root, data, ckpts = pipeline
    out = root / "grids"
    assert main(["dump-alignments", "--ckpt", str(ckpts / "stage2.ckpt"),
                 "--data", str(data / "2spk" / "dev_noisy.jsonl"),
                 "--n", "2", "--out", str(out)]) == 0
    grids = list(out.glob("*.txt"))
    assert len(grids) == 2
    text = grids[0].read_text()
    assert text.startswith("frame")
    assert "spk01" in text and "spk02" in text


def test_dump_alignments_clamps_n(pipeline, capsys):
    root, data, ckpts = pipeline
    out = root / "grids_all"
    assert main(["dump-alignments", "--ckpt", str(ckpts / "stage2.ckpt"),
                 "--data", str(data / "2spk" / "dev_noisy.jsonl"),
                 "--n", "999", "--out", str(out)]) == 0
    assert len(list(out.glob("*.txt"))) == 4


def test_dump_alignments_needs_separator(pipeline):
    root, data, ckpts = pipeline
    code = main(["dump-alignments", "--ckpt", str(ckpts / "stage1.ckpt"),
                 "--data", str(data / "2spk" / "dev_noisy.jsonl"),
                 "--n", "1", "--out", str(root / "g2")])
    assert code == 2


def test_report_from_results(pipeline):
    root, _, _ = pipeline
    out = root / "report"
    assert main(["report", str(root / "s1.jsonl"), str(root / "s3.jsonl"),
                 "--out", str(out), "--resamples", "200"]) == 0
    assert (out / "report.tsv").exists()
    assert (out / "report.txt").exists()
    lines = (out / "report.txt").read_text().splitlines()
    assert len(lines) == 3


def test_report_mixed_datasets_guard(pipeline, tmp_path):
    root, _, _ = pipeline
    other = tmp_path / "other.jsonl"
    lines = (root / "s1.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    header["result_meta"]["dataset_id"] = "different"
    other.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    assert main(["report", str(root / "s1.jsonl"), str(other),
                 "--out", str(tmp_path / "rep")]) == 2
    assert main(["report", str(root / "s1.jsonl"), str(other), "--allow-mixed",
                 "--out", str(tmp_path / "rep"), "--resamples", "100"]) == 0


def test_env_seed_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SOP_MTASR_SEED", "123")
    out = tmp_path / "env"
    args = ["--set", "data.train_size=2", "--set", "data.dev_size=1",
            "--set", "data.eval_size=1", "--set", "data.talker_counts=[2]"]
    assert main(["gen-data", "--out", str(out), *args]) == 0
    header = json.loads(
        (out / "2spk" / "train_noisy.jsonl").read_text().splitlines()[0]
    )
    assert header["dataset_meta"]["master_seed"] == 123


def test_no_command_is_usage_error():
    assert main([]) == 1


def test_checkpoint_stamps_config_hash(pipeline):
    from sopmt.checkpoint import Checkpoint

    _, _, ckpts = pipeline
    ck = Checkpoint.load(ckpts / "stage1.ckpt")
    assert len(ck.meta["config_hash"]) == 64
