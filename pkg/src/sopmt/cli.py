"""Command-line entry point.

Subcommands: gen-data, train, eval, dump-alignments, report. Every command is
reproducible from (config file, seed); the config hash is stamped into all
artifacts. Exit codes: 0 success, 1 usage error, 2 data/checkpoint error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import Checkpoint, CheckpointError, model_from_checkpoint
from .config import ConfigError, RunConfig, load_config
from .mixsim import (
    Dataset,
    EmissionModel,
    ManifestError,
    generate_dataset,
    overlap_ratio,
    read_manifest,
    write_manifest,
)
from .sepctc import dump_alignment
from .trainer import (
    NumericError,
    run_single_stage,
    run_stage1,
    run_stage2,
    run_stage3,
)
from .vocab import Vocabulary

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise UsageError(f"override '{text}' must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _load_cfg(args) -> RunConfig:
    overrides = dict(_parse_override(o) for o in (args.set or []))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    try:
        return load_config(args.config, overrides)
    except ConfigError as e:
        raise UsageError(str(e)) from e


def _splits(cfg: RunConfig):
    return [
        ("train", cfg.data.train_size),
        ("dev", cfg.data.dev_size),
        ("eval", cfg.data.eval_size),
    ]


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ManifestError(f"{out} is not empty; pass --force to overwrite")
    vocab = Vocabulary(cfg.data.num_content_tokens)
    em = EmissionModel(
        feature_dim=cfg.data.feature_dim,
        num_content=cfg.data.num_content_tokens,
        duration_range=tuple(cfg.data.duration_range),
        noise_sigma=cfg.data.emission_noise_sigma,
        seed=cfg.seed,
    )
    for s in cfg.data.talker_counts:
        for split, size in _splits(cfg):
            for condition in ("clean", "noisy"):
                ds = generate_dataset(
                    vocab, em, s, size,
                    tuple(cfg.data.transcript_len), cfg.data.min_gap,
                    cfg.data.mix_noise_sigma, condition, split,
                    cfg.seed, cfg.config_hash,
                )
                path = out / f"{s}spk" / f"{split}_{condition}.jsonl"
                path.parent.mkdir(parents=True, exist_ok=True)
                write_manifest(ds, path)
                ratios = [overlap_ratio(x) for x in ds.samples]
                mean_overlap = sum(ratios) / len(ratios) if ratios else 0.0
                print(
                    f"{path}: {size} samples, {s} talkers, {condition}, "
                    f"mean overlap ratio {mean_overlap:.3f}"
                )
    return EXIT_OK


def _dev_manifest(cfg: RunConfig) -> Path:
    return (Path(cfg.train.data_dir) / f"{cfg.train.num_talkers}spk"
            / f"dev_{cfg.train.condition}.jsonl")


def _train_manifest(cfg: RunConfig) -> Path:
    return (Path(cfg.train.data_dir) / f"{cfg.train.num_talkers}spk"
            / f"train_{cfg.train.condition}.jsonl")


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    stage = args.stage
    if stage in ("2", "3") and args.from_ckpt is None:
        raise UsageError(f"--stage {stage} requires --from with the prior stage's checkpoint")
    train_ds = read_manifest(_train_manifest(cfg))
    out_dir = Path(args.out)
    if stage == "1":
        ckpt = run_stage1(cfg, train_ds, out_dir=out_dir)
    elif stage == "2":
        prev = Checkpoint.load(Path(args.from_ckpt))
        ckpt = run_stage2(prev, cfg, train_ds, out_dir=out_dir)
    elif stage == "3":
        prev = Checkpoint.load(Path(args.from_ckpt))
        ckpt = run_stage3(prev, cfg, train_ds, out_dir=out_dir)
    else:
        ckpt = run_single_stage(cfg, train_ds, out_dir=out_dir)
    name = f"stage{stage}.ckpt" if stage != "single" else "single.ckpt"
    print(f"wrote {out_dir / name} (stage={ckpt.stage_id}, "
          f"config_hash={ckpt.meta['config_hash'][:8]})")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalkit import evaluate_model, write_results

    ckpt = Checkpoint.load(Path(args.ckpt))
    model, cfg = model_from_checkpoint(ckpt)
    dataset = read_manifest(Path(args.data))
    result = evaluate_model(
        model, dataset, args.input_form,
        max_decode_len=cfg.eval.max_decode_len,
        model_id=f"stage{ckpt.stage_id}",
        stage=ckpt.stage_id,
    )
    write_results(result, Path(args.out))
    print(f"{args.out}: WER={result.wer:.4f} "
          f"(permutation-min {result.permutation_min_wer:.4f}) "
          f"on {result.dataset_id} with input {result.input_form}")
    return EXIT_OK


def cmd_dump_alignments(args) -> int:
    import numpy as np
    import torch

    ckpt = Checkpoint.load(Path(args.ckpt))
    model, cfg = model_from_checkpoint(ckpt)
    if model.separator is None:
        raise CheckpointError("checkpoint has no separator branch to dump from")
    dataset = read_manifest(Path(args.data))
    n = args.n
    if n > len(dataset.samples):
        print(f"warning: n={n} clamped to dataset size {len(dataset.samples)}",
              file=sys.stderr)
        n = len(dataset.samples)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    with torch.no_grad():
        for sample in dataset.samples[:n]:
            h2, len2, _, _ = model.encode_features([sample.features])
            logits = model.ctc_branch_logits(h2, len2)
            t2 = int(len2[0])
            posteriors = [
                np.argmax(lg[0, :t2].numpy(), axis=-1) for lg in logits
            ]
            order = sorted(range(len(sample.offsets)),
                           key=lambda k: sample.offsets[k])
            ref_spans = [sample.alignments[k] for k in order]
            grid = dump_alignment(posteriors, model.vocab, ref_spans,
                                  downsample_factor=4)
            if all(int(p) == 0 for fp in posteriors for p in fp):
                grid += "(all branches blank on every frame)\n"
            (out_dir / f"{sample.sample_id}.txt").write_text(grid)
    print(f"wrote {n} alignment grids to {out_dir}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .evalkit import read_results, report

    results = [read_results(Path(p)) for p in args.results]
    dataset_ids = {r.dataset_id for r in results}
    if len(dataset_ids) > 1 and not args.allow_mixed:
        raise ManifestError(
            f"results cover multiple datasets {sorted(dataset_ids)}; "
            "pass --allow-mixed to combine them"
        )
    table = report(results, Path(args.out),
                   n_resamples=args.resamples, seed=args.seed or 0)
    print(table, end="")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="sopmt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (dotted path)")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="generate mixture datasets")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", required=True, choices=["1", "2", "3", "single"])
    p.add_argument("--from", dest="from_ckpt", default=None,
                   help="checkpoint from the prior stage")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="generate and score")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="manifest to evaluate on")
    p.add_argument("--input-form", default="sot",
                   choices=["sot", "sop", "sop-only"])
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("dump-alignments", help="write CTC frame grids")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dump_alignments)

    p = sub.add_parser("report", help="emit the comparison table")
    p.add_argument("results", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--allow-mixed", action="store_true")
    p.add_argument("--resamples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
