"""Scoring and comparison: WER over serialized hypotheses, per-talker
diagnostic scoring, paired bootstrap significance, and report tables."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .labels import SotLabel, split_serialized
from .mixsim import Dataset
from .model import SopModel
from .trainer import sot_label_tokens
from .vocab import Vocabulary

INPUT_FORMS = {"sot", "sop", "sop-only"}


@dataclass
class SampleScore:
    sample_id: str
    reference: list[int]
    hypothesis: list[int]
    substitutions: int
    deletions: int
    insertions: int
    truncated: bool = False

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def ref_len(self) -> int:
        return len(self.reference)


@dataclass
class EvalResult:
    model_id: str
    stage: str
    dataset_id: str
    input_form: str
    samples: list[SampleScore] = field(default_factory=list)
    permutation_min_wer: float | None = None

    @property
    def wer(self) -> float:
        """Aggregate WER from summed counts, not a mean of ratios."""
        total_ref = sum(s.ref_len for s in self.samples)
        if total_ref == 0:
            raise ValueError("aggregate WER undefined: empty references")
        return sum(s.errors for s in self.samples) / total_ref


def edit_distance(ref: list[int], hyp: list[int]) -> tuple[int, int, int]:
    """Unit-cost Levenshtein counts (S, D, I). Ties in the backtrace prefer
    substitution over deletion over insertion; the distance is unaffected."""
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                s += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return s, d, ins


def serialized_wer(ref: SotLabel | list[int], hyp: list[int]) -> float:
    """Headline metric: edit distance over the full serialized sequence,
    speaker-change tokens included."""
    ref_tokens = ref.tokens if isinstance(ref, SotLabel) else list(ref)
    if not ref_tokens:
        raise ValueError("empty reference: WER undefined")
    s, d, i = edit_distance(ref_tokens, hyp)
    return (s + d + i) / len(ref_tokens)


def permutation_min_wer(refs: list[list[int]], hyp_segments: list[list[int]]) -> float:
    """Diagnostic: best assignment of hypothesis segments to reference talkers.
    Exact over all permutations (intended for <= 3 talkers). Surplus hypothesis
    segments beyond the talker count are folded into the last segment."""
    n = len(refs)
    segments = [list(s) for s in hyp_segments[:n]]
    for extra in hyp_segments[n:]:
        segments[-1].extend(extra)
    while len(segments) < n:
        segments.append([])
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise ValueError("empty references: WER undefined")
    best = None
    for perm in itertools.permutations(range(n)):
        cost = 0
        for r, pi in zip(refs, perm):
            s, d, i = edit_distance(r, segments[pi])
            cost += s + d + i
        best = cost if best is None else min(best, cost)
    return best / total_ref


def significance_test(
    errs_a: list[tuple[str, int, int]],
    errs_b: list[tuple[str, int, int]],
    n_resamples: int = 10000,
    seed: int = 0,
) -> float:
    """Paired bootstrap over samples on the aggregate-WER difference.

    Each entry is (sample_id, error_count, ref_len); the two lists must cover
    the same sample ids. Returns a two-sided p-value, deterministic under seed.
    """
    a = {sid: (e, n) for sid, e, n in errs_a}
    b = {sid: (e, n) for sid, e, n in errs_b}
    if set(a) != set(b):
        raise ValueError("significance test requires samples paired by id")
    ids = sorted(a)
    ea = np.array([a[i][0] for i in ids], dtype=np.float64)
    na = np.array([a[i][1] for i in ids], dtype=np.float64)
    eb = np.array([b[i][0] for i in ids], dtype=np.float64)
    nb = np.array([b[i][1] for i in ids], dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = len(ids)
    idx = rng.integers(0, n, size=(n_resamples, n))
    wer_a = ea[idx].sum(axis=1) / np.maximum(na[idx].sum(axis=1), 1)
    wer_b = eb[idx].sum(axis=1) / np.maximum(nb[idx].sum(axis=1), 1)
    diff = wer_a - wer_b
    p_ge = np.mean(diff >= 0)
    p_le = np.mean(diff <= 0)
    return float(min(1.0, 2.0 * min(p_ge, p_le)))


def evaluate_model(
    model: SopModel,
    dataset: Dataset,
    input_form: str,
    max_decode_len: int = 64,
    batch_size: int = 32,
    model_id: str = "",
    stage: str = "",
) -> EvalResult:
    """Greedy generation plus serialized scoring over a dataset."""
    if input_form not in INPUT_FORMS:
        raise ValueError(f"unknown input form '{input_form}'")
    if input_form in ("sop", "sop-only") and model.separator is None:
        raise ValueError(
            f"input form '{input_form}' needs a separator branch, but this "
            "checkpoint has none (stage-1 models are SOT-only)"
        )
    vocab = model.vocab
    active = frozenset(model.decoder.attached_groups())
    result = EvalResult(
        model_id=model_id,
        stage=stage,
        dataset_id=dataset.dataset_id,
        input_form=input_form,
    )
    perm_err = 0
    perm_ref = 0
    model.eval()
    with torch.no_grad():
        for start in range(0, len(dataset.samples), batch_size):
            batch = dataset.samples[start : start + batch_size]
            h2, len2, h_p, len3 = model.encode_features([s.features for s in batch])
            prompts = None
            if input_form in ("sop", "sop-only"):
                prompts = model.decode_prompts(model.ctc_branch_logits(h2, len2), len2)
            use_hp = input_form != "sop-only"
            gens = model.generate_batch(
                h_p if use_hp else None,
                len3 if use_hp else None,
                prompts,
                max_decode_len,
                active_lora=active,
            )
            for sample, gen in zip(batch, gens):
                ref = sot_label_tokens(sample, vocab)
                s, d, i = edit_distance(ref, gen.tokens)
                result.samples.append(
                    SampleScore(
                        sample_id=sample.sample_id,
                        reference=ref,
                        hypothesis=gen.tokens,
                        substitutions=s,
                        deletions=d,
                        insertions=i,
                        truncated=gen.truncated,
                    )
                )
                order = sorted(range(len(sample.offsets)),
                               key=lambda k: sample.offsets[k])
                refs = [sample.talker_transcripts[k] for k in order]
                segs = split_serialized(gen.tokens, vocab)
                pw = permutation_min_wer(refs, segs)
                perm_err += round(pw * sum(len(r) for r in refs))
                perm_ref += sum(len(r) for r in refs)
    result.permutation_min_wer = perm_err / perm_ref if perm_ref else None
    return result


def write_results(result: EvalResult, path: Path) -> None:
    path = Path(path)
    with open(path, "w") as fh:
        header = {
            "result_meta": {
                "model_id": result.model_id,
                "stage": result.stage,
                "dataset_id": result.dataset_id,
                "input_form": result.input_form,
                "wer": result.wer,
                "permutation_min_wer": result.permutation_min_wer,
                "num_samples": len(result.samples),
            }
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in result.samples:
            fh.write(json.dumps({
                "sample_id": s.sample_id,
                "reference": s.reference,
                "hypothesis": s.hypothesis,
                "substitutions": s.substitutions,
                "deletions": s.deletions,
                "insertions": s.insertions,
                "truncated": s.truncated,
            }, sort_keys=True) + "\n")


def read_results(path: Path) -> EvalResult:
    path = Path(path)
    meta = None
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if lineno == 1:
                meta = record["result_meta"]
                continue
            samples.append(SampleScore(
                sample_id=record["sample_id"],
                reference=record["reference"],
                hypothesis=record["hypothesis"],
                substitutions=record["substitutions"],
                deletions=record["deletions"],
                insertions=record["insertions"],
                truncated=record.get("truncated", False),
            ))
    if meta is None:
        raise ValueError(f"{path}: empty results file")
    result = EvalResult(
        model_id=meta["model_id"],
        stage=meta["stage"],
        dataset_id=meta["dataset_id"],
        input_form=meta["input_form"],
        samples=samples,
    )
    result.permutation_min_wer = meta.get("permutation_min_wer")
    return result


def run_ablation_no_speech(
    model: SopModel, dataset: Dataset, max_decode_len: int = 64,
    model_id: str = "", stage: str = "3",
) -> EvalResult:
    """'- Mixed speech encoding' row: decoder input drops the projected
    speech frames and keeps only the prompt and text embeddings."""
    result = evaluate_model(
        model, dataset, "sop-only", max_decode_len,
        model_id=model_id, stage=stage,
    )
    result.model_id = (model_id or result.model_id) + " - Mixed speech encoding"
    return result


INPUT_FORM_LABELS = {
    "sot": "[H_p; E_t]",
    "sop": "[E_sop; H_p; E_t]",
    "sop-only": "[E_sop; E_t]",
}


def report(
    results: list[EvalResult],
    out_dir: Path,
    baseline_index: int = 0,
    n_resamples: int = 10000,
    seed: int = 0,
) -> str:
    """Emit a machine-readable summary (TSV) plus an aligned text table.

    Rows significantly better than the baseline row (paired bootstrap,
    p < 0.05, same dataset) are marked with '*'.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    baseline = results[baseline_index] if results else None
    for i, r in enumerate(results):
        marker = ""
        p_value = None
        if baseline is not None and i != baseline_index and r.dataset_id == baseline.dataset_id:
            pairs_a = [(s.sample_id, s.errors, s.ref_len) for s in baseline.samples]
            pairs_b = [(s.sample_id, s.errors, s.ref_len) for s in r.samples]
            if {p[0] for p in pairs_a} == {p[0] for p in pairs_b}:
                p_value = significance_test(pairs_a, pairs_b, n_resamples, seed)
                if p_value < 0.05 and r.wer < baseline.wer:
                    marker = "*"
        rows.append({
            "model_id": r.model_id,
            "stage": r.stage,
            "input_form": INPUT_FORM_LABELS.get(r.input_form, r.input_form),
            "dataset_id": r.dataset_id,
            "wer": r.wer if r.samples else float("nan"),
            "permutation_min_wer": r.permutation_min_wer,
            "p_value": p_value,
            "significant": marker,
        })

    tsv_path = out_dir / "report.tsv"
    cols = ["model_id", "stage", "input_form", "dataset_id", "wer",
            "permutation_min_wer", "p_value", "significant"]
    with open(tsv_path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in rows:
            fh.write("\t".join("" if row[c] is None else str(row[c]) for c in cols) + "\n")

    widths = {c: max([len(c)] + [len(_fmt(row[c])) for row in rows]) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    for row in rows:
        lines.append("  ".join(_fmt(row[c]).ljust(widths[c]) for c in cols))
    table = "\n".join(lines) + "\n"
    (out_dir / "report.txt").write_text(table)
    return table


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)
