"""Synthetic overlapping-utterance simulator.

Stands in for real mixed audio: each content token deterministically emits a
few noisy copies of a fixed random embedding, talker streams are shifted by
sampled start offsets and summed. Everything is a pure function of
(config, master seed).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vocab import Vocabulary

FEATURE_MAGIC = b"SOPF"
FEATURE_VERSION = 1


class ManifestError(ValueError):
    pass


@dataclass
class EmissionModel:
    feature_dim: int
    num_content: int
    duration_range: tuple[int, int]
    noise_sigma: float
    seed: int
    token_embeddings: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d_min, d_max = self.duration_range
        if d_min < 1 or d_max < d_min:
            raise ValueError(f"bad duration range {self.duration_range}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        rng = np.random.default_rng(self.seed)
        # row 0 (blank) is never emitted but keeps token-id indexing direct
        table = rng.standard_normal((self.num_content + 1, self.feature_dim))
        table[0] = 0.0
        self.token_embeddings = table.astype(np.float64)

    def to_meta(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "num_content": self.num_content,
            "duration_range": list(self.duration_range),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "EmissionModel":
        return cls(
            feature_dim=meta["feature_dim"],
            num_content=meta["num_content"],
            duration_range=tuple(meta["duration_range"]),
            noise_sigma=meta["noise_sigma"],
            seed=meta["seed"],
        )


@dataclass
class MixtureSample:
    features: np.ndarray  # (T, F) float32
    talker_transcripts: list[list[int]]
    offsets: list[int]
    condition: str  # "clean" | "noisy"
    sample_id: str
    seed: int
    # per talker: list of (token, start, end) spans in mixture frame coords
    alignments: list[list[tuple[int, int, int]]] = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, MixtureSample):
            return NotImplemented
        return (
            np.array_equal(self.features, other.features)
            and self.talker_transcripts == other.talker_transcripts
            and self.offsets == other.offsets
            and self.condition == other.condition
            and self.sample_id == other.sample_id
            and self.seed == other.seed
            and self.alignments == other.alignments
        )


@dataclass
class Dataset:
    meta: dict
    samples: list[MixtureSample]

    @property
    def dataset_id(self) -> str:
        return self.meta["dataset_id"]


def gen_talker_transcript(
    vocab: Vocabulary, len_range: tuple[int, int], rng: np.random.Generator
) -> list[int]:
    lo, hi = len_range
    if not (1 <= lo <= hi <= 64):
        raise ValueError(f"transcript length range {len_range} outside [1, 64]")
    if vocab.num_content < 1:
        raise ValueError("empty content alphabet")
    length = int(rng.integers(lo, hi + 1))
    return [int(t) for t in rng.integers(1, vocab.num_content + 1, size=length)]


def synth_features(
    tokens: list[int], em: EmissionModel, rng: np.random.Generator
) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """Emit duration-sampled noisy embedding frames per token.

    Returns (features (T,F), spans [(token, start, end)]) with end exclusive.
    """
    d_min, d_max = em.duration_range
    frames = []
    spans = []
    pos = 0
    for tok in tokens:
        if not (1 <= tok <= em.num_content):
            raise ValueError(f"token {tok} not in emission model")
        k = int(rng.integers(d_min, d_max + 1))
        emb = em.token_embeddings[tok]
        block = np.tile(emb, (k, 1))
        if em.noise_sigma > 0:
            block = block + rng.normal(0.0, em.noise_sigma, size=block.shape)
        frames.append(block)
        spans.append((tok, pos, pos + k))
        pos += k
    return np.concatenate(frames, axis=0).astype(np.float32), spans


def sample_offsets(
    num_talkers: int,
    utterance_lengths: list[int],
    min_gap: int,
    rng: np.random.Generator,
) -> list[int]:
    """First talker at 0; each later talker starts >= min_gap after the
    previous one and inside the mixture built so far (guaranteed overlap)."""
    if min_gap < 1:
        raise ValueError("min_gap must be >= 1")
    if len(utterance_lengths) != num_talkers:
        raise ValueError("one utterance length per talker required")
    offsets = [0]
    window_end = utterance_lengths[0]
    for s in range(1, num_talkers):
        lo = offsets[-1] + min_gap
        if lo >= window_end:
            raise ValueError(
                f"infeasible offsets: talker {s} cannot start at >= {lo} "
                f"inside a window of length {window_end}"
            )
        off = int(rng.integers(lo, window_end))
        offsets.append(off)
        window_end = max(window_end, off + utterance_lengths[s])
    return offsets


def mix(
    talker_features: list[np.ndarray],
    offsets: list[int],
    noise_sigma_mix: float,
    rng: np.random.Generator,
) -> np.ndarray:
    if len(talker_features) != len(offsets):
        raise ValueError("one offset per talker stream required")
    if any(o < 0 for o in offsets):
        raise ValueError(f"negative offset in {offsets}")
    total = max(o + len(f) for o, f in zip(offsets, talker_features))
    feat_dim = talker_features[0].shape[1]
    out = np.zeros((total, feat_dim), dtype=np.float64)
    for off, f in zip(offsets, talker_features):
        out[off : off + len(f)] += f
    if noise_sigma_mix > 0:
        out += rng.normal(0.0, noise_sigma_mix, size=out.shape)
    return out.astype(np.float32)


def overlap_ratio(sample: MixtureSample) -> float:
    """Fraction of mixture frames where at least two talkers are active."""
    total = len(sample.features)
    active = np.zeros(total, dtype=np.int32)
    for off, spans in zip(sample.offsets, sample.alignments):
        if spans:
            active[spans[0][1] : spans[-1][2]] += 1
    return float(np.mean(active >= 2))


def generate_sample(
    vocab: Vocabulary,
    em: EmissionModel,
    num_talkers: int,
    transcript_len: tuple[int, int],
    min_gap: int,
    mix_noise_sigma: float,
    condition: str,
    sample_id: str,
    seed_key: list[int],
) -> MixtureSample:
    """Build one mixture. The clean and noisy variants of the same seed_key
    share transcripts, durations, and offsets; only window noise differs."""
    rng = np.random.default_rng(seed_key)
    transcripts = [
        gen_talker_transcript(vocab, transcript_len, rng) for _ in range(num_talkers)
    ]
    streams, span_lists = zip(*(synth_features(t, em, rng) for t in transcripts))
    offsets = sample_offsets(num_talkers, [len(s) for s in streams], min_gap, rng)
    sigma = mix_noise_sigma if condition == "noisy" else 0.0
    noise_rng = np.random.default_rng(seed_key + [99])
    features = mix(list(streams), offsets, sigma, noise_rng)
    alignments = [
        [(tok, off + a, off + b) for tok, a, b in spans]
        for off, spans in zip(offsets, span_lists)
    ]
    return MixtureSample(
        features=features,
        talker_transcripts=transcripts,
        offsets=offsets,
        condition=condition,
        sample_id=sample_id,
        seed=seed_key[-1],
        alignments=alignments,
    )


def write_features(path: Path, features: np.ndarray) -> None:
    t, f = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t, f))
        fh.write(features.astype("<f4").tobytes())


def read_features(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != FEATURE_MAGIC:
            raise ManifestError(f"{path}: not a feature file")
        version, t, f = struct.unpack("<III", header[4:])
        if version != FEATURE_VERSION:
            raise ManifestError(f"{path}: unsupported feature version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != t * f:
        raise ManifestError(f"{path}: truncated feature payload")
    return data.reshape(t, f).copy()


def write_manifest(dataset: Dataset, path: Path) -> None:
    path = Path(path)
    feat_dir = path.parent / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps({"dataset_meta": dataset.meta}, sort_keys=True) + "\n")
        for s in dataset.samples:
            rel = f"features/{s.sample_id}.bin"
            write_features(path.parent / rel, s.features)
            record = {
                "sample_id": s.sample_id,
                "condition": s.condition,
                "offsets": s.offsets,
                "talker_transcripts": s.talker_transcripts,
                "feature_file": rel,
                "seed": s.seed,
                "alignments": [[list(sp) for sp in spans] for spans in s.alignments],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_manifest(path: Path) -> Dataset:
    path = Path(path)
    samples = []
    meta = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: malformed record: {e}") from e
            if lineno == 1:
                if "dataset_meta" not in record:
                    raise ManifestError(f"{path}:1: missing dataset_meta header")
                meta = record["dataset_meta"]
                continue
            try:
                features = read_features(path.parent / record["feature_file"])
                samples.append(
                    MixtureSample(
                        features=features,
                        talker_transcripts=record["talker_transcripts"],
                        offsets=record["offsets"],
                        condition=record["condition"],
                        sample_id=record["sample_id"],
                        seed=record["seed"],
                        alignments=[
                            [tuple(sp) for sp in spans]
                            for spans in record["alignments"]
                        ],
                    )
                )
            except KeyError as e:
                raise ManifestError(f"{path}:{lineno}: missing field {e}") from e
    if meta is None:
        raise ManifestError(f"{path}: empty manifest (no header record)")
    return Dataset(meta=meta, samples=samples)


def generate_dataset(
    vocab: Vocabulary,
    em: EmissionModel,
    num_talkers: int,
    size: int,
    transcript_len: tuple[int, int],
    min_gap: int,
    mix_noise_sigma: float,
    condition: str,
    split: str,
    master_seed: int,
    config_hash: str = "",
) -> Dataset:
    split_code = {"train": 0, "dev": 1, "eval": 2}[split]
    cond_code = {"clean": 0, "noisy": 1}[condition]
    samples = []
    for i in range(size):
        sid = f"{num_talkers}spk-{condition}-{split}-{i:05d}"
        # the condition is excluded from the seed so clean/noisy pairs share
        # transcripts and offsets
        seed_key = [master_seed, num_talkers, split_code, i]
        samples.append(
            generate_sample(
                vocab,
                em,
                num_talkers,
                transcript_len,
                min_gap,
                mix_noise_sigma,
                condition,
                sid,
                seed_key,
            )
        )
    meta = {
        "dataset_id": f"{num_talkers}spk-{condition}-{split}-{config_hash[:8]}",
        "num_talkers": num_talkers,
        "condition": condition,
        "split": split,
        "num_content": vocab.num_content,
        "emission_model": em.to_meta(),
        "transcript_len": list(transcript_len),
        "min_gap": min_gap,
        "mix_noise_sigma": mix_noise_sigma,
        "master_seed": master_seed,
        "config_hash": config_hash,
        "size": size,
        "cond_code": cond_code,
    }
    return Dataset(meta=meta, samples=samples)
