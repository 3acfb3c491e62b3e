"""Versioned binary checkpoint container.

Layout: magic, format version, metadata length, canonical-JSON metadata,
then raw little-endian float32 payloads in the order declared by the
metadata's tensor index. Saving a loaded checkpoint reproduces the bytes.
"""
from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

CKPT_MAGIC = b"SOPC"
CKPT_VERSION = 1

STAGE_ORDER = {"1": None, "2": "1", "3": "2", "single": None}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def stage_id(self) -> str:
        return self.meta["stage_id"]

    def save(self, path: Path) -> None:
        index = self.meta.get("tensor_index")
        if index is None:
            index = [{"name": n, "shape": list(self.tensors[n].shape)}
                     for n in sorted(self.tensors)]
            self.meta["tensor_index"] = index
        meta_bytes = json.dumps(self.meta, sort_keys=True,
                                separators=(",", ":")).encode()
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<II", CKPT_VERSION, len(meta_bytes)))
            fh.write(meta_bytes)
            for entry in index:
                fh.write(self.tensors[entry["name"]].astype("<f4").tobytes())

    @classmethod
    def load(cls, path: Path) -> "Checkpoint":
        with open(path, "rb") as fh:
            header = fh.read(12)
            if len(header) != 12 or header[:4] != CKPT_MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file")
            version, meta_len = struct.unpack("<II", header[4:])
            if version != CKPT_VERSION:
                raise CheckpointError(f"{path}: unsupported version {version}")
            meta = json.loads(fh.read(meta_len).decode())
            tensors = {}
            for entry in meta["tensor_index"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(fh.read(4 * count), dtype="<f4")
                if data.size != count:
                    raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
                tensors[entry["name"]] = data.reshape(shape).copy()
        return cls(meta=meta, tensors=tensors)


def checkpoint_from_model(
    model,
    stage_id: str,
    config_dict: dict,
    config_hash: str,
    merge_flags: dict[str, bool],
    optimizer_state: dict[str, np.ndarray] | None = None,
    optimizer_step: int = 0,
    rng_state: dict | None = None,
    metrics_history: list | None = None,
) -> Checkpoint:
    tensors = {
        name: p.detach().cpu().numpy().astype(np.float32)
        for name, p in model.named_parameters()
    }
    if optimizer_state:
        tensors.update(optimizer_state)
    meta = {
        "format": "sopmt-checkpoint",
        "version": CKPT_VERSION,
        "stage_id": stage_id,
        "config": config_dict,
        "config_hash": config_hash,
        "merge_flags": merge_flags,
        "lora_groups": sorted(model.decoder.attached_groups()),
        "has_separator": model.separator is not None,
        "num_talkers": model.num_talkers,
        "feature_dim": model.feature_dim,
        "num_content": model.vocab.num_content,
        "optimizer_step": optimizer_step,
        "rng_state": _encode_rng(rng_state),
        "metrics_history": metrics_history or [],
    }
    return Checkpoint(meta=meta, tensors=tensors)


def _encode_rng(rng_state: dict | None) -> dict | None:
    if rng_state is None:
        return None
    out = {}
    for key, val in rng_state.items():
        if isinstance(val, (bytes, bytearray)):
            out[key] = {"b64": base64.b64encode(bytes(val)).decode()}
        else:
            out[key] = val
    return out


def model_from_checkpoint(ckpt: Checkpoint, model_cls=None):
    """Rebuild a SopModel with the stored architecture and parameter values."""
    from .config import config_from_dict
    from .model import SopModel
    from .vocab import Vocabulary

    cfg = config_from_dict(ckpt.meta["config"])
    vocab = Vocabulary(ckpt.meta["num_content"])
    model = SopModel(cfg.model, vocab, ckpt.meta["feature_dim"],
                     ckpt.meta["num_talkers"])
    if ckpt.meta["has_separator"]:
        model.add_separator(ckpt.meta["num_talkers"])
    for group in ckpt.meta["lora_groups"]:
        model.decoder.attach_lora(group, cfg.model.lora_rank, cfg.model.lora_alpha)
    model.decoder.merged_groups = {
        g for g, merged in ckpt.meta["merge_flags"].items() if merged
    }
    with torch.no_grad():
        params = dict(model.named_parameters())
        for name, p in params.items():
            if name not in ckpt.tensors:
                raise CheckpointError(f"checkpoint missing parameter {name}")
            p.copy_(torch.from_numpy(ckpt.tensors[name]))
    return model, cfg
