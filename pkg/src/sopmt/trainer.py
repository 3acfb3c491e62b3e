"""Staged training recipe and the single-stage baseline.

Stage 1 fits the encoder stack and the decoder (plus adapter group A, merged
afterwards) on the serialized CE objective. Stage 2 adds the separator/CTC
branch and trains the encoder side on the hybrid loss with the decoder frozen.
Stage 3 freezes everything except a fresh adapter group B and adapts the
decoder to prompt-conditioned input. The single-stage baseline trains all
groups jointly on the hybrid loss with the prompt path active from step 0.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError, checkpoint_from_model
from .config import RunConfig
from .labels import serialize_transcripts
from .mixsim import Dataset, MixtureSample
from .model import SopModel
from .vocab import Vocabulary

LORA_STAGE1 = "A"
LORA_STAGE3 = "B"


class NumericError(RuntimeError):
    pass


class Adam:
    """Adaptive moment estimation over an explicit name -> parameter map.
    Only the parameters handed in are ever touched; everything else stays
    bitwise identical."""

    def __init__(self, params: dict[str, torch.nn.Parameter],
                 betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: torch.zeros_like(p) for n, p in params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in params.items()}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1 - b1 ** self.step_count
        bc2 = 1 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name].mul_(b1).add_(g, alpha=1 - b1)
            self.v[name].mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.add_(m_hat / (v_hat.sqrt() + self.eps), alpha=-lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"optim.m.{name}"] = self.m[name].cpu().numpy().astype(np.float32)
            out[f"optim.v.{name}"] = self.v[name].cpu().numpy().astype(np.float32)
        return out


def sot_label_tokens(sample: MixtureSample, vocab: Vocabulary) -> list[int]:
    return serialize_transcripts(sample.talker_transcripts, sample.offsets, vocab).tokens


def branch_targets(sample: MixtureSample) -> list[list[int]]:
    order = sorted(range(len(sample.offsets)), key=lambda i: sample.offsets[i])
    return [sample.talker_transcripts[i] for i in order]


def _batch_iter(dataset: Dataset, batch_size: int, rng: np.random.Generator):
    lengths = [len(s.features) for s in dataset.samples]
    order = np.argsort(lengths, kind="stable")
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    while True:
        for ci in rng.permutation(len(chunks)):
            yield [dataset.samples[j] for j in chunks[ci]]


def _lr_at(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    warmup = max(1, int(round(warmup_frac * total_steps)))
    return base_lr * min(1.0, (step + 1) / warmup)


def _check_finite(value: float, step: int, history: list, out_dir: Path | None):
    if math.isfinite(value):
        return
    if out_dir is not None:
        dump = Path(out_dir) / "diagnostic_dump.json"
        dump.write_text(json.dumps({"step": step, "history": history[-50:]}, indent=2))
    raise NumericError(f"non-finite training loss at step {step}")


def _train_loop(
    model: SopModel,
    cfg: RunConfig,
    stage: str,
    loss_fn,
    trainable_groups: tuple[str, ...],
    train_ds: Dataset,
    dev_eval_fn=None,
    out_dir: Path | None = None,
    log_name: str | None = None,
):
    torch.set_num_threads(max(1, cfg.train.num_threads))
    steps = cfg.train.steps[f"stage{stage}" if stage in "123" else stage]
    base_lr = cfg.train.lr[f"stage{stage}" if stage in "123" else stage]
    rng = np.random.default_rng([cfg.seed, {"1": 1, "2": 2, "3": 3, "single": 4}[stage]])
    batches = _batch_iter(train_ds, cfg.train.batch_size, rng)
    trainable = {}
    for group in trainable_groups:
        trainable.update(model.param_groups().get(group, {}))
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable)
    opt = Adam(trainable)
    history: list[dict] = []
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / (log_name or f"stage{stage}.log"), "w")
    try:
        for step in range(steps):
            batch = next(batches)
            opt.zero_grad()
            loss, terms = loss_fn(model, batch)
            loss_val = float(loss.detach())
            _check_finite(loss_val, step, history, out_dir)
            loss.backward()
            lr = _lr_at(step, steps, base_lr, cfg.train.warmup_frac)
            opt.step(lr)
            entry = {"step": step, "loss": loss_val, "lr": lr, **terms}
            if (
                dev_eval_fn is not None
                and cfg.train.eval_every > 0
                and (step + 1) % cfg.train.eval_every == 0
            ):
                entry["dev_wer"] = dev_eval_fn(model)
            history.append(entry)
            if log_fh is not None:
                parts = [f"stage={stage}"] + [
                    f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                    for k, v in entry.items()
                ]
                log_fh.write(" ".join(parts) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    return opt, history


def _rng_state(rng_seed_key: list[int] | None = None) -> dict:
    return {"torch": bytes(torch.get_rng_state().numpy().tobytes())}


def _finish_checkpoint(model, cfg, stage_id, merge_flags, opt, history,
                       out_dir: Path | None, filename: str) -> Checkpoint:
    ckpt = checkpoint_from_model(
        model,
        stage_id=stage_id,
        config_dict=cfg.to_dict(),
        config_hash=cfg.config_hash,
        merge_flags=merge_flags,
        optimizer_state=opt.state_tensors() if opt is not None else None,
        optimizer_step=opt.step_count if opt is not None else 0,
        rng_state=_rng_state(),
        metrics_history=history,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt.save(out_dir / filename)
    return ckpt


def _require_stage(ckpt: Checkpoint, expected: str) -> None:
    if ckpt.stage_id != expected:
        raise CheckpointError(
            f"stage order violation: need a stage-{expected} checkpoint, "
            f"got stage '{ckpt.stage_id}'"
        )


# --------------------------------------------------------------------------
# stage losses


def _stage1_loss(model: SopModel, batch):
    h2, len2, h_p, len3 = model.encode_features([s.features for s in batch])
    labels = [sot_label_tokens(s, model.vocab) for s in batch]
    ce = model.sot_ce_batch_loss(labels, h_p, len3,
                                 active_lora=frozenset({LORA_STAGE1}))
    return ce, {"ce": float(ce.detach())}


def _hybrid_loss(model: SopModel, batch, alpha: float, active_lora: frozenset[str],
                 with_prompt: bool):
    h2, len2, h_p, len3 = model.encode_features([s.features for s in batch])
    labels = [sot_label_tokens(s, model.vocab) for s in batch]
    terms = {}
    total = torch.zeros(())
    logits_branches = None
    infeasible = 0
    if alpha > 0 or with_prompt:
        logits_branches = model.ctc_branch_logits(h2, len2)
    if alpha > 0:
        ctc, infeasible = model.serialized_ctc_batch_loss(
            logits_branches, len2, [branch_targets(s) for s in batch]
        )
        total = total + alpha * ctc
        terms["ctc"] = float(ctc.detach())
    terms["infeasible"] = infeasible
    if alpha < 1:
        prompts = None
        if with_prompt:
            with torch.no_grad():
                detached = [lg.detach() for lg in logits_branches]
            prompts = model.decode_prompts(detached, len2)
        ce = model.sot_ce_batch_loss(labels, h_p, len3, prompts=prompts,
                                     active_lora=active_lora)
        total = total + (1 - alpha) * ce
        terms["ce"] = float(ce.detach())
    return total, terms


def _stage3_loss(model: SopModel, batch):
    with torch.no_grad():
        h2, len2, h_p, len3 = model.encode_features([s.features for s in batch])
        logits_branches = model.ctc_branch_logits(h2, len2)
    prompts = model.decode_prompts(logits_branches, len2)
    labels = [sot_label_tokens(s, model.vocab) for s in batch]
    ce = model.sot_ce_batch_loss(labels, h_p, len3, prompts=prompts,
                                 active_lora=frozenset({LORA_STAGE3}))
    return ce, {"ce": float(ce.detach())}


# --------------------------------------------------------------------------
# stage entry points


def run_stage1(cfg: RunConfig, train_ds: Dataset, dev_eval_fn=None,
               out_dir: Path | None = None) -> Checkpoint:
    vocab = Vocabulary(cfg.data.num_content_tokens)
    torch.manual_seed(cfg.seed)
    model = SopModel(cfg.model, vocab, cfg.data.feature_dim,
                     train_ds.meta["num_talkers"])
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    model.decoder.attach_lora(LORA_STAGE1, cfg.model.lora_rank,
                              cfg.model.lora_alpha, gen)

    # the decoder stand-in has no pretraining, so stage 1 also fits its base
    # weights; a frozen random decoder cannot play the frozen-LLM role
    groups = ("encoder", "downsample", "projector", "lora_A", "decoder_base")
    opt, history = _train_loop(model, cfg, "1", _stage1_loss, groups, train_ds,
                               dev_eval_fn, out_dir)
    model.decoder.merge_lora(LORA_STAGE1)
    return _finish_checkpoint(model, cfg, "1", {"lora_A": True}, opt, history,
                              out_dir, "stage1.ckpt")


def run_stage2(ckpt: Checkpoint, cfg: RunConfig, train_ds: Dataset,
               dev_eval_fn=None, out_dir: Path | None = None) -> Checkpoint:
    _require_stage(ckpt, "1")
    if not ckpt.meta["merge_flags"].get("lora_A"):
        raise CheckpointError("stage-1 checkpoint lacks the lora_A merge flag")
    from .checkpoint import model_from_checkpoint

    model, _ = model_from_checkpoint(ckpt)
    torch.manual_seed(cfg.seed + 2)
    model.add_separator(train_ds.meta["num_talkers"])

    def loss_fn(m, batch):
        return _hybrid_loss(m, batch, cfg.train.alpha, frozenset(), with_prompt=False)

    groups = ("encoder", "downsample", "projector", "separator", "ctc_heads")
    opt, history = _train_loop(model, cfg, "2", loss_fn, groups, train_ds,
                               dev_eval_fn, out_dir)
    return _finish_checkpoint(model, cfg, "2", {"lora_A": True}, opt, history,
                              out_dir, "stage2.ckpt")


def run_stage3(ckpt: Checkpoint, cfg: RunConfig, train_ds: Dataset,
               dev_eval_fn=None, out_dir: Path | None = None) -> Checkpoint:
    _require_stage(ckpt, "2")
    from .checkpoint import model_from_checkpoint

    model, _ = model_from_checkpoint(ckpt)
    gen = torch.Generator().manual_seed(cfg.seed + 3)
    model.decoder.attach_lora(LORA_STAGE3, cfg.model.lora_rank,
                              cfg.model.lora_alpha, gen)

    opt, history = _train_loop(model, cfg, "3", _stage3_loss, ("lora_B",),
                               train_ds, dev_eval_fn, out_dir)
    return _finish_checkpoint(model, cfg, "3", {"lora_A": True, "lora_B": False},
                              opt, history, out_dir, "stage3.ckpt")


def run_single_stage(cfg: RunConfig, train_ds: Dataset, dev_eval_fn=None,
                     out_dir: Path | None = None) -> Checkpoint:
    vocab = Vocabulary(cfg.data.num_content_tokens)
    torch.manual_seed(cfg.seed)
    model = SopModel(cfg.model, vocab, cfg.data.feature_dim,
                     train_ds.meta["num_talkers"])
    model.add_separator(train_ds.meta["num_talkers"])
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    model.decoder.attach_lora(LORA_STAGE1, cfg.model.lora_rank,
                              cfg.model.lora_alpha, gen)

    def loss_fn(m, batch):
        return _hybrid_loss(m, batch, cfg.train.alpha,
                            frozenset({LORA_STAGE1}), with_prompt=True)

    groups = ("encoder", "downsample", "projector", "separator", "ctc_heads",
              "decoder_base", "lora_A")
    opt, history = _train_loop(model, cfg, "single", loss_fn, groups, train_ds,
                               dev_eval_fn, out_dir, log_name="single.log")
    return _finish_checkpoint(model, cfg, "single", {"lora_A": False}, opt,
                              history, out_dir, "single.ckpt")
