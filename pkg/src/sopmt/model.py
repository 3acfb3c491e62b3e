"""Full model container: encoder stack, optional separator branch, decoder.

Owns parameter-group bookkeeping for stage-wise trainability and the batched
forward paths used by training and evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .decoder import CausalDecoder, ce_loss
from .encoder import Downsampler, MixtureEncoder, Projector
from .sepctc import (
    SopPrompt,
    build_sop,
    ctc_feasible,
    ctc_loss,
    ctc_loss_batch,
    embed_sop,
    greedy_decode,
)
from .vocab import Vocabulary

PARAM_GROUPS = (
    "encoder",
    "downsample",
    "projector",
    "separator",
    "ctc_heads",
    "decoder_base",
    "lora_A",
    "lora_B",
)


def batch_features(features: list[np.ndarray], dtype=torch.float32):
    """Right-pad frame matrices into a (B, T_max, F) tensor plus lengths."""
    lengths = torch.tensor([len(f) for f in features], dtype=torch.long)
    t_max = int(lengths.max())
    out = torch.zeros(len(features), t_max, features[0].shape[1], dtype=dtype)
    for i, f in enumerate(features):
        out[i, : len(f)] = torch.as_tensor(f, dtype=dtype)
    return out, lengths


@dataclass
class GenerationResult:
    tokens: list[int]
    truncated: bool


class SopModel(nn.Module):
    def __init__(
        self,
        model_cfg: ModelConfig,
        vocab: Vocabulary,
        feature_dim: int,
        num_talkers: int | None = None,
    ):
        super().__init__()
        self.cfg = model_cfg
        self.vocab = vocab
        self.feature_dim = feature_dim
        self.num_talkers = num_talkers
        self.encoder = MixtureEncoder(feature_dim, model_cfg.encoder_dim,
                                      model_cfg.encoder_blocks)
        self.downsampler = Downsampler(model_cfg.encoder_dim, model_cfg.conv_dim)
        self.projector = Projector(model_cfg.conv_dim, model_cfg.decoder_dim)
        self.decoder = CausalDecoder(
            vocab.decoder_vocab_size,
            dim=model_cfg.decoder_dim,
            layers=model_cfg.decoder_layers,
            heads=model_cfg.decoder_heads,
            ff_dim=model_cfg.decoder_ff_dim,
            max_positions=model_cfg.max_positions,
        )
        self.separator: nn.Module | None = None

    def add_separator(self, num_talkers: int) -> None:
        from .sepctc import Separator

        self.num_talkers = num_talkers
        self.separator = Separator(self.cfg.conv_dim, num_talkers,
                                   self.vocab.ctc_vocab_size)

    # -- parameter groups ----------------------------------------------------
    def param_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        groups: dict[str, dict[str, nn.Parameter]] = {g: {} for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            groups[self._group_of(name)][name] = p
        return {g: ps for g, ps in groups.items() if ps}

    @staticmethod
    def _group_of(name: str) -> str:
        if name.startswith("encoder."):
            return "encoder"
        if name.startswith("downsampler."):
            return "downsample"
        if name.startswith("projector."):
            return "projector"
        if name.startswith("separator.ctc_proj."):
            return "ctc_heads"
        if name.startswith("separator."):
            return "separator"
        if ".adapters.A." in name:
            return "lora_A"
        if ".adapters.B." in name:
            return "lora_B"
        if name.startswith("decoder."):
            return "decoder_base"
        raise ValueError(f"parameter {name} belongs to no group")

    # -- encoder-side forward --------------------------------------------------
    def encode_features(self, features: list[np.ndarray]):
        """Returns (h2, len2, h_p, len3)."""
        feats, lengths = batch_features(features, dtype=self.projector.linear.weight.dtype)
        h_e = self.encoder(feats, lengths)
        h2, len2, h_d, len3 = self.downsampler(h_e, lengths)
        h_p = self.projector(h_d)
        return h2, len2, h_p, len3

    # -- serialized CTC branch -------------------------------------------------
    def ctc_branch_logits(self, h2: torch.Tensor, len2: torch.Tensor):
        if self.separator is None:
            raise ValueError("model has no separator branch")
        h_sep = self.separator.separate(h2, len2)
        return self.separator.ctc_logits(h_sep)

    def serialized_ctc_batch_loss(
        self, logits_per_branch: list[torch.Tensor], len2: torch.Tensor,
        branch_targets: list[list[list[int]]],
    ):
        """Mean CTC loss over feasible (sample, branch) terms, scaled by the
        branch count so magnitude matches the per-sample branch sum.

        branch_targets[i][s] = transcript of the s-th speaking talker of
        sample i. Returns (loss, infeasible_count).
        """
        infeasible = 0
        num_branches = len(logits_per_branch)
        rows, lens, targets, extra = [], [], [], []
        for i in range(len(branch_targets)):
            t2 = int(len2[i])
            for s in range(num_branches):
                target = branch_targets[i][s]
                if not ctc_feasible(target, t2):
                    infeasible += 1
                    continue
                if not target:
                    extra.append(ctc_loss(logits_per_branch[s][i, :t2], target))
                    continue
                rows.append(logits_per_branch[s][i])
                lens.append(t2)
                targets.append(target)
        terms = list(extra)
        if rows:
            losses = ctc_loss_batch(
                torch.stack(rows), torch.tensor(lens, dtype=torch.long), targets
            )
            terms.append(losses)
        if not terms:
            zero = torch.zeros((), dtype=logits_per_branch[0].dtype)
            return zero, infeasible
        flat = torch.cat([t.reshape(-1) for t in terms])
        return flat.mean() * num_branches, infeasible

    def decode_prompts(
        self, logits_per_branch: list[torch.Tensor], len2: torch.Tensor
    ) -> list[SopPrompt]:
        """Greedy-decode each branch (no gradient) and assemble SOPs."""
        prompts = []
        for i in range(len(len2)):
            t2 = int(len2[i])
            branches = [greedy_decode(lg[i, :t2]) for lg in logits_per_branch]
            prompt = build_sop(branches, self.vocab, delimiter=self.cfg.sop_delimiter)
            prompt.frame_posteriors = [
                np.argmax(lg[i, :t2].detach().cpu().numpy(), axis=-1)
                for lg in logits_per_branch
            ]
            prompts.append(prompt)
        return prompts

    # -- decoder paths -----------------------------------------------------------
    def _assemble_rows(
        self,
        prompts: list[SopPrompt] | None,
        h_p: torch.Tensor | None,
        len3: torch.Tensor | None,
        text_tokens: list[list[int]],
    ):
        """Left-aligned row concatenation [E_sop; H_p; E_t] per sample.

        Returns (rows (B, L, D), text_start per sample). Padding sits on the
        right, so causal attention keeps valid positions pad-independent.
        """
        batch = len(text_tokens)
        pieces: list[list[torch.Tensor]] = []
        starts = []
        for i in range(batch):
            segs = []
            if prompts is not None and prompts[i] is not None:
                segs.append(embed_sop(prompts[i], self.decoder.embed))
            if h_p is not None:
                segs.append(h_p[i, : int(len3[i])])
            start = sum(int(s.shape[0]) for s in segs)
            segs.append(self.decoder.embed_text(text_tokens[i]))
            pieces.append(segs)
            starts.append(start)
        lengths = [sum(int(s.shape[0]) for s in segs) for segs in pieces]
        l_max = max(lengths)
        dim = self.decoder.dim
        dtype = self.decoder.embed.weight.dtype
        rows = torch.zeros(batch, l_max, dim, dtype=dtype)
        for i, segs in enumerate(pieces):
            cat = torch.cat(segs, dim=0)
            rows[i, : cat.shape[0]] = cat
        return rows, starts

    def sot_logits(
        self,
        labels: list[list[int]],
        h_p: torch.Tensor | None,
        len3: torch.Tensor | None,
        prompts: list[SopPrompt] | None = None,
        active_lora: frozenset[str] = frozenset(),
    ) -> list[torch.Tensor]:
        """Teacher-forced logits at text positions; one (len(label)+1, V)
        tensor per sample."""
        text = [[self.vocab.bos_id] + lab for lab in labels]
        rows, starts = self._assemble_rows(prompts, h_p, len3, text)
        logits = self.decoder.forward_embedded(rows, active_lora)
        return [
            logits[i, starts[i] : starts[i] + len(text[i])]
            for i in range(len(labels))
        ]

    def sot_ce_batch_loss(
        self,
        labels: list[list[int]],
        h_p: torch.Tensor | None,
        len3: torch.Tensor | None,
        prompts: list[SopPrompt] | None = None,
        active_lora: frozenset[str] = frozenset(),
    ) -> torch.Tensor:
        per_sample = self.sot_logits(labels, h_p, len3, prompts, active_lora)
        losses = [
            ce_loss(lg, lab, self.vocab.eos_id) for lg, lab in zip(per_sample, labels)
        ]
        return torch.stack(losses).mean()

    @torch.no_grad()
    def generate_batch(
        self,
        h_p: torch.Tensor | None,
        len3: torch.Tensor | None,
        prompts: list[SopPrompt] | None,
        max_len: int,
        active_lora: frozenset[str] = frozenset(),
    ) -> list[GenerationResult]:
        """Greedy autoregressive decoding from bos until eos or max_len."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        batch = len(len3) if len3 is not None else len(prompts)
        generated: list[list[int]] = [[] for _ in range(batch)]
        finished = [False] * batch
        for _ in range(max_len):
            text = [[self.vocab.bos_id] + g for g in generated]
            rows, starts = self._assemble_rows(prompts, h_p, len3, text)
            logits = self.decoder.forward_embedded(rows, active_lora)
            for i in range(batch):
                if finished[i]:
                    continue
                pos = starts[i] + len(text[i]) - 1
                nxt = int(torch.argmax(logits[i, pos]))
                if nxt == self.vocab.eos_id:
                    finished[i] = True
                else:
                    generated[i].append(nxt)
            if all(finished):
                break
        return [
            GenerationResult(tokens=g, truncated=not f)
            for g, f in zip(generated, finished)
        ]
