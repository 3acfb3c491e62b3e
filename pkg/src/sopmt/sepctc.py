"""Separator and serialized CTC branch.

Disentangles the second-downsampling-layer encoding into per-talker streams
(first-speaking-first-out), scores each stream against its talker transcript
with a CTC loss, greedy-decodes the streams, and assembles the decoder prompt.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .vocab import Vocabulary

NEG_INF = float("-inf")
# finite sentinel for unreachable lattice states; a true -inf makes the
# logsumexp backward emit NaN when a column is entirely unreachable
FINITE_NEG = -1.0e30


@dataclass
class SopPrompt:
    branch_sequences: list[list[int]]
    concatenated: list[int]
    frame_posteriors: list[np.ndarray] = field(default_factory=list)


class Separator(nn.Module):
    """LSTM + LayerNorm + one ReLU'd linear head per talker, plus per-head
    CTC output projections. Head s corresponds to the s-th speaking talker."""

    def __init__(self, dim: int, num_talkers: int, ctc_vocab_size: int):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("separator dim must be even")
        self.num_talkers = num_talkers
        self.lstm = nn.LSTM(dim, dim // 2, batch_first=True, bidirectional=True)
        self.norm = nn.LayerNorm(dim)
        self.heads = nn.ModuleList(nn.Linear(dim, dim) for _ in range(num_talkers))
        self.ctc_proj = nn.ModuleList(
            nn.Linear(dim, ctc_vocab_size) for _ in range(num_talkers)
        )

    def separate(self, h2: torch.Tensor, lengths: torch.Tensor) -> list[torch.Tensor]:
        """h2: (B, T2, D) -> S tensors of shape (B, T2, D)."""
        packed = pack_padded_sequence(
            h2, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, _ = self.lstm(packed)
        x, _ = pad_packed_sequence(out, batch_first=True, total_length=h2.shape[1])
        x = self.norm(x)
        return [torch.relu(head(x)) for head in self.heads]

    def ctc_logits(self, h_sep: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(h_sep) != self.num_talkers:
            raise ValueError(
                f"expected {self.num_talkers} separated streams, got {len(h_sep)}"
            )
        return [proj(h) for proj, h in zip(self.ctc_proj, h_sep)]


def _repeats(target: list[int]) -> int:
    return sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])


def ctc_feasible(target: list[int], num_frames: int) -> bool:
    """A target fits iff its length plus the blanks forced between adjacent
    repeats does not exceed the frame count."""
    return len(target) + _repeats(target) <= num_frames


def ctc_loss(logits: torch.Tensor, target: list[int], blank: int = 0) -> torch.Tensor:
    """Negative log probability of all alignments collapsing to `target`.

    logits: (T, V) unnormalized scores; differentiable w.r.t. logits.
    Infeasible targets return +inf detached from the graph rather than raising,
    so batch members can be masked out of the mean.
    """
    t_frames, _ = logits.shape
    if any(c == blank for c in target):
        raise ValueError("CTC target must not contain the blank token")
    if not target or not ctc_feasible(target, t_frames):
        if not target:
            # empty target: probability of all-blank path
            logp = torch.log_softmax(logits, dim=-1)
            return -logp[:, blank].sum()
        return torch.tensor(float("inf"), dtype=logits.dtype, device=logits.device)

    logp = torch.log_softmax(logits, dim=-1)
    ext = [blank]
    for c in target:
        ext.extend((c, blank))
    n = len(ext)  # 2*len(target) + 1
    ext_idx = torch.tensor(ext, dtype=torch.long, device=logits.device)
    # positions allowed to skip over the preceding blank (distinct labels only)
    skip = torch.zeros(n, dtype=torch.bool, device=logits.device)
    for s in range(2, n):
        skip[s] = s % 2 == 1 and ext[s] != ext[s - 2]

    ninf = torch.full((1,), FINITE_NEG, dtype=logits.dtype, device=logits.device)
    alpha = torch.full((n,), FINITE_NEG, dtype=logits.dtype, device=logits.device)
    alpha = torch.cat([logp[0, ext_idx[:2]], alpha[2:]]) if n > 1 else logp[0, ext_idx]
    for t in range(1, t_frames):
        stay = alpha
        step = torch.cat([ninf, alpha[:-1]])
        jump = torch.cat([ninf, ninf, alpha[:-2]])
        jump = torch.where(skip, jump, ninf.expand(n))
        alpha = torch.logsumexp(torch.stack([stay, step, jump]), dim=0) + logp[t, ext_idx]
    total = torch.logsumexp(alpha[-2:], dim=0)
    return -total


def ctc_loss_batch(
    logits: torch.Tensor,
    frame_lengths: torch.Tensor,
    targets: list[list[int]],
    blank: int = 0,
) -> torch.Tensor:
    """Vectorized forward recursion over a batch; one loss per sample.

    logits: (B, T_max, V); frame_lengths: valid frames per sample. All targets
    must be nonempty and feasible for their frame count (caller filters).
    Matches per-sample ctc_loss to float tolerance.
    """
    b, t_max, _ = logits.shape
    for tgt, t_i in zip(targets, frame_lengths.tolist()):
        if not tgt or not ctc_feasible(tgt, int(t_i)):
            raise ValueError("ctc_loss_batch requires feasible nonempty targets")
    logp = torch.log_softmax(logits, dim=-1)
    n_lens = [2 * len(t) + 1 for t in targets]
    n_max = max(n_lens)
    ext = torch.full((b, n_max), blank, dtype=torch.long, device=logits.device)
    skip = torch.zeros((b, n_max), dtype=torch.bool, device=logits.device)
    for i, tgt in enumerate(targets):
        for j, c in enumerate(tgt):
            ext[i, 2 * j + 1] = c
            if j > 0 and tgt[j] != tgt[j - 1]:
                skip[i, 2 * j + 1] = True

    neg = torch.full((b, 1), FINITE_NEG, dtype=logits.dtype, device=logits.device)
    alpha = torch.full((b, n_max), FINITE_NEG, dtype=logits.dtype,
                       device=logits.device)
    emit0 = logp[:, 0].gather(1, ext)
    alpha = torch.cat([emit0[:, :2], alpha[:, 2:]], dim=1)
    active_t = frame_lengths.to(logits.device)[:, None]
    for t in range(1, t_max):
        stay = alpha
        step = torch.cat([neg, alpha[:, :-1]], dim=1)
        jump = torch.cat([neg, neg, alpha[:, :-2]], dim=1)
        jump = torch.where(skip, jump, neg.expand(b, n_max))
        new = (
            torch.logsumexp(torch.stack([stay, step, jump]), dim=0)
            + logp[:, t].gather(1, ext)
        )
        alpha = torch.where(active_t > t, new, alpha)
    idx = torch.tensor([[n - 2, n - 1] for n in n_lens], device=logits.device)
    total = torch.logsumexp(alpha.gather(1, idx), dim=1)
    return -total


def ctc_loss_oracle(logits: torch.Tensor, target: list[int], blank: int = 0) -> float:
    """Exact brute force over all V^T frame label paths; test oracle only."""
    t_frames, vocab = logits.shape
    if t_frames > 8 or vocab > 5:
        raise ValueError(f"oracle limited to T<=8, V<=5; got T={t_frames}, V={vocab}")
    logp = torch.log_softmax(logits.detach().double(), dim=-1).numpy()
    total = NEG_INF
    target_t = tuple(target)
    for path in itertools.product(range(vocab), repeat=t_frames):
        collapsed = []
        prev = None
        for p in path:
            if p != prev and p != blank:
                collapsed.append(p)
            prev = p
        if tuple(collapsed) != target_t:
            continue
        total = np.logaddexp(total, sum(logp[t, p] for t, p in enumerate(path)))
    return float("inf") if total == NEG_INF else -float(total)


def serialized_ctc_loss(
    logits_per_branch: list[torch.Tensor],
    targets: list[list[int]],
    blank: int = 0,
) -> torch.Tensor:
    """Sum of per-branch CTC losses; targets must already be in speaking order."""
    if len(logits_per_branch) != len(targets):
        raise ValueError(
            f"{len(logits_per_branch)} branches vs {len(targets)} targets"
        )
    losses = [ctc_loss(lg, tg, blank) for lg, tg in zip(logits_per_branch, targets)]
    return torch.stack(losses).sum()


def greedy_decode(logits) -> list[int]:
    """Per-frame argmax (ties -> lowest id), collapse repeats, drop blanks."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    if len(logits) == 0:
        return []
    frames = np.argmax(logits, axis=-1)
    out = []
    prev = None
    for p in frames.tolist():
        if p != prev and p != 0:
            out.append(int(p))
        prev = p
    return out


def build_sop(
    branch_sequences: list[list[int]], vocab: Vocabulary, delimiter: bool = True
) -> SopPrompt:
    """Concatenate branch decodes in speaking order, <sc> between branches.
    Empty branches contribute an empty segment but keep their delimiter."""
    concatenated: list[int] = []
    for i, seq in enumerate(branch_sequences):
        if delimiter and i > 0:
            concatenated.append(vocab.sc_id)
        concatenated.extend(seq)
    return SopPrompt(branch_sequences=[list(s) for s in branch_sequences],
                     concatenated=concatenated)


def embed_sop(prompt: SopPrompt, embedding: nn.Embedding) -> torch.Tensor:
    """Embed the prompt with the decoder's own token table."""
    for tok in prompt.concatenated:
        if not (0 <= tok < embedding.num_embeddings):
            raise ValueError(f"prompt token {tok} outside the decoder vocabulary")
    idx = torch.tensor(prompt.concatenated, dtype=torch.long,
                       device=embedding.weight.device)
    return embedding(idx)


def dump_alignment(
    frame_posteriors: list[np.ndarray],
    vocab: Vocabulary,
    ref_spans: list[list[tuple[int, int, int]]] | None = None,
    downsample_factor: int = 4,
) -> str:
    """Render per-branch frame argmax labels as a text grid.

    One column per frame (all-blank columns removed), one row per branch.
    With reference spans (mixture frame coords, speaking order), cells whose
    token matches no reference token overlapping that frame window get a '*'.
    """
    if not frame_posteriors:
        raise ValueError("no branches to dump")
    t2 = len(frame_posteriors[0])
    if any(len(fp) != t2 for fp in frame_posteriors):
        raise ValueError("branches disagree on frame count")

    keep = [t for t in range(t2) if any(int(fp[t]) != 0 for fp in frame_posteriors)]
    width = 6
    lines = ["frame " + "".join(f"{t:>{width}}" for t in keep)]
    for s, fp in enumerate(frame_posteriors):
        cells = []
        for t in keep:
            tok = int(fp[t])
            name = vocab.token_name(tok) if tok != 0 else "."
            if tok != 0 and ref_spans is not None and s < len(ref_spans):
                lo, hi = t * downsample_factor, (t + 1) * downsample_factor
                ok = any(
                    r_tok == tok and r_start < hi and r_end > lo
                    for r_tok, r_start, r_end in ref_spans[s]
                )
                if not ok:
                    name += "*"
            cells.append(f"{name:>{width}}")
        lines.append(f"spk{s + 1:02d}" + "".join(cells))
    return "\n".join(lines) + "\n"
