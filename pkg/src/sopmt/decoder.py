"""Compact causal autoregressive decoder with attachable low-rank adapters.

The decoder consumes pre-embedded rows (prompt embeddings, projected speech
frames, text embeddings) so the caller controls the input layout. Adapters
live on the attention projections; each adapter group can be activated,
trained, or merged into the base weights independently.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class LoraAdapter(nn.Module):
    def __init__(self, in_features: int, out_features: int, rank: int, alpha: float,
                 generator: torch.Generator | None = None):
        super().__init__()
        a = torch.empty(rank, in_features)
        std = 1.0 / math.sqrt(in_features)
        if generator is None:
            a.normal_(0.0, std)
        else:
            a.normal_(0.0, std, generator=generator)
        self.a = nn.Parameter(a)
        # zero B makes the adapter an exact no-op at attach time
        self.b = nn.Parameter(torch.zeros(out_features, rank))
        self.scale = alpha / rank


class LoraLinear(nn.Module):
    """Linear layer whose effective weight is W + sum of active scale*B@A."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.base = nn.Linear(in_features, out_features)
        self.adapters = nn.ModuleDict()

    def attach(self, group: str, rank: int, alpha: float,
               generator: torch.Generator | None = None) -> None:
        if group in self.adapters:
            raise ValueError(f"adapter group '{group}' already attached")
        self.adapters[group] = LoraAdapter(
            self.base.in_features, self.base.out_features, rank, alpha, generator
        ).to(self.base.weight.dtype)

    def merge(self, group: str) -> None:
        ad = self.adapters[group]
        with torch.no_grad():
            self.base.weight += ad.scale * (ad.b @ ad.a)
        del self.adapters[group]

    def forward(self, x: torch.Tensor, active: frozenset[str]) -> torch.Tensor:
        y = self.base(x)
        for group in active:
            if group in self.adapters:
                ad = self.adapters[group]
                y = y + ad.scale * F.linear(F.linear(x, ad.a), ad.b)
        return y


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("dim must divide by head count")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = LoraLinear(dim, dim)
        self.k = LoraLinear(dim, dim)
        self.v = LoraLinear(dim, dim)
        self.o = LoraLinear(dim, dim)

    def forward(self, x: torch.Tensor, active: frozenset[str]) -> torch.Tensor:
        b, t, d = x.shape
        def split(z):
            return z.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q(x, active)), split(self.k(x, active)), split(self.v(x, active))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        causal = torch.triu(
            torch.full((t, t), float("-inf"), dtype=x.dtype, device=x.device), diagonal=1
        )
        attn = torch.softmax(scores + causal, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.o(out, active)


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ff_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))

    def forward(self, x: torch.Tensor, active: frozenset[str]) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), active)
        return x + self.ff(self.norm2(x))


class CausalDecoder(nn.Module):
    def __init__(self, vocab_size: int, dim: int = 64, layers: int = 4, heads: int = 4,
                 ff_dim: int = 128, max_positions: int = 512):
        super().__init__()
        self.dim = dim
        self.embed = nn.Embedding(vocab_size, dim)
        self.pos = nn.Embedding(max_positions, dim)
        self.blocks = nn.ModuleList(DecoderBlock(dim, heads, ff_dim) for _ in range(layers))
        self.norm_out = nn.LayerNorm(dim)
        self.out_proj = nn.Linear(dim, vocab_size)
        self.merged_groups: set[str] = set()

    # -- adapters ----------------------------------------------------------
    def lora_layers(self):
        for m in self.modules():
            if isinstance(m, LoraLinear):
                yield m

    def attach_lora(self, group: str, rank: int, alpha: float,
                    generator: torch.Generator | None = None) -> None:
        for layer in self.lora_layers():
            layer.attach(group, rank, alpha, generator)

    def merge_lora(self, group: str) -> None:
        if group in self.merged_groups:
            raise ValueError(f"adapter group '{group}' was already merged")
        layers = list(self.lora_layers())
        if not any(group in l.adapters for l in layers):
            raise ValueError(f"adapter group '{group}' is not attached")
        for layer in layers:
            layer.merge(group)
        self.merged_groups.add(group)

    def attached_groups(self) -> set[str]:
        groups: set[str] = set()
        for layer in self.lora_layers():
            groups.update(layer.adapters.keys())
        return groups

    # -- forward paths -----------------------------------------------------
    def embed_text(self, tokens: list[int]) -> torch.Tensor:
        for tok in tokens:
            if not (0 <= tok < self.embed.num_embeddings):
                raise ValueError(f"token {tok} outside the decoder vocabulary")
        idx = torch.tensor(tokens, dtype=torch.long, device=self.embed.weight.device)
        return self.embed(idx)

    def forward_embedded(
        self, rows: torch.Tensor, active_lora: frozenset[str] = frozenset()
    ) -> torch.Tensor:
        """rows: (B, L, D) left-aligned; padded tail positions (if any) must be
        ignored by the caller. Returns next-token logits at every position."""
        b, t, d = rows.shape
        if d != self.dim:
            raise ValueError(f"decoder expects width {self.dim}, got {d}")
        if t > self.pos.num_embeddings:
            raise ValueError(f"sequence length {t} exceeds positional table")
        positions = torch.arange(t, device=rows.device)
        x = rows + self.pos(positions)[None]
        for block in self.blocks:
            x = block(x, active_lora)
        return self.out_proj(self.norm_out(x))


def ce_loss(logits: torch.Tensor, label_tokens: list[int], eos_id: int) -> torch.Tensor:
    """Mean token cross-entropy over the label plus the appended eos.

    logits: (len(label)+1, V) taken at the text positions only.
    """
    targets = list(label_tokens) + [eos_id]
    if logits.shape[0] != len(targets):
        raise ValueError(
            f"got {logits.shape[0]} logit rows for {len(targets)} targets"
        )
    tgt = torch.tensor(targets, dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits, tgt)
