"""Mixture encoder stack: length-preserving recurrent encoder, three 2x
convolutional downsampling layers with a tap after the second, and a linear
projector into the decoder embedding space.

All forwards take per-sample valid lengths and zero out padded frames, so a
sample encoded alone matches the same sample inside a padded batch.
"""
from __future__ import annotations

import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence


def ceil_half(lengths: torch.Tensor) -> torch.Tensor:
    return (lengths + 1) // 2


def mask_frames(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Zero out rows at or beyond each sample's valid length. x: (B, T, D)."""
    t = x.shape[1]
    mask = torch.arange(t, device=x.device)[None, :] < lengths[:, None]
    return x * mask[:, :, None].to(x.dtype)


class MixtureEncoder(nn.Module):
    """Bidirectional GRU stack; T_e = T (length preserving)."""

    def __init__(self, feature_dim: int, dim: int = 64, blocks: int = 2):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("encoder dim must be even (bidirectional halves)")
        self.dim = dim
        self.gru = nn.GRU(
            feature_dim,
            dim // 2,
            num_layers=blocks,
            bidirectional=True,
            batch_first=True,
        )

    def forward(self, features: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if features.shape[1] == 0 or (lengths < 1).any():
            raise ValueError("encoder requires at least one frame per sample")
        packed = pack_padded_sequence(
            features, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        out, _ = self.gru(packed)
        h_e, _ = pad_packed_sequence(out, batch_first=True, total_length=features.shape[1])
        return h_e


class Downsampler(nn.Module):
    """Three stride-2 convolutions; each stage yields ceil(len/2) frames.
    Returns the second-layer tap (separator input) and the final output."""

    def __init__(self, in_dim: int, dim: int = 64):
        super().__init__()
        self.conv1 = nn.Conv1d(in_dim, dim, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv1d(dim, dim, kernel_size=3, stride=2, padding=1)
        self.conv3 = nn.Conv1d(dim, dim, kernel_size=3, stride=2, padding=1)

    def forward(
        self, h_e: torch.Tensor, lengths: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """h_e: (B, T_e, D). Returns (h2, len2, h_d, len3)."""
        if h_e.shape[1] == 0:
            raise ValueError("downsample requires a nonempty input")
        x = mask_frames(h_e, lengths)
        x = torch.relu(self.conv1(x.transpose(1, 2)).transpose(1, 2))
        len1 = ceil_half(lengths)
        x = mask_frames(x, len1)
        h2 = torch.relu(self.conv2(x.transpose(1, 2)).transpose(1, 2))
        len2 = ceil_half(len1)
        h2 = mask_frames(h2, len2)
        h_d = torch.relu(self.conv3(h2.transpose(1, 2)).transpose(1, 2))
        len3 = ceil_half(len2)
        h_d = mask_frames(h_d, len3)
        return h2, len2, h_d, len3


class Projector(nn.Module):
    """Affine map from the downsampled encoding to decoder width."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)

    def forward(self, h_d: torch.Tensor) -> torch.Tensor:
        if h_d.shape[-1] != self.linear.in_features:
            raise ValueError(
                f"projector expects width {self.linear.in_features}, got {h_d.shape[-1]}"
            )
        return self.linear(h_d)
