"""Serialized training labels: first-speaking-first-out with <sc> separators."""
from __future__ import annotations

from dataclasses import dataclass, field

from .vocab import Vocabulary


@dataclass
class SotLabel:
    tokens: list[int]
    num_talkers: int
    # serialized position -> index into the original talker list
    source_order: list[int] = field(default_factory=list)


def serialize_transcripts(
    transcripts: list[list[int]], offsets: list[int], vocab: Vocabulary
) -> SotLabel:
    """Order talker transcripts by ascending start frame, joined with <sc>."""
    if len(transcripts) != len(offsets) or not transcripts:
        raise ValueError("need equally many transcripts and offsets, at least one")
    if len(set(offsets)) != len(offsets):
        raise ValueError(f"duplicate offsets {offsets}: serialization order undefined")
    for i, t in enumerate(transcripts):
        if not t:
            raise ValueError(f"transcript {i} is empty")

    order = sorted(range(len(offsets)), key=lambda i: offsets[i])
    tokens: list[int] = []
    for pos, i in enumerate(order):
        if pos > 0:
            tokens.append(vocab.sc_id)
        tokens.extend(transcripts[i])
    return SotLabel(tokens=tokens, num_talkers=len(transcripts), source_order=order)


def split_serialized(tokens: list[int], vocab: Vocabulary) -> list[list[int]]:
    """Split on <sc>. Total: empty segments are kept so that arbitrary decoder
    output can be scored without special cases."""
    segments: list[list[int]] = [[]]
    for tok in tokens:
        if tok == vocab.sc_id:
            segments.append([])
        else:
            segments[-1].append(tok)
    return segments
