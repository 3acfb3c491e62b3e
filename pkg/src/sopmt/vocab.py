"""Token inventory shared by the simulator, the CTC branch, and the decoder."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Vocabulary:
    """Content alphabet plus reserved special ids.

    Layout: blank=0, content tokens 1..N, then sc, bos, eos, pad.
    The CTC branch sees only {blank} + content; the decoder sees everything
    except blank.
    """

    num_content: int

    def __post_init__(self):
        if self.num_content < 1:
            raise ValueError("vocabulary needs at least one content token")

    @property
    def blank_id(self) -> int:
        return 0

    @property
    def content_tokens(self) -> list[int]:
        return list(range(1, self.num_content + 1))

    @property
    def sc_id(self) -> int:
        return self.num_content + 1

    @property
    def bos_id(self) -> int:
        return self.num_content + 2

    @property
    def eos_id(self) -> int:
        return self.num_content + 3

    @property
    def pad_id(self) -> int:
        return self.num_content + 4

    @property
    def ctc_vocab_size(self) -> int:
        """blank + content; the CTC heads project to this many classes."""
        return self.num_content + 1

    @property
    def decoder_vocab_size(self) -> int:
        """Embedding-table size. Index 0 (blank) is reserved and never emitted."""
        return self.num_content + 5

    def is_content(self, token: int) -> bool:
        return 1 <= token <= self.num_content

    def token_name(self, token: int) -> str:
        if token == self.blank_id:
            return "."
        if token == self.sc_id:
            return "<sc>"
        if token == self.bos_id:
            return "<bos>"
        if token == self.eos_id:
            return "<eos>"
        if token == self.pad_id:
            return "<pad>"
        return f"t{token:02d}"
