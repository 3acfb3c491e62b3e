"""Serialized label construction and parsing."""
import numpy as np
import pytest

from sopmt.labels import SotLabel, serialize_transcripts, split_serialized
from sopmt.vocab import Vocabulary

VOCAB = Vocabulary(28)


def test_two_talker_serialization_sorted_by_offset():
    h, w, g, b = 8, 23, 7, 2
    label = serialize_transcripts([[h, w], [g, b]], [4, 12], VOCAB)
    assert label.tokens == [h, w, VOCAB.sc_id, g, b]
    assert label.num_talkers == 2
    assert label.source_order == [0, 1]


def test_single_talker_no_sc():
    label = serialize_transcripts([[5, 6, 7]], [0], VOCAB)
    assert label.tokens == [5, 6, 7]
    assert VOCAB.sc_id not in label.tokens


def test_three_talkers_sorted():
    label = serialize_transcripts([[1], [2], [3]], [9, 1, 5], VOCAB)
    assert label.tokens == [2, VOCAB.sc_id, 3, VOCAB.sc_id, 1]
    assert label.source_order == [1, 2, 0]


def test_duplicate_offsets_rejected():
    with pytest.raises(ValueError, match="offset"):
        serialize_transcripts([[1], [2]], [3, 3], VOCAB)


def test_empty_transcript_rejected():
    with pytest.raises(ValueError):
        serialize_transcripts([[1], []], [0, 5], VOCAB)


def test_sc_count_invariant():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = int(rng.integers(1, 4))
        transcripts = [
            rng.integers(1, 29, size=int(rng.integers(1, 8))).tolist()
            for _ in range(s)
        ]
        offsets = rng.choice(100, size=s, replace=False).tolist()
        label = serialize_transcripts(transcripts, offsets, VOCAB)
        assert label.tokens.count(VOCAB.sc_id) == s - 1
        assert label.tokens[0] != VOCAB.sc_id
        assert label.tokens[-1] != VOCAB.sc_id
        for a, b in zip(label.tokens, label.tokens[1:]):
            assert not (a == VOCAB.sc_id and b == VOCAB.sc_id)


def test_split_inverse_example():
    assert split_serialized([8, 23, VOCAB.sc_id, 7, 2], VOCAB) == [[8, 23], [7, 2]]


def test_split_degenerate_sc_only():
    assert split_serialized([VOCAB.sc_id], VOCAB) == [[], []]


def test_split_no_sc():
    assert split_serialized([1, 2, 3], VOCAB) == [[1, 2, 3]]


def test_split_is_total_on_empty():
    assert split_serialized([], VOCAB) == [[]]


def test_round_trip_and_permutation_invariance():
    rng = np.random.default_rng(42)
    for case in range(1000):
        s = int(rng.integers(1, 4))
        transcripts = [
            rng.integers(1, 29, size=int(rng.integers(1, 10))).tolist()
            for _ in range(s)
        ]
        offsets = rng.choice(500, size=s, replace=False).tolist()
        label = serialize_transcripts(transcripts, offsets, VOCAB)

        order = sorted(range(s), key=lambda i: offsets[i])
        expected = [transcripts[i] for i in order]
        assert split_serialized(label.tokens, VOCAB) == expected

        perm = rng.permutation(s).tolist()
        shuffled = serialize_transcripts(
            [transcripts[i] for i in perm], [offsets[i] for i in perm], VOCAB
        )
        assert shuffled.tokens == label.tokens
