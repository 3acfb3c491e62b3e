"""Separator, CTC losses (recursion vs enumeration), greedy decode, SOP."""
import math

import numpy as np
import pytest
import torch

from sopmt.sepctc import (
    Separator,
    build_sop,
    ctc_feasible,
    ctc_loss,
    ctc_loss_batch,
    ctc_loss_oracle,
    dump_alignment,
    embed_sop,
    greedy_decode,
    serialized_ctc_loss,
)
from sopmt.vocab import Vocabulary

VOCAB = Vocabulary(28)


def _random_instance(rng, t_max=6, v_max=4, target_max=3):
    t = int(rng.integers(1, t_max + 1))
    v = int(rng.integers(2, v_max + 1))
    logits = torch.tensor(rng.normal(scale=2.0, size=(t, v)), dtype=torch.float64)
    n = int(rng.integers(0, target_max + 1))
    target = rng.integers(1, v, size=n).tolist()
    return logits, target


# -- ctc_loss vs oracle ------------------------------------------------------


def test_ctc_single_frame_forced_alignment():
    logits = torch.zeros(1, 2)
    assert math.isclose(float(ctc_loss(logits, [1])), math.log(2), rel_tol=1e-6)


def test_ctc_t2_uniform():
    # paths over {blank,a} of length 2: three of four collapse to [a]
    logits = torch.zeros(2, 2)
    expected = -math.log(3 / 4)
    assert math.isclose(float(ctc_loss(logits, [1])), expected, rel_tol=1e-6)
    assert math.isclose(ctc_loss_oracle(logits, [1]), expected, rel_tol=1e-6)


def test_ctc_t3_uniform_oracle_value():
    # 6 of the 8 length-3 binary paths collapse to [a] (000 -> [], 101 -> [a,a])
    logits = torch.zeros(3, 2)
    expected = -math.log(6 / 8)
    assert math.isclose(ctc_loss_oracle(logits, [1]), expected, rel_tol=1e-6)
    assert math.isclose(float(ctc_loss(logits, [1])), expected, rel_tol=1e-6)


def test_ctc_repeat_needs_separating_blank():
    logits = torch.zeros(2, 2)
    assert not ctc_feasible([1, 1], 2)
    assert float(ctc_loss(logits, [1, 1])) == float("inf")
    assert ctc_loss_oracle(logits, [1, 1]) == float("inf")


def test_ctc_blank_in_target_rejected():
    with pytest.raises(ValueError, match="blank"):
        ctc_loss(torch.zeros(3, 2), [0])


def test_ctc_oracle_size_guard():
    with pytest.raises(ValueError):
        ctc_loss_oracle(torch.zeros(9, 2), [1])
    with pytest.raises(ValueError):
        ctc_loss_oracle(torch.zeros(3, 6), [1])


def test_ctc_matches_oracle_500_instances():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 500:
        logits, target = _random_instance(rng)
        got = float(ctc_loss(logits, target))
        want = ctc_loss_oracle(logits, target)
        if math.isinf(want):
            assert math.isinf(got)
        else:
            assert abs(got - want) < 1e-6, (logits.shape, target)
        checked += 1


def test_ctc_nonnegative_and_infeasibility_rule():
    rng = np.random.default_rng(1)
    for _ in range(200):
        logits, target = _random_instance(rng)
        loss = float(ctc_loss(logits, target))
        assert loss >= 0
        repeats = sum(a == b for a, b in zip(target, target[1:]))
        infeasible = len(target) + repeats > logits.shape[0]
        assert math.isinf(loss) == (infeasible and bool(target) or infeasible)


def test_feasibility_monotone_in_frames():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(1, 6))
        target = rng.integers(1, 5, size=n).tolist()
        t = int(rng.integers(1, 10))
        if ctc_feasible(target, t):
            assert ctc_feasible(target, t + 1)


def test_ctc_gradient_flows():
    logits = torch.randn(5, 3, requires_grad=True, dtype=torch.float64)
    loss = ctc_loss(logits, [1, 2])
    loss.backward()
    assert torch.isfinite(logits.grad).all()


def test_ctc_infeasible_detached():
    logits = torch.randn(2, 3, requires_grad=True)
    loss = ctc_loss(logits, [1, 1, 1])
    assert not loss.requires_grad


# -- batched fast path -------------------------------------------------------


def test_ctc_batch_matches_per_sample():
    rng = np.random.default_rng(3)
    for _ in range(50):
        b = int(rng.integers(1, 5))
        t = int(rng.integers(2, 12))
        v = int(rng.integers(2, 6))
        logits = torch.tensor(rng.normal(size=(b, t, v)), dtype=torch.float64,
                              requires_grad=True)
        lens, targets = [], []
        for _ in range(b):
            t_i = int(rng.integers(1, t + 1))
            while True:
                n = int(rng.integers(1, 5))
                tgt = rng.integers(1, v, size=n).tolist()
                if ctc_feasible(tgt, t_i):
                    break
            lens.append(t_i)
            targets.append(tgt)
        batched = ctc_loss_batch(logits, torch.tensor(lens), targets)
        single = torch.stack(
            [ctc_loss(logits[i, : lens[i]], targets[i]) for i in range(b)]
        )
        torch.testing.assert_close(batched, single, rtol=1e-9, atol=1e-9)
        g1 = torch.autograd.grad(batched.sum(), logits, retain_graph=True)[0]
        g2 = torch.autograd.grad(single.sum(), logits)[0]
        torch.testing.assert_close(g1, g2, rtol=1e-7, atol=1e-9)


def test_ctc_batch_rejects_infeasible():
    with pytest.raises(ValueError):
        ctc_loss_batch(torch.zeros(1, 2, 3), torch.tensor([2]), [[1, 1]])


# -- serialized loss ---------------------------------------------------------


def test_serialized_single_branch_reduces_to_ctc():
    logits = torch.randn(6, 4, dtype=torch.float64)
    target = [1, 2]
    assert math.isclose(
        float(serialized_ctc_loss([logits], [target])),
        float(ctc_loss(logits, target)),
        rel_tol=1e-9,
    )


def test_serialized_additivity():
    logits = torch.randn(6, 4, dtype=torch.float64)
    target = [2, 3]
    double = serialized_ctc_loss([logits, logits], [target, target])
    assert math.isclose(float(double), 2 * float(ctc_loss(logits, target)),
                        rel_tol=1e-9)


def test_serialized_matches_oracle_sum():
    rng = np.random.default_rng(4)
    for _ in range(20):
        l1 = torch.tensor(rng.normal(size=(5, 4)), dtype=torch.float64)
        l2 = torch.tensor(rng.normal(size=(5, 4)), dtype=torch.float64)
        t1, t2 = [1, 2], [3]
        got = float(serialized_ctc_loss([l1, l2], [t1, t2]))
        want = ctc_loss_oracle(l1, t1) + ctc_loss_oracle(l2, t2)
        assert abs(got - want) < 1e-6


def test_serialized_count_mismatch():
    with pytest.raises(ValueError):
        serialized_ctc_loss([torch.zeros(3, 3)], [[1], [2]])


# -- greedy decode -----------------------------------------------------------


def _one_hot(path, v):
    logits = torch.full((len(path), v), -10.0)
    for t, p in enumerate(path):
        logits[t, p] = 10.0
    return logits


def test_greedy_collapse_rule():
    assert greedy_decode(_one_hot([1, 1, 0, 1, 2], 3)) == [1, 1, 2]


def test_greedy_all_blanks():
    assert greedy_decode(_one_hot([0, 0, 0], 2)) == []


def test_greedy_blank_separates_repeats():
    assert greedy_decode(_one_hot([2, 0, 2], 3)) == [2, 2]


def test_greedy_empty_input():
    assert greedy_decode(torch.zeros(0, 3)) == []


def test_greedy_tie_breaks_to_lowest_id():
    assert greedy_decode(torch.zeros(2, 3)) == []  # all-tied -> blank (id 0)


def test_greedy_exhaustive_small():
    """Collapse-then-remove on every label path with T<=5, V<=3."""
    import itertools

    for v in (2, 3):
        for t in range(1, 6):
            for path in itertools.product(range(v), repeat=t):
                want = []
                prev = None
                for p in path:
                    if p != prev and p != 0:
                        want.append(p)
                    prev = p
                assert greedy_decode(_one_hot(list(path), v)) == want


def test_greedy_round_trip_random_alignments():
    """decode(one-hot(valid alignment of y)) == y."""
    rng = np.random.default_rng(5)
    for _ in range(300):
        v = int(rng.integers(2, 5))
        n = int(rng.integers(0, 5))
        y = rng.integers(1, v, size=n).tolist()
        # build a valid alignment: pad with blanks, double repeats safely
        path = []
        prev = None
        for tok in y:
            if tok == prev:
                path.append(0)
            reps = int(rng.integers(1, 3))
            path.extend([tok] * reps)
            if rng.random() < 0.5:
                path.append(0)
            prev = tok
        if not path:
            path = [0]
        assert greedy_decode(_one_hot(path, v)) == y


# -- SOP build / embed -------------------------------------------------------


def test_build_sop_two_branches():
    p = build_sop([[1, 2], [3]], VOCAB)
    assert p.concatenated == [1, 2, VOCAB.sc_id, 3]


def test_build_sop_degenerate_empty_branches():
    p = build_sop([[], []], VOCAB)
    assert p.concatenated == [VOCAB.sc_id]


def test_build_sop_three_branches():
    p = build_sop([[7], [8], [9]], VOCAB)
    assert p.concatenated == [7, VOCAB.sc_id, 8, VOCAB.sc_id, 9]


def test_build_sop_no_delimiter_option():
    p = build_sop([[1], [2]], VOCAB, delimiter=False)
    assert p.concatenated == [1, 2]


def test_build_sop_split_round_trip():
    from sopmt.labels import split_serialized

    rng = np.random.default_rng(6)
    for _ in range(100):
        s = int(rng.integers(1, 4))
        branches = [
            rng.integers(1, 29, size=int(rng.integers(0, 5))).tolist()
            for _ in range(s)
        ]
        p = build_sop(branches, VOCAB)
        assert split_serialized(p.concatenated, VOCAB) == branches


def test_embed_sop_uses_decoder_table():
    table = torch.nn.Embedding(VOCAB.decoder_vocab_size, 8)
    p = build_sop([[1, 2], [3]], VOCAB)
    e = embed_sop(p, table)
    assert e.shape == (4, 8)
    torch.testing.assert_close(e[0], table.weight[1])
    torch.testing.assert_close(e[2], table.weight[VOCAB.sc_id])


def test_embed_sop_empty_prompt():
    table = torch.nn.Embedding(VOCAB.decoder_vocab_size, 8)
    e = embed_sop(build_sop([[]], VOCAB), table)
    assert e.shape == (0, 8)


def test_embed_sop_oov_rejected():
    table = torch.nn.Embedding(VOCAB.decoder_vocab_size, 8)
    p = build_sop([[999]], VOCAB)
    with pytest.raises(ValueError, match="999"):
        embed_sop(p, table)


# -- separator ---------------------------------------------------------------


def test_separator_zero_input_zero_biases():
    sep = Separator(8, 2, VOCAB.ctc_vocab_size)
    with torch.no_grad():
        for p in sep.parameters():
            p.zero_()
    out = sep.separate(torch.zeros(1, 4, 8), torch.tensor([4]))
    assert len(out) == 2
    for o in out:
        assert torch.all(o == 0)


def test_separator_output_count_s3():
    sep = Separator(8, 3, VOCAB.ctc_vocab_size)
    out = sep.separate(torch.randn(2, 5, 8), torch.tensor([5, 3]))
    assert len(out) == 3
    assert all(o.shape == (2, 5, 8) for o in out)


def test_separator_branch_count_mismatch():
    sep = Separator(8, 2, VOCAB.ctc_vocab_size)
    with pytest.raises(ValueError):
        sep.ctc_logits([torch.zeros(1, 4, 8)])


def test_separator_gradients_finite_difference():
    from tests.test_encoder import check_param_grads

    torch.manual_seed(2)
    sep = Separator(6, 2, 4).double()
    h2 = torch.randn(1, 4, 6, dtype=torch.float64)

    def loss_fn():
        streams = sep.separate(h2, torch.tensor([4]))
        logits = sep.ctc_logits(streams)
        return sum(ctc_loss(lg[0], [1, 2]) for lg in logits)

    probe = {
        "lstm.w": sep.lstm.weight_ih_l0,
        "head0.w": sep.heads[0].weight,
        "proj1.w": sep.ctc_proj[1].weight,
    }
    check_param_grads(loss_fn, probe)


# -- alignment dump ----------------------------------------------------------


def test_dump_all_blank_is_empty_grid():
    grid = dump_alignment([np.zeros(4, dtype=int)], VOCAB)
    lines = grid.strip().splitlines()
    assert lines[0].strip() == "frame"
    assert lines[1].strip() == "spk01"


def test_dump_single_branch_single_column():
    grid = dump_alignment([np.array([0, 1, 0])], VOCAB)
    assert VOCAB.token_name(1) in grid
    assert len(grid.strip().splitlines()) == 2


def test_dump_two_branches_diagonal():
    grid = dump_alignment([np.array([1, 0]), np.array([0, 2])], VOCAB)
    lines = grid.strip().splitlines()
    assert len(lines) == 3
    assert VOCAB.token_name(1) in lines[1]
    assert VOCAB.token_name(2) in lines[2]


def test_dump_mismatched_lengths_rejected():
    with pytest.raises(ValueError):
        dump_alignment([np.zeros(3, dtype=int), np.zeros(4, dtype=int)], VOCAB)


def test_dump_marks_errors_against_reference():
    # branch says token 5 in frames 0..1; reference says token 7 there
    grid = dump_alignment(
        [np.array([5, 0])], VOCAB, ref_spans=[[(7, 0, 8)]], downsample_factor=4
    )
    assert "*" in grid
    grid_ok = dump_alignment(
        [np.array([5, 0])], VOCAB, ref_spans=[[(5, 0, 8)]], downsample_factor=4
    )
    assert "*" not in grid_ok
