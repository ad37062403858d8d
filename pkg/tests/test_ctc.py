"""CTC tests: the loss against exhaustive path enumeration, decoders
against brute-force marginalization, and the error-rate metrics."""
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gestfactor.ctc import (
    InfeasibleTargetError,
    LabelAlphabet,
    RecognizerParams,
    beam_decode,
    cmu_alphabet,
    collapse,
    ctc_loss,
    edit_distance,
    greedy_decode,
    init_recognizer,
    min_frames,
    per,
    recognize,
)
from gestfactor.tensor import Tape, Tensor, finite_difference_check


def random_log_probs(rng, frames, classes):
    lp = rng.standard_normal((frames, classes))
    return lp - np.logaddexp.reduce(lp, axis=1, keepdims=True)


def enumerate_nll(lp, target):
    """Sum path probabilities over every frame labeling whose collapse
    equals the target; the independent oracle for the DP."""
    frames, classes = lp.shape
    total = -np.inf
    for path in itertools.product(range(classes), repeat=frames):
        if collapse(path) == list(target):
            total = np.logaddexp(total, sum(lp[i, p] for i, p in enumerate(path)))
    return -total


def enumerate_best(lp):
    """argmax label sequence by brute-force marginalization, ties broken
    by (probability, lexicographic prefix)."""
    frames, classes = lp.shape
    scores = {}
    for path in itertools.product(range(classes), repeat=frames):
        lab = tuple(collapse(path))
        s = sum(lp[i, p] for i, p in enumerate(path))
        scores[lab] = np.logaddexp(scores.get(lab, -np.inf), s)
    return list(min(scores.items(), key=lambda kv: (-kv[1], kv[0]))[0])


class TestCtcLoss:
    def test_single_symbol_two_frames_uniform(self):
        # paths (a,-), (-,a), (a,a): P = 0.75
        lp = np.log(np.full((2, 2), 0.5))
        assert ctc_loss(Tensor(lp), [1]).item() == pytest.approx(-math.log(0.75),
                                                                 abs=1e-12)

    def test_empty_target_all_blank(self):
        lp = np.zeros((4, 3))
        lp[:, 0] = 0.0
        lp[:, 1:] = -745.0  # effectively zero probability
        lp = lp - np.logaddexp.reduce(lp, axis=1, keepdims=True)
        assert ctc_loss(Tensor(lp), []).item() == pytest.approx(0.0, abs=1e-10)

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        frames = int(rng.integers(1, 7))
        classes = int(rng.integers(2, 5))  # |A| <= 3 plus blank
        lp = random_log_probs(rng, frames, classes)
        for _ in range(20):
            target = list(rng.integers(1, classes,
                                       size=int(rng.integers(0, frames + 1))))
            if frames >= max(1, min_frames(target)):
                break
        else:
            target = []
        got = ctc_loss(Tensor(lp), target).item()
        assert got == pytest.approx(enumerate_nll(lp, target), abs=1e-9)

    def test_infeasible_target_is_a_distinct_error(self):
        lp = random_log_probs(np.random.default_rng(0), 2, 3)
        with pytest.raises(InfeasibleTargetError):
            ctc_loss(Tensor(lp), [1, 1])  # adjacent repeat needs 3 frames
        with pytest.raises(InfeasibleTargetError):
            ctc_loss(Tensor(lp), [1, 2, 1])

    def test_unnormalized_rows_rejected(self):
        lp = np.zeros((3, 2))
        with pytest.raises(ValueError):
            ctc_loss(Tensor(lp), [1])

    def test_blank_in_target_rejected(self):
        lp = random_log_probs(np.random.default_rng(1), 4, 3)
        with pytest.raises(ValueError):
            ctc_loss(Tensor(lp), [0, 1])

    @pytest.mark.parametrize("seed", range(6))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        lp = random_log_probs(rng, 5, 3)
        target = [1, 2] if seed % 2 else [2, 1, 2]
        err = finite_difference_check(lambda t: ctc_loss(t, target), [Tensor(lp)])
        assert err < 1e-4

    def test_min_frames(self):
        assert min_frames([]) == 0
        assert min_frames([1, 2, 3]) == 3
        assert min_frames([1, 1]) == 3
        assert min_frames([1, 1, 1]) == 5


class TestDecoders:
    def test_greedy_collapse_rule(self):
        # frames argmax: a a - b  ->  a b
        lp = np.log(np.array([
            [0.1, 0.8, 0.1],
            [0.2, 0.6, 0.2],
            [0.8, 0.1, 0.1],
            [0.1, 0.2, 0.7],
        ]))
        assert greedy_decode(Tensor(lp)) == [1, 2]

    def test_greedy_all_blank(self):
        lp = np.log(np.array([[0.9, 0.05, 0.05]] * 3))
        assert greedy_decode(Tensor(lp)) == []

    def test_greedy_one_hot_path(self):
        rng = np.random.default_rng(2)
        path = [1, 1, 0, 2, 2, 0, 1]
        lp = np.full((len(path), 3), -40.0)
        for i, p in enumerate(path):
            lp[i, p] = 0.0
        lp = lp - np.logaddexp.reduce(lp, axis=1, keepdims=True)
        assert greedy_decode(Tensor(lp)) == collapse(path)

    def test_beam_width_one_on_peaked_input_equals_greedy(self):
        rng = np.random.default_rng(3)
        path = [1, 0, 2, 2, 1]
        lp = np.full((len(path), 3), -30.0)
        for i, p in enumerate(path):
            lp[i, p] = 0.0
        lp = lp - np.logaddexp.reduce(lp, axis=1, keepdims=True)
        assert beam_decode(Tensor(lp), width=1) == greedy_decode(Tensor(lp))

    @pytest.mark.parametrize("seed", range(20))
    def test_wide_beam_equals_exhaustive_argmax(self, seed):
        rng = np.random.default_rng(200 + seed)
        frames = int(rng.integers(1, 6))
        classes = int(rng.integers(2, 4))  # |A| <= 2 plus blank
        lp = random_log_probs(rng, frames, classes)
        exhaustive_width = (classes + 1) ** frames
        assert beam_decode(Tensor(lp), width=exhaustive_width) == enumerate_best(lp)

    def test_beam_deterministic(self):
        rng = np.random.default_rng(4)
        lp = random_log_probs(rng, 12, 4)
        first = beam_decode(Tensor(lp), width=5)
        assert all(beam_decode(Tensor(lp), width=5) == first for _ in range(3))

    def test_beam_score_non_decreasing_in_width(self):
        rng = np.random.default_rng(5)
        lp = random_log_probs(rng, 10, 4)
        scores = [beam_decode(Tensor(lp), width=w, return_score=True)[1]
                  for w in (1, 2, 5, 15, 50)]
        assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:]))


class TestEditDistance:
    def test_identical(self):
        assert edit_distance("abc", "abc") == 0

    def test_single_substitution(self):
        assert edit_distance("abc", "axc") == 1

    def test_kitten_sitting(self):
        assert edit_distance("kitten", "sitting") == 3

    def test_empty_cases(self):
        assert edit_distance("", "abc") == 3
        assert edit_distance("ab", "") == 2

    @given(st.integers(min_value=0, max_value=500))
    @settings(max_examples=60, deadline=None)
    def test_metric_properties(self, seed):
        rng = np.random.default_rng(seed)
        seqs = [list(rng.integers(0, 3, size=rng.integers(0, 7)))
                for _ in range(3)]
        a, b, c = seqs
        assert edit_distance(a, b) == edit_distance(b, a)
        assert edit_distance(a, a) == 0
        assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


class TestPer:
    def test_perfect(self):
        assert per([["a", "b"]], [["a", "b"]]) == 0.0

    def test_voicing_merge_collapses_pat_bad(self):
        refs, hyps = [["p", "a", "t"]], [["b", "a", "d"]]
        assert per(refs, hyps, merge=True) == 0.0
        assert per(refs, hyps, merge=False) == pytest.approx(200.0 / 3.0)

    def test_merge_never_hurts(self):
        rng = np.random.default_rng(6)
        phones = cmu_alphabet().symbols
        refs = [[phones[i] for i in rng.integers(0, 39, size=rng.integers(1, 10))]
                for _ in range(20)]
        hyps = [[phones[i] for i in rng.integers(0, 39, size=rng.integers(0, 10))]
                for _ in range(20)]
        assert per(refs, hyps, merge=True) <= per(refs, hyps, merge=False)

    def test_zero_reference_is_an_error(self):
        with pytest.raises(ValueError):
            per([[]], [["a"]])


class TestAlphabet:
    def test_cmu_inventory(self):
        alpha = cmu_alphabet()
        assert alpha.size == 39
        assert alpha.n_classes == 40

    def test_merge_map_is_idempotent(self):
        alpha = cmu_alphabet()
        for sym in alpha.symbols:
            once = alpha.merge_map[sym]
            assert alpha.merge_map[once] == once

    def test_merge_groups(self):
        alpha = cmu_alphabet()
        for group in [("p", "b", "m"), ("t", "d", "n"), ("ch", "jh"),
                      ("f", "v"), ("sh", "zh"), ("k", "g", "ng"),
                      ("s", "z"), ("th", "dh")]:
            targets = {alpha.merge_map[s] for s in group}
            assert len(targets) == 1
        untouched = set(alpha.symbols) - {s for g in [
            ("p", "b", "m"), ("t", "d", "n"), ("ch", "jh"), ("f", "v"),
            ("sh", "zh"), ("k", "g", "ng"), ("s", "z"), ("th", "dh")] for s in g}
        for sym in untouched:
            assert alpha.merge_map[sym] == sym

    def test_encode_decode_round_trip(self):
        alpha = cmu_alphabet()
        seq = ["hh", "ah", "l", "ow"]
        assert alpha.decode(alpha.encode(seq)) == seq

    def test_unknown_symbol(self):
        with pytest.raises(ValueError):
            cmu_alphabet().encode(["qq"])


class TestRecognizer:
    @pytest.fixture(scope="class")
    def tiny(self):
        return init_recognizer(in_channels=3, n_classes=4, seed=0,
                               front_width=6, context_width=8, proj_width=5)

    def test_output_shape_and_normalization(self, tiny):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 3, 20)))
        lp = recognize(x, tiny)
        assert lp.shape == (2, 20, 4)
        sums = np.exp(lp.data).sum(axis=2)
        assert np.allclose(sums, 1.0, atol=1e-10)

    def test_length_preserved_and_channel_checked(self, tiny):
        rng = np.random.default_rng(1)
        assert recognize(Tensor(rng.standard_normal((1, 3, 33))), tiny).shape[1] == 33
        from gestfactor.tensor import ShapeError
        with pytest.raises(ShapeError):
            recognize(Tensor(rng.standard_normal((1, 5, 10))), tiny)

    def test_masked_forward_matches_unpadded(self, tiny):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 3, 14))
        padded = np.zeros((1, 3, 20))
        padded[:, :, :14] = x
        mask = np.zeros((1, 20))
        mask[0, :14] = 1.0
        full = recognize(Tensor(x), tiny).data
        masked = recognize(Tensor(padded), tiny, mask=mask).data
        assert np.allclose(masked[:, :14, :], full, atol=1e-10)

    def test_gradient_through_recognize_and_ctc(self):
        params = init_recognizer(in_channels=2, n_classes=3, seed=1,
                                 front_width=3, context_width=4, proj_width=3)
        rng = np.random.default_rng(3)
        x0 = rng.standard_normal((1, 2, 8))
        kernel = params.front_kernels[0]

        def f(x, k):
            params.front_kernels[0] = k
            lp = recognize(x, params)
            from gestfactor.evaluate import slice_log_probs
            return ctc_loss(slice_log_probs(lp, 0, 8), [1, 2])

        err = finite_difference_check(f, [Tensor(x0), kernel])
        params.front_kernels[0] = kernel
        assert err < 1e-4
