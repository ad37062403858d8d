"""Corpus I/O tests: format round-trips, validation diagnostics,
normalization, split arithmetic, and the synthetic generator's contracts."""
import os

import numpy as np
import pytest

from gestfactor.data import (
    EMA_CHANNELS,
    DataError,
    NormStats,
    Utterance,
    compute_norm_stats,
    denormalize,
    generate_synthetic,
    load_corpus,
    load_labels,
    load_utterance,
    normalize,
    save_corpus,
    save_labels,
    save_utterance,
    split,
    synthetic_alphabet,
)
from gestfactor.factorization import convolutive_synthesis
from gestfactor.objectives import channel_sparsity, time_sparsity
from gestfactor.tensor import Tensor


@pytest.fixture
def random_corpus():
    rng = np.random.default_rng(0)
    return [Utterance(id=f"u{i}", frames=rng.standard_normal((12, rng.integers(5, 40))))
            for i in range(8)]


class TestEmaFormat:
    def test_round_trip_is_bit_exact(self, random_corpus, tmp_path):
        for utt in random_corpus:
            path = tmp_path / f"{utt.id}.ema"
            save_utterance(utt, str(path))
            back = load_utterance(str(path))
            assert np.array_equal(back.frames, utt.frames)
            assert back.sample_rate == utt.sample_rate

    def test_header_contents(self, tmp_path):
        utt = Utterance(id="x", frames=np.zeros((12, 1)))
        path = tmp_path / "x.ema"
        save_utterance(utt, str(path))
        header = open(path).readline().strip()
        assert header == "ema v1 channels=12 rate=200"

    def test_single_frame_file(self, tmp_path):
        path = tmp_path / "one.ema"
        save_utterance(Utterance(id="one", frames=np.zeros((12, 1))), str(path))
        assert load_utterance(str(path)).n_frames == 1

    def test_wrong_column_count_names_file_and_line(self, tmp_path):
        path = tmp_path / "bad.ema"
        path.write_text("ema v1 channels=12 rate=200\n" + " ".join(["0.0"] * 11) + "\n")
        with pytest.raises(DataError) as err:
            load_utterance(str(path))
        assert "bad.ema" in str(err.value) and "11 columns" in str(err.value)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "h.ema"
        path.write_text("emx v1 channels=12 rate=200\n0\n")
        with pytest.raises(DataError):
            load_utterance(str(path))

    def test_non_numeric_value(self, tmp_path):
        path = tmp_path / "n.ema"
        path.write_text("ema v1 channels=2 rate=200\n0.0 zzz\n")
        with pytest.raises(DataError) as err:
            load_utterance(str(path))
        assert ":2:" in str(err.value)

    def test_non_finite_value(self, tmp_path):
        path = tmp_path / "inf.ema"
        path.write_text("ema v1 channels=2 rate=200\n0.0 inf\n")
        with pytest.raises(DataError):
            load_utterance(str(path))

    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.ema"
        path.write_text("")
        with pytest.raises(DataError):
            load_utterance(str(path))

    def test_channel_count_enforced(self, tmp_path):
        path = tmp_path / "c.ema"
        save_utterance(Utterance(id="c", frames=np.zeros((4, 3))), str(path))
        with pytest.raises(DataError):
            load_utterance(str(path), expect_channels=12)


class TestManifestAndLabels:
    def test_corpus_round_trip(self, random_corpus, tmp_path):
        random_corpus[0].labels = ["g1", "g0"]
        random_corpus[3].labels = ["g2"]
        manifest = save_corpus(random_corpus, str(tmp_path))
        back = load_corpus(manifest, labels_path=str(tmp_path / "labels.txt"))
        assert [u.id for u in back] == [u.id for u in random_corpus]
        for a, b in zip(random_corpus, back):
            assert np.array_equal(a.frames, b.frames)
            assert a.labels == b.labels

    def test_missing_manifest_row_fields(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("id,path\nu0\n")
        with pytest.raises(DataError):
            load_corpus(str(path))

    def test_labels_file_format(self, tmp_path):
        path = tmp_path / "labels.txt"
        save_labels([Utterance(id="a", frames=np.zeros((2, 1)), labels=["x", "y"])],
                    str(path))
        assert load_labels(str(path)) == {"a": ["x", "y"]}

    def test_labels_line_without_symbols(self, tmp_path):
        path = tmp_path / "labels.txt"
        path.write_text("a\n")
        with pytest.raises(DataError):
            load_labels(str(path))


class TestNormalization:
    def test_round_trip_identity(self, random_corpus):
        normalized, stats = normalize(random_corpus)
        for orig, norm in zip(random_corpus, normalized):
            back = denormalize(norm.frames, stats)
            assert np.allclose(back, orig.frames, atol=1e-12)

    def test_training_stats_are_zero_mean_unit_std(self, random_corpus):
        normalized, _ = normalize(random_corpus)
        stacked = np.concatenate([u.frames for u in normalized], axis=1)
        assert np.abs(stacked.mean(axis=1)).max() < 1e-10
        assert np.allclose(stacked.std(axis=1), 1.0, atol=1e-12)

    def test_test_split_uses_train_stats(self, random_corpus):
        train, test = random_corpus[:6], random_corpus[6:]
        _, train_stats = normalize(train)
        test_norm, used = normalize(test, train_stats)
        assert used is train_stats
        stacked = np.concatenate([u.frames for u in test_norm], axis=1)
        # normalized with foreign stats: mean is NOT forced to zero
        assert np.abs(stacked.mean(axis=1)).max() > 1e-6
        own_stats = compute_norm_stats(test)
        assert not np.allclose(own_stats.mean, train_stats.mean)

    def test_zero_variance_channel_is_an_error(self):
        utt = Utterance(id="flat", frames=np.zeros((12, 10)))
        with pytest.raises(DataError) as err:
            compute_norm_stats([utt])
        assert EMA_CHANNELS[0] in str(err.value)

    def test_stats_require_positive_std(self):
        with pytest.raises(DataError):
            NormStats(mean=np.zeros(2), std=np.array([1.0, 0.0]))


class TestSplit:
    def test_ten_utterances_split_eight_two(self, random_corpus):
        train, test = split(random_corpus + random_corpus[:2], seed=0)
        assert len(train) == 8 and len(test) == 2

    def test_deterministic(self, random_corpus):
        a = split(random_corpus, seed=5)
        b = split(random_corpus, seed=5)
        assert [u.id for u in a[0]] == [u.id for u in b[0]]

    def test_disjoint_and_exhaustive(self, random_corpus):
        train, test = split(random_corpus, seed=1)
        ids = {u.id for u in train} | {u.id for u in test}
        assert len(train) + len(test) == len(random_corpus)
        assert ids == {u.id for u in random_corpus}

    def test_corpus_scale_arithmetic(self):
        # floor on the train side: 0.8 * 1263 = 1010.4 -> 1010/253
        corpus = [Utterance(id=str(i), frames=np.zeros((1, 1)) + i)
                  for i in range(1263)]
        train, test = split(corpus, seed=0)
        assert (len(train), len(test)) == (1010, 253)

    def test_too_small(self):
        with pytest.raises(ValueError):
            split([Utterance(id="a", frames=np.ones((1, 1)))] * 4, seed=0)


class TestSyntheticGenerator:
    @pytest.fixture(scope="class")
    def generated(self):
        return generate_synthetic(5, 12, (300, 500), noise=0.0, seed=3)

    def test_noiseless_data_reconstructs_exactly(self, generated):
        corpus, truth = generated
        for utt in corpus[:3]:
            resynth = convolutive_synthesis(truth.dictionary, truth.scores[utt.id])
            assert np.allclose(utt.frames, resynth, atol=1e-12)

    def test_sparsity_invariants_hold(self, generated):
        corpus, truth = generated
        assert truth.min_s1 >= 0.92
        assert truth.min_s2 >= 0.90
        for utt in corpus:
            h = Tensor(truth.scores[utt.id])
            assert time_sparsity(h).item() >= 0.92
            assert channel_sparsity(h).item() >= 0.90

    def test_event_amplitudes_within_declared_range(self, generated):
        _, truth = generated
        for events in truth.events.values():
            assert events
            for _, _, amp in events:
                assert 0.5 <= amp <= 2.0

    def test_scores_paint_the_events(self, generated):
        _, truth = generated
        for utt_id, events in truth.events.items():
            score = truth.scores[utt_id]
            for onset, d, amp in events:
                assert score[d, onset] >= amp  # peak tap (overlaps only add)

    def test_refractory_gap_per_gesture(self, generated):
        _, truth = generated
        for events in truth.events.values():
            per_gesture = {}
            for onset, d, _ in events:
                per_gesture.setdefault(d, []).append(onset)
            for onsets in per_gesture.values():
                if len(onsets) > 1:
                    assert np.diff(sorted(onsets)).min() >= 21  # ceil(41/2) + 1

    def test_regeneration_is_bit_identical(self):
        a_corpus, a_truth = generate_synthetic(4, 6, (200, 300), noise=0.02, seed=9)
        b_corpus, b_truth = generate_synthetic(4, 6, (200, 300), noise=0.02, seed=9)
        assert np.array_equal(a_truth.dictionary, b_truth.dictionary)
        for ua, ub in zip(a_corpus, b_corpus):
            assert np.array_equal(ua.frames, ub.frames)
            assert ua.labels == ub.labels

    def test_noise_floor_matches_direct_computation(self):
        corpus, truth = generate_synthetic(4, 4, (200, 300), noise=0.05, seed=11)
        for utt in corpus:
            clean = convolutive_synthesis(truth.dictionary, truth.scores[utt.id])
            noise_ratio = np.linalg.norm(utt.frames - clean) / np.linalg.norm(utt.frames)
            rel = np.linalg.norm(utt.frames - clean) / np.linalg.norm(clean)
            assert 0.0 < noise_ratio < 0.5
            # a model that recovers the clean signal exactly sits at this floor
            assert rel == pytest.approx(noise_ratio, rel=0.3)

    def test_labels_are_activation_order(self, generated):
        corpus, truth = generated
        for utt in corpus:
            events = truth.events[utt.id]
            assert events == sorted(events, key=lambda e: (e[0], e[1]))
            assert utt.labels == [f"g{d}" for _, d, _ in events]

    def test_infeasible_spacing_raises(self):
        # near-refractory spacing packs ~28 spikes per row, sinking S1
        with pytest.raises(ValueError):
            generate_synthetic(6, 3, (550, 650), noise=0.0, seed=0,
                               mean_extra_gap=0.1)

    def test_alphabet_helper(self):
        alpha = synthetic_alphabet(5)
        assert alpha.symbols == ["g0", "g1", "g2", "g3", "g4"]
        assert alpha.merge_map["g0"] == "g0"
        merged = synthetic_alphabet(5, merge_first_pair=True)
        assert merged.merge_map["g1"] == "g0"
        assert merged.merge_map["g0"] == "g0"
