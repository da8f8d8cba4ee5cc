import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import canonical_labelings
from uisrnn.errors import ValidationError
from uisrnn.priors import (
    NEW,
    BlockCounts,
    PriorParams,
    assignment_log_prob,
    assignment_log_probs,
    blocks_from_labels,
    change_log_prob,
    count_changes,
    estimate_alpha,
    estimate_p0,
    label_process_log_prob,
    update_blocks,
)


def brute_counts(seqs):
    new = sum(len(set(s)) - 1 for s in seqs)
    changes = sum(1 for s in seqs for i in range(1, len(s)) if s[i] != s[i - 1])
    pairs = sum(len(s) - 1 for s in seqs)
    return new, changes, pairs


canonical = st.lists(st.integers(0, 3), min_size=1, max_size=15).map(
    lambda xs: [{v: i + 1 for i, v in enumerate(dict.fromkeys(xs))}[x] for x in xs]
)


class TestEstimateAlpha:
    def test_single_recording(self):
        assert estimate_alpha([[1, 1, 2, 2, 1]]) == 0.5

    def test_two_recordings(self):
        assert estimate_alpha([[1, 2], [1, 2, 1]]) == 2 / 3

    def test_no_changes(self):
        with pytest.raises(ValidationError, match="no speaker changes"):
            estimate_alpha([[1, 1], [1]])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(canonical, min_size=1, max_size=5))
    def test_matches_brute_force(self, seqs):
        new, changes, _ = brute_counts(seqs)
        if changes == 0:
            with pytest.raises(ValidationError):
                estimate_alpha(seqs)
        else:
            assert estimate_alpha(seqs) == new / changes


class TestEstimateP0:
    def test_hand_count(self):
        assert estimate_p0([[1, 1, 2, 2, 1]]) == 0.5

    def test_clamped_low(self):
        assert estimate_p0([[1, 1, 1]]) == 1e-6

    def test_clamped_high(self):
        assert estimate_p0([[1, 2, 1, 2]]) == 1 - 1e-6

    def test_all_length_one(self):
        with pytest.raises(ValidationError):
            estimate_p0([[1], [1]])

    def test_count_changes(self):
        assert count_changes([1, 1, 2, 2, 1]) == 2


class TestFactors:
    def test_change_symmetry(self):
        assert change_log_prob(0.5, True) == change_log_prob(0.5, False) == math.log(0.5)

    def test_change_value(self):
        assert change_log_prob(0.2, True) == math.log(0.2)

    def test_assignment_example(self):
        blocks = BlockCounts(((1, 2), (2, 1)), 1)
        assert assignment_log_prob(blocks, 1.0, 2) == pytest.approx(math.log(0.5), abs=1e-15)
        assert assignment_log_prob(blocks, 1.0, NEW) == pytest.approx(math.log(0.5), abs=1e-15)

    def test_only_new_after_single_speaker(self):
        probs = assignment_log_probs(BlockCounts.start(1), 1.0)
        assert probs == {NEW: 0.0}

    def test_unseen_target(self):
        with pytest.raises(ValidationError):
            assignment_log_prob(BlockCounts.start(1), 1.0, 5)

    def test_current_speaker_is_not_a_switch_target(self):
        with pytest.raises(ValidationError):
            assignment_log_prob(BlockCounts.start(1), 1.0, 1)

    @pytest.mark.parametrize("alpha", [0.1, 1.0, 7.5])
    def test_assignment_normalized(self, alpha):
        blocks = blocks_from_labels([1, 2, 1, 3, 2, 4])
        total = sum(math.exp(v) for v in assignment_log_probs(blocks, alpha).values())
        assert total == pytest.approx(1.0, abs=1e-14)

    def test_ratio_invariant_to_alpha(self):
        blocks = blocks_from_labels([1, 2, 1, 3, 3, 2, 4])
        for alpha in (0.3, 3.0):
            probs = assignment_log_probs(blocks, alpha)
            assert probs[2] - probs[3] == pytest.approx(math.log(2 / 1), abs=1e-14)

    def test_invalid_priors(self):
        with pytest.raises(ValidationError):
            PriorParams(0.0, 0.5)
        with pytest.raises(ValidationError):
            PriorParams(1.0, 1.0)


class TestBlocks:
    @pytest.mark.parametrize(
        "stream, expected",
        [([1, 1, 2, 1], {1: 2, 2: 1}), ([1, 1, 1], {1: 1}), ([1, 2, 3], {1: 1, 2: 1, 3: 1})],
    )
    def test_examples(self, stream, expected):
        assert blocks_from_labels(stream).as_dict() == expected

    def test_continuation_is_identity(self):
        b = blocks_from_labels([1, 2])
        assert update_blocks(b, 2) is b

    @settings(max_examples=100, deadline=None)
    @given(canonical)
    def test_counts_match_runs(self, labels):
        runs = {}
        for i, y in enumerate(labels):
            if i == 0 or labels[i - 1] != y:
                runs[y] = runs.get(y, 0) + 1
        blocks = blocks_from_labels(labels)
        assert blocks.as_dict() == runs
        assert blocks.current_speaker == labels[-1]


class TestLabelProcess:
    @pytest.mark.parametrize("T", range(1, 7))
    def test_sums_to_one(self, T):
        r = np.random.default_rng(T)
        for _ in range(5):
            priors = PriorParams(float(r.uniform(0.1, 5)), float(r.uniform(0.01, 0.99)))
            total = math.fsum(math.exp(label_process_log_prob(y, priors)) for y in canonical_labelings(T))
            assert total == pytest.approx(1.0, abs=1e-10)

    def test_hand_value(self):
        priors = PriorParams(1.0, 0.2)
        # [1,2,1]: change to NEW (alpha/alpha) then change back to 1 (1/(1+1))
        expected = math.log(0.2) + 0.0 + math.log(0.2) + math.log(0.5)
        assert label_process_log_prob([1, 2, 1], priors) == pytest.approx(expected, abs=1e-15)

    def test_rejects_noncanonical(self):
        with pytest.raises(ValidationError):
            label_process_log_prob([1, 3], PriorParams(1.0, 0.5))
