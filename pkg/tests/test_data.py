import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uisrnn.data import (
    Dataset,
    EmbeddingSequence,
    LabeledRecording,
    LabelSequence,
    RttmSegment,
    build_training_sequences,
    labels_to_segments,
    parse_rttm,
    pca_apply,
    pca_fit,
    relabel_canonical,
    segments_to_frame_labels,
    stratified_split,
)
from uisrnn.errors import ParseError, ValidationError


def make_recording(rec_id, labels, dim=2, domain="d", seed=0):
    rng = np.random.default_rng(seed)
    frames = rng.normal(size=(len(labels), dim))
    return LabeledRecording(rec_id, domain, EmbeddingSequence(frames), relabel_canonical(labels))


class TestTypes:
    def test_label_sequence_rejects_non_canonical(self):
        with pytest.raises(ValidationError):
            LabelSequence((2, 1))
        with pytest.raises(ValidationError):
            LabelSequence((1, 3))
        assert LabelSequence((1, 2, 1, 3)).num_speakers == 3

    def test_changes(self):
        assert LabelSequence((1, 1, 2, 2, 1)).changes() == [0, 1, 0, 1]

    def test_embedding_sequence_validation(self):
        with pytest.raises(ValidationError):
            EmbeddingSequence(np.zeros((0, 3)))
        with pytest.raises(ValidationError):
            EmbeddingSequence(np.array([[1.0, np.nan]]))

    def test_recording_length_mismatch(self):
        with pytest.raises(ValidationError):
            LabeledRecording("r", "d", EmbeddingSequence(np.zeros((3, 2))), LabelSequence((1, 1)))


class TestRttm:
    def test_single_line(self):
        segs = parse_rttm("SPEAKER rec1 1 0.00 2.50 <NA> <NA> spkA <NA> <NA>\n")
        assert segs == [RttmSegment("rec1", 0.0, 2.5, "spkA")]

    def test_empty(self):
        assert parse_rttm("") == []
        assert parse_rttm("\n  \n") == []

    def test_short_line_reports_line_number(self):
        text = "SPEAKER rec1 1 0.00 2.50 <NA> <NA> spkA <NA> <NA>\nSPEAKER rec1 1 0.0 1.0\n"
        with pytest.raises(ParseError) as err:
            parse_rttm(text)
        assert err.value.line == 2

    def test_negative_duration(self):
        with pytest.raises(ValidationError):
            parse_rttm("SPEAKER rec1 1 0.00 -1.0 <NA> <NA> spkA <NA> <NA>")

    def test_labels_to_segments_runs(self):
        segs = labels_to_segments([1, 1, 2, 1], "r", 0.5)
        assert [(s.onset, s.duration, s.speaker) for s in segs] == [(0.0, 1.0, "1"), (1.0, 0.5, "2"), (1.5, 0.5, "1")]


class TestFrameLabels:
    def test_single_segment(self):
        labels, sets = segments_to_frame_labels([RttmSegment("r", 0.0, 3.0, "A")], 3, 1.0)
        assert labels.labels == (1, 1, 1)
        assert sets == [frozenset("A")] * 3

    def test_overlap_becomes_new_speaker(self):
        segs = [RttmSegment("r", 0.0, 2.0, "A"), RttmSegment("r", 1.0, 2.0, "B")]
        labels, sets = segments_to_frame_labels(segs, 3, 1.0, overlap_as_new_speaker=True)
        assert sets == [frozenset("A"), frozenset("AB"), frozenset("B")]
        assert labels.labels == (1, 2, 3)

    def test_overlap_without_flag_errors_by_default(self):
        segs = [RttmSegment("r", 0.0, 2.0, "A"), RttmSegment("r", 1.0, 2.0, "B")]
        with pytest.raises(ValidationError):
            segments_to_frame_labels(segs, 3, 1.0, overlap_as_new_speaker=False)

    def test_overlap_first_speaker_policy(self):
        segs = [RttmSegment("r", 0.0, 2.0, "A"), RttmSegment("r", 1.0, 2.0, "B")]
        labels, _ = segments_to_frame_labels(segs, 3, 1.0, overlap_as_new_speaker=False, overlap_policy="first")
        assert labels.labels == (1, 1, 2)

    def test_same_overlap_set_shares_label(self):
        segs = [RttmSegment("r", 0.0, 4.0, "A"), RttmSegment("r", 1.0, 1.0, "B"), RttmSegment("r", 3.0, 1.0, "B")]
        labels, _ = segments_to_frame_labels(segs, 4, 1.0)
        assert labels.labels == (1, 2, 1, 2)

    def test_empty_frame_errors(self):
        with pytest.raises(ValidationError):
            segments_to_frame_labels([RttmSegment("r", 0.0, 1.0, "A")], 2, 1.0)


class TestRelabel:
    @pytest.mark.parametrize(
        "raw, expected",
        [([7, 7, 3, 7], (1, 1, 2, 1)), ([1, 2, 3], (1, 2, 3)), ([2, 2, 2], (1, 1, 1))],
    )
    def test_examples(self, raw, expected):
        assert relabel_canonical(raw).labels == expected

    @given(st.lists(st.integers(0, 6), min_size=1, max_size=40))
    def test_idempotent_and_partition_preserving(self, raw):
        out = relabel_canonical(raw).labels
        assert relabel_canonical(out).labels == out
        for i in range(len(raw)):
            for j in range(len(raw)):
                assert (raw[i] == raw[j]) == (out[i] == out[j])


class TestTrainingSequences:
    def test_counts_and_lengths(self):
        ds = Dataset([make_recording("a", [1, 1, 2])])
        seqs = build_training_sequences(ds, permutations=1, seed=0)
        assert sorted(len(s) for s in seqs) == [1, 2]
        assert {s.speaker_key for s in seqs} == {("a", 1), ("a", 2)}

    def test_single_frame_speaker_copies(self):
        ds = Dataset([make_recording("a", [1, 1, 2])])
        seqs = [s for s in build_training_sequences(ds, permutations=3, seed=0) if s.speaker_key == ("a", 2)]
        assert len(seqs) == 3
        assert all(np.array_equal(seqs[0].frames, s.frames) for s in seqs)

    def test_deterministic(self):
        ds = Dataset([make_recording("a", [1, 2, 1, 2, 1, 3, 3]), make_recording("b", [1, 1, 1, 2], seed=1)])
        a = build_training_sequences(ds, 4, seed=9)
        b = build_training_sequences(ds, 4, seed=9)
        assert [s.speaker_key for s in a] == [s.speaker_key for s in b]
        assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a, b))

    def test_size_is_speakers_times_permutations(self):
        ds = Dataset([make_recording("a", [1, 2, 1, 3]), make_recording("b", [1, 1, 2], seed=3)])
        assert len(build_training_sequences(ds, 5, seed=0)) == 5 * 5

    @settings(max_examples=30)
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=30), st.integers(1, 4), st.integers(0, 100))
    def test_multiset_preserved(self, raw, permutations, seed):
        rec = make_recording("r", raw, seed=seed)
        labels = rec.labels.as_array()
        for s in build_training_sequences(Dataset([rec]), permutations, seed):
            own = rec.embeddings.frames[labels == s.speaker_key[1]]
            assert np.array_equal(np.sort(own, axis=0), np.sort(s.frames, axis=0))


class TestPca:
    def test_points_on_a_line(self):
        t = np.linspace(-3, 3, 25)
        pts = np.stack([t, t], axis=1)
        proj = pca_fit([EmbeddingSequence(pts)], 1)
        out = pca_apply(proj, EmbeddingSequence(pts)).frames[:, 0]
        # distances along the line are reproduced
        np.testing.assert_allclose(np.abs(out[:, None] - out[None, :]),
                                   np.abs(t[:, None] - t[None, :]) * np.sqrt(2), atol=1e-9)
        np.testing.assert_allclose(proj.reconstruct(out[:, None]), pts, atol=1e-9)

    def test_full_rank_preserves_distances(self, rng):
        x = rng.normal(size=(40, 5))
        proj = pca_fit([EmbeddingSequence(x)], 5)
        y = pca_apply(proj, EmbeddingSequence(x)).frames
        dx = ((x[:, None] - x[None]) ** 2).sum(-1)
        dy = ((y[:, None] - y[None]) ** 2).sum(-1)
        np.testing.assert_allclose(dy, dx, atol=1e-9)
        np.testing.assert_allclose(proj.basis @ proj.basis.T, np.eye(5), atol=1e-8)

    def test_isotropic_against_eigensolver(self, rng):
        D = 10
        x = rng.normal(size=(5000, D))
        proj = pca_fit([EmbeddingSequence(x)], 2)
        # oracle: dense symmetric eigensolver on the sample covariance
        evals = np.linalg.eigvalsh(np.cov(x.T, bias=True))[::-1]
        np.testing.assert_allclose(proj.variances, evals[:2], rtol=1e-9)
        np.testing.assert_allclose(proj.captured_fraction(), evals[:2].sum() / evals.sum(), rtol=1e-9)
        assert abs(proj.captured_fraction() - 2 / D) < 0.05

    def test_output_dim_too_large(self, rng):
        with pytest.raises(ValidationError):
            pca_fit([EmbeddingSequence(rng.normal(size=(10, 3)))], 4)

    def test_rank_deficient_warns_and_completes(self, caplog):
        x = np.zeros((6, 3))
        x[:, 0] = np.arange(6)
        with caplog.at_level("WARNING"):
            proj = pca_fit([EmbeddingSequence(x)], 3)
        assert "rank" in caplog.text
        np.testing.assert_allclose(proj.basis @ proj.basis.T, np.eye(3), atol=1e-8)

    def test_reconstruction_error_monotone(self, rng):
        x = rng.normal(size=(60, 6)) @ rng.normal(size=(6, 6))
        errors = []
        for k in range(1, 7):
            proj = pca_fit([EmbeddingSequence(x)], k)
            y = pca_apply(proj, EmbeddingSequence(x)).frames
            errors.append(np.sum((proj.reconstruct(y) - x) ** 2))
        assert all(a >= b - 1e-9 for a, b in zip(errors, errors[1:]))
        assert errors[-1] < 1e-9


class TestSplit:
    def _dataset(self, per_domain):
        recs = []
        for d, n in per_domain.items():
            recs += [make_recording(f"{d}{i}", [1, 2], domain=d) for i in range(n)]
        return Dataset(recs)

    def test_one_domain(self):
        tr, va = stratified_split(self._dataset({"a": 10}), 0.8, seed=0)
        assert (len(tr), len(va)) == (8, 2)

    def test_two_domains(self):
        tr, va = stratified_split(self._dataset({"a": 5, "b": 5}), 0.8, seed=0)
        assert sorted(r.domain for r in tr) == ["a"] * 4 + ["b"] * 4
        assert sorted(r.domain for r in va) == ["a", "b"]

    def test_deterministic_and_seed_dependent(self):
        ds = self._dataset({"a": 10, "b": 7})
        ids = lambda split: sorted(r.id for r in split[1])  # noqa: E731
        assert ids(stratified_split(ds, 0.8, 3)) == ids(stratified_split(ds, 0.8, 3))
        assert len({tuple(ids(stratified_split(ds, 0.8, s))) for s in range(10)}) > 1

    def test_single_recording_domain_goes_to_train(self, caplog):
        with caplog.at_level("WARNING"):
            tr, va = stratified_split(self._dataset({"a": 5, "solo": 1}), 0.8, 0)
        assert "solo" in {r.domain for r in tr}
        assert "single recording" in caplog.text

    @given(st.integers(0, 1000), st.floats(0.05, 0.95))
    def test_disjoint_exhaustive(self, seed, ratio):
        ds = self._dataset({"a": 6, "b": 3, "c": 2})
        tr, va = stratified_split(ds, ratio, seed)
        tr_ids = {r.id for r in tr}
        va_ids = {r.id for r in va} if va else set()
        assert not tr_ids & va_ids
        assert tr_ids | va_ids == {r.id for r in ds}

    def test_bad_ratio(self):
        with pytest.raises(ValidationError):
            stratified_split(self._dataset({"a": 3}), 1.0)
