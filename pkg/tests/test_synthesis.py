import math

import numpy as np
import pytest

from uisrnn.data import relabel_canonical
from uisrnn.decoder import DecodeConfig, oracle_mean_decode
from uisrnn.errors import ValidationError
from uisrnn.evaluation import der_corpus
from uisrnn.priors import blocks_from_labels, estimate_alpha, estimate_p0, estimate_priors
from uisrnn.synthesis import SynthConfig, generate, generate_dataset, sample_labels


class TestLabels:
    def test_single_speaker(self):
        syn = generate(SynthConfig(num_speakers=1, dim=3, mean_scale=5.0, sigma=0.1, num_frames=100))
        assert set(syn.recording.labels) == {1}
        frames = syn.recording.embeddings.frames
        assert np.abs(frames - syn.speaker_means[0]).max() < 1.0

    def test_rare_changes(self):
        labels, _ = sample_labels(np.random.default_rng(0), 10_000, 1e-4, 1.0)
        rate = sum(a != b for a, b in zip(labels, labels[1:])) / (len(labels) - 1)
        assert rate < 0.01

    @pytest.mark.parametrize("seed", range(5))
    def test_canonical(self, seed):
        syn = generate(SynthConfig(num_frames=150, p0=0.2, seed=seed))
        labels = syn.recording.labels.labels
        assert labels == relabel_canonical(labels).labels
        assert list(syn.speaker_labels) == list(labels)

    def test_cap_respected(self):
        labels, capped = sample_labels(np.random.default_rng(1), 500, 0.5, 10.0, max_speakers=3)
        assert capped and max(labels) == 3

    def test_invalid_config(self):
        with pytest.raises(ValidationError):
            SynthConfig(p0=0.0)


class TestEstimatorConsistency:
    def test_p0_within_three_standard_errors(self):
        p0 = 0.05
        seqs = [sample_labels(np.random.default_rng(s), 400, p0, 1.0)[0] for s in range(50)]
        n = sum(len(s) - 1 for s in seqs)
        assert abs(estimate_p0(seqs) - p0) < 3 * math.sqrt(p0 * (1 - p0) / n)

    def test_new_speaker_events_match_ddcrp_probabilities(self):
        # the count of new speakers minus the sum of their conditional
        # probabilities at each change is a zero-mean martingale
        alpha = 1.5
        excess = variance = 0.0
        for s in range(200):
            labels, capped = sample_labels(np.random.default_rng(s), 200, 0.1, alpha, max_speakers=1000)
            assert not capped
            for t in range(1, len(labels)):
                if labels[t] == labels[t - 1]:
                    continue
                blocks = blocks_from_labels(labels[:t])
                z = alpha + sum(n for k, n in blocks.counts if k != blocks.current_speaker)
                p = alpha / z
                excess += (labels[t] > blocks.num_speakers) - p
                variance += p * (1 - p)
        assert abs(excess) < 3 * math.sqrt(variance)

    def test_ratio_estimator_is_not_alpha(self):
        # the new/change ratio never exceeds 1, so it cannot recover alpha > 1
        seqs = [sample_labels(np.random.default_rng(s), 300, 0.1, 4.0, max_speakers=1000)[0] for s in range(20)]
        assert estimate_alpha(seqs) <= 1.0


class TestGenerate:
    def test_deterministic(self):
        a = generate(SynthConfig(seed=3), "r")
        b = generate(SynthConfig(seed=3), "r")
        assert a.recording.embeddings == b.recording.embeddings
        assert a.recording.labels == b.recording.labels

    def test_recordings_differ(self):
        data = generate_dataset(SynthConfig(num_frames=20), 2)
        assert data.recordings[0].embeddings != data.recordings[1].embeddings

    def test_overlap_reference(self):
        syn = generate(SynthConfig(num_frames=300, p0=0.1, overlap_fraction=0.2, seed=2))
        sets = syn.recording.reference_sets()
        assert any(len(s) == 2 for s in sets)
        assert syn.recording.labels == relabel_canonical(sets)

    @pytest.mark.parametrize("ratio", [3.0, 30.0])
    def test_oracle_round_trip(self, ratio):
        cfg = SynthConfig(num_speakers=4, dim=4, mean_scale=ratio * 0.1, sigma=0.1, num_frames=150, seed=1)
        synths = [generate(cfg, f"r{i}") for i in range(6)]
        priors = estimate_priors([s.recording.labels for s in synths])
        pairs = []
        for s in synths:
            hyp, _ = oracle_mean_decode(s.recording.embeddings, priors, DecodeConfig(beam_width=8),
                                        s.speaker_means, cfg.sigma**2)
            pairs.append((s.reference, list(hyp)))
        score = der_corpus(pairs)[0].der
        if ratio >= 30:
            assert score == 0.0
        else:
            assert score < 0.2
