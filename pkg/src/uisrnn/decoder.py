"""Online MAP decoding of speaker labels by beam search.

The per-frame score of extending a hypothesis is the sum of three log
factors: speaker change (Bernoulli p0), speaker assignment (block-count
ddCRP, only on a change) and the Gaussian likelihood of the frame under the
chosen speaker's predicted mean.
"""

from __future__ import annotations

import heapq
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from uisrnn.data import EmbeddingSequence, LabelSequence
from uisrnn.errors import DimensionMismatchError, ValidationError
from uisrnn.model import (
    LOG_2PI,
    SpeakerModel,
    new_instance,
    observe,
    observe_many,
    predict_mean,
)
from uisrnn.priors import NEW, BlockCounts, PriorParams, assignment_log_probs, change_log_prob, update_blocks

EXHAUSTIVE_LIMIT = 10


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 15
    max_speakers: int | None = None

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValidationError("beam_width must be >= 1")
        if self.max_speakers is not None and self.max_speakers < 1:
            raise ValidationError("max_speakers must be >= 1")


@dataclass(frozen=True, eq=False)
class BeamHypothesis:
    labels: tuple
    log_joint: float
    states: tuple  # states[k - 1] belongs to speaker k
    blocks: BlockCounts


@dataclass
class DecodeResult:
    labels: LabelSequence
    log_joint: float
    trace: list = field(default_factory=list)


def _frames(X) -> np.ndarray:
    frames = X.frames if isinstance(X, EmbeddingSequence) else np.asarray(X, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValidationError("cannot decode an empty sequence")
    return frames


def _batch_loglik(x, means, sigma2) -> np.ndarray:
    diff = means - x
    sigma2 = np.broadcast_to(sigma2, x.shape)
    return -0.5 * np.sum(LOG_2PI + np.log(sigma2)) - 0.5 * np.sum(diff * diff / sigma2, axis=1)


class _RnnEmission:
    def __init__(self, model: SpeakerModel):
        self.model = model
        self.sigma2 = np.asarray(model.sigma2, dtype=np.float64)
        self.fresh = new_instance(model)
        self.fresh_mean = predict_mean(self.fresh)

    def first(self, x):
        return self.fresh_mean, observe(self.model, self.fresh, x)

    def means(self, states):
        return np.stack([predict_mean(s) for s in states])

    def new_mean(self, x, label):
        return self.fresh_mean

    def advance(self, states, xs, labels):
        states = [self.fresh if s is None else s for s in states]
        return observe_many(self.model, states, xs)


class _CumulativeMeanEmission:
    """Speaker mean is the running average of that speaker's frames.

    A new speaker is scored with its own frame as the mean, i.e. zero distance.
    """

    def __init__(self, sigma2):
        self.sigma2 = np.asarray(sigma2, dtype=np.float64)

    def first(self, x):
        return x, (x.copy(), 1)

    def means(self, states):
        return np.stack([s / n for s, n in states])

    def new_mean(self, x, label):
        return x

    def advance(self, states, xs, labels):
        return [(x.copy(), 1) if s is None else (s[0] + x, s[1] + 1) for s, x in zip(states, xs)]


class _OracleEmission:
    """Speaker k (in order of appearance) is predicted by a fixed known mean."""

    def __init__(self, means, sigma2):
        self.fixed = np.asarray(means, dtype=np.float64)
        self.sigma2 = np.asarray(sigma2, dtype=np.float64)

    def first(self, x):
        return self.fixed[0], 0

    def means(self, states):
        return self.fixed[list(states)]

    def new_mean(self, x, label):
        return self.fixed[label - 1]

    def advance(self, states, xs, labels):
        return [label - 1 for label in labels]


def _search(frames: np.ndarray, emission, priors: PriorParams, config: DecodeConfig, trace: bool = False) -> DecodeResult:
    log_stay = change_log_prob(priors.p0, False)
    log_change = change_log_prob(priors.p0, True)
    x0 = frames[0]
    mu0, state0 = emission.first(x0)
    ll0 = float(_batch_loglik(x0, mu0[None, :], emission.sigma2)[0])
    beam = [BeamHypothesis((1,), ll0, (state0,), BlockCounts.start(1))]
    trace_rows = []
    for t in range(1, frames.shape[0]):
        x = frames[t]
        new_ll = {}
        candidates = []
        for hyp in beam:
            lls = _batch_loglik(x, emission.means(hyp.states), emission.sigma2)
            current = hyp.blocks.current_speaker
            candidates.append((-(hyp.log_joint + (log_stay + lls[current - 1])), hyp.labels, current, hyp))
            for target, log_assign in assignment_log_probs(hyp.blocks, priors.alpha).items():
                if target == NEW:
                    if config.max_speakers is not None and hyp.blocks.num_speakers >= config.max_speakers:
                        continue
                    label = hyp.blocks.num_speakers + 1
                    if label not in new_ll:
                        new_ll[label] = float(_batch_loglik(x, emission.new_mean(x, label)[None, :], emission.sigma2)[0])
                    ll = new_ll[label]
                else:
                    label, ll = target, lls[target - 1]
                candidates.append((-(hyp.log_joint + (log_change + log_assign + ll)), hyp.labels, label, hyp))
        kept = heapq.nsmallest(config.beam_width, candidates, key=lambda c: (c[0], c[1], c[2]))
        to_advance = [
            c[3].states[c[2] - 1] if c[2] <= len(c[3].states) else None for c in kept
        ]
        advanced = emission.advance(to_advance, [x] * len(kept), [c[2] for c in kept])
        beam = []
        for (neg_score, labels, label, hyp), state in zip(kept, advanced):
            states = list(hyp.states)
            if label <= len(states):
                states[label - 1] = state
            else:
                states.append(state)
            beam.append(BeamHypothesis(labels + (label,), -neg_score, tuple(states), update_blocks(hyp.blocks, label)))
        if trace:
            best = beam[0].log_joint
            trace_rows.append([h.log_joint - best for h in beam])
    best = beam[0]
    return DecodeResult(LabelSequence(best.labels), float(best.log_joint), trace_rows)


def _check_dim(frames: np.ndarray, dim: int):
    if frames.shape[1] != dim:
        raise DimensionMismatchError(f"embeddings have dim {frames.shape[1]}, model expects {dim}")


def beam_search(X, model: SpeakerModel, priors: PriorParams, config: DecodeConfig = DecodeConfig(),
                trace: bool = False) -> DecodeResult:
    frames = _frames(X)
    _check_dim(frames, model.dim)
    return _search(frames, _RnnEmission(model), priors, config, trace)


def beam_decode(X, model: SpeakerModel, priors: PriorParams, config: DecodeConfig = DecodeConfig()):
    """Return ``(labels, log_joint)`` of the best hypothesis surviving the beam."""
    result = beam_search(X, model, priors, config)
    return result.labels, result.log_joint


def cumulative_mean_search(X, priors: PriorParams, config: DecodeConfig, sigma2, trace: bool = False) -> DecodeResult:
    frames = _frames(X)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if not np.all(sigma2 > 0):
        raise ValidationError("sigma2 must be positive")
    if sigma2.ndim == 1:
        _check_dim(frames, sigma2.shape[0])
    return _search(frames, _CumulativeMeanEmission(sigma2), priors, config, trace)


def cumulative_mean_decode(X, priors: PriorParams, config: DecodeConfig, sigma2):
    result = cumulative_mean_search(X, priors, config, sigma2)
    return result.labels, result.log_joint


def oracle_mean_decode(X, priors: PriorParams, config: DecodeConfig, means, sigma2):
    """Decode with known speaker means, assigned to speakers in order of first appearance.

    A diagnostic upper bound: the speaker model is replaced by the true
    generative means, so only the priors and the search remain.
    """
    frames = _frames(X)
    means = np.asarray(means, dtype=np.float64)
    _check_dim(frames, means.shape[1])
    limit = means.shape[0] if config.max_speakers is None else min(config.max_speakers, means.shape[0])
    config = DecodeConfig(config.beam_width, limit)
    result = _search(frames, _OracleEmission(means, sigma2), priors, config)
    return result.labels, result.log_joint


def score_labeling(X, labels, model: SpeakerModel, priors: PriorParams) -> float:
    """Exact log joint of one labeling, recomputed from scratch."""
    frames = _frames(X)
    _check_dim(frames, model.dim)
    labels = LabelSequence(tuple(labels))
    if len(labels) != frames.shape[0]:
        raise ValidationError("labels and frames differ in length")
    from uisrnn.priors import label_process_log_prob

    states = {}
    total = 0.0
    for x, y in zip(frames, labels):
        state = states.get(y) or new_instance(model)
        total += _batch_loglik(x, predict_mean(state)[None, :], model.sigma2)[0]
        states[y] = observe(model, state, x)
    return float(total + label_process_log_prob(labels, priors))


def exhaustive_decode(X, model: SpeakerModel, priors: PriorParams, limit: int = EXHAUSTIVE_LIMIT):
    """Enumerate every canonical labeling and return the exact maximizer of the joint.

    Depth-first over restricted-growth strings, so labelings are visited in
    lexicographic order and the first maximum found is the tie-break winner.
    """
    frames = _frames(X)
    _check_dim(frames, model.dim)
    T = frames.shape[0]
    if T > limit:
        raise ValidationError(f"exhaustive decoding refused for T={T} > {limit}")
    fresh = new_instance(model)
    sigma2 = np.broadcast_to(np.asarray(model.sigma2, dtype=np.float64), (model.dim,))
    log_norm = -0.5 * float(np.sum(np.log(2.0 * math.pi * sigma2)))
    log_p0, log_q0 = math.log(priors.p0), math.log(1.0 - priors.p0)

    def density(x, state):
        mu = state.mean_sum / state.steps
        return log_norm - 0.5 * float(np.sum((x - mu) ** 2 / sigma2))

    best = [-math.inf, None]

    def visit(t, labels, states, counts, score):
        if t == T:
            if score > best[0]:
                best[0], best[1] = score, tuple(labels)
            return
        x = frames[t]
        prev = labels[-1]
        z = priors.alpha + sum(n for k, n in counts.items() if k != prev)
        for y in range(1, len(states) + 2):
            is_new = y == len(states) + 1
            state = fresh if is_new else states[y - 1]
            s = score + density(x, state)
            if y == prev:
                s += log_q0
            else:
                s += log_p0 + math.log((priors.alpha if is_new else counts[y]) / z)
            next_states = states + [observe(model, state, x)] if is_new else (
                states[: y - 1] + [observe(model, state, x)] + states[y:]
            )
            next_counts = dict(counts)
            if y != prev:
                next_counts[y] = next_counts.get(y, 0) + 1
            visit(t + 1, labels + [y], next_states, next_counts, s)

    x0 = frames[0]
    visit(1, [1], [observe(model, fresh, x0)], {1: 1}, density(x0, fresh))
    return LabelSequence(best[1]), best[0]


def decode_many(sequences, decode_fn, threads: int = 1) -> list:
    """Apply ``decode_fn`` to every sequence; output order matches input order."""
    sequences = list(sequences)
    if threads <= 1 or len(sequences) <= 1:
        return [decode_fn(s) for s in sequences]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(decode_fn, sequences))


def fit_cumulative_mean_sigma2(dataset) -> float:
    """Maximum-likelihood observation variance for the cumulative-mean predictor.

    Pools the squared error of predicting each speaker frame by the mean of
    that speaker's earlier frames in the same recording (first frames have
    no prediction and are skipped).
    """
    total = 0.0
    count = 0
    dim = None
    for rec in dataset:
        frames = rec.embeddings.frames
        dim = frames.shape[1]
        labels = rec.labels.as_array()
        for k in range(1, rec.labels.num_speakers + 1):
            own = frames[labels == k]
            if own.shape[0] < 2:
                continue
            prefix_means = np.cumsum(own, axis=0)[:-1] / np.arange(1, own.shape[0])[:, None]
            total += float(np.sum((own[1:] - prefix_means) ** 2))
            count += own.shape[0] - 1
    if count == 0:
        raise ValidationError("no speaker has two or more frames")
    return total / (dim * count)
