"""Training objectives (next-embedding MSE and sample mean loss), Adam and the training loop.

The squared-error loss is embedded in the Gaussian negative log-likelihood
so that the observation variance also receives a gradient::

    total = E / (2 sigma2) + (D / 2) * count * ln sigma2
            + l2 * ||theta||^2 + (a + 1) * ln sigma2 + b / sigma2

where E is the summed squared error over ``count`` predictions and the last
two terms are an inverse-gamma(a, b) prior on sigma2.  sigma2 is optimized in
log space.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from uisrnn.data import Dataset, build_training_sequences
from uisrnn.errors import DivergenceError, ValidationError
from uisrnn.model import PARAM_NAMES, ModelConfig, SpeakerModel, backward_sequences, forward_sequences
from uisrnn.priors import PriorParams, estimate_priors

logger = logging.getLogger(__name__)

LOG_SIGMA2_MIN = math.log(1e-8)
SIGMA_KEY = "log_sigma2"


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "sml"
    num_samples: int = 2
    learning_rate: float = 1e-3
    batch_size: int = 10
    epochs: int = 10
    max_iterations: int | None = None
    l2_weight: float = 1e-5
    sigma2_prior: tuple = (1.0, 1.0)
    seed: int = 0
    crop_length: int | None = None
    permutations: int = 10
    eval_every: int = 1
    val_beam: int = 2
    val_max_speakers: int | None = None

    def __post_init__(self):
        if self.loss not in ("mse", "sml"):
            raise ValidationError(f"loss must be 'mse' or 'sml', got {self.loss!r}")
        if self.num_samples < 1:
            raise ValidationError("num_samples must be >= 1")
        if self.batch_size < 1 or self.epochs < 1 or self.permutations < 1 or self.eval_every < 1:
            raise ValidationError("batch_size, epochs, permutations and eval_every must be >= 1")
        if not self.learning_rate > 0 or self.l2_weight < 0:
            raise ValidationError("learning_rate must be positive and l2_weight nonnegative")
        a, b = self.sigma2_prior
        if not (a > 0 and b > 0):
            raise ValidationError("inverse-gamma prior parameters must be positive")
        if self.crop_length is not None and self.crop_length < 1:
            raise ValidationError("crop_length must be >= 1")
        object.__setattr__(self, "sigma2_prior", (float(a), float(b)))


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    cluster_mean_variance: list = field(default_factory=list)
    validation: list = field(default_factory=list)  # (iteration, der)
    best_der: float | None = None
    best_iteration: int | None = None

    def to_jsonl(self) -> str:
        lines = [
            json.dumps({"iteration": i + 1, "loss": loss, "cluster_mean_variance": cmv})
            for i, (loss, cmv) in enumerate(zip(self.losses, self.cluster_mean_variance))
        ]
        return "".join(line + "\n" for line in lines)


# --------------------------------------------------------------------------
# Targets and losses
# --------------------------------------------------------------------------


def _shifted_mean(draws: np.ndarray, axis: int) -> np.ndarray:
    # mean about the first draw: exact when every draw is the same vector
    anchor = np.take(draws, [0], axis=axis)
    return np.squeeze(anchor, axis=axis) + (draws - anchor).mean(axis=axis)


def sample_mean(suffix, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Mean of ``num_samples`` uniform draws with replacement from ``suffix``."""
    suffix = np.asarray(suffix, dtype=np.float64)
    if suffix.ndim == 1:
        suffix = suffix[:, None]
    if suffix.shape[0] == 0:
        raise ValidationError("cannot sample from an empty suffix")
    if num_samples < 1:
        raise ValidationError("num_samples must be >= 1")
    idx = rng.integers(0, suffix.shape[0], size=num_samples)
    return _shifted_mean(suffix[idx], axis=0)


def sml_targets(frames: np.ndarray, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Row j is the sample mean of ``num_samples`` draws from ``frames[j:]``."""
    L = frames.shape[0]
    low = np.arange(L)[:, None]
    idx = rng.integers(low, L, size=(L, num_samples))
    return _shifted_mean(frames[idx], axis=1)


def _frames_of(seq) -> np.ndarray:
    return np.asarray(getattr(seq, "frames", seq), dtype=np.float64)


def _pad(frames_list: Sequence[np.ndarray]):
    lengths = np.array([f.shape[0] for f in frames_list])
    B, L, D = len(frames_list), int(lengths.max()), frames_list[0].shape[1]
    out = np.zeros((B, L, D))
    mask = np.zeros((L, B, 1))
    for b, f in enumerate(frames_list):
        out[b, : f.shape[0]] = f
        mask[: f.shape[0], b] = 1.0
    return out, mask, lengths


def squared_error(model: SpeakerModel, frames_list, targets_list):
    """Summed squared error of predicted means against targets, with forward cache.

    Returns ``(per_dim_error, count, cache, residual)`` where ``residual`` is
    the masked (L, B, D) array of mean minus target.
    """
    padded, mask, lengths = _pad(frames_list)
    targets, _, _ = _pad(targets_list)
    cache = forward_sequences(model, padded)
    residual = (cache.means - targets.transpose(1, 0, 2)) * mask
    per_dim = np.sum(residual * residual, axis=(0, 1))
    cache.extras["mask"] = mask
    cache.extras["lengths"] = lengths
    return per_dim, int(lengths.sum()), cache, residual


def _loss_and_grads(model, frames_list, targets_list):
    per_dim, _, cache, residual = squared_error(model, frames_list, targets_list)
    grads = backward_sequences(model, cache, 2.0 * residual)
    return float(per_dim.sum()), grads


def mse_loss(model: SpeakerModel, seq):
    """Sum over j of ||a_j - mu_j||^2, mu_j predicted after a_1..a_{j-1}; returns (loss, grads)."""
    frames = _frames_of(seq)
    return _loss_and_grads(model, [frames], [frames])


def sml_loss(model: SpeakerModel, seq, num_samples: int, rng: np.random.Generator):
    """Like :func:`mse_loss` but the target at j is a sample mean of the suffix a_j..a_L."""
    frames = _frames_of(seq)
    return _loss_and_grads(model, [frames], [sml_targets(frames, num_samples, rng)])


def make_targets(frames_list, config: TrainConfig, rng: np.random.Generator):
    if config.loss == "mse":
        return list(frames_list)
    return [sml_targets(f, config.num_samples, rng) for f in frames_list]


def crop(frames_list, crop_length: int | None):
    if crop_length is None:
        return list(frames_list)
    return [f[:crop_length] for f in frames_list]


def _trajectory_variance(means: np.ndarray, mask: np.ndarray, lengths: np.ndarray) -> float:
    lengths = lengths.astype(np.float64)
    centre = (means * mask).sum(axis=0) / lengths[:, None]
    dev = (means - centre[None]) * mask
    per_seq = (dev * dev).sum(axis=0).mean(axis=1) / lengths
    return float(per_seq.mean())


def cluster_mean_variance(model: SpeakerModel, sequences) -> float:
    """Spread of a speaker's predicted mean while its sequence unfolds.

    For each sequence the instance observes every frame; the predicted mean
    after each observation forms a trajectory whose per-dimension population
    variance (averaged over dimensions) is computed.  Returns the average
    over sequences.
    """
    frames_list = [_frames_of(s) for s in sequences]
    if not frames_list:
        raise ValidationError("need at least one sequence")
    # one extra (ignored) frame so that the mean after the last real frame is produced
    extended = [np.vstack([f, np.zeros((1, f.shape[1]))]) for f in frames_list]
    padded, mask, lengths = _pad(extended)
    cache = forward_sequences(model, padded)
    return _trajectory_variance(cache.means[1:], mask[1:], lengths - 1)


def training_objective(model: SpeakerModel, frames_list, config: TrainConfig, rng: np.random.Generator,
                       targets_list=None):
    """Full objective for one batch; returns ``(value, grads, info)``.

    ``grads`` holds one entry per network parameter plus ``"log_sigma2"``.
    Targets are drawn from ``rng`` unless supplied.
    """
    frames_list = [_frames_of(f) for f in frames_list]
    if not frames_list:
        raise ValidationError("empty batch")
    if targets_list is None:
        targets_list = make_targets(frames_list, config, rng)
    log_s2 = np.asarray(model.log_sigma2, dtype=np.float64)
    if np.any(log_s2 < LOG_SIGMA2_MIN):
        logger.warning("sigma2 below 1e-8; clamped")
        log_s2 = np.maximum(log_s2, LOG_SIGMA2_MIN)
    sigma2 = np.exp(log_s2)
    per_dim, count, cache, residual = squared_error(model, frames_list, targets_list)
    D = model.dim
    a, b = config.sigma2_prior
    theta_sq = sum(float(np.sum(model.params[n] ** 2)) for n in PARAM_NAMES)
    if log_s2.ndim == 0:
        E = float(per_dim.sum())
        nll = E / (2.0 * sigma2) + 0.5 * D * count * log_s2
        prior = (a + 1.0) * log_s2 + b / sigma2
        d_log_s2 = -E / (2.0 * sigma2) + 0.5 * D * count + (a + 1.0) - b / sigma2
        d_means = residual / sigma2
    else:
        nll = np.sum(per_dim / (2.0 * sigma2) + 0.5 * count * log_s2)
        prior = np.sum((a + 1.0) * log_s2 + b / sigma2)
        d_log_s2 = -per_dim / (2.0 * sigma2) + 0.5 * count + (a + 1.0) - b / sigma2
        d_means = residual / sigma2
    value = float(nll + prior + config.l2_weight * theta_sq)
    grads = backward_sequences(model, cache, d_means)
    for n in PARAM_NAMES:
        grads[n] = grads[n] + 2.0 * config.l2_weight * model.params[n]
    grads[SIGMA_KEY] = np.asarray(d_log_s2, dtype=np.float64)
    info = {
        "squared_error": float(per_dim.sum()),
        "count": count,
    }
    return value, grads, info


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamMoments:
    first: dict
    second: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamMoments":
        return cls({k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
                   {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()})


def adam_step(params: dict, grads: dict, moments: AdamMoments, hyper: AdamHyper = AdamHyper()):
    """One bias-corrected Adam update; returns new ``(params, moments)``."""
    t = moments.step + 1
    new_params, first, second = {}, {}, {}
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = hyper.beta1 * moments.first[k] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * moments.second[k] + (1.0 - hyper.beta2) * g * g
        new_params[k] = p - hyper.learning_rate * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        first[k], second[k] = m, v
    return new_params, AdamMoments(first, second, t)


def _trainable(model: SpeakerModel) -> dict:
    out = {n: model.params[n] for n in PARAM_NAMES}
    out[SIGMA_KEY] = np.asarray(model.log_sigma2, dtype=np.float64)
    return out


def _apply(model: SpeakerModel, values: dict) -> SpeakerModel:
    log_s2 = np.maximum(values[SIGMA_KEY], LOG_SIGMA2_MIN)
    return SpeakerModel(model.config, {n: values[n] for n in PARAM_NAMES}, np.exp(log_s2))


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


def validation_der(model: SpeakerModel, priors: PriorParams, dataset: Dataset, beam_width: int = 2,
                   max_speakers: int | None = None, exclude_overlap: bool = False) -> float:
    from uisrnn.decoder import DecodeConfig, beam_decode
    from uisrnn.evaluation import der_corpus

    config = DecodeConfig(beam_width=beam_width, max_speakers=max_speakers)
    pairs = []
    for rec in dataset:
        hyp, _ = beam_decode(rec.embeddings, model, priors, config)
        pairs.append((rec.reference_sets(), list(hyp)))
    overall, _ = der_corpus(pairs, exclude_overlap=exclude_overlap)
    return overall.der


def train(dataset_train: Dataset, dataset_val: Dataset | None, model_config: ModelConfig,
          train_config: TrainConfig = TrainConfig(), callback=None):
    """Train a speaker model; returns ``(model, priors, report)``.

    With a validation set, the returned model is the snapshot with the lowest
    validation DER (later snapshots win ties).  ``callback(iteration, model,
    info)`` is invoked after every optimizer step if given.
    """
    if model_config.embedding_dim != dataset_train.dim:
        raise ValidationError(f"model dim {model_config.embedding_dim} != data dim {dataset_train.dim}")
    cfg = train_config
    sequences = build_training_sequences(dataset_train, cfg.permutations, cfg.seed)
    priors = estimate_priors([rec.labels for rec in dataset_train])
    model = SpeakerModel.init(model_config, seed=cfg.seed)
    values = _trainable(model)
    moments = AdamMoments.zeros_like(values)
    hyper = AdamHyper(learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    report = TrainReport()
    best_model = model
    iteration = 0
    done = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(sequences))
        for start in range(0, len(order), cfg.batch_size):
            batch = crop([sequences[i].frames for i in order[start : start + cfg.batch_size]], cfg.crop_length)
            value, grads, info = training_objective(model, batch, cfg, rng)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"non-finite loss at iteration {iteration + 1}", report)
            values, moments = adam_step(values, grads, moments, hyper)
            model = _apply(model, values)
            iteration += 1
            report.losses.append(value)
            report.cluster_mean_variance.append(cluster_mean_variance(model, batch))
            if callback is not None:
                callback(iteration, model, info)
            if cfg.max_iterations is not None and iteration >= cfg.max_iterations:
                done = True
                break
        last_epoch = done or epoch == cfg.epochs - 1
        if dataset_val is not None and ((epoch + 1) % cfg.eval_every == 0 or last_epoch):
            score = validation_der(model, priors, dataset_val, cfg.val_beam, cfg.val_max_speakers)
            report.validation.append((iteration, score))
            logger.info("epoch %d iteration %d: validation DER %.4f", epoch + 1, iteration, score)
            if report.best_der is None or score <= report.best_der:
                report.best_der, report.best_iteration = score, iteration
                best_model = model
        if done:
            break
    if dataset_val is None:
        best_model = model
        report.best_iteration = iteration
    return best_model, priors, report


def config_dict(config) -> dict:
    return asdict(config)
