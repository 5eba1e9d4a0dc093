"""Dataset assembly, normalization, and the noise-prediction training loop.

Feature maps are disassembled into individual vectors; per-channel min/max
over the whole training set define an affine map onto [-1, 1]. Training
minimizes the mean squared error between the predicted and the applied
noise, one Adam step per iteration, with timesteps drawn uniformly from
the full schedule and batches drawn with replacement.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import denoiser
from .errors import DataError, NumericalError
from .schedule import NoiseSchedule, forward_diffuse, make_rng
from .tensor_store import FeatureMap


@dataclass(frozen=True)
class DatasetStats:
    """Normalization constants plus the score-standardization moments
    (the latter default to the identity until computed on a training set)."""

    per_channel_min: np.ndarray  # float64 [C]
    per_channel_max: np.ndarray  # float64 [C]
    score_mean_diff: float = 0.0
    score_std_diff: float = 1.0
    score_mean_unc: float = 0.0
    score_std_unc: float = 1.0

    def __post_init__(self) -> None:
        lo = np.asarray(self.per_channel_min, dtype=np.float64)
        hi = np.asarray(self.per_channel_max, dtype=np.float64)
        object.__setattr__(self, "per_channel_min", lo)
        object.__setattr__(self, "per_channel_max", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DataError(f"stats shapes {lo.shape} / {hi.shape} invalid")
        if not (hi > lo).all():
            raise DataError("per_channel_max must exceed per_channel_min everywhere")
        if self.score_std_diff <= 0 or self.score_std_unc <= 0:
            raise DataError("score standardization stds must be positive")

    @property
    def channels(self) -> int:
        return self.per_channel_min.shape[0]


def identity_stats(channels: int) -> DatasetStats:
    """Stats under which normalize() is the identity (min=-1, max=+1)."""
    return DatasetStats(-np.ones(channels), np.ones(channels))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 4096
    iterations: int = 70_000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")


def _as_vector_array(features) -> np.ndarray:
    """Accept [N, C] arrays, single FeatureMaps, or iterables of either."""
    if isinstance(features, np.ndarray):
        if features.ndim == 3:
            return features.reshape(-1, features.shape[2])
        if features.ndim != 2:
            raise DataError(f"feature array must be [N, C], got shape {features.shape}")
        return features
    if isinstance(features, FeatureMap):
        return features.vectors()
    chunks = [_as_vector_array(f) for f in features]
    if not chunks:
        raise DataError("empty feature stream")
    return np.concatenate(chunks, axis=0)


def compute_stats(features: Iterable[FeatureMap] | np.ndarray) -> DatasetStats:
    """Exact channel-wise min/max over every vector of every map.

    Degenerate channels (max == min) are widened by +-0.5 so the constant
    value normalizes to 0 instead of dividing by zero.
    """
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    if isinstance(features, (np.ndarray, FeatureMap)):
        features = [features]
    for chunk in features:
        arr = _as_vector_array(chunk)
        if arr.size == 0:
            continue
        if not np.isfinite(arr).all():
            raise NumericalError("non-finite value in feature stream")
        cmin = arr.min(axis=0).astype(np.float64)
        cmax = arr.max(axis=0).astype(np.float64)
        lo = cmin if lo is None else np.minimum(lo, cmin)
        hi = cmax if hi is None else np.maximum(hi, cmax)
    if lo is None:
        raise DataError("empty feature stream")
    flat = hi == lo
    lo = np.where(flat, lo - 0.5, lo)
    hi = np.where(flat, hi + 0.5, hi)
    return DatasetStats(lo, hi)


def normalize(x: np.ndarray, stats: DatasetStats) -> np.ndarray:
    """Affine map per channel: training-set min -> -1, max -> +1. No clamping,
    so inference-time values may land outside [-1, 1]."""
    x = np.asarray(x)
    lo, hi = stats.per_channel_min, stats.per_channel_max
    out = 2.0 * (x - lo) / (hi - lo) - 1.0
    return out.astype(x.dtype if x.dtype.kind == "f" else np.float32, copy=False)


def denormalize(y: np.ndarray, stats: DatasetStats) -> np.ndarray:
    y = np.asarray(y)
    lo, hi = stats.per_channel_min, stats.per_channel_max
    out = (y + 1.0) / 2.0 * (hi - lo) + lo
    return out.astype(y.dtype if y.dtype.kind == "f" else np.float32, copy=False)


class Adam:
    """Adaptive-moment optimizer over a {name: array} parameter dict."""

    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.learning_rate
        self.beta1 = cfg.beta1
        self.beta2 = cfg.beta2
        self.eps = cfg.adam_eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if not self.m:
            self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
            self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in tensors.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def train(
    features,
    cfg: TrainConfig,
    sched: NoiseSchedule,
    net_cfg: denoiser.DenoiserConfig,
    stats: DatasetStats | None = None,
    params: denoiser.DenoiserParams | None = None,
    progress=None,
) -> tuple[denoiser.DenoiserParams, DatasetStats, np.ndarray]:
    """Train the denoiser; returns (params, stats, per-iteration loss trace).

    Per iteration: draw a batch of vectors with replacement, a timestep
    uniform in 1..T per element, fresh unit Gaussian noise; perturb via the
    closed-form forward process; one Adam step on the mean squared error
    (mean over batch and channels) between predicted and applied noise.
    Bitwise deterministic for a fixed seed on a single thread.
    """
    data = _as_vector_array(features)
    if data.shape[0] == 0:
        raise DataError("empty training set")
    if data.shape[1] != net_cfg.input_dim:
        raise DataError(
            f"feature dim {data.shape[1]} != denoiser input_dim {net_cfg.input_dim}"
        )
    if stats is None:
        stats = compute_stats(data)
    data = normalize(data, stats).astype(np.float32, copy=False)

    if params is None:
        params = denoiser.init_params(net_cfg, make_rng(cfg.seed, 0))
    opt = Adam(cfg)
    rng = make_rng(cfg.seed, 1)
    n, c = data.shape
    trace = np.empty(cfg.iterations, dtype=np.float32)
    inv_count = 1.0 / (cfg.batch_size * c)

    for it in range(cfg.iterations):
        idx = rng.integers(0, n, size=cfg.batch_size)
        t = rng.integers(1, sched.T + 1, size=cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size, c)).astype(np.float32)
        x_t = forward_diffuse(data[idx], t, eps, sched)

        def upstream(pred, _eps=eps):
            return (2.0 * inv_count) * (pred - _eps)

        pred, grads = denoiser.forward_and_backward(params, x_t, t, upstream)
        loss = float(np.mean((pred - eps) ** 2))
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite training loss at iteration {it}")
        trace[it] = loss
        opt.step(params.tensors, grads)
        if progress is not None and (it + 1) % 1000 == 0:
            progress(it + 1, loss)

    params.check_finite()
    return params, stats, trace


def compute_score_standardization(
    feature_maps: Sequence[FeatureMap],
    denoise_fn,
    sched: NoiseSchedule,
    score_cfg,
    stats: DatasetStats,
    logits_maps: Sequence[np.ndarray] | None = None,
) -> DatasetStats:
    """Mean/std of the aggregated diffusion score over the training maps and,
    if logits are supplied, of the LogSumExp uncertainty score. Used to put
    the two score families on a common scale before compounding."""
    from . import scorer  # runtime import: scorer depends on this module's types

    if not feature_maps:
        raise DataError("no feature maps for score standardization")
    diff_vals = []
    for fmap in feature_maps:
        smap = scorer.score_feature_map(fmap, denoise_fn, sched, score_cfg, stats)
        diff_vals.append(smap.values.ravel().astype(np.float64))
    diff = np.concatenate(diff_vals)
    mean_d, std_d = float(diff.mean()), float(diff.std())
    if std_d < 1e-12:
        raise DataError("zero variance in diffusion scores; cannot standardize")
    updates = dict(score_mean_diff=mean_d, score_std_diff=std_d)

    if logits_maps is not None:
        unc_vals = []
        for logits in logits_maps:
            umap = scorer.logsumexp_uncertainty(logits)
            unc_vals.append(umap.values.ravel().astype(np.float64))
        unc = np.concatenate(unc_vals)
        mean_u, std_u = float(unc.mean()), float(unc.std())
        if std_u < 1e-12:
            raise DataError("zero variance in uncertainty scores; cannot standardize")
        updates.update(score_mean_unc=mean_u, score_std_unc=std_u)

    return replace(stats, **updates)
