"""Synthetic desk-scale ground truth with an exact analytic oracle.

In-distribution data is a diagonal Gaussian mixture. Diffusing such a
mixture keeps it a diagonal mixture in closed form (component k becomes
mean sqrt(alpha_bar_t) * mu_k, variance alpha_bar_t * cov_k +
(1 - alpha_bar_t)), so the gradient of the smoothed log-density -- and
with it the ideal noise prediction -- is available exactly. That oracle
is the ceiling every trained network is measured against.

Benchmark maps plant a contiguous rectangle of out-of-distribution
vectors into otherwise in-distribution feature maps, with matching masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .schedule import NoiseSchedule, make_rng
from .tensor_store import FeatureMap, OoDMask
from .trainer import DatasetStats


@dataclass(frozen=True)
class GmmSpec:
    weights: np.ndarray   # [K], positive, sums to 1
    means: np.ndarray     # [K, C]
    cov_diag: np.ndarray  # [K, C], positive

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        v = np.asarray(self.cov_diag, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "cov_diag", v)
        if w.ndim != 1 or m.ndim != 2 or v.shape != m.shape or w.shape[0] != m.shape[0]:
            raise DataError("inconsistent mixture shapes")
        if (w <= 0).any() or abs(w.sum() - 1.0) > 1e-12:
            raise DataError("weights must be positive and sum to 1")
        if (v <= 0).any():
            raise DataError("cov_diag entries must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]


def sample_gmm(spec: GmmSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n vectors: component by weight, then a diagonal Gaussian draw."""
    comp = rng.choice(spec.n_components, size=n, p=spec.weights)
    z = rng.standard_normal((n, spec.dim))
    return (spec.means[comp] + np.sqrt(spec.cov_diag[comp]) * z).astype(np.float32)


def diffused_spec(spec: GmmSpec, t: int, sched: NoiseSchedule):
    """Mixture parameters after forward diffusion to timestep t."""
    sched.check_timestep(t)
    ab = sched.alpha_bar[t - 1]
    means_t = np.sqrt(ab) * spec.means
    vars_t = ab * spec.cov_diag + (1.0 - ab)
    return means_t, vars_t


def smoothed_gmm_logpdf(spec: GmmSpec, x_t: np.ndarray, t: int, sched: NoiseSchedule):
    """Exact log-density of the diffused mixture at x_t ([C] or [N, C])."""
    means_t, vars_t = diffused_spec(spec, t, sched)
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    d = x[:, None, :] - means_t[None, :, :]                      # [N, K, C]
    log_comp = (
        np.log(spec.weights)[None, :]
        - 0.5 * np.sum(d * d / vars_t[None, :, :], axis=2)
        - 0.5 * np.sum(np.log(2.0 * np.pi * vars_t), axis=1)[None, :]
    )
    m = log_comp.max(axis=1, keepdims=True)
    out = (m[:, 0] + np.log(np.exp(log_comp - m).sum(axis=1)))
    return out[0] if np.asarray(x_t).ndim == 1 else out


def smoothed_gmm_score(spec: GmmSpec, x_t: np.ndarray, t: int, sched: NoiseSchedule):
    """Gradient of the diffused-mixture log-density at x_t, computed in double
    precision with log-domain responsibilities (cannot underflow to NaN)."""
    means_t, vars_t = diffused_spec(spec, t, sched)
    single = np.asarray(x_t).ndim == 1
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    d = x[:, None, :] - means_t[None, :, :]                      # [N, K, C]
    log_comp = (
        np.log(spec.weights)[None, :]
        - 0.5 * np.sum(d * d / vars_t[None, :, :], axis=2)
        - 0.5 * np.sum(np.log(2.0 * np.pi * vars_t), axis=1)[None, :]
    )
    m = log_comp.max(axis=1, keepdims=True)
    resp = np.exp(log_comp - m)
    resp /= resp.sum(axis=1, keepdims=True)                      # [N, K]
    comp_scores = -d / vars_t[None, :, :]                        # [N, K, C]
    score = np.einsum("nk,nkc->nc", resp, comp_scores)
    return score[0] if single else score


def oracle_eps(spec: GmmSpec, x_t: np.ndarray, t: int, sched: NoiseSchedule):
    """Ideal noise prediction: -sigma_t times the smoothed-distribution score.

    This is the output an optimally trained network approaches; plugging it
    into the scorer gives the performance ceiling for a given benchmark.
    """
    sigma = sched.sigma[t - 1]
    return (-sigma * smoothed_gmm_score(spec, x_t, t, sched)).astype(np.float64)


def normalized_spec(spec: GmmSpec, stats: DatasetStats) -> GmmSpec:
    """The mixture expressed in the scorer's normalized coordinates.

    Normalization is per-channel affine, so means map through it and
    variances pick up the squared channel scales.
    """
    lo, hi = stats.per_channel_min, stats.per_channel_max
    scale = 2.0 / (hi - lo)
    means_n = (spec.means - lo) * scale - 1.0
    cov_n = spec.cov_diag * scale**2
    return GmmSpec(spec.weights, means_n, cov_n)


def make_oracle_denoise_fn(spec: GmmSpec, stats: DatasetStats, sched: NoiseSchedule):
    """Oracle in normalized space, shaped like a denoiser `(x_t, t) -> eps`."""
    spec_n = normalized_spec(spec, stats)
    return lambda x_t, t: oracle_eps(spec_n, x_t, t, sched)


def make_synthetic_benchmark(
    spec_in: GmmSpec,
    ood_mean: np.ndarray,
    n_maps: int,
    h: int,
    w: int,
    ood_fraction: float,
    seed: int,
) -> tuple[list[FeatureMap], list[OoDMask]]:
    """Feature maps drawn from spec_in with one contiguous rectangle per map
    (about ood_fraction of the area) replaced by draws from N(ood_mean, I);
    masks mark that rectangle. Per-map derived seeds keep generation
    reproducible regardless of parallelism."""
    ood_mean = np.asarray(ood_mean, dtype=np.float64)
    if ood_mean.shape != (spec_in.dim,):
        raise DataError(f"ood_mean shape {ood_mean.shape} != ({spec_in.dim},)")
    if not (0.0 < ood_fraction < 1.0):
        raise DataError("ood_fraction must be in (0, 1)")
    rh = max(1, round(h * np.sqrt(ood_fraction)))
    rw = max(1, round(w * np.sqrt(ood_fraction)))
    if rh > h or rw > w:
        raise DataError(f"ood region {rh}x{rw} does not fit in {h}x{w}")
    maps, masks = [], []
    for i in range(n_maps):
        rng = make_rng(seed, i)
        base = sample_gmm(spec_in, h * w, rng).reshape(h, w, spec_in.dim)
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        blob = (ood_mean + rng.standard_normal((rh, rw, spec_in.dim))).astype(np.float32)
        base[top:top + rh, left:left + rw] = blob
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[top:top + rh, left:left + rw] = 1
        maps.append(FeatureMap(base))
        masks.append(OoDMask(mask))
    return maps, masks


def sample_inlier_maps(
    spec: GmmSpec, n_maps: int, h: int, w: int, seed: int
) -> list[FeatureMap]:
    """Pure in-distribution feature maps (training-side data)."""
    return [
        FeatureMap(
            sample_gmm(spec, h * w, make_rng(seed, i)).reshape(h, w, spec.dim)
        )
        for i in range(n_maps)
    ]


# --- the fixed desk-scale benchmark --------------------------------------

STANDARD_DIM = 16
STANDARD_SPREAD = 6.0       # pairwise distance between component means
STANDARD_OOD_DISTANCE = 8.0  # distance of the planted cluster from the nearest mean
STANDARD_COV = 1e-5          # per-channel component variance (std ~0.003)
STANDARD_MAPS = 200
STANDARD_HW = 32
STANDARD_OOD_FRACTION = 0.1
STANDARD_SEED = 20240

@dataclass(frozen=True)
class SynthBenchmark:
    spec: GmmSpec
    ood_mean: np.ndarray
    train_maps: list[FeatureMap]
    test_maps: list[FeatureMap]
    masks: list[OoDMask]


def standard_spec(dim: int = STANDARD_DIM, cov: float = STANDARD_COV) -> tuple[GmmSpec, np.ndarray]:
    """Three equally weighted components at exact pairwise distance 6, with
    mean offsets spread across every channel (so no channel's normalization
    range is noise-dominated), plus the planted-cluster mean at exact
    distance 8 from the nearest component."""
    if dim % 2 != 0:
        raise DataError("standard spec needs an even dimension")
    u = np.ones(dim) / np.sqrt(dim)
    w = np.tile([1.0, -1.0], dim // 2) / np.sqrt(dim)
    v = 0.5 * u + (np.sqrt(3.0) / 2.0) * w
    means = np.stack([
        np.zeros(dim),
        STANDARD_SPREAD * u,
        STANDARD_SPREAD * v,
    ])
    d = -(u + v)
    d /= np.linalg.norm(d)
    ood_mean = STANDARD_OOD_DISTANCE * d
    weights = np.full(3, 1.0 / 3.0)
    cov_diag = np.full((3, dim), cov)
    return GmmSpec(weights, means, cov_diag), ood_mean


def standard_benchmark(
    seed: int = STANDARD_SEED,
    n_train_maps: int = 100,
    n_test_maps: int = STANDARD_MAPS,
) -> SynthBenchmark:
    """The fixed, seeded benchmark the acceptance suite runs against."""
    spec, ood_mean = standard_spec()
    train_maps = sample_inlier_maps(spec, n_train_maps, STANDARD_HW, STANDARD_HW, seed)
    test_maps, masks = make_synthetic_benchmark(
        spec, ood_mean, n_test_maps, STANDARD_HW, STANDARD_HW,
        STANDARD_OOD_FRACTION, seed + 1,
    )
    return SynthBenchmark(spec, ood_mean, train_maps, test_maps, masks)
