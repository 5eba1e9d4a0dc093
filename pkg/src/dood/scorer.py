"""Inference-time out-of-distribution scoring.

Per feature vector and timestep: perturb with fresh seeded noise, run the
denoiser, and score its output against the applied noise. The default
score is the negated cosine similarity between the two ("directional"),
which equals the cosine between the estimated density gradient and the
perturbation because the sigma_t scaling cancels. Per-timestep maps are
combined by a weighted sum with weights sigma_t = sqrt(1 - alpha_bar_t),
matching the expected perturbation magnitude at each step.

Two baseline scores are provided for comparison at single timesteps:
the squared error between predicted and applied noise, and the squared
error of a full ancestral-reverse reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError
from .schedule import NoiseSchedule, forward_diffuse, make_rng
from .tensor_store import FeatureMap
from .trainer import DatasetStats, normalize

DEGENERATE_NORM = 1e-12

SCORE_KINDS = ("directional", "mse_score", "mse_recon")


@dataclass(frozen=True)
class ScoreConfig:
    timesteps: tuple[int, ...] = tuple(range(1, 26))
    score_kind: str = "directional"
    noise_seed: int = 0
    samples_per_timestep: int = 1

    def __post_init__(self) -> None:
        if not self.timesteps:
            raise ValueError("at least one timestep required")
        if self.score_kind not in SCORE_KINDS:
            raise ValueError(f"score_kind must be one of {SCORE_KINDS}")
        if self.samples_per_timestep < 1:
            raise ValueError("samples_per_timestep must be >= 1")
        object.__setattr__(self, "timesteps", tuple(int(t) for t in self.timesteps))


@dataclass(frozen=True)
class ScoreMap:
    """Scalar score grid; `resolution` records whether entries are feature
    patches or image pixels."""

    values: np.ndarray  # float32 [H, W]
    resolution: str = "patch"  # "patch" | "pixel"
    degenerate_count: int = 0

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float32)
        object.__setattr__(self, "values", v)
        if v.ndim != 2:
            raise ValueError(f"score map must be rank 2, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise NumericalError("non-finite score values")
        if self.resolution not in ("patch", "pixel"):
            raise ValueError(f"bad resolution {self.resolution}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _batched_directional(eps_hat: np.ndarray, eps: np.ndarray):
    nh = np.linalg.norm(eps_hat.astype(np.float64), axis=-1)
    ne = np.linalg.norm(eps.astype(np.float64), axis=-1)
    degenerate = (nh < DEGENERATE_NORM) | (ne < DEGENERATE_NORM)
    denom = np.where(degenerate, 1.0, nh * ne)
    dots = np.einsum("...c,...c->...", eps_hat.astype(np.float64), eps.astype(np.float64))
    scores = np.where(degenerate, 0.0, -dots / denom)
    return scores, degenerate


def directional_score(eps_hat: np.ndarray, eps: np.ndarray) -> float:
    """Negated cosine similarity in [-1, 1]; -1 means the noise was predicted
    perfectly (least anomalous). Returns 0 when either vector has a
    vanishing norm."""
    eps_hat = np.asarray(eps_hat)
    eps = np.asarray(eps)
    if eps_hat.shape != eps.shape or eps_hat.ndim != 1:
        raise ValueError(f"expected equal-length vectors, got {eps_hat.shape}, {eps.shape}")
    s, _ = _batched_directional(eps_hat, eps)
    return float(s)


def mse_score(eps_hat: np.ndarray, eps: np.ndarray) -> float:
    """Mean over channels of the squared prediction error."""
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps_hat.shape != eps.shape:
        raise ValueError(f"length mismatch {eps_hat.shape} vs {eps.shape}")
    return float(np.mean((eps_hat - eps) ** 2))


def reverse_reconstruct(
    denoise_fn,
    x_t: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Run t ancestral reverse steps from x_t back to an estimate of x_0.

    Each step takes the Gaussian posterior mean given the predicted noise;
    steps above 1 add posterior-variance noise, the final step is
    deterministic.
    """
    sched.check_timestep(t)
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float32))
    for s in range(t, 0, -1):
        eps_hat = np.atleast_2d(denoise_fn(x, s)).astype(np.float32)
        a_s = sched.alpha[s - 1]
        ab_s = sched.alpha_bar[s - 1]
        beta_s = sched.beta[s - 1]
        mean = (x - np.float32(beta_s / np.sqrt(1.0 - ab_s)) * eps_hat) / np.float32(np.sqrt(a_s))
        if s > 1:
            ab_prev = sched.alpha_bar[s - 2]
            post_var = (1.0 - ab_prev) / (1.0 - ab_s) * beta_s
            z = rng.standard_normal(x.shape).astype(np.float32)
            x = mean + np.float32(np.sqrt(post_var)) * z
        else:
            x = mean
        if not np.isfinite(x).all():
            raise NumericalError(f"non-finite state in reverse step {s}")
    return x.reshape(np.asarray(x_t).shape)


def recon_score(
    denoise_fn,
    x0: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> float | np.ndarray:
    """Perturb x0 to timestep t, reconstruct by reverse diffusion, and return
    the per-vector mean squared reconstruction error."""
    if t < 1:
        raise ValueError(f"timestep must be >= 1, got {t}")
    sched.check_timestep(t)
    x0 = np.asarray(x0, dtype=np.float32)
    single = x0.ndim == 1
    x = np.atleast_2d(x0)
    eps = rng.standard_normal(x.shape).astype(np.float32)
    x_t = forward_diffuse(x, t, eps, sched)
    x0_hat = reverse_reconstruct(denoise_fn, x_t, t, sched, rng)
    err = np.mean((x0_hat - x) ** 2, axis=1, dtype=np.float64)
    return float(err[0]) if single else err


def _resolve_denoiser(params_or_fn):
    if callable(params_or_fn):
        return params_or_fn
    from . import denoiser

    if isinstance(params_or_fn, denoiser.DenoiserParams):
        return denoiser.make_denoise_fn(params_or_fn)
    raise TypeError(f"expected DenoiserParams or callable, got {type(params_or_fn)}")


def per_timestep_scores(
    fmap: FeatureMap,
    params_or_fn,
    sched: NoiseSchedule,
    cfg: ScoreConfig,
    stats: DatasetStats,
) -> tuple[np.ndarray, int]:
    """Raw per-timestep score maps, stacked [len(timesteps), H, W], plus the
    count of degenerate (zero-norm) cosine evaluations."""
    if fmap.channels != stats.channels:
        raise DataError(
            f"feature channels {fmap.channels} != stats channels {stats.channels}"
        )
    denoise = _resolve_denoiser(params_or_fn)
    for t in cfg.timesteps:
        sched.check_timestep(t)
    h, w, c = fmap.values.shape
    x0 = normalize(fmap.vectors(), stats).astype(np.float32)
    n = x0.shape[0]
    rng = make_rng(cfg.noise_seed)
    out = np.empty((len(cfg.timesteps), n), dtype=np.float64)
    degenerate = 0
    for k, t in enumerate(cfg.timesteps):
        acc = np.zeros(n, dtype=np.float64)
        for _ in range(cfg.samples_per_timestep):
            eps = rng.standard_normal((n, c)).astype(np.float32)
            if cfg.score_kind == "mse_recon":
                acc += recon_score_from_noise(denoise, x0, t, eps, sched, rng)
            else:
                x_t = forward_diffuse(x0, t, eps, sched)
                eps_hat = np.atleast_2d(denoise(x_t, t))
                if cfg.score_kind == "directional":
                    s, dg = _batched_directional(eps_hat, eps)
                    degenerate += int(dg.sum())
                    acc += s
                else:  # mse_score
                    acc += np.mean(
                        (eps_hat.astype(np.float64) - eps.astype(np.float64)) ** 2,
                        axis=1,
                    )
        out[k] = acc / cfg.samples_per_timestep
    return out.reshape(len(cfg.timesteps), h, w), degenerate


def recon_score_from_noise(
    denoise_fn, x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """recon_score variant reusing an externally drawn perturbation."""
    x_t = forward_diffuse(x0, t, eps, sched)
    x0_hat = reverse_reconstruct(denoise_fn, x_t, t, sched, rng)
    return np.mean((x0_hat - x0) ** 2, axis=1, dtype=np.float64)


def score_feature_map(
    fmap: FeatureMap,
    params_or_fn,
    sched: NoiseSchedule,
    cfg: ScoreConfig,
    stats: DatasetStats,
) -> ScoreMap:
    """Patch-resolution score map for one feature map.

    Directional scores are aggregated over cfg.timesteps with weights
    sigma_t; the baseline kinds are defined at a single timestep and are
    returned unweighted.
    """
    if cfg.score_kind != "directional" and len(cfg.timesteps) != 1:
        raise DataError(
            f"score kind {cfg.score_kind} is a single-timestep score; "
            f"got {len(cfg.timesteps)} timesteps"
        )
    per_t, degenerate = per_timestep_scores(fmap, params_or_fn, sched, cfg, stats)
    if cfg.score_kind == "directional":
        weights = sched.sigma[np.asarray(cfg.timesteps) - 1]
        values = np.tensordot(weights, per_t, axes=(0, 0))
    else:
        values = per_t[0]
    return ScoreMap(values.astype(np.float32), "patch", degenerate)


def upsample_scores(smap: ScoreMap, target_h: int, target_w: int) -> ScoreMap:
    """Bilinear upsampling to pixel resolution (half-pixel centers, no corner
    alignment). Output values stay within [min, max] of the input."""
    h, w = smap.values.shape
    if target_h < h or target_w < w:
        raise DataError(f"target {target_h}x{target_w} smaller than source {h}x{w}")
    src = smap.values.astype(np.float64)

    def axis_coords(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        pos = np.clip(pos, 0.0, n_src - 1.0)
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_src - 1)
        return i0, i1, pos - i0

    y0, y1, wy = axis_coords(h, target_h)
    x0, x1, wx = axis_coords(w, target_w)
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy[:, None]) + bot * wy[:, None]
    return ScoreMap(out.astype(np.float32), "pixel", smap.degenerate_count)


def logsumexp_uncertainty(logits: np.ndarray) -> ScoreMap:
    """Per-pixel negative LogSumExp of class logits; higher = more anomalous.

    Computed with max-subtraction so large logits cannot overflow.
    """
    logits = np.asarray(logits)
    if logits.ndim != 3 or logits.shape[2] < 2:
        raise DataError(f"logits must be [H, W, K>=2], got shape {logits.shape}")
    if not np.isfinite(logits).all():
        raise NumericalError("non-finite logits")
    x = logits.astype(np.float64)
    m = x.max(axis=2)
    lse = m + np.log(np.exp(x - m[:, :, None]).sum(axis=2))
    return ScoreMap((-lse).astype(np.float32), "patch")


def compound(diff: ScoreMap, unc: ScoreMap, stats: DatasetStats) -> ScoreMap:
    """Equal-weight average of the two score maps after standardization by
    the training-set moments."""
    if diff.values.shape != unc.values.shape:
        raise DataError(
            f"score map shapes differ: {diff.values.shape} vs {unc.values.shape}"
        )
    if diff.resolution != unc.resolution:
        raise DataError(f"resolutions differ: {diff.resolution} vs {unc.resolution}")
    d = (diff.values.astype(np.float64) - stats.score_mean_diff) / stats.score_std_diff
    u = (unc.values.astype(np.float64) - stats.score_mean_unc) / stats.score_std_unc
    return ScoreMap(
        (0.5 * (d + u)).astype(np.float32),
        diff.resolution,
        diff.degenerate_count,
    )


def heatmap_u8(smap: ScoreMap) -> np.ndarray:
    """Affine min-max mapping of a score map onto uint8 [0, 255]."""
    v = smap.values.astype(np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-30:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.clip(np.rint((v - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
