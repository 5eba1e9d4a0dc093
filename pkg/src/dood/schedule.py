"""Noise schedule and closed-form forward diffusion.

The schedule holds the per-step noise rates beta_t and the derived
quantities alpha_t = 1 - beta_t, alpha_bar_t = prod(alpha_s) and
sigma_t = sqrt(1 - alpha_bar_t) for t = 1..T. Arrays are kept in double
precision (a cumulative product of 1000 terms loses digits in float32)
and cast down only at the point of use.

Timesteps are 1-indexed throughout: t = 1 is the least-noisy step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False)       # float64 [T]
    alpha: np.ndarray = field(repr=False)      # float64 [T]
    alpha_bar: np.ndarray = field(repr=False)  # float64 [T]
    sigma: np.ndarray = field(repr=False)      # float64 [T]

    def sqrt_alpha_bar(self, t: int | np.ndarray) -> np.ndarray:
        return np.sqrt(self.alpha_bar[np.asarray(t) - 1])

    def sigma_at(self, t: int | np.ndarray) -> np.ndarray:
        return self.sigma[np.asarray(t) - 1]

    def check_timestep(self, t: int | np.ndarray) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep {t} outside 1..{self.T}")


def build_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linearly interpolated beta schedule from beta_start (t=1) to beta_end (t=T)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(T, float(beta_start), float(beta_end), beta, alpha, alpha_bar, sigma)


def forward_diffuse(
    x0: np.ndarray,
    t: int | np.ndarray,
    eps: np.ndarray,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Perturb x0 to timestep t: sqrt(alpha_bar_t) * x0 + sigma_t * eps.

    Accepts a single vector [C] or a batch [N, C]; `t` may be a scalar or a
    per-row array of length N. Result dtype follows x0.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    sched.check_timestep(t)
    dtype = x0.dtype if x0.dtype.kind == "f" else np.float32
    a = np.sqrt(sched.alpha_bar[np.asarray(t) - 1]).astype(dtype)
    s = sched.sigma[np.asarray(t) - 1].astype(dtype)
    if np.ndim(a) == 1 and x0.ndim == 2:
        a = a[:, None]
        s = s[:, None]
    return a * x0.astype(dtype, copy=False) + s * eps.astype(dtype, copy=False)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Seeded generator; extra integers derive independent parallel streams."""
    return np.random.default_rng([int(seed), *map(int, stream)])


def sample_noise(c: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Standard-normal noise, float32: vector [C] or batch [N, C]."""
    if c < 1:
        raise ValueError(f"dimension must be >= 1, got {c}")
    shape = (c,) if n is None else (n, c)
    return rng.standard_normal(shape).astype(np.float32)
