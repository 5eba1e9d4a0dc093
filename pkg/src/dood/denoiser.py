"""MLP noise-prediction network with hand-written reverse-mode gradients.

The network maps a single perturbed feature vector (plus the scalar
timestep) back to the noise that was applied to it. It never looks at
spatial neighborhoods: batching over vectors is purely data-parallel,
which is the architectural point -- the model cannot denoise an
anomalous vector by copying from its neighbors.

Structure: a linear input projection C->H, `n` residual input blocks,
`n` residual output blocks, a linear output projection H->C. Each
residual block runs GroupNorm -> SiLU -> linear, adds the raw scalar
timestep, then GroupNorm -> SiLU -> linear, and adds the block input
back. Output block j additionally receives the output of input block
n-1-j, concatenated onto the activation right before the first linear
(which therefore maps 2H->H).

Parameters live in an ordered {name: float32 array} dict so that the
optimizer, the finite-difference tests, and the checkpoint writer can
treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels

GN_EPS = 1e-5


def default_groupnorm_groups(hidden_dim: int) -> int:
    """Largest sane group count: 32 for wide layers, groups of >= 4 otherwise.

    A plain gcd(32, H) yields single-element groups whenever H divides 32,
    and GroupNorm over one element is identically zero, so small dims cap
    the count at H // 4 instead.
    """
    g = min(math.gcd(32, hidden_dim), hidden_dim // 4)
    return max(1, g)


@dataclass(frozen=True)
class DenoiserConfig:
    input_dim: int
    hidden_dim: int | None = None
    n_input_blocks: int = 6
    n_output_blocks: int = 6
    groupnorm_groups: int | None = None

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.hidden_dim is None:
            object.__setattr__(self, "hidden_dim", self.input_dim)
        if self.n_input_blocks != self.n_output_blocks:
            raise ValueError(
                f"skip pairing requires equal block counts, got "
                f"{self.n_input_blocks} != {self.n_output_blocks}"
            )
        if self.groupnorm_groups is None:
            object.__setattr__(
                self, "groupnorm_groups", default_groupnorm_groups(self.hidden_dim)
            )
        if self.hidden_dim % self.groupnorm_groups != 0:
            raise ValueError(
                f"groupnorm_groups {self.groupnorm_groups} does not divide "
                f"hidden_dim {self.hidden_dim}"
            )


@dataclass
class DenoiserParams:
    cfg: DenoiserConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(
            self.cfg, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def check_finite(self) -> None:
        for k, v in self.tensors.items():
            if not np.isfinite(v).all():
                raise FloatingPointError(f"non-finite values in parameter {k}")


def _block_names(prefix: str) -> list[str]:
    return [
        f"{prefix}_norm1_scale", f"{prefix}_norm1_shift",
        f"{prefix}_lin1_w", f"{prefix}_lin1_b",
        f"{prefix}_norm2_scale", f"{prefix}_norm2_shift",
        f"{prefix}_lin2_w", f"{prefix}_lin2_b",
    ]


def param_names(cfg: DenoiserConfig) -> list[str]:
    """Fixed, checkpoint-stable parameter order."""
    names = ["input_proj_w", "input_proj_b"]
    for i in range(cfg.n_input_blocks):
        names += _block_names(f"in{i}")
    for j in range(cfg.n_output_blocks):
        names += _block_names(f"out{j}")
    names += ["output_proj_w", "output_proj_b"]
    return names


def init_params(cfg: DenoiserConfig, rng: np.random.Generator) -> DenoiserParams:
    """Fan-in uniform init; norm scales 1 / shifts 0; every residual block's
    closing linear and the output projection start at exactly zero, so a
    fresh network is the zero function."""
    c, h = cfg.input_dim, cfg.hidden_dim

    def uniform(fan_in: int, shape) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    t: dict[str, np.ndarray] = {}
    t["input_proj_w"] = uniform(c, (c, h))
    t["input_proj_b"] = uniform(c, (h,))
    for prefix, first_in in [(f"in{i}", h) for i in range(cfg.n_input_blocks)] + [
        (f"out{j}", 2 * h) for j in range(cfg.n_output_blocks)
    ]:
        t[f"{prefix}_norm1_scale"] = np.ones(h, dtype=np.float32)
        t[f"{prefix}_norm1_shift"] = np.zeros(h, dtype=np.float32)
        t[f"{prefix}_lin1_w"] = uniform(first_in, (first_in, h))
        t[f"{prefix}_lin1_b"] = uniform(first_in, (h,))
        t[f"{prefix}_norm2_scale"] = np.ones(h, dtype=np.float32)
        t[f"{prefix}_norm2_shift"] = np.zeros(h, dtype=np.float32)
        t[f"{prefix}_lin2_w"] = np.zeros((h, h), dtype=np.float32)
        t[f"{prefix}_lin2_b"] = np.zeros(h, dtype=np.float32)
    t["output_proj_w"] = np.zeros((h, c), dtype=np.float32)
    t["output_proj_b"] = np.zeros(c, dtype=np.float32)
    assert list(t.keys()) == param_names(cfg)
    return DenoiserParams(cfg, t)


# --- elementwise pieces -------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 0.5 * tanh(x/2) + 0.5: stable for all x, SIMD-vectorized, dtype-preserving
    out = np.tanh(0.5 * x)
    out += 1.0
    out *= 0.5
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def _silu_cached(x: np.ndarray):
    s = _sigmoid(x)
    return x * s, s


def _dsilu_backward(dout: np.ndarray, x: np.ndarray, s: np.ndarray) -> np.ndarray:
    return dout * (s * (1.0 + x * (1.0 - s)))


def dsilu(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def groupnorm(
    x: np.ndarray, scale: np.ndarray, shift: np.ndarray, groups: int, eps: float = GN_EPS
):
    """Normalize each group of channels to zero mean / unit variance, then
    apply the learned per-channel affine. Returns (out, cache)."""
    x = np.ascontiguousarray(x)
    out, y, inv = _kernels.gn_forward(x, scale, shift, groups, eps)
    return out, (y, inv, scale, groups)


def groupnorm_backward(dout: np.ndarray, cache):
    y, inv, scale, groups = cache
    return _kernels.gn_backward(np.ascontiguousarray(dout), y, inv, scale, groups)


# --- residual blocks ----------------------------------------------------

def _block_forward(p: dict, prefix: str, h_in: np.ndarray, skip, t_col: np.ndarray, groups: int):
    n1, gn1 = groupnorm(h_in, p[f"{prefix}_norm1_scale"], p[f"{prefix}_norm1_shift"], groups)
    a1, s1 = _silu_cached(n1)
    lin1_in = a1 if skip is None else np.concatenate([a1, skip], axis=1)
    z = lin1_in @ p[f"{prefix}_lin1_w"] + p[f"{prefix}_lin1_b"] + t_col
    n2, gn2 = groupnorm(z, p[f"{prefix}_norm2_scale"], p[f"{prefix}_norm2_shift"], groups)
    a2, s2 = _silu_cached(n2)
    f = a2 @ p[f"{prefix}_lin2_w"] + p[f"{prefix}_lin2_b"]
    out = h_in + f
    cache = (n1, s1, gn1, lin1_in, n2, s2, gn2, a2, skip is not None)
    return out, cache


def _block_backward(p: dict, prefix: str, dout: np.ndarray, cache, grads: dict):
    n1, s1, gn1, lin1_in, n2, s2, gn2, a2, has_skip = cache
    h = n1.shape[1]
    # out = h_in + f
    d_f = dout
    grads[f"{prefix}_lin2_w"] = a2.T @ d_f
    grads[f"{prefix}_lin2_b"] = d_f.sum(axis=0)
    d_a2 = d_f @ p[f"{prefix}_lin2_w"].T
    d_n2 = _dsilu_backward(d_a2, n2, s2)
    d_z, grads[f"{prefix}_norm2_scale"], grads[f"{prefix}_norm2_shift"] = \
        groupnorm_backward(d_n2, gn2)
    grads[f"{prefix}_lin1_w"] = lin1_in.T @ d_z
    grads[f"{prefix}_lin1_b"] = d_z.sum(axis=0)
    d_lin1_in = d_z @ p[f"{prefix}_lin1_w"].T
    if has_skip:
        d_a1, d_skip = d_lin1_in[:, :h], d_lin1_in[:, h:]
    else:
        d_a1, d_skip = d_lin1_in, None
    d_n1 = _dsilu_backward(d_a1, n1, s1)
    d_h, grads[f"{prefix}_norm1_scale"], grads[f"{prefix}_norm1_shift"] = \
        groupnorm_backward(d_n1, gn1)
    d_h = d_h + dout  # residual branch
    return d_h, d_skip


# --- whole network ------------------------------------------------------

def _prepare(params: DenoiserParams, x_t: np.ndarray, t):
    cfg = params.cfg
    x = np.asarray(x_t)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(
            f"input shape {np.asarray(x_t).shape} incompatible with input_dim {cfg.input_dim}"
        )
    dtype = params.tensors["input_proj_w"].dtype
    x = x.astype(dtype, copy=False)
    t_arr = np.asarray(t)
    if np.any(t_arr < 1):
        raise ValueError(f"timestep must be >= 1, got {t}")
    if t_arr.ndim == 0:
        t_col = np.full((x.shape[0], 1), float(t_arr), dtype=dtype)
    else:
        if t_arr.shape[0] != x.shape[0]:
            raise ValueError(f"per-sample t length {t_arr.shape[0]} != batch {x.shape[0]}")
        t_col = t_arr.astype(dtype).reshape(-1, 1)
    return x, t_col, single


def _forward_impl(params: DenoiserParams, x: np.ndarray, t_col: np.ndarray):
    cfg = params.cfg
    p = params.tensors
    g = cfg.groupnorm_groups
    h = x @ p["input_proj_w"] + p["input_proj_b"]
    h_first = h
    skips, caches = [], []
    for i in range(cfg.n_input_blocks):
        h, c = _block_forward(p, f"in{i}", h, None, t_col, g)
        skips.append(h)
        caches.append(c)
    for j in range(cfg.n_output_blocks):
        skip = skips[cfg.n_input_blocks - 1 - j]
        h, c = _block_forward(p, f"out{j}", h, skip, t_col, g)
        caches.append(c)
    out = h @ p["output_proj_w"] + p["output_proj_b"]
    return out, (x, h_first, h, caches)


def forward(params: DenoiserParams, x_t: np.ndarray, t) -> np.ndarray:
    """Evaluate the noise prediction for x_t at timestep t.

    `x_t` is [C] or [N, C]; `t` a scalar or length-N array. Pure and
    deterministic; safe to call concurrently on shared params.
    """
    x, t_col, single = _prepare(params, x_t, t)
    out, _ = _forward_impl(params, x, t_col)
    return out[0] if single else out


def backward(
    params: DenoiserParams, x_t: np.ndarray, t, upstream_grad: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Exact gradients of <forward(params, x_t, t), upstream_grad>.

    Returns ({name: grad}, input_grad). Parameter gradients are summed over
    the batch; the input gradient is per-sample.
    """
    x, t_col, single = _prepare(params, x_t, t)
    up = np.asarray(upstream_grad)
    if single:
        up = up[None, :]
    up = up.astype(x.dtype, copy=False)
    if up.shape != (x.shape[0], params.cfg.input_dim):
        raise ValueError(f"upstream grad shape {upstream_grad.shape} mismatch")
    _, cache = _forward_impl(params, x, t_col)
    grads, dx = _backward_impl(params, cache, up)
    return grads, (dx[0] if single else dx)


def _backward_impl(params: DenoiserParams, cache, up: np.ndarray):
    cfg = params.cfg
    p = params.tensors
    x, h_first, h_last, caches = cache
    n_in = cfg.n_input_blocks
    grads: dict[str, np.ndarray] = {}
    grads["output_proj_w"] = h_last.T @ up
    grads["output_proj_b"] = up.sum(axis=0)
    dh = up @ p["output_proj_w"].T
    pending = [None] * n_in  # skip grads routed back to input-block outputs
    for j in reversed(range(cfg.n_output_blocks)):
        dh, d_skip = _block_backward(p, f"out{j}", dh, caches[n_in + j], grads)
        k = n_in - 1 - j
        pending[k] = d_skip if pending[k] is None else pending[k] + d_skip
    for i in reversed(range(n_in)):
        if pending[i] is not None:
            dh = dh + pending[i]
        dh, _ = _block_backward(p, f"in{i}", dh, caches[i], grads)
    grads["input_proj_w"] = x.T @ dh
    grads["input_proj_b"] = dh.sum(axis=0)
    dx = dh @ p["input_proj_w"].T
    return grads, dx


def forward_and_backward(
    params: DenoiserParams, x_t: np.ndarray, t, upstream_fn
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """One fused pass for training: runs forward, feeds the output to
    `upstream_fn(out) -> upstream_grad`, and returns (out, param grads)."""
    x, t_col, _ = _prepare(params, x_t, t)
    out, cache = _forward_impl(params, x, t_col)
    up = np.asarray(upstream_fn(out)).astype(x.dtype, copy=False)
    grads, _ = _backward_impl(params, cache, up)
    return out, grads


def make_denoise_fn(params: DenoiserParams):
    """Adapt params to the plain `(x_t, t) -> eps_hat` callable the scorer uses."""
    return lambda x_t, t: forward(params, x_t, t)
