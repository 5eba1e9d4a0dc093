"""Checkpoint directory I/O.

A checkpoint is a directory of one DTF tensor per parameter, named
p{index}_{name}.dtf in the fixed parameter order, plus a plain UTF-8
"key=value" manifest holding the network configuration, the noise
schedule, the normalization statistics, and an echo of the training
configuration. Floats in the manifest are hex-encoded so reloading is
bit-exact; the schedule endpoints are additionally kept as decimal text.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, DenoiserParams, param_names
from .errors import DataError
from .schedule import NoiseSchedule, build_linear_schedule
from .tensor_store import read_tensor, write_tensor
from .trainer import DatasetStats, TrainConfig

MANIFEST_NAME = "manifest.txt"


def hex_floats(values: np.ndarray) -> str:
    return ",".join(float(v).hex() for v in np.asarray(values, dtype=np.float64))


def unhex_floats(text: str) -> np.ndarray:
    return np.array([float.fromhex(tok) for tok in text.split(",")], dtype=np.float64)


def write_manifest(path: Path, entries: dict[str, str]) -> None:
    lines = [f"{k}={v}" for k, v in entries.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}: malformed manifest line {line!r}")
        key, value = line.split("=", 1)
        entries[key] = value
    return entries


def save_checkpoint(
    params: DenoiserParams,
    stats: DatasetStats,
    sched: NoiseSchedule,
    out_dir: str | Path,
    train_cfg: TrainConfig | None = None,
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = params.cfg
    names = param_names(cfg)
    for i, name in enumerate(names):
        write_tensor(out / f"p{i}_{name}.dtf", params.tensors[name].astype(np.float32))
    entries = {
        "format": "dood-checkpoint",
        "version": "1",
        "input_dim": str(cfg.input_dim),
        "hidden_dim": str(cfg.hidden_dim),
        "n_input_blocks": str(cfg.n_input_blocks),
        "n_output_blocks": str(cfg.n_output_blocks),
        "groupnorm_groups": str(cfg.groupnorm_groups),
        "schedule_T": str(sched.T),
        "schedule_beta_start": repr(sched.beta_start),
        "schedule_beta_end": repr(sched.beta_end),
        "stats_per_channel_min": hex_floats(stats.per_channel_min),
        "stats_per_channel_max": hex_floats(stats.per_channel_max),
        "stats_score_mean_diff": float(stats.score_mean_diff).hex(),
        "stats_score_std_diff": float(stats.score_std_diff).hex(),
        "stats_score_mean_unc": float(stats.score_mean_unc).hex(),
        "stats_score_std_unc": float(stats.score_std_unc).hex(),
    }
    if train_cfg is not None:
        entries.update(
            train_learning_rate=repr(train_cfg.learning_rate),
            train_batch_size=str(train_cfg.batch_size),
            train_iterations=str(train_cfg.iterations),
            train_seed=str(train_cfg.seed),
        )
    write_manifest(out / MANIFEST_NAME, entries)


def load_checkpoint(
    ckpt_dir: str | Path,
) -> tuple[DenoiserParams, DatasetStats, NoiseSchedule]:
    ckpt = Path(ckpt_dir)
    manifest_path = ckpt / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataError(f"{ckpt}: missing {MANIFEST_NAME}")
    m = read_manifest(manifest_path)
    if m.get("format") != "dood-checkpoint":
        raise DataError(f"{ckpt}: not a checkpoint manifest")
    try:
        cfg = DenoiserConfig(
            input_dim=int(m["input_dim"]),
            hidden_dim=int(m["hidden_dim"]),
            n_input_blocks=int(m["n_input_blocks"]),
            n_output_blocks=int(m["n_output_blocks"]),
            groupnorm_groups=int(m["groupnorm_groups"]),
        )
        sched = build_linear_schedule(
            int(m["schedule_T"]),
            float(m["schedule_beta_start"]),
            float(m["schedule_beta_end"]),
        )
        stats = DatasetStats(
            per_channel_min=unhex_floats(m["stats_per_channel_min"]),
            per_channel_max=unhex_floats(m["stats_per_channel_max"]),
            score_mean_diff=float.fromhex(m["stats_score_mean_diff"]),
            score_std_diff=float.fromhex(m["stats_score_std_diff"]),
            score_mean_unc=float.fromhex(m["stats_score_mean_unc"]),
            score_std_unc=float.fromhex(m["stats_score_std_unc"]),
        )
    except KeyError as e:
        raise DataError(f"{ckpt}: manifest missing key {e}") from e
    if stats.channels != cfg.input_dim:
        raise DataError(
            f"{ckpt}: stats dimension {stats.channels} != input_dim {cfg.input_dim}"
        )
    expected = {}
    for i, name in enumerate(param_names(cfg)):
        path = ckpt / f"p{i}_{name}.dtf"
        if not path.is_file():
            raise DataError(f"{ckpt}: missing parameter tensor {path.name}")
        expected[name] = read_tensor(path)
    params = DenoiserParams(cfg, expected)
    _check_shapes(params)
    return params, stats, sched


def _check_shapes(params: DenoiserParams) -> None:
    from .denoiser import init_params

    ref = init_params(params.cfg, np.random.default_rng(0))
    for name, arr in ref.tensors.items():
        got = params.tensors[name]
        if got.shape != arr.shape:
            raise DataError(
                f"parameter {name}: shape {got.shape} inconsistent with config "
                f"(expected {arr.shape})"
            )
