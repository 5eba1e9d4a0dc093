"""Command-line pipeline: synth, stats, train, score, eval, ablate.

Every command validates its flags, wires the library modules together,
writes exactly one run manifest beside its outputs, and exits with
0 on success, 2 on usage errors, 3 on data errors, 4 on numerical
failures. The environment variable DOOD_SEED overrides the default of
every --seed / --noise-seed flag; an explicit flag still wins.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt_io
from . import denoiser, metrics, plots, scorer, synth, trainer
from .errors import DataError, NumericalError
from .schedule import build_linear_schedule
from .tensor_store import (
    TensorFormatError,
    load_feature_map,
    load_mask,
    read_tensor,
    write_tensor,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _resolve_seed(flag_value: int | None, fallback: int) -> int:
    """Explicit flag wins; DOOD_SEED overrides only the built-in default."""
    if flag_value is not None:
        return flag_value
    raw = os.environ.get("DOOD_SEED")
    if raw is None:
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"DOOD_SEED={raw!r} is not an integer")


def parse_timesteps(spec: str) -> tuple[int, ...]:
    """Parse '1..25', '3', or '1,2,10..12' into an ordered timestep tuple."""
    out: list[int] = []
    for part in spec.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..", 1)
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise ValueError(f"empty timestep range {part!r}")
            out.extend(range(lo_i, hi_i + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ValueError(f"no timesteps in {spec!r}")
    return tuple(out)


def _list_dtf(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    return {p.stem: p for p in sorted(directory.glob("*.dtf"))}


def _write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                        started: float, extra: dict[str, str] | None = None) -> None:
    entries = {
        "command": command,
        "version": __version__,
        "duration_s": f"{time.time() - started:.3f}",
    }
    for key, value in sorted(vars(args).items()):
        if key in ("func", "command"):
            continue
        entries[f"flag_{key}"] = repr(value)
    if extra:
        entries.update(extra)
    ckpt_io.write_manifest(out_dir / "run_manifest.txt", entries)


# --- synth ----------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    started = time.time()
    seed = _resolve_seed(args.seed, synth.STANDARD_SEED)
    args.seed = seed
    out = Path(args.out)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)

    spec, ood_mean = synth.standard_spec(dim=args.dim, cov=args.cov)
    train_maps = synth.sample_inlier_maps(spec, args.train_maps, args.height, args.width, seed)
    test_maps, masks = synth.make_synthetic_benchmark(
        spec, ood_mean, args.test_maps, args.height, args.width, args.ood_fraction, seed + 1
    )
    for i, fmap in enumerate(train_maps):
        write_tensor(out / "train" / f"{i:04d}.dtf", fmap.values)
    for i, (fmap, mask) in enumerate(zip(test_maps, masks)):
        write_tensor(out / "test" / f"{i:04d}.dtf", fmap.values)
        write_tensor(out / "masks" / f"{i:04d}.dtf", mask.labels)

    ckpt_io.write_manifest(out / "benchmark_manifest.txt", {
        "format": "dood-synth-benchmark",
        "dim": str(spec.dim),
        "components": str(spec.n_components),
        "component_cov": repr(args.cov),
        "mean_spread": repr(synth.STANDARD_SPREAD),
        "ood_distance": repr(synth.STANDARD_OOD_DISTANCE),
        "ood_fraction": repr(args.ood_fraction),
        "seed": str(seed),
        "train_maps": str(args.train_maps),
        "test_maps": str(args.test_maps),
        "height": str(args.height),
        "width": str(args.width),
        "means_hex_rowmajor": ckpt_io.hex_floats(spec.means.ravel()),
        "ood_mean_hex": ckpt_io.hex_floats(ood_mean),
    })
    _write_run_manifest(out, "synth", args, started)
    print(f"wrote {args.train_maps} training and {args.test_maps} benchmark maps to {out}")
    return EXIT_OK


# --- stats ----------------------------------------------------------------

def cmd_stats(args: argparse.Namespace) -> int:
    started = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _list_dtf(Path(args.features))
    if not files:
        raise DataError(f"no .dtf feature maps in {args.features}")
    stats = trainer.compute_stats(load_feature_map(p) for p in files.values())
    ckpt_io.write_manifest(out / "stats.txt", {
        "format": "dood-stats",
        "channels": str(stats.channels),
        "per_channel_min": ckpt_io.hex_floats(stats.per_channel_min),
        "per_channel_max": ckpt_io.hex_floats(stats.per_channel_max),
    })
    _write_run_manifest(out, "stats", args, started)
    print(f"stats over {len(files)} maps, {stats.channels} channels -> {out / 'stats.txt'}")
    return EXIT_OK


# --- train ----------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    seed = _resolve_seed(args.seed, 0)
    args.seed = seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    files = _list_dtf(Path(args.features))
    if not files:
        raise DataError(f"no .dtf feature maps in {args.features}")
    maps = [load_feature_map(p) for p in files.values()]
    c = maps[0].channels
    for stem, fmap in zip(files, maps):
        if fmap.channels != c:
            raise DataError(f"{stem}: channel count {fmap.channels} != {c}")

    sched = build_linear_schedule(args.schedule_t, args.beta_start, args.beta_end)
    net_cfg = denoiser.DenoiserConfig(
        input_dim=c,
        hidden_dim=args.hidden_dim,
        n_input_blocks=args.blocks,
        n_output_blocks=args.blocks,
        groupnorm_groups=args.groupnorm_groups,
    )
    train_cfg = trainer.TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        iterations=args.iterations,
        seed=seed,
    )
    progress = None
    if not args.quiet:
        progress = lambda it, loss: print(f"  iter {it}: loss {loss:.6f}", flush=True)
    params, stats, trace = trainer.train(
        maps, train_cfg, sched, net_cfg, progress=progress
    )

    if args.standardize_scores:
        score_cfg = scorer.ScoreConfig(
            timesteps=parse_timesteps(args.timesteps), noise_seed=seed
        )
        logits_maps = None
        if args.logits:
            logit_files = _list_dtf(Path(args.logits))
            missing = set(files) - set(logit_files)
            if missing:
                raise DataError(f"logits missing for stems: {sorted(missing)[:5]}")
            logits_maps = [read_tensor(logit_files[stem]) for stem in files]
        stats = trainer.compute_score_standardization(
            maps, params, sched, score_cfg, stats, logits_maps
        )

    ckpt_io.save_checkpoint(params, stats, sched, out, train_cfg)
    write_tensor(out / "loss_trace.dtf", trace.astype(np.float32))
    _write_run_manifest(out, "train", args, started)
    print(f"checkpoint written to {out} (final loss {trace[-1]:.6f})")
    return EXIT_OK


# --- score ----------------------------------------------------------------

def _score_one(stem: str, fmap_path: Path, params, sched, cfg, stats,
               args, out: Path, logit_files) -> None:
    fmap = load_feature_map(fmap_path)
    if fmap.channels != stats.channels:
        raise DataError(
            f"{stem}: feature channels {fmap.channels}, checkpoint expects {stats.channels}"
        )
    smap = scorer.score_feature_map(fmap, params, sched, cfg, stats)
    if args.compound:
        logits = read_tensor(logit_files[stem])
        unc = scorer.logsumexp_uncertainty(logits)
        ds, us = smap.values.shape, unc.values.shape
        # compound at the finer of the two resolutions
        if us[0] >= ds[0] and us[1] >= ds[1] and us != ds:
            smap = scorer.ScoreMap(
                scorer.upsample_scores(smap, *us).values, "patch", smap.degenerate_count
            )
        elif ds[0] >= us[0] and ds[1] >= us[1] and us != ds:
            unc = scorer.ScoreMap(scorer.upsample_scores(unc, *ds).values, "patch")
        smap = scorer.compound(smap, unc, stats)
    write_tensor(out / f"{stem}.dtf", smap.values)
    if args.upsample:
        hh, ww = (int(v) for v in args.upsample.lower().split("x"))
        pixel = scorer.upsample_scores(smap, hh, ww)
        write_tensor(out / "pixel" / f"{stem}.dtf", pixel.values)
    if args.heatmap:
        write_tensor(out / "heat" / f"{stem}.dtf", scorer.heatmap_u8(smap))


def cmd_score(args: argparse.Namespace) -> int:
    started = time.time()
    noise_seed = _resolve_seed(args.noise_seed, 0)
    args.noise_seed = noise_seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.upsample:
        (out / "pixel").mkdir(exist_ok=True)
    if args.heatmap:
        (out / "heat").mkdir(exist_ok=True)

    params, stats, sched = ckpt_io.load_checkpoint(Path(args.checkpoint))
    feats = Path(args.features)
    files = {feats.stem: feats} if feats.is_file() else _list_dtf(feats)
    if not files:
        raise DataError(f"no .dtf feature maps in {args.features}")

    kind = args.score_kind.replace("-", "_")
    cfg = scorer.ScoreConfig(
        timesteps=parse_timesteps(args.timesteps),
        score_kind=kind,
        noise_seed=noise_seed,
        samples_per_timestep=args.samples_per_timestep,
    )
    logit_files = None
    if args.compound:
        if not args.logits:
            raise DataError("--compound requires --logits")
        logit_files = _list_dtf(Path(args.logits))
        missing = set(files) - set(logit_files)
        if missing:
            raise DataError(f"logits missing for stems: {sorted(missing)[:5]}")

    def work(item):
        stem, path = item
        _score_one(stem, path, params, sched, cfg, stats, args, out, logit_files)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            list(pool.map(work, sorted(files.items())))
    else:
        for item in sorted(files.items()):
            work(item)
    _write_run_manifest(out, "score", args, started)
    print(f"scored {len(files)} maps -> {out}")
    return EXIT_OK


# --- eval -----------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    started = time.time()
    seed = _resolve_seed(args.seed, 0)
    args.seed = seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    score_files = _list_dtf(Path(args.scores))
    mask_files = _list_dtf(Path(args.masks))
    stems = sorted(set(score_files) & set(mask_files))
    if not stems:
        raise DataError(
            f"no score/mask pairs: {len(score_files)} score files, "
            f"{len(mask_files)} masks, no shared stems"
        )
    pairs = []
    for stem in stems:
        smap = scorer.ScoreMap(read_tensor(score_files[stem]).astype(np.float32))
        mask = load_mask(mask_files[stem])
        pairs.append((smap, mask))

    pooled = metrics.evaluate_pooled(pairs)
    lines = ["section\tname\tap\tfpr95\tn_pos\tn_neg\tn_ignored"]
    lines.append(
        f"pooled\tall\t{pooled.ap:.6f}\t{pooled.fpr95:.6f}"
        f"\t{pooled.n_pos}\t{pooled.n_neg}\t{pooled.n_ignored}"
    )
    if args.per_image:
        for stem, pair in zip(stems, pairs):
            r = metrics.evaluate(*pair)
            lines.append(
                f"image\t{stem}\t{r.ap:.6f}\t{r.fpr95:.6f}"
                f"\t{r.n_pos}\t{r.n_neg}\t{r.n_ignored}"
            )
    if args.bootstrap_folds:
        b = metrics.bootstrap(pairs, args.bootstrap_folds, args.bootstrap_fraction, seed)
        lines.append(f"bootstrap\tmean\t{b.ap_mean:.6f}\t{b.fpr95_mean:.6f}\t\t\t")
        lines.append(f"bootstrap\tstd\t{b.ap_std:.6f}\t{b.fpr95_std:.6f}\t\t\t")
    report = out / "report.tsv"
    report.write_text("\n".join(lines) + "\n", encoding="utf-8")

    all_scores = np.concatenate([p[0].values[p[1].labels != 255].ravel() for p in pairs])
    all_labels = np.concatenate([p[1].labels[p[1].labels != 255].ravel() for p in pairs])
    recall, precision = metrics.pr_curve(all_scores, all_labels)
    plots.plot_pr_curve(recall, precision, pooled.ap, out / "pr_curve.png")

    _write_run_manifest(out, "eval", args, started)
    print(f"pooled AP={pooled.ap:.4f} FPR95={pooled.fpr95:.4f} over {len(stems)} images")
    print(f"report -> {report}")
    return EXIT_OK


# --- ablate ---------------------------------------------------------------

def cmd_ablate(args: argparse.Namespace) -> int:
    started = time.time()
    noise_seed = _resolve_seed(args.noise_seed, 0)
    args.noise_seed = noise_seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    params, stats, sched = ckpt_io.load_checkpoint(Path(args.checkpoint))
    feat_files = _list_dtf(Path(args.features))
    mask_files = _list_dtf(Path(args.masks))
    stems = sorted(set(feat_files) & set(mask_files))
    if not stems:
        raise DataError("no feature/mask pairs with shared stems")
    kinds = tuple(k.strip().replace("-", "_") for k in args.kinds.split(","))
    for kind in kinds:
        if kind not in scorer.SCORE_KINDS:
            raise DataError(f"unknown score kind {kind!r}")
    timesteps = parse_timesteps(args.timesteps)
    masks = {stem: load_mask(mask_files[stem]) for stem in stems}

    rows: list[tuple[str, str, float, float]] = []
    curve = np.zeros((len(kinds), len(timesteps)), dtype=np.float32)
    ap_by_kind: dict[str, np.ndarray] = {}
    aggregated: dict[str, float] = {}

    for ki, kind in enumerate(kinds):
        cfg = scorer.ScoreConfig(
            timesteps=timesteps, score_kind=kind, noise_seed=noise_seed,
            samples_per_timestep=args.samples_per_timestep,
        )

        def work(stem):
            fmap = load_feature_map(feat_files[stem])
            per_t, _ = scorer.per_timestep_scores(fmap, params, sched, cfg, stats)
            return stem, per_t

        if args.threads > 1:
            with ThreadPoolExecutor(max_workers=args.threads) as pool:
                results = dict(pool.map(work, stems))
        else:
            results = dict(work(stem) for stem in stems)

        for ti, t in enumerate(timesteps):
            pairs = [
                (scorer.ScoreMap(results[stem][ti].astype(np.float32)), masks[stem])
                for stem in stems
            ]
            r = metrics.evaluate_pooled(pairs)
            rows.append((kind, str(t), r.ap, r.fpr95))
            curve[ki, ti] = r.ap
        ap_by_kind[kind] = curve[ki].copy()

        if kind == "directional" and len(timesteps) > 1:
            weights = sched.sigma[np.asarray(timesteps) - 1]
            pairs = [
                (
                    scorer.ScoreMap(
                        np.tensordot(weights, results[stem], axes=(0, 0)).astype(np.float32)
                    ),
                    masks[stem],
                )
                for stem in stems
            ]
            r = metrics.evaluate_pooled(pairs)
            rows.append((kind, "aggregated", r.ap, r.fpr95))
            aggregated[kind] = r.ap

    lines = ["kind\ttimestep\tap\tfpr95"]
    lines += [f"{k}\t{t}\t{ap:.6f}\t{fpr:.6f}" for k, t, ap, fpr in rows]
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_tensor(out / "ap_curve.dtf", curve)
    plots.plot_timestep_sweep(list(timesteps), ap_by_kind, aggregated,
                              out / "ablation_curve.png")
    _write_run_manifest(out, "ablate", args, started)
    print(f"ablation over {len(kinds)} kinds x {len(timesteps)} timesteps -> {out}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dood",
        description="Dense out-of-distribution detection via diffusion score matching.",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate the synthetic benchmark")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--dim", type=int, default=synth.STANDARD_DIM)
    sp.add_argument("--cov", type=float, default=synth.STANDARD_COV)
    sp.add_argument("--train-maps", type=int, default=100)
    sp.add_argument("--test-maps", type=int, default=synth.STANDARD_MAPS)
    sp.add_argument("--height", type=int, default=synth.STANDARD_HW)
    sp.add_argument("--width", type=int, default=synth.STANDARD_HW)
    sp.add_argument("--ood-fraction", type=float, default=synth.STANDARD_OOD_FRACTION)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("stats", help="per-channel normalization statistics")
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("train", help="train the denoiser on feature maps")
    sp.add_argument("--features", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int, default=70_000)
    sp.add_argument("--batch-size", type=int, default=4096)
    sp.add_argument("--learning-rate", type=float, default=5e-5)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--schedule-t", type=int, default=1000)
    sp.add_argument("--beta-start", type=float, default=1e-4)
    sp.add_argument("--beta-end", type=float, default=0.02)
    sp.add_argument("--hidden-dim", type=int, default=None)
    sp.add_argument("--blocks", type=int, default=6)
    sp.add_argument("--groupnorm-groups", type=int, default=None)
    sp.add_argument("--standardize-scores", action="store_true")
    sp.add_argument("--logits", default=None,
                    help="training logits dir for uncertainty standardization")
    sp.add_argument("--timesteps", default="1..25",
                    help="timesteps used when standardizing scores")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("score", help="score feature maps with a trained checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--features", required=True, help="a .dtf file or a directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--timesteps", default="1..25")
    sp.add_argument("--score-kind", default="directional",
                    choices=["directional", "mse-score", "mse-recon"])
    sp.add_argument("--noise-seed", type=int, default=None)
    sp.add_argument("--samples-per-timestep", type=int, default=1)
    sp.add_argument("--logits", default=None)
    sp.add_argument("--compound", action="store_true")
    sp.add_argument("--upsample", default=None, metavar="HxW")
    sp.add_argument("--heatmap", action="store_true")
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("eval", help="AP / FPR@95TPR over score maps and masks")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--masks", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-image", action="store_true")
    sp.add_argument("--bootstrap-folds", type=int, default=0)
    sp.add_argument("--bootstrap-fraction", type=float, default=0.9)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="timestep sweep and score-kind comparison")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--masks", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--kinds", default="directional,mse-score,mse-recon")
    sp.add_argument("--timesteps", default="1..25")
    sp.add_argument("--noise-seed", type=int, default=None)
    sp.add_argument("--samples-per-timestep", type=int, default=1)
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except (DataError, TensorFormatError, OSError) as e:
        print(f"dood {args.command}: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"dood {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"dood {args.command}: invalid arguments: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
