"""Command-line entry for the feature exporter."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import ExportSpec, export_features, export_masks

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def _collect_images(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dood-export",
        description="Export segmentation-encoder key features, logits, and masks "
                    "as DTF tensors.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("features", help="run the backbone and export features+logits")
    sp.add_argument("--images", required=True, help="image file or directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--weights", default=None,
                    help="local checkpoint path or hub id of a SegFormer "
                         "semantic segmentation model")
    sp.add_argument("--random-init", type=int, default=None, metavar="SEED",
                    help="deterministically initialize the backbone instead of "
                         "loading weights (offline smoke runs)")
    sp.add_argument("--hook-stage", type=int, default=-1)
    sp.add_argument("--hook-block", type=int, default=-1)
    sp.add_argument("--image-size", type=int, default=512)
    sp.add_argument("--labels", default=None,
                    help="directory of label maps matched by stem")
    sp.add_argument("--ood-ids", default="1", help="comma-separated class ids -> 1")
    sp.add_argument("--ignore-ids", default="255")

    sp = sub.add_parser("masks", help="convert label maps to OoD masks")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ood-ids", required=True)
    sp.add_argument("--ignore-ids", default="255")
    return p


def _ids(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip() != "")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "features":
            images = _collect_images(Path(args.images))
            label_maps = {}
            if args.labels:
                label_dir = Path(args.labels)
                label_maps = {
                    p.stem: p for p in sorted(label_dir.iterdir())
                    if p.suffix.lower() in IMAGE_SUFFIXES + (".dtf",)
                }
            spec = ExportSpec(
                images=images,
                out_dir=Path(args.out),
                weights=args.weights,
                random_init_seed=args.random_init,
                hook_stage=args.hook_stage,
                hook_block=args.hook_block,
                image_size=args.image_size,
                label_maps=label_maps,
                ood_class_ids=_ids(args.ood_ids),
                ignore_class_ids=_ids(args.ignore_ids),
            )
            counts = export_features(spec, progress=lambda stem: print(f"  {stem}"))
            print(f"exported {counts['features']} feature maps, "
                  f"{counts['logits']} logit maps, {counts['masks']} masks")
        else:
            label_dir = Path(args.labels)
            paths = sorted(
                p for p in label_dir.iterdir()
                if p.suffix.lower() in IMAGE_SUFFIXES + (".dtf",)
            )
            n = export_masks(paths, Path(args.out), _ids(args.ood_ids), _ids(args.ignore_ids))
            print(f"converted {n} label maps")
        return 0
    except FileNotFoundError as e:
        print(f"dood-export: error: {e}", file=sys.stderr)
        return 3
    except RuntimeError as e:
        print(f"dood-export: error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
