"""Feature/logit/mask export from a segmentation backbone.

Runs a SegFormer-style semantic segmentation model over images, captures
the output of one self-attention key projection in the encoder, and
writes per-image DTF tensors: key features as [H, W, C] float32, class
logits as [H', W', K] float32, and (when label maps are supplied)
uint8 masks with 0 = inlier, 1 = out-of-distribution, 255 = ignore.

Weights come from a local path or a hub id; without obtainable weights
the backbone can be seeded deterministically (--random-init), which keeps
the full pipeline runnable offline at the cost of meaningless semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .dtf import write_dtf

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ExportSpec:
    images: list[Path]
    out_dir: Path
    weights: str | None = None       # local path or hub id
    random_init_seed: int | None = None  # used when weights are unavailable
    hook_stage: int = -1             # encoder stage, negative = from the end
    hook_block: int = -1             # block within the stage
    image_size: int = 512
    num_labels: int = 150
    label_maps: dict[str, Path] = field(default_factory=dict)
    ood_class_ids: tuple[int, ...] = (1,)
    ignore_class_ids: tuple[int, ...] = (255,)


def load_backbone(spec: ExportSpec):
    from transformers import SegformerConfig, SegformerForSemanticSegmentation

    if spec.weights is not None:
        model = SegformerForSemanticSegmentation.from_pretrained(spec.weights)
    elif spec.random_init_seed is not None:
        torch.manual_seed(spec.random_init_seed)
        config = SegformerConfig(num_labels=spec.num_labels)
        model = SegformerForSemanticSegmentation(config)
    else:
        raise FileNotFoundError(
            "no weights given: pass weights=<path-or-id> or set random_init_seed"
        )
    model.eval()
    return model


def resolve_key_module(model, stage: int, block: int) -> torch.nn.Module:
    """Find the key-projection linear of the requested encoder block.

    Handles both module naming schemes used by transformers releases
    (`...attention.self.key` and `...attention.k_proj`).
    """
    named = dict(model.named_modules())
    keys = [
        n for n in named
        if n.endswith(("attention.self.key", "attention.k_proj"))
    ]
    if not keys:
        raise RuntimeError("no self-attention key projections found in the backbone")
    # group by encoder stage, preserving traversal order
    stages: dict[str, list[str]] = {}
    for name in keys:
        stage_key = name.split(".blocks.")[0] if ".blocks." in name else \
            name.split(".attention")[0].rsplit(".", 1)[0]
        stages.setdefault(stage_key, []).append(name)
    stage_names = list(stages)
    chosen_stage = stage_names[stage if stage >= 0 else len(stage_names) + stage]
    blocks = stages[chosen_stage]
    chosen = blocks[block if block >= 0 else len(blocks) + block]
    return named[chosen]


def _load_image(path: Path, size: int) -> torch.Tensor:
    img = Image.open(path).convert("RGB").resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - np.array(IMAGENET_MEAN, dtype=np.float32)) / np.array(
        IMAGENET_STD, dtype=np.float32
    )
    return torch.from_numpy(arr.transpose(2, 0, 1))[None]


def _tokens_to_grid(tokens: torch.Tensor) -> np.ndarray:
    """[1, N, C] attention tokens -> [H, W, C], requiring a square grid."""
    _, n, c = tokens.shape
    side = int(math.isqrt(n))
    if side * side != n:
        raise RuntimeError(f"token count {n} is not a square grid")
    return tokens[0].reshape(side, side, c).cpu().numpy().astype(np.float32)


def convert_label_map(labels: np.ndarray, ood_ids, ignore_ids) -> np.ndarray:
    """Class-id map -> {0, 1, 255} mask (listed ids -> 1, ignore ids -> 255)."""
    mask = np.zeros(labels.shape, dtype=np.uint8)
    mask[np.isin(labels, list(ood_ids))] = 1
    mask[np.isin(labels, list(ignore_ids))] = 255
    return mask


def _read_label_map(path: Path) -> np.ndarray:
    if path.suffix == ".dtf":
        from .dtf import read_dtf

        return read_dtf(path)
    return np.asarray(Image.open(path))


def export_features(spec: ExportSpec, progress=None) -> dict[str, int]:
    """Run the backbone over every image; write features/logits/masks.

    Re-running with an identical spec reproduces byte-identical files:
    inference is single-threaded deterministic CPU evaluation.
    """
    if not spec.images:
        raise FileNotFoundError("no input images")
    for p in spec.images:
        if not Path(p).is_file():
            raise FileNotFoundError(f"unreadable image {p}")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    model = load_backbone(spec)
    key_module = resolve_key_module(model, spec.hook_stage, spec.hook_block)

    out = Path(spec.out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "logits").mkdir(exist_ok=True)
    if spec.label_maps:
        (out / "masks").mkdir(exist_ok=True)

    captured: dict[str, torch.Tensor] = {}
    handle = key_module.register_forward_hook(
        lambda mod, inp, outp: captured.__setitem__("key", outp.detach())
    )
    counts = {"features": 0, "logits": 0, "masks": 0}
    try:
        for path in spec.images:
            path = Path(path)
            stem = path.stem
            pixel_values = _load_image(path, spec.image_size)
            with torch.no_grad():
                result = model(pixel_values=pixel_values)
            grid = _tokens_to_grid(captured["key"])
            write_dtf(out / "features" / f"{stem}.dtf", grid)
            counts["features"] += 1
            logits = result.logits[0].permute(1, 2, 0).cpu().numpy().astype(np.float32)
            write_dtf(out / "logits" / f"{stem}.dtf", logits)
            counts["logits"] += 1
            if stem in spec.label_maps:
                labels = _read_label_map(Path(spec.label_maps[stem]))
                mask = convert_label_map(labels, spec.ood_class_ids, spec.ignore_class_ids)
                write_dtf(out / "masks" / f"{stem}.dtf", mask)
                counts["masks"] += 1
            if progress is not None:
                progress(stem)
    finally:
        handle.remove()
    return counts


def export_masks(label_map_paths, out_dir: Path, ood_ids, ignore_ids=(255,)) -> int:
    """Standalone label-map conversion (no backbone involved)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for path in label_map_paths:
        path = Path(path)
        labels = _read_label_map(path)
        write_dtf(out / f"{path.stem}.dtf", convert_label_map(labels, ood_ids, ignore_ids))
        n += 1
    return n
