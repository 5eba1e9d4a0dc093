import numpy as np
import pytest

from dood_exporter.dtf import read_dtf
from dood_exporter.export import (
    ExportSpec,
    convert_label_map,
    export_features,
    export_masks,
)


@pytest.fixture(scope="module")
def small_export(image_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("export_small")
    images = sorted(image_corpus["test"].glob("*.png"))[:3]
    labels = {p.stem: image_corpus["labels"] / p.name for p in images}
    spec = ExportSpec(
        images=images,
        out_dir=out,
        random_init_seed=11,
        image_size=128,
        label_maps=labels,
        ood_class_ids=(1,),
    )
    counts = export_features(spec)
    return spec, out, counts


def test_export_shapes_and_counts(small_export):
    spec, out, counts = small_export
    assert counts == {"features": 3, "logits": 3, "masks": 3}
    feat = read_dtf(sorted((out / "features").glob("*.dtf"))[0])
    assert feat.ndim == 3
    assert feat.dtype == np.float32
    assert feat.shape[0] == feat.shape[1] == 128 // 32  # final-stage token grid
    assert feat.shape[2] == 256  # key width of the hooked block
    logits = read_dtf(sorted((out / "logits").glob("*.dtf"))[0])
    assert logits.ndim == 3
    assert logits.shape[2] == 150
    assert np.isfinite(feat).all() and np.isfinite(logits).all()


def test_export_mask_values(small_export):
    _, out, _ = small_export
    for p in (out / "masks").glob("*.dtf"):
        mask = read_dtf(p)
        assert mask.dtype == np.uint8
        assert set(np.unique(mask)) <= {0, 1, 255}
        assert (mask == 1).sum() > 0


def test_export_is_deterministic(small_export, tmp_path):
    spec, out, _ = small_export
    rerun = ExportSpec(
        images=spec.images,
        out_dir=tmp_path / "again",
        random_init_seed=spec.random_init_seed,
        image_size=spec.image_size,
        label_maps=spec.label_maps,
    )
    export_features(rerun)
    for sub in ("features", "logits"):
        for p in sorted((out / sub).glob("*.dtf")):
            assert p.read_bytes() == (tmp_path / "again" / sub / p.name).read_bytes()


def test_missing_weights_is_an_error(image_corpus, tmp_path):
    spec = ExportSpec(
        images=sorted(image_corpus["test"].glob("*.png"))[:1],
        out_dir=tmp_path,
    )
    with pytest.raises(FileNotFoundError, match="weights"):
        export_features(spec)


def test_unreadable_image_is_an_error(tmp_path):
    spec = ExportSpec(
        images=[tmp_path / "nope.png"],
        out_dir=tmp_path,
        random_init_seed=0,
    )
    with pytest.raises(FileNotFoundError):
        export_features(spec)


def test_convert_label_map_edge_cases():
    labels = np.array([[0, 3], [7, 255]], dtype=np.uint8)
    all_zero = convert_label_map(labels, ood_ids=(), ignore_ids=())
    assert (all_zero == 0).all()
    all_one = convert_label_map(labels, ood_ids=(0, 3, 7, 255), ignore_ids=())
    assert (all_one == 1).all()
    mask = convert_label_map(labels, ood_ids=(3, 7), ignore_ids=(255,))
    np.testing.assert_array_equal(mask, [[0, 1], [1, 255]])


def test_export_masks_roundtrip(tmp_path):
    from PIL import Image

    labels = np.zeros((16, 16), dtype=np.uint8)
    labels[2:6, 3:9] = 5
    Image.fromarray(labels).save(tmp_path / "lab.png")
    n = export_masks([tmp_path / "lab.png"], tmp_path / "masks", ood_ids=(5,))
    assert n == 1
    mask = read_dtf(tmp_path / "masks" / "lab.dtf")
    assert (mask == 1).sum() == 4 * 6
    assert set(np.unique(mask)) == {0, 1}
