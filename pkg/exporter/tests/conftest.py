import numpy as np
import pytest
from PIL import Image


def _sample_photos():
    from skimage import data

    names = [
        "astronaut", "camera", "chelsea", "coffee", "rocket", "moon",
        "coins", "grass", "gravel", "brick", "hubble_deep_field",
        "immunohistochemistry", "retina", "colorwheel", "cat", "page",
        "text", "logo",
    ]
    photos = []
    for name in names:
        img = getattr(data, name)()
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=2)
        if img.shape[2] == 4:
            img = img[:, :, :3]
        photos.append(img.astype(np.uint8))
    return photos


@pytest.fixture(scope="session")
def image_corpus(tmp_path_factory):
    """Real photographs arranged for a full pipeline run: 20 clean training
    images plus 20 test images with a patch pasted from another photo and a
    matching label map (pasted region = class 1)."""
    root = tmp_path_factory.mktemp("corpus")
    train_dir = root / "train_images"
    test_dir = root / "test_images"
    label_dir = root / "labels"
    for d in (train_dir, test_dir, label_dir):
        d.mkdir()

    photos = _sample_photos()
    rng = np.random.default_rng(7)
    size = 256

    def crop_resized(img, k):
        h, w = img.shape[:2]
        s = min(h, w)
        offsets = [(0, 0), (h - s, w - s), ((h - s) // 2, (w - s) // 2)]
        oy, ox = offsets[k % 3]
        patch = img[oy:oy + s, ox:ox + s]
        return np.asarray(
            Image.fromarray(patch).resize((size, size), Image.BILINEAR)
        )

    # 20 clean crops for training
    for i in range(20):
        img = crop_resized(photos[i % len(photos)], i // len(photos))
        Image.fromarray(img).save(train_dir / f"train_{i:02d}.png")

    # 20 test crops, each with a foreign 64x64 patch pasted in
    for i in range(20):
        img = crop_resized(photos[(i + 5) % len(photos)], 1 + i // len(photos))
        donor = crop_resized(photos[(i + 11) % len(photos)], 2)
        y = int(rng.integers(0, size - 64))
        x = int(rng.integers(0, size - 64))
        img = img.copy()
        img[y:y + 64, x:x + 64] = donor[:64, :64]
        labels = np.zeros((size, size), dtype=np.uint8)
        labels[y:y + 64, x:x + 64] = 1
        Image.fromarray(img).save(test_dir / f"test_{i:02d}.png")
        Image.fromarray(labels).save(label_dir / f"test_{i:02d}.png")

    return dict(root=root, train=train_dir, test=test_dir, labels=label_dir, size=size)
