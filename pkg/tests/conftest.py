from pathlib import Path

import numpy as np
import pytest

from crackseg.data import Manifest, TileRecord, write_image, write_mask
from crackseg.model import ModelConfig


def synthetic_tile(rng, size):
    """One RGB tile with a thick dark polyline 'crack' and its {0,255} mask."""
    image = rng.uniform(0.3, 0.7, (size, size, 3)).astype(np.float32)
    mask = np.zeros((size, size), np.uint8)
    x0, y0 = rng.integers(0, size, 2)
    for _ in range(3):
        x1, y1 = rng.integers(0, size, 2)
        n = max(abs(int(x1) - int(x0)), abs(int(y1) - int(y0))) + 1
        xs = np.linspace(x0, x1, n).astype(int)
        ys = np.linspace(y0, y1, n).astype(int)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                mask[np.clip(ys + dy, 0, size - 1), np.clip(xs + dx, 0, size - 1)] = 255
        x0, y0 = x1, y1
    image[mask > 0] *= 0.35
    return np.rint(image * 255).astype(np.uint8), mask


def make_split_manifest(root, n_tiles, size, seed=7, splits=("train", "val", "test")):
    """Write synthetic tiles under root; split assignment round-robins over `splits`.

    With splits=("train", "train+val") style duplication use
    make_overfit_manifest instead.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_tiles):
        image, mask = synthetic_tile(rng, size)
        tile_rel = f"images/t{i:03d}.png"
        mask_rel = f"masks/t{i:03d}.png"
        write_image(root / tile_rel, image)
        write_mask(root / mask_rel, mask)
        records.append(
            TileRecord(
                tile_path=tile_rel,
                mask_path=mask_rel,
                source="synthetic",
                crack_pixels=int(np.count_nonzero(mask)),
                split=splits[i % len(splits)],
            )
        )
    return Manifest(records=records, seed=seed, tile_size=size, root=root)


def make_overfit_manifest(root, n_tiles, size, seed=7):
    """n tiles, each indexed by both a train and a val record (train == val)."""
    manifest = make_split_manifest(root, n_tiles, size, seed=seed, splits=("train",))
    val_records = [
        TileRecord(
            tile_path=r.tile_path,
            mask_path=r.mask_path,
            source=r.source,
            crack_pixels=r.crack_pixels,
            split="val",
        )
        for r in manifest.records
    ]
    manifest.records.extend(val_records)
    return manifest


@pytest.fixture
def tiny_cfg():
    return ModelConfig.tiny()
