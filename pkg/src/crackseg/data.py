"""Dataset refinement: mask harmonization, tiling, augmentation and splits.

Masks are 8-bit single-channel; after refinement every pixel is 0 or 255
(255 = crack). The manifest is a JSON-lines file with one record per tile,
plus a small sidecar meta file carrying the seed and tile size.
"""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import cv2
import numpy as np

CRACK = 255
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def _check_mask(mask: np.ndarray):
    if not isinstance(mask, np.ndarray) or mask.ndim != 2 or mask.dtype != np.uint8:
        raise ValueError("mask must be a 2D uint8 array")


def mask_is_binary(mask: np.ndarray) -> bool:
    return bool(np.isin(mask, (0, CRACK)).all())


def invert_mask(mask: np.ndarray) -> np.ndarray:
    """v -> 255 - v elementwise (involution)."""
    _check_mask(mask)
    return (CRACK - mask.astype(np.int16)).astype(np.uint8)


def binarize_mask(mask: np.ndarray) -> np.ndarray:
    """Threshold at 255/2: v > 127.5 -> 255, else 0."""
    _check_mask(mask)
    return np.where(mask > 127, CRACK, 0).astype(np.uint8)


def refine_mask_morphology(mask: np.ndarray, kernel: int = 3) -> np.ndarray:
    """Morphological closing (dilate then erode) with a square structuring element.

    Repairs small holes and one-pixel discontinuities in already-binary masks.
    """
    _check_mask(mask)
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be a positive odd integer, got {kernel}")
    if not mask_is_binary(mask):
        raise ValueError("morphological refinement expects a binary {0,255} mask")
    element = np.ones((kernel, kernel), dtype=np.uint8)
    return cv2.morphologyEx(mask, cv2.MORPH_CLOSE, element)


@dataclass
class ImageSample:
    """An RGB image with its refined binary mask and provenance."""

    image: np.ndarray  # HxWx3 uint8
    mask: np.ndarray  # HxW uint8, values in {0, 255}
    source: str = ""
    crack_pixels: int = -1
    name: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise ValueError("image must be HxWx3 uint8")
        _check_mask(self.mask)
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(
                f"image size {self.image.shape[:2]} != mask size {self.mask.shape}"
            )
        if not mask_is_binary(self.mask):
            raise ValueError("refined mask must contain only the values 0 and 255")
        counted = int(np.count_nonzero(self.mask))
        if self.crack_pixels < 0:
            self.crack_pixels = counted
        elif self.crack_pixels != counted:
            raise ValueError(
                f"crack_pixels {self.crack_pixels} does not match mask ({counted})"
            )


def tile_non_overlapping(sample: ImageSample, tile_size: int = 256) -> List[ImageSample]:
    """Cut floor(H/t) * floor(W/t) tiles from the top-left grid; remainders are dropped."""
    h, w = sample.mask.shape
    rows, cols = h // tile_size, w // tile_size
    tiles = []
    for r in range(rows):
        for c in range(cols):
            y, x = r * tile_size, c * tile_size
            tiles.append(
                ImageSample(
                    image=sample.image[y : y + tile_size, x : x + tile_size].copy(),
                    mask=sample.mask[y : y + tile_size, x : x + tile_size].copy(),
                    source=sample.source,
                    name=f"{sample.name}_r{r}c{c}" if sample.name else f"r{r}c{c}",
                )
            )
    return tiles


def select_for_augmentation(sample: ImageSample, threshold: int = 5000) -> bool:
    """True iff the tile holds strictly more than `threshold` crack pixels."""
    return sample.crack_pixels > threshold


def augment(sample: ImageSample, seed, noise_sigma: float = 0.05) -> ImageSample:
    """Additive Gaussian noise on the image plus a 90/180/270 degree rotation of both.

    The rotation permutes pixels, so crack_pixels is preserved; noise never
    touches the mask. Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    image = sample.image.astype(np.float32) / 255.0
    image = image + rng.normal(0.0, noise_sigma, size=image.shape)
    image = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    k = int(rng.integers(1, 4))  # quarter turns
    return ImageSample(
        image=np.ascontiguousarray(np.rot90(image, k)),
        mask=np.ascontiguousarray(np.rot90(sample.mask, k)),
        source=sample.source,
        name=f"{sample.name}_aug" if sample.name else "aug",
    )


@dataclass
class TileRecord:
    tile_path: str
    mask_path: str
    source: str
    crack_pixels: int
    augmented: bool = False
    parent: Optional[str] = None
    split: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "tile_path": self.tile_path,
            "mask_path": self.mask_path,
            "source": self.source,
            "crack_pixels": self.crack_pixels,
            "augmented": self.augmented,
            "parent": self.parent,
            "split": self.split,
        }


@dataclass
class Manifest:
    """Record-per-tile index of a refined dataset."""

    records: List[TileRecord] = field(default_factory=list)
    seed: int = 0
    tile_size: int = 256
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def split_records(self, split: str) -> List[TileRecord]:
        return [r for r in self.records if r.split == split]

    def split_counts(self) -> dict:
        counts: dict = {}
        for r in self.records:
            counts[r.split] = counts.get(r.split, 0) + 1
        return counts

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(json.dumps(r.to_dict()) + "\n")
        meta = {"seed": self.seed, "tile_size": self.tile_size}
        _meta_path(path).write_text(json.dumps(meta), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        records = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if line:
                    records.append(TileRecord(**json.loads(line)))
        seed, tile_size = 0, 256
        meta_path = _meta_path(path)
        if meta_path.exists():
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            seed = int(meta.get("seed", 0))
            tile_size = int(meta.get("tile_size", 256))
        return cls(records=records, seed=seed, tile_size=tile_size, root=path.parent)


def _meta_path(manifest_path: Path) -> Path:
    return manifest_path.with_name(manifest_path.stem + ".meta.json")


def crack_proportion(manifest: Manifest) -> float:
    """Total crack pixels over total pixels of all tiles in the manifest."""
    if not manifest.records:
        raise ValueError("manifest is empty")
    crack = sum(r.crack_pixels for r in manifest.records)
    return crack / (len(manifest.records) * manifest.tile_size**2)


def split_manifest(
    manifest: Manifest, ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> Manifest:
    """Shuffle and assign train/val/test splits by ratio (floor, remainder to train).

    Only non-augmented records are shuffled and assigned; augmented tiles
    inherit their parent's split so near-duplicates never leak across splits.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError(f"ratios must be three non-negative numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")

    base = [i for i, r in enumerate(manifest.records) if not r.augmented]
    n = len(base)
    if n == 0:
        raise ValueError("manifest has no base (non-augmented) records to split")
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test

    order = np.random.default_rng(seed).permutation(n)
    assignment = {}
    for pos, j in enumerate(order):
        idx = base[j]
        if pos < n_train:
            assignment[idx] = "train"
        elif pos < n_train + n_val:
            assignment[idx] = "val"
        else:
            assignment[idx] = "test"

    by_tile = {}
    new_records: List[TileRecord] = []
    for i, record in enumerate(manifest.records):
        if not record.augmented:
            new_records.append(replace(record, split=assignment[i]))
            by_tile[record.tile_path] = assignment[i]
        else:
            new_records.append(record)  # placeholder, fixed below
    for i, record in enumerate(new_records):
        if record.augmented:
            if record.parent is None or record.parent not in by_tile:
                raise ValueError(
                    f"augmented record {record.tile_path} has no parent in the manifest"
                )
            new_records[i] = replace(record, split=by_tile[record.parent])

    return Manifest(
        records=new_records, seed=seed, tile_size=manifest.tile_size, root=manifest.root
    )


def read_image(path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise ValueError(f"cannot read image {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def read_mask(path) -> np.ndarray:
    mask = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if mask is None:
        raise ValueError(f"cannot read mask {path}")
    return mask.astype(np.uint8)


def write_image(path, image: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(image, cv2.COLOR_RGB2BGR)):
        raise ValueError(f"cannot write image {path}")


def write_mask(path, mask: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), mask):
        raise ValueError(f"cannot write mask {path}")


def load_tile(record: TileRecord, root) -> Tuple[np.ndarray, np.ndarray]:
    """Tile as float32 CHW in [0,1] plus mask as float32 1xHxW in {0,1}."""
    root = Path(root)
    image = read_image(root / record.tile_path).astype(np.float32) / 255.0
    mask = (read_mask(root / record.mask_path) > 127).astype(np.float32)
    return image.transpose(2, 0, 1), mask[None, :, :]


def _find_mask_for(stem: str, masks_dir: Path) -> Path:
    for ext in IMAGE_EXTENSIONS:
        candidate = masks_dir / f"{stem}{ext}"
        if candidate.exists():
            return candidate
    raise ValueError(f"no mask found for {stem!r} under {masks_dir}")


def prepare_source(
    images_dir,
    masks_dir,
    source: str,
    out_dir,
    *,
    invert: bool = False,
    morph_kernel: Optional[int] = None,
    tile_size: int = 256,
    augment_threshold: int = 5000,
    noise_sigma: float = 0.05,
    seed: int = 0,
    manifest: Optional[Manifest] = None,
) -> Manifest:
    """Refine one source dataset into 256x256 tiles under out_dir.

    masks_dir may be None for non-crack sources; their tiles get all-zero
    masks. Tiles whose masks hold more than `augment_threshold` crack pixels
    additionally get one augmented copy (noise + rotation) that keeps a
    reference to its parent tile. Pass an existing manifest to append
    further sources to the same output.
    """
    images_dir = Path(images_dir)
    out_dir = Path(out_dir)
    if manifest is None:
        manifest = Manifest(records=[], seed=seed, tile_size=tile_size, root=out_dir)
    elif manifest.tile_size != tile_size:
        raise ValueError("tile_size differs from the manifest being appended to")

    image_paths = sorted(
        p for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not image_paths:
        raise ValueError(f"no images found under {images_dir}")

    for image_path in image_paths:
        image = read_image(image_path)
        if masks_dir is None:
            mask = np.zeros(image.shape[:2], dtype=np.uint8)
        else:
            mask = read_mask(_find_mask_for(image_path.stem, Path(masks_dir)))
            if mask.shape != image.shape[:2]:
                raise ValueError(
                    f"{image_path.name}: mask size {mask.shape} != image size {image.shape[:2]}"
                )
            if invert:
                mask = invert_mask(mask)
            mask = binarize_mask(mask)
            if morph_kernel is not None:
                mask = refine_mask_morphology(mask, morph_kernel)

        sample = ImageSample(image=image, mask=mask, source=source, name=image_path.stem)
        for tile in tile_non_overlapping(sample, tile_size):
            _emit(tile, out_dir, manifest)
            if select_for_augmentation(tile, augment_threshold):
                copy = augment(tile, seed=[seed, len(manifest.records)], noise_sigma=noise_sigma)
                _emit(copy, out_dir, manifest, parent=f"images/{source}_{tile.name}.png")
    return manifest


def _emit(tile: ImageSample, out_dir: Path, manifest: Manifest, parent: Optional[str] = None):
    tile_rel = f"images/{tile.source}_{tile.name}.png"
    mask_rel = f"masks/{tile.source}_{tile.name}.png"
    write_image(out_dir / tile_rel, tile.image)
    write_mask(out_dir / mask_rel, tile.mask)
    manifest.records.append(
        TileRecord(
            tile_path=tile_rel,
            mask_path=mask_rel,
            source=tile.source,
            crack_pixels=tile.crack_pixels,
            augmented=parent is not None,
            parent=parent,
        )
    )
