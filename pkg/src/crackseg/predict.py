"""Static mask export: tile, run the model, stitch, write PNGs."""

import json
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch

from .data import CRACK, read_image, write_image, write_mask
from .model import load_checkpoint


def predict(
    checkpoint_path,
    image_paths: Sequence,
    out_dir,
    threshold: float = 0.5,
    overlay: bool = False,
    batch_size: int = 16,
    device: str = "cpu",
) -> List[Path]:
    """Segment each image into an 8-bit {0, 255} mask PNG under out_dir.

    Images are cut into the model's non-overlapping tile grid. Right/bottom
    margins that no tile covers are emitted as background and reported in a
    sidecar note next to the mask. With `overlay`, a side-by-side
    image|mask panel is written as well.
    """
    model, _ = load_checkpoint(checkpoint_path, map_location=device)
    model.to(device).eval()
    tile = model.cfg.input_size
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for image_path in image_paths:
        image_path = Path(image_path)
        image = read_image(image_path)
        h, w = image.shape[:2]
        if h < tile or w < tile:
            raise ValueError(
                f"{image_path.name}: image {h}x{w} is smaller than the {tile}x{tile} tile size"
            )

        coords = [
            (r * tile, c * tile) for r in range(h // tile) for c in range(w // tile)
        ]
        canvas = np.zeros((h, w), dtype=np.uint8)
        with torch.no_grad():
            for start in range(0, len(coords), batch_size):
                chunk = coords[start : start + batch_size]
                batch = torch.stack(
                    [
                        torch.from_numpy(
                            image[y : y + tile, x : x + tile]
                            .astype(np.float32)
                            .transpose(2, 0, 1)
                            / 255.0
                        )
                        for y, x in chunk
                    ]
                ).to(device)
                prob = model(batch).cpu().numpy()[:, 0]
                for (y, x), p in zip(chunk, prob):
                    canvas[y : y + tile, x : x + tile] = np.where(
                        p > threshold, CRACK, 0
                    ).astype(np.uint8)

        mask_path = out_dir / f"{image_path.stem}_mask.png"
        write_mask(mask_path, canvas)
        written.append(mask_path)

        margin_bottom, margin_right = h % tile, w % tile
        if margin_bottom or margin_right:
            note = {
                "image": image_path.name,
                "uncovered_bottom_px": margin_bottom,
                "uncovered_right_px": margin_right,
                "policy": "uncovered margins emitted as background",
            }
            (out_dir / f"{image_path.stem}_note.json").write_text(
                json.dumps(note), encoding="utf-8"
            )

        if overlay:
            panel = np.concatenate([image, np.stack([canvas] * 3, axis=-1)], axis=1)
            write_image(out_dir / f"{image_path.stem}_overlay.png", panel)
    return written
