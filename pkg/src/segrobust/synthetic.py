"""Toy street-scene datasets for smoke tests and demos.

    python -m segrobust.synthetic OUT_DIR [--items 5] [--seed 0]
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .labelmap import DatasetManifest, LabelMap, ManifestItem, RgbImage, save_label_map, save_manifest, save_rgb_image
from .morphology import CITYSCAPES_CLASSES

# Cityscapes colour palette, indexed by trainId.
PALETTE = np.array([
    (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153),
    (153, 153, 153), (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152),
    (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142), (0, 0, 70),
    (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
], dtype=np.uint8)


def synthetic_scene(rng: np.random.Generator, height: int = 48, width: int = 64) -> np.ndarray:
    """Sky / building / road bands with a few cars, people, poles and signs."""
    lab = np.full((height, width), 10, dtype=np.uint8)  # sky
    horizon = int(rng.integers(height // 4, height // 2))
    lab[horizon:, :] = 2  # building
    road = int(rng.integers(horizon + 4, height - 6))
    lab[road:, :] = 0
    lab[road:road + 2, :] = 1  # sidewalk
    for _ in range(int(rng.integers(1, 4))):
        w, h = int(rng.integers(6, 12)), int(rng.integers(4, 7))
        x = int(rng.integers(0, width - w))
        y = min(height - h, road + int(rng.integers(0, 3)))
        lab[y:y + h, x:x + w] = 13  # car
    for _ in range(int(rng.integers(0, 3))):
        x = int(rng.integers(0, width - 3))
        lab[road - 8:road, x:x + 2] = 11  # person
    x = int(rng.integers(2, width - 5))
    lab[horizon:road, x] = 5  # pole
    lab[horizon:horizon + 4, x - 2:x + 3] = 7  # sign
    lab[0, 0] = 255  # one ignore pixel
    return lab


def render(label: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros(label.shape + (3,), dtype=np.int16)
    valid = label < len(PALETTE)
    img[valid] = PALETTE[label[valid]]
    img += rng.integers(-12, 13, size=img.shape, dtype=np.int16)
    return np.clip(img, 0, 255).astype(np.uint8)


def make_synthetic_dataset(root: Path | str, n_items: int = 5, seed: int = 0,
                           height: int = 48, width: int = 64) -> DatasetManifest:
    root = Path(root)
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n_items):
        iid = f"scene_{i:03d}"
        lab = synthetic_scene(rng, height, width)
        save_label_map(LabelMap(lab, len(CITYSCAPES_CLASSES)), root / "labels" / f"{iid}.png")
        save_rgb_image(RgbImage(render(lab, rng)), root / "images" / f"{iid}.png")
        items.append(ManifestItem(iid, (root / "labels" / f"{iid}.png").resolve(),
                                  image=(root / "images" / f"{iid}.png").resolve()))
    manifest = DatasetManifest(len(CITYSCAPES_CLASSES), tuple(items), class_names=CITYSCAPES_CLASSES)
    save_manifest(manifest, root / "manifest.json")
    return manifest


def main() -> None:
    ap = argparse.ArgumentParser(prog="python -m segrobust.synthetic")
    ap.add_argument("out")
    ap.add_argument("--items", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    make_synthetic_dataset(args.out, args.items, args.seed)
    print(Path(args.out) / "manifest.json")


if __name__ == "__main__":
    main()
