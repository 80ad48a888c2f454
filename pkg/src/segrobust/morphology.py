"""Flat grey-level and categorical morphology on label maps.

Grey operators take the min/max of ``x(p - h)`` over the structuring element
``B`` (flat structuring function, ``b == 0``). Windows are clipped to the
image domain, so border pixels simply see fewer neighbours.

Categorical operators work on label maps through a class-priority order:
every class gets a rank (unlisted classes and the ignore value rank 0), the
window pixel with the highest (dilate) or lowest (erode) rank is selected,
and its class is written back. Rank ties go to the first window pixel in
ascending ``(dy, dx)`` offset order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np

from ._util import parallel_map
from .labelmap import (
    DatasetManifest,
    LabelMap,
    ManifestItem,
    safe_item_filename,
    save_label_map,
    save_manifest,
)

Op = Literal["dilate", "erode"]
SHAPES = ("square", "disk", "line_h", "line_v")

# Cityscapes trainId -> class name.
CITYSCAPES_CLASSES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bicycle",
)


@dataclass(frozen=True)
class StructuringElement:
    offsets: tuple[tuple[int, int], ...]
    shape_tag: str = "custom"
    radius: int = 0

    def __post_init__(self) -> None:
        offs = tuple(sorted({(int(dy), int(dx)) for dy, dx in self.offsets}))
        if (0, 0) not in offs:
            raise ValueError("structuring element must contain the origin (0, 0)")
        object.__setattr__(self, "offsets", offs)

    def __len__(self) -> int:
        return len(self.offsets)

    def is_symmetric(self) -> bool:
        s = set(self.offsets)
        return all((-dy, -dx) in s for dy, dx in s)


def make_structuring_element(shape_tag: str, radius: int) -> StructuringElement:
    """Build one of the symmetric built-in shapes.

    ``square`` is the ``(2r+1)^2`` window, ``disk`` keeps ``dy^2 + dx^2 <= r^2``,
    ``line_h``/``line_v`` are 1-D segments of half-length ``r``.
    """
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    r = range(-radius, radius + 1)
    if shape_tag == "square":
        offs = [(dy, dx) for dy in r for dx in r]
    elif shape_tag == "disk":
        offs = [(dy, dx) for dy in r for dx in r if dy * dy + dx * dx <= radius * radius]
    elif shape_tag == "line_h":
        offs = [(0, dx) for dx in r]
    elif shape_tag == "line_v":
        offs = [(dy, 0) for dy in r]
    else:
        raise ValueError(f"unknown structuring element shape {shape_tag!r}; expected one of {SHAPES}")
    return StructuringElement(tuple(offs), shape_tag, radius)


@dataclass(frozen=True, eq=False)
class GreyImage:
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2 or 0 in arr.shape:
            raise ValueError(f"grey image must be a non-empty 2-D grid, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ClassPriorityOrder:
    """Ranks for categorical morphology; anything unlisted ranks 0."""

    ranks: dict[int, int]

    def __post_init__(self) -> None:
        ranks = {int(k): int(v) for k, v in self.ranks.items()}
        for cid, rank in ranks.items():
            if not 0 <= cid <= 255:
                raise ValueError(f"class id {cid} does not fit in 8 bits")
            if rank < 1:
                raise ValueError(f"rank of class {cid} must be >= 1, got {rank}")
        if len(set(ranks.values())) != len(ranks):
            raise ValueError("listed ranks must be pairwise distinct")
        object.__setattr__(self, "ranks", ranks)

    def rank_of(self, class_id: int) -> int:
        return self.ranks.get(int(class_id), 0)

    def lut(self) -> np.ndarray:
        table = np.zeros(256, dtype=np.int32)
        for cid, rank in self.ranks.items():
            table[cid] = rank
        return table

    def rank_image(self, label_map: LabelMap) -> np.ndarray:
        return self.lut()[label_map.data]

    def check_against(self, label_map: LabelMap) -> None:
        if label_map.ignore_value in self.ranks:
            raise ValueError(f"ignore value {label_map.ignore_value} may not be ranked")
        too_big = [c for c in self.ranks if c >= label_map.n_classes]
        if too_big:
            raise ValueError(f"order ranks class ids outside the label space: {too_big}")

    def descending(self) -> list[int]:
        """Listed class ids, highest priority first."""
        return sorted(self.ranks, key=self.ranks.__getitem__, reverse=True)

    def to_json(self) -> str:
        return json.dumps({"ranks": {str(k): v for k, v in sorted(self.ranks.items())}}, indent=2) + "\n"


def load_order(path: Path | str) -> ClassPriorityOrder:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict) or not isinstance(doc.get("ranks"), dict):
        raise ValueError(f"{path}: order file must be an object with a 'ranks' mapping")
    return ClassPriorityOrder(doc["ranks"])


def default_order() -> ClassPriorityOrder:
    """Cityscapes order: sign > light > person > car > bicycle > motorcycle > truck > train."""
    text = resources.files("segrobust").joinpath("data/cityscapes_order.json").read_text()
    return ClassPriorityOrder(json.loads(text)["ranks"])


def _window_slices(dy: int, dx: int, h: int, w: int):
    """Slices pairing output pixels ``p`` with in-bounds sources ``p - (dy, dx)``."""
    y0, y1 = max(0, dy), min(h, h + dy)
    x0, x1 = max(0, dx), min(w, w + dx)
    if y0 >= y1 or x0 >= x1:
        return None
    dst = (slice(y0, y1), slice(x0, x1))
    src = (slice(y0 - dy, y1 - dy), slice(x0 - dx, x1 - dx))
    return dst, src


def _check_op(op: str) -> None:
    if op not in ("dilate", "erode"):
        raise ValueError(f"op must be 'dilate' or 'erode', got {op!r}")


def grey_morph(img: GreyImage, se: StructuringElement, op: Op) -> GreyImage:
    _check_op(op)
    x = img.data
    h, w = x.shape
    out = x.copy()  # origin is always in B
    reduce = np.maximum if op == "dilate" else np.minimum
    for dy, dx in se.offsets:
        if dy == 0 and dx == 0:
            continue
        sl = _window_slices(dy, dx, h, w)
        if sl is None:
            continue
        dst, src = sl
        reduce(out[dst], x[src], out=out[dst])
    return GreyImage(out)


def grey_dilate(img: GreyImage, se: StructuringElement) -> GreyImage:
    return grey_morph(img, se, "dilate")


def grey_erode(img: GreyImage, se: StructuringElement) -> GreyImage:
    return grey_morph(img, se, "erode")


def categorical_morph(
    label_map: LabelMap, se: StructuringElement, order: ClassPriorityOrder, op: Op
) -> LabelMap:
    _check_op(op)
    order.check_against(label_map)
    labels = label_map.data
    rank = order.lut()[labels]
    h, w = labels.shape
    if op == "dilate":
        best = np.full((h, w), -1, dtype=np.int32)
        better = np.greater
    else:
        best = np.full((h, w), np.iinfo(np.int32).max, dtype=np.int32)
        better = np.less
    out = np.empty_like(labels)
    # Strict comparison keeps the earliest offset on rank ties.
    for dy, dx in se.offsets:
        sl = _window_slices(dy, dx, h, w)
        if sl is None:
            continue
        dst, src = sl
        take = better(rank[src], best[dst])
        best[dst] = np.where(take, rank[src], best[dst])
        out[dst] = np.where(take, labels[src], out[dst])
    return label_map.replace(out)


def variant_name(op: str, shape: str, radius: int) -> str:
    return f"{op}_{shape}_r{radius}"


def generate_morphological_variant(
    manifest: DatasetManifest,
    se_shape: str,
    severities: Sequence[int],
    op: Op,
    out_dir: Path | str,
    order: Optional[ClassPriorityOrder] = None,
    workers: Optional[int] = None,
) -> list[DatasetManifest]:
    """Write one perturbed copy of ``manifest`` per severity (SE radius).

    Each severity lands in ``out_dir/<op>_<shape>_r<radius>/`` with its own
    ``manifest.json`` and ``labels/``. Images pass through by reference;
    predictions and score maps are dropped since they no longer match.
    """
    _check_op(op)
    severities = [int(s) for s in severities]
    if not severities:
        raise ValueError("severities must be non-empty")
    if any(b <= a for a, b in zip(severities, severities[1:])):
        raise ValueError(f"severities must be strictly increasing, got {severities}")
    if severities[0] < 0:
        raise ValueError("severities must be >= 0")
    order = default_order() if order is None else order
    for cid in order.ranks:
        if cid >= manifest.n_classes or cid == manifest.ignore_value:
            raise ValueError(f"order ranks class {cid}, which is not a valid class of this dataset")
    out_dir = Path(out_dir)
    ses = [make_structuring_element(se_shape, s) for s in severities]

    def work(item: ManifestItem) -> list[ManifestItem]:
        fname = safe_item_filename(item.id) + ".png"
        base = manifest.load_label(item)
        produced = []
        for se in ses:
            sub = out_dir / variant_name(op, se_shape, se.radius)
            target = sub / "labels" / fname
            save_label_map(categorical_morph(base, se, order, op), target)
            produced.append(ManifestItem(id=item.id, label=target.resolve(), image=item.image))
        return produced

    per_item = parallel_map(work, manifest.items, workers)
    results = []
    for k, se in enumerate(ses):
        sub = out_dir / variant_name(op, se_shape, se.radius)
        out = manifest.with_items(
            (row[k] for row in per_item),
            perturbation={"kind": "morphological", "op": op, "shape": se_shape, "radius": se.radius,
                          "order": {str(c): r for c, r in sorted(order.ranks.items())}},
        )
        save_manifest(out, sub / "manifest.json")
        results.append(out)
    return results
