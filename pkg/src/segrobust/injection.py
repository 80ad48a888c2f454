"""Object-mask banks and label-map injection.

Masks are pasted into label maps with the overwrite rule

    y_mix = [y_obj == 0] * y + y_obj

i.e. the object wins wherever it is set and the base map is untouched
elsewhere. Several injections per map are applied one after another, so a
later object overwrites an earlier one.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from ._util import parallel_map
from .labelmap import (
    DatasetManifest,
    LabelMap,
    LabelMapError,
    ManifestItem,
    load_binary_mask,
    read_label_png,
    safe_item_filename,
    save_binary_mask,
    save_label_map,
    save_manifest,
)

DEFAULT_MIN_AREA = 16
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True, eq=False)
class ObjectMask:
    """A single object cut out of a label map (or imported silhouette).

    ``bbox`` is ``(x0, y0, w, h)``; ``bitmap`` is the ``(h, w)`` coverage.
    ``values`` optionally keeps per-pixel classes for multi-class objects
    (e.g. a sign together with its pole); without it the whole object is
    painted with ``class_id``.
    """

    class_id: int
    bbox: tuple[int, int, int, int]
    bitmap: np.ndarray
    source_item: str = "imported"
    values: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        bm = np.ascontiguousarray(self.bitmap, dtype=bool)
        x0, y0, w, h = (int(v) for v in self.bbox)
        if bm.shape != (h, w):
            raise ValueError(f"bitmap shape {bm.shape} does not match bbox size {(h, w)}")
        if not bm.any():
            raise ValueError("object mask has no set pixel")
        if not (bm.any(axis=1)[[0, -1]].all() and bm.any(axis=0)[[0, -1]].all()):
            raise ValueError("bbox does not tightly bound the set pixels")
        if not 0 <= self.class_id <= 255:
            raise ValueError(f"class id {self.class_id} does not fit in 8 bits")
        bm.setflags(write=False)
        object.__setattr__(self, "bitmap", bm)
        object.__setattr__(self, "bbox", (x0, y0, w, h))
        if self.values is not None:
            vals = np.ascontiguousarray(self.values, dtype=np.uint8)
            if vals.shape != bm.shape:
                raise ValueError("values grid must match the bitmap")
            vals = np.where(bm, vals, 0).astype(np.uint8)
            vals.setflags(write=False)
            object.__setattr__(self, "values", vals)

    @property
    def area(self) -> int:
        return int(self.bitmap.sum())

    def paint_values(self, relabel: Optional[int] = None) -> np.ndarray:
        """``(h, w)`` grid of the classes this object writes where it is set."""
        if relabel is not None:
            return np.full(self.bitmap.shape, relabel, dtype=np.uint8)
        if self.values is not None:
            return self.values
        return np.full(self.bitmap.shape, self.class_id, dtype=np.uint8)

    def check_label_space(self, n_classes: int, ignore_value: int) -> None:
        classes = {self.class_id}
        if self.values is not None:
            classes |= set(np.unique(self.values[self.bitmap]).tolist())
        bad = [c for c in classes if c >= n_classes or c == ignore_value]
        if bad:
            raise ValueError(f"object mask paints invalid class ids {bad}")


@dataclass(frozen=True)
class MaskBank:
    entries: tuple[ObjectMask, ...]
    class_filter: tuple[tuple[int, ...], ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> ObjectMask:
        return self.entries[i]


@dataclass(frozen=True)
class InjectionPolicy:
    count_range: tuple[int, int] = (1, 3)
    relabel_class: Optional[int] = None
    master_seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"count range must satisfy 0 <= min <= max, got {self.count_range}")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        if self.relabel_class is not None and not 0 <= self.relabel_class <= 255:
            raise ValueError(f"relabel class {self.relabel_class} does not fit in 8 bits")


# -- extraction -----------------------------------------------------------------


def _components(label_map: LabelMap, classes: frozenset[int], min_area: int,
                source: str, preserve_classes: bool) -> list[ObjectMask]:
    member = np.isin(label_map.data, sorted(classes))
    lab, n = ndimage.label(member, structure=FOUR_CONNECTED)
    if n == 0:
        return []
    found = []
    for idx, sl in enumerate(ndimage.find_objects(lab), start=1):
        bitmap = lab[sl] == idx
        area = int(bitmap.sum())
        if area < min_area:
            continue
        vals = label_map.data[sl]
        tally = Counter(vals[bitmap].tolist())
        # Majority class; ties go to the smaller id.
        major = min(tally, key=lambda c: (-tally[c], c))
        ys, xs = sl
        found.append(ObjectMask(
            class_id=int(major),
            bbox=(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start),
            bitmap=bitmap,
            source_item=source,
            values=np.where(bitmap, vals, 0) if preserve_classes else None,
        ))
    return found


def extract_object_masks(
    manifest: DatasetManifest,
    class_sets: Sequence[Iterable[int]],
    min_area: int = DEFAULT_MIN_AREA,
    preserve_classes: bool = False,
    workers: Optional[int] = None,
) -> MaskBank:
    """Cut every 4-connected component of each class set out of the dataset.

    A component is labelled with its majority class. Components smaller than
    ``min_area`` pixels are dropped. With ``preserve_classes`` the original
    per-pixel classes are kept and painted back on injection.
    """
    sets = [frozenset(int(c) for c in s) for s in class_sets]
    if not sets or any(not s for s in sets):
        raise ValueError("class sets must be non-empty")
    for s in sets:
        bad = [c for c in s if c >= manifest.n_classes or c == manifest.ignore_value]
        if bad:
            raise ValueError(f"class set contains invalid class ids {sorted(bad)}")

    def work(item: ManifestItem) -> list[ObjectMask]:
        lm = manifest.load_label(item)
        out = []
        for s in sets:
            out.extend(_components(lm, s, min_area, item.id, preserve_classes))
        return out

    entries = [m for chunk in parallel_map(work, manifest.items, workers) for m in chunk]
    return MaskBank(tuple(entries), tuple(tuple(sorted(s)) for s in sets))


# -- translation + mixing -----------------------------------------------------------


def place_mask(mask: ObjectMask, dx: int, dy: int, canvas: tuple[int, int]) -> ObjectMask:
    """Translate ``mask`` by ``(dx, dy)``; ``canvas`` is ``(W, H)``."""
    cw, ch = canvas
    x0, y0, w, h = mask.bbox
    nx, ny = x0 + dx, y0 + dy
    if nx < 0 or ny < 0 or nx + w > cw or ny + h > ch:
        raise ValueError(
            f"placing a {w}x{h} mask at ({nx},{ny}) leaves the {cw}x{ch} canvas"
        )
    return replace(mask, bbox=(nx, ny, w, h))


def _paint(data: np.ndarray, obj: ObjectMask, relabel: Optional[int]) -> None:
    x0, y0, w, h = obj.bbox
    region = data[y0:y0 + h, x0:x0 + w]
    if region.shape != (h, w):
        raise ValueError(f"object bbox {obj.bbox} exceeds the {data.shape[1]}x{data.shape[0]} map")
    np.copyto(region, obj.paint_values(relabel), where=obj.bitmap)


def mix_labels(base: LabelMap, obj: ObjectMask, relabel: Optional[int] = None) -> LabelMap:
    """Paste ``obj`` onto ``base`` at its bbox position; the object wins where set."""
    x0, y0, _, _ = obj.bbox
    if x0 < 0 or y0 < 0:
        raise ValueError(f"object bbox {obj.bbox} has a negative origin")
    out = np.array(base.data)
    _paint(out, obj, relabel)
    return base.replace(out)


# -- dataset generation ----------------------------------------------------------------


def item_rng(master_seed: int, item_id: str) -> np.random.Generator:
    """RNG for one item: seeded by the first 8 bytes (little-endian) of
    ``sha256(f"{master_seed}:{item_id}")``."""
    digest = hashlib.sha256(f"{master_seed}:{item_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass
class InjectionResult:
    label: LabelMap
    coverage: np.ndarray
    records: list[dict] = field(default_factory=list)


def inject_item(base: LabelMap, item_id: str, bank: MaskBank, policy: InjectionPolicy) -> InjectionResult:
    rng = item_rng(policy.master_seed, item_id)
    lo, hi = policy.count_range
    n = int(rng.integers(lo, hi + 1))
    if n and not len(bank):
        raise ValueError("mask bank is empty but the policy asks for injections")
    data = np.array(base.data)
    coverage = np.zeros(base.shape, dtype=bool)
    records = []
    for _ in range(n):
        j = int(rng.integers(len(bank)))
        obj = bank[j]
        x0, y0, w, h = obj.bbox
        if w > base.width or h > base.height:
            raise ValueError(f"bank entry {j} ({w}x{h}) does not fit in item {item_id!r}")
        nx = int(rng.integers(base.width - w + 1))
        ny = int(rng.integers(base.height - h + 1))
        placed = place_mask(obj, nx - x0, ny - y0, (base.width, base.height))
        _paint(data, placed, policy.relabel_class)
        coverage[ny:ny + h, nx:nx + w] |= placed.bitmap
        records.append({"entry": j, "x0": nx, "y0": ny, "dx": nx - x0, "dy": ny - y0})
    return InjectionResult(base.replace(data), coverage, records)


def _generate(manifest: DatasetManifest, bank: MaskBank, policy: InjectionPolicy,
              out_dir: Path | str, mode: str, workers: Optional[int]) -> DatasetManifest:
    out_dir = Path(out_dir)
    if policy.count_range[1] > 0 and not len(bank):
        raise ValueError("mask bank is empty but the policy asks for injections")
    if policy.relabel_class is not None:
        rc = policy.relabel_class
        if rc >= manifest.n_classes or rc == manifest.ignore_value:
            raise ValueError(f"relabel class {rc} is not a valid class of this dataset")
    elif mode == "corrupted":
        for obj in bank.entries:
            obj.check_label_space(manifest.n_classes, manifest.ignore_value)

    def work(item: ManifestItem) -> tuple[ManifestItem, str]:
        fname = safe_item_filename(item.id) + ".png"
        res = inject_item(manifest.load_label(item), item.id, bank, policy)
        label_path = out_dir / "labels" / fname
        save_label_map(res.label, label_path)
        ood_path = None
        if mode == "outlier":
            ood_path = out_dir / "ood_masks" / fname
            save_binary_mask(res.coverage, ood_path)
        record = json.dumps({"item": item.id, "injections": res.records}, sort_keys=True)
        new = ManifestItem(
            id=item.id,
            label=label_path.resolve(),
            image=item.image,
            ood_mask=ood_path.resolve() if ood_path else None,
        )
        return new, record

    rows = parallel_map(work, manifest.items, workers)
    (out_dir / "injections.jsonl").write_text("".join(r + "\n" for _, r in rows))
    out = manifest.with_items(
        (it for it, _ in rows),
        perturbation={
            "kind": mode,
            "count_range": list(policy.count_range),
            "relabel_class": policy.relabel_class,
            "master_seed": policy.master_seed,
            "bank_size": len(bank),
        },
    )
    save_manifest(out, out_dir / "manifest.json")
    return out


def generate_corrupted_variant(manifest: DatasetManifest, bank: MaskBank, policy: InjectionPolicy,
                               out_dir: Path | str, workers: Optional[int] = None) -> DatasetManifest:
    """Inject in-distribution objects from ``bank`` into every label map.

    Per item, ``n ~ U{min..max}`` objects are drawn uniformly from the bank
    and placed uniformly among in-bounds positions, using ``item_rng``.
    Writes ``labels/``, ``manifest.json`` and ``injections.jsonl``.
    """
    return _generate(manifest, bank, policy, out_dir, "corrupted", workers)


def generate_outlier_variant(manifest: DatasetManifest, shape_bank: MaskBank, policy: InjectionPolicy,
                             out_dir: Path | str, workers: Optional[int] = None) -> DatasetManifest:
    """Like :func:`generate_corrupted_variant`, but every object is painted
    with ``policy.relabel_class`` and a 1-bit OOD mask (1 = injected) is
    written per item under ``ood_masks/``."""
    if policy.relabel_class is None:
        raise ValueError("outlier injection requires a relabel class")
    return _generate(manifest, shape_bank, policy, out_dir, "outlier", workers)


# -- bank files ---------------------------------------------------------------------------


def save_bank(bank: MaskBank, out_dir: Path | str) -> Path:
    """Write ``index.json`` plus one 1-bit PNG per entry (and an 8-bit
    ``values`` PNG for multi-class entries). Returns the index path."""
    out_dir = Path(out_dir)
    entries = []
    for i, m in enumerate(bank.entries):
        eid = f"{i:06d}"
        rel = f"masks/{eid}.png"
        save_binary_mask(m.bitmap, out_dir / rel)
        entry = {"id": eid, "class_id": m.class_id, "bbox": list(m.bbox), "bitmap": rel,
                 "source_item": m.source_item}
        if m.values is not None:
            vrel = f"values/{eid}.png"
            save_label_map(LabelMap(m.values, 256, 255), out_dir / vrel)
            entry["values"] = vrel
        entries.append(entry)
    index = out_dir / "index.json"
    index.write_text(json.dumps({"class_filter": [list(s) for s in bank.class_filter],
                                 "entries": entries}, indent=2, sort_keys=True) + "\n")
    return index


def load_bank(index_path: Path | str) -> MaskBank:
    index_path = Path(index_path)
    if index_path.is_dir():
        index_path = index_path / "index.json"
    doc = json.loads(index_path.read_text())
    root = index_path.parent
    entries = []
    for e in doc.get("entries", []):
        values = None
        if e.get("values"):
            values = read_label_png(root / e["values"], 256, 255).data
        try:
            entries.append(ObjectMask(
                class_id=int(e["class_id"]),
                bbox=tuple(e["bbox"]),
                bitmap=load_binary_mask(root / e["bitmap"]),
                source_item=e.get("source_item", "imported"),
                values=values,
            ))
        except (KeyError, ValueError) as exc:
            raise LabelMapError(f"{index_path}: bad bank entry {e.get('id')!r}: {exc}") from None
    return MaskBank(tuple(entries), tuple(tuple(s) for s in doc.get("class_filter", [])))


def synthetic_silhouettes() -> MaskBank:
    """Small built-in outlier shapes: a blob, an ellipse and a triangle."""
    yy, xx = np.mgrid[0:12, 0:12]
    blob = ((yy - 4) ** 2 + (xx - 4) ** 2 <= 12) | ((yy - 7) ** 2 + (xx - 7) ** 2 <= 14)
    ey, ex = np.mgrid[0:9, 0:15]
    ellipse = ((ey - 4) / 4.4) ** 2 + ((ex - 7) / 7.4) ** 2 <= 1.0
    ty, tx = np.mgrid[0:10, 0:11]
    triangle = (ty >= 2 * np.abs(tx - 5) - 1) & (ty <= 9)
    shapes = []
    for bm in (blob, ellipse, triangle):
        ys, xs = np.nonzero(bm)
        tight = bm[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
        shapes.append(ObjectMask(0, (0, 0, tight.shape[1], tight.shape[0]), tight))
    return MaskBank(tuple(shapes))
