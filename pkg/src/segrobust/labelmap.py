"""Label maps, images, score maps and dataset manifests.

Label maps are single-channel 8-bit PNGs that store class ids directly
(Cityscapes trainId convention, ``255`` = ignore). Everything else on disk is
either JSON (manifests, reports) or a small little-endian binary container
(``SMAP`` score maps).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np
from PIL import Image

DEFAULT_IGNORE = 255
SMAP_MAGIC = b"SMAP"
SMAP_SUM_TOL = 1e-4

METRIC_NAMES = (
    "miou",
    "ece",
    "nll",
    "auroc",
    "aupr",
    "fpr95",
    "frechet_distance",
    "spectral_distance",
)


class LabelMapError(ValueError):
    """Raised when a label map, score map or manifest violates its format."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LabelMap:
    """A validated ``(H, W)`` grid of class ids.

    Pixels are either a class id in ``[0, n_classes)`` or ``ignore_value``.
    Construction fails on anything else, so an invalid map cannot exist.
    The backing array is made read-only.
    """

    data: np.ndarray
    n_classes: int
    ignore_value: int = DEFAULT_IGNORE

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise LabelMapError(f"label map must be a non-empty 2-D grid, got shape {arr.shape}")
        if not 2 <= self.n_classes <= 256:
            raise LabelMapError(f"n_classes must be in [2, 256], got {self.n_classes}")
        if not 0 <= self.ignore_value <= 255:
            raise LabelMapError(f"ignore_value must fit in 8 bits, got {self.ignore_value}")
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise LabelMapError("label values must fit in 8 bits")
            arr = arr.astype(np.uint8)
        bad = (arr >= self.n_classes) & (arr != self.ignore_value)
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise LabelMapError(
                f"class id out of range at ({x},{y}): {arr[y, x]} >= n_classes={self.n_classes}"
            )
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def valid_mask(self) -> np.ndarray:
        """Boolean mask of non-ignore pixels."""
        return self.data != self.ignore_value

    def replace(self, data: np.ndarray) -> "LabelMap":
        return LabelMap(data, self.n_classes, self.ignore_value)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelMap):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and self.ignore_value == other.ignore_value
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class RgbImage:
    """``(H, W, 3)`` uint8 image."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise LabelMapError(f"RGB image must have shape (H, W, 3), got {arr.shape}")
        if arr.dtype != np.uint8:
            raise LabelMapError(f"RGB image must be uint8, got {arr.dtype}")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RgbImage):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class ScoreMap:
    """Per-pixel score vectors, shape ``(H, W, K)`` float32.

    With ``K >= 2`` the vectors are class probabilities; with ``K == 1`` the
    map holds a single anomaly score per pixel.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) == 0:
            raise LabelMapError(f"score map must have shape (H, W, K), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise LabelMapError("score map contains non-finite values")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def n_classes(self) -> int:
        return self.data.shape[2]

    def check_simplex(self, tol: float = SMAP_SUM_TOL) -> None:
        sums = self.data.astype(np.float64).sum(axis=2)
        dev = np.abs(sums - 1.0)
        if (dev > tol).any() or (self.data < 0).any():
            y, x = np.unravel_index(int(np.argmax(dev)), dev.shape)
            raise LabelMapError(
                f"score vector at ({x},{y}) is not a probability vector (sum={sums[y, x]:.6f})"
            )


# -- PNG I/O -----------------------------------------------------------------


def _open_png(path: Path) -> Image.Image:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    img = Image.open(path)
    if img.format != "PNG":
        raise LabelMapError(f"{path}: expected a PNG file, got {img.format}")
    return img


def _read_index_png(path: Path) -> np.ndarray:
    img = _open_png(path)
    # 'P' images are read as raw palette indices; the palette is never applied.
    if img.mode not in ("L", "P"):
        raise LabelMapError(
            f"{path}: label maps must be single-channel 8-bit PNGs, got mode {img.mode!r}"
        )
    return np.array(img, dtype=np.uint8)


def load_label_map(path: Path | str, manifest: "DatasetManifest") -> LabelMap:
    """Decode a label PNG and validate it against ``manifest``."""
    arr = _read_index_png(Path(path))
    try:
        return LabelMap(arr, manifest.n_classes, manifest.ignore_value)
    except LabelMapError as exc:
        raise LabelMapError(f"{path}: {exc}") from None


def read_label_png(path: Path | str, n_classes: int, ignore_value: int = DEFAULT_IGNORE) -> LabelMap:
    arr = _read_index_png(Path(path))
    return LabelMap(arr, n_classes, ignore_value)


def save_label_map(label_map: LabelMap, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(label_map.data, dtype=np.uint8)).save(path, format="PNG")


def load_binary_mask(path: Path | str) -> np.ndarray:
    """Read a 1-bit (or 0/1 8-bit) PNG into a boolean array."""
    img = _open_png(Path(path))
    if img.mode == "1":
        return np.array(img, dtype=bool)
    if img.mode in ("L", "P"):
        arr = np.array(img)
        if not np.isin(arr, (0, 1, 255)).all():
            raise LabelMapError(f"{path}: binary mask holds values other than 0/1")
        return arr > 0
    raise LabelMapError(f"{path}: binary masks must be 1-bit PNGs, got mode {img.mode!r}")


def save_binary_mask(mask: np.ndarray, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=bool)).save(path, format="PNG")


def load_rgb_image(path: Path | str) -> RgbImage:
    img = _open_png(Path(path))
    if img.mode != "RGB":
        img = img.convert("RGB")
    return RgbImage(np.array(img, dtype=np.uint8))


def save_rgb_image(image: RgbImage, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.data).save(path, format="PNG")


# -- SMAP score maps -----------------------------------------------------------

_SMAP_HEADER = struct.Struct("<4sIII")


def write_score_map(scores: ScoreMap | np.ndarray, path: Path | str) -> None:
    """Write ``scores`` as ``SMAP``: magic, u32 H, W, K, then float32 H*W*K."""
    arr = scores.data if isinstance(scores, ScoreMap) else np.asarray(scores)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, k = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_SMAP_HEADER.pack(SMAP_MAGIC, h, w, k))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_score_map(path: Path | str, *, require_simplex: Optional[bool] = None) -> ScoreMap:
    """Read an ``SMAP`` file.

    ``require_simplex`` defaults to checking the sum-to-one constraint only
    when the map carries two or more classes.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if len(raw) < _SMAP_HEADER.size:
        raise LabelMapError(f"{path}: truncated score map header")
    magic, h, w, k = _SMAP_HEADER.unpack_from(raw)
    if magic != SMAP_MAGIC:
        raise LabelMapError(f"{path}: bad magic {magic!r}, expected {SMAP_MAGIC!r}")
    expected = _SMAP_HEADER.size + 4 * h * w * k
    if len(raw) != expected:
        raise LabelMapError(f"{path}: expected {expected} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", offset=_SMAP_HEADER.size).reshape(h, w, k)
    try:
        smap = ScoreMap(arr)
        if require_simplex if require_simplex is not None else k >= 2:
            smap.check_simplex()
    except LabelMapError as exc:
        raise LabelMapError(f"{path}: {exc}") from None
    return smap


# -- manifests -------------------------------------------------------------------

_ITEM_PATH_KEYS = ("label", "image", "prediction", "scores", "ood_mask")


@dataclass(frozen=True)
class ManifestItem:
    id: str
    label: Path
    image: Optional[Path] = None
    prediction: Optional[Path] = None
    scores: Optional[Path] = None
    ood_mask: Optional[Path] = None

    def paths(self) -> dict[str, Path]:
        return {k: getattr(self, k) for k in _ITEM_PATH_KEYS if getattr(self, k) is not None}


@dataclass(frozen=True)
class DatasetManifest:
    """Self-describing dataset: class count, ignore value and item paths.

    Paths are stored resolved. Files are not touched until an item is
    actually loaded, so a manifest pointing at missing files still loads.
    """

    n_classes: int
    items: tuple[ManifestItem, ...]
    ignore_value: int = DEFAULT_IGNORE
    class_names: Optional[tuple[str, ...]] = None
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not isinstance(self.n_classes, int) or self.n_classes < 2:
            raise LabelMapError(f"n_classes must be an integer >= 2, got {self.n_classes!r}")
        if self.n_classes > 256:
            raise LabelMapError(f"n_classes must be <= 256 for 8-bit label maps, got {self.n_classes}")
        if not isinstance(self.ignore_value, int) or not 0 <= self.ignore_value <= 255:
            raise LabelMapError(f"ignore_value must be in [0, 255], got {self.ignore_value!r}")
        seen: set[str] = set()
        for item in self.items:
            if item.id in seen:
                raise LabelMapError(f"duplicate item id {item.id!r}")
            seen.add(item.id)
            paths = list(item.paths().values())
            if len(set(paths)) != len(paths):
                raise LabelMapError(f"item {item.id!r} lists the same path twice")
        if self.class_names is not None and len(self.class_names) != self.n_classes:
            raise LabelMapError(
                f"class_names has {len(self.class_names)} entries, n_classes is {self.n_classes}"
            )

    def __len__(self) -> int:
        return len(self.items)

    def item(self, item_id: str) -> ManifestItem:
        for it in self.items:
            if it.id == item_id:
                return it
        raise KeyError(item_id)

    def load_label(self, item: ManifestItem | str) -> LabelMap:
        if isinstance(item, str):
            item = self.item(item)
        return load_label_map(item.label, self)

    def load_prediction(self, item: ManifestItem) -> LabelMap:
        if item.prediction is None:
            raise LabelMapError(f"item {item.id!r} has no prediction")
        return load_label_map(item.prediction, self)

    def with_items(self, items: Iterable[ManifestItem], **extra: Any) -> "DatasetManifest":
        return DatasetManifest(
            n_classes=self.n_classes,
            items=tuple(items),
            ignore_value=self.ignore_value,
            class_names=self.class_names,
            extra=extra,
        )


def load_manifest(path: Path | str) -> DatasetManifest:
    """Parse a manifest JSON; relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise LabelMapError(f"{path}: cannot parse manifest: {exc}") from None
    return manifest_from_dict(doc, path.resolve().parent)


def manifest_from_dict(doc: Any, root: Path) -> DatasetManifest:
    if not isinstance(doc, dict):
        raise LabelMapError("manifest must be a JSON object")
    if "n_classes" not in doc or "items" not in doc:
        raise LabelMapError("manifest requires 'n_classes' and 'items'")
    items = []
    for i, raw in enumerate(doc["items"]):
        if not isinstance(raw, dict) or "id" not in raw or "label" not in raw:
            raise LabelMapError(f"manifest item #{i} requires 'id' and 'label'")
        kwargs = {
            k: (root / raw[k]).resolve() for k in _ITEM_PATH_KEYS if raw.get(k) is not None
        }
        items.append(ManifestItem(id=str(raw["id"]), **kwargs))
    names = doc.get("class_names")
    return DatasetManifest(
        n_classes=doc["n_classes"],
        items=tuple(items),
        ignore_value=doc.get("ignore_value", DEFAULT_IGNORE),
        class_names=tuple(names) if names is not None else None,
        extra={k: v for k, v in doc.items() if k not in ("n_classes", "ignore_value", "items", "class_names")},
    )


def _portable(p: Path, root: Path) -> str:
    # Paths under the manifest directory are stored relative, others absolute.
    try:
        return p.relative_to(root).as_posix()
    except ValueError:
        return p.as_posix()


def manifest_to_dict(manifest: DatasetManifest, root: Path) -> dict[str, Any]:
    root = Path(root).resolve()
    doc: dict[str, Any] = {
        "n_classes": manifest.n_classes,
        "ignore_value": manifest.ignore_value,
        "items": [
            {"id": it.id, **{k: _portable(v, root) for k, v in it.paths().items()}}
            for it in manifest.items
        ],
    }
    if manifest.class_names is not None:
        doc["class_names"] = list(manifest.class_names)
    doc.update(manifest.extra)
    return doc


def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = manifest_to_dict(manifest, path.parent)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def safe_item_filename(item_id: str) -> str:
    if not item_id or item_id.startswith(".") or os.sep in item_id or "/" in item_id or "\\" in item_id:
        raise LabelMapError(f"item id {item_id!r} cannot be used as a file name")
    return item_id


# -- reports ---------------------------------------------------------------------

EVAL_REPORT_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["metrics", "provenance"],
    "properties": {
        "metrics": {
            "type": "object",
            "propertyNames": {"enum": list(METRIC_NAMES)},
            "additionalProperties": {"type": "number"},
        },
        "details": {"type": "object"},
        "provenance": {
            "type": "object",
            "required": ["master_seed", "tool_version", "config_digest", "item_count"],
            "properties": {
                "master_seed": {"type": ["integer", "null"]},
                "tool_version": {"type": "string"},
                "config_digest": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                "item_count": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


@dataclass(frozen=True)
class EvalReport:
    metrics: dict[str, float]
    master_seed: Optional[int]
    tool_version: str
    config_digest: str
    item_count: int
    details: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        unknown = set(self.metrics) - set(METRIC_NAMES)
        if unknown:
            raise ValueError(f"unknown metric names: {sorted(unknown)}")

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "metrics": {k: float(v) for k, v in self.metrics.items()},
            "provenance": {
                "master_seed": self.master_seed,
                "tool_version": self.tool_version,
                "config_digest": self.config_digest,
                "item_count": self.item_count,
            },
        }
        if self.details:
            doc["details"] = self.details
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
