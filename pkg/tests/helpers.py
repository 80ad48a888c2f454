"""Fixture builders shared by the CLI and acceptance tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from segrobust.labelmap import load_binary_mask, load_manifest, write_score_map


def tree_bytes(root: Path) -> dict[str, bytes]:
    root = Path(root)
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def self_prediction_manifest(manifest_path: Path, out: Path) -> Path:
    """Copy of a manifest whose predictions are its own labels."""
    m = load_manifest(manifest_path)
    doc = {
        "n_classes": m.n_classes,
        "ignore_value": m.ignore_value,
        "items": [{"id": it.id, "label": str(it.label), "prediction": str(_alias(it.label, out))}
                  for it in m.items],
    }
    out.write_text(json.dumps(doc))
    return out


def _alias(label: Path, out: Path) -> Path:
    # Paths within an item must be distinct, so predictions point at a copy.
    copy = out.parent / "pred" / label.name
    copy.parent.mkdir(parents=True, exist_ok=True)
    copy.write_bytes(label.read_bytes())
    return copy


def anomaly_manifest(outlier_manifest: Path, out: Path, seed: int = 0) -> Path:
    """Attach noisy one-channel anomaly maps (higher on injected pixels)."""
    rng = np.random.default_rng(seed)
    m = load_manifest(outlier_manifest)
    items = []
    for it in m.items:
        ood = load_binary_mask(it.ood_mask)
        scores = rng.normal(size=ood.shape) + 2.0 * ood
        smap = out.parent / "anomaly" / f"{it.id}.smap"
        write_score_map(scores.astype(np.float32), smap)
        items.append({"id": it.id, "label": str(it.label), "ood_mask": str(it.ood_mask), "scores": str(smap)})
    out.write_text(json.dumps({"n_classes": m.n_classes, "ignore_value": m.ignore_value, "items": items}))
    return out


def image_list(manifest_path: Path, out: Path) -> Path:
    m = load_manifest(manifest_path)
    out.write_text("".join(f"{it.image}\n" for it in m.items))
    return out
