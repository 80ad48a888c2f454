"""``segrobust`` command line.

Exit codes: 0 on success, 2 on usage errors (argparse), 1 on runtime
failures. Generation commands build their output tree in a scratch
directory next to ``--out`` and swap it in only once everything is written.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from ._util import atomic_output_dir, atomic_write_text, default_workers, parallel_map
from .injection import (
    DEFAULT_MIN_AREA,
    InjectionPolicy,
    extract_object_masks,
    generate_corrupted_variant,
    generate_outlier_variant,
    load_bank,
    save_bank,
    synthetic_silhouettes,
)
from .labelmap import (
    DatasetManifest,
    EvalReport,
    LabelMapError,
    ManifestItem,
    load_binary_mask,
    load_manifest,
    load_rgb_image,
    read_score_map,
    save_manifest,
)
from .metrics import (
    DEFAULT_BINS,
    BinaryScoreSet,
    CalibrationAccumulator,
    ConfusionMatrix,
    binary_curves,
    calibration_update,
    finalize_calibration,
    fit_feature_stats,
    frechet_distance,
    miou,
    update_confusion,
)
from .morphology import SHAPES, default_order, generate_morphological_variant, load_order
from .spectral import FILTER_CUTOFFS, spectral_distance

log = logging.getLogger("segrobust")

COMMANDS = ("morph", "extract-masks", "inject", "silhouettes", "eval-seg", "eval-ood", "frechet", "spectral")
STOCHASTIC = frozenset({"inject"})
# Options that never change results and are left out of the config digest.
_NON_SEMANTIC = frozenset({"out", "workers"})


class UsageError(Exception):
    def __init__(self, flag: str, message: str) -> None:
        super().__init__(f"{flag}: {message}")
        self.flag = flag


@dataclass
class RunConfig:
    command: str
    options: dict[str, Any] = field(default_factory=dict)
    master_seed: Optional[int] = None
    worker_count: int = 1

    def digest(self) -> str:
        canon = {
            "command": self.command,
            "master_seed": self.master_seed,
            "options": {k: v for k, v in sorted(self.options.items()) if k not in _NON_SEMANTIC},
        }
        blob = json.dumps(canon, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def provenance(self, item_count: int) -> dict[str, Any]:
        return {
            "master_seed": self.master_seed,
            "tool_version": __version__,
            "config_digest": self.digest(),
            "item_count": item_count,
        }


# -- parsing -------------------------------------------------------------------


def _int_list(text: str, flag: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(flag, f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise UsageError(flag, "expected at least one integer")
    return vals


def _count_range(text: str) -> tuple[int, int]:
    parts = text.split(":")
    try:
        if len(parts) == 1:
            lo = hi = int(parts[0])
        elif len(parts) == 2:
            lo, hi = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise UsageError("--count", f"expected MIN:MAX, got {text!r}") from None
    if not 0 <= lo <= hi:
        raise UsageError("--count", f"need 0 <= MIN <= MAX, got {text!r}")
    return lo, hi


def _abs(p: Optional[str]) -> Optional[str]:
    return None if p is None else str(Path(p).resolve())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segrobust",
        description="Label-map perturbation and robustness metrics for semantic segmentation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (required for inject)")
    common.add_argument("--workers", type=int, default=None, help="worker threads (default: CPU count)")
    common.add_argument("--out", required=True, help="output directory, or report path ('-' for stdout)")

    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("morph", parents=[common], help="morphological label-map variants")
    p.add_argument("--manifest", required=True)
    p.add_argument("--op", choices=("dilate", "erode"), default="dilate")
    p.add_argument("--shape", choices=SHAPES, default="square")
    p.add_argument("--severities", default="1,2,3,4,5", help="comma-separated SE radii")
    p.add_argument("--order", default=None, help="class-priority JSON (default: Cityscapes order)")

    p = sub.add_parser("extract-masks", parents=[common], help="build an object-mask bank")
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", action="append", required=True,
                   help="comma-separated class ids forming one class set; repeatable")
    p.add_argument("--min-area", type=int, default=DEFAULT_MIN_AREA)
    p.add_argument("--preserve-classes", action="store_true",
                   help="keep per-pixel classes of multi-class objects")

    p = sub.add_parser("inject", parents=[common], help="corrupted/outlier label-map variants")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank", required=True, help="bank directory or index.json")
    p.add_argument("--mode", choices=("corrupted", "outlier"), required=True)
    p.add_argument("--count", default="1:3", help="objects per image, MIN:MAX")
    p.add_argument("--relabel", type=int, default=None, help="class painted for every injected object")

    sub.add_parser("silhouettes", parents=[common], help="write the built-in synthetic outlier shapes")

    p = sub.add_parser("eval-seg", parents=[common], help="mIoU (+ ECE/NLL when score maps exist)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)

    p = sub.add_parser("eval-ood", parents=[common], help="AUROC / AUPR / FPR95 from anomaly maps")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("frechet", parents=[common], help="Fréchet distance between feature files")
    p.add_argument("--features-a", required=True)
    p.add_argument("--features-b", required=True)

    p = sub.add_parser("spectral", parents=[common], help="spectral distance between image sets")
    p.add_argument("--set-a", required=True, help="text file listing PNG paths, one per line")
    p.add_argument("--set-b", required=True)
    p.add_argument("--filter-rate", type=int, choices=sorted(FILTER_CUTOFFS), default=0)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Validate every option before any file is touched."""
    cmd = args.command
    workers = default_workers() if args.workers is None else args.workers
    if workers < 1:
        raise UsageError("--workers", "must be >= 1")
    if cmd in STOCHASTIC and args.seed is None:
        raise UsageError("--seed", f"required for {cmd}")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        raise UsageError("--seed", "must be an unsigned 64-bit integer")
    opts: dict[str, Any] = {"out": args.out}
    if cmd == "morph":
        sev = _int_list(args.severities, "--severities")
        if any(s < 0 for s in sev) or any(b <= a for a, b in zip(sev, sev[1:])):
            raise UsageError("--severities", "radii must be >= 0 and strictly increasing")
        opts.update(manifest=_abs(args.manifest), op=args.op, shape=args.shape,
                    severities=sev, order=_abs(args.order))
    elif cmd == "extract-masks":
        sets = [_int_list(c, "--classes") for c in args.classes]
        if args.min_area < 1:
            raise UsageError("--min-area", "must be >= 1")
        opts.update(manifest=_abs(args.manifest), classes=sets, min_area=args.min_area,
                    preserve_classes=args.preserve_classes)
    elif cmd == "inject":
        if args.mode == "outlier" and args.relabel is None:
            raise UsageError("--relabel", "required in outlier mode")
        if args.relabel is not None and not 0 <= args.relabel <= 255:
            raise UsageError("--relabel", "must be a class id in [0, 255]")
        opts.update(manifest=_abs(args.manifest), bank=_abs(args.bank), mode=args.mode,
                    count=list(_count_range(args.count)), relabel=args.relabel)
    elif cmd == "eval-seg":
        if args.bins < 1:
            raise UsageError("--bins", "must be >= 1")
        opts.update(manifest=_abs(args.manifest), bins=args.bins)
    elif cmd == "eval-ood":
        opts.update(manifest=_abs(args.manifest))
    elif cmd == "frechet":
        opts.update(features_a=_abs(args.features_a), features_b=_abs(args.features_b))
    elif cmd == "spectral":
        opts.update(set_a=_abs(args.set_a), set_b=_abs(args.set_b), filter_rate=args.filter_rate)
    return RunConfig(cmd, opts, args.seed, workers)


# -- commands ---------------------------------------------------------------------


def _stamp(manifest: DatasetManifest, cfg: RunConfig, path: Path) -> None:
    extra = dict(manifest.extra, provenance=cfg.provenance(len(manifest)))
    save_manifest(manifest.with_items(manifest.items, **extra), path)


def cmd_morph(cfg: RunConfig) -> None:
    o = cfg.options
    manifest = load_manifest(o["manifest"])
    order = load_order(o["order"]) if o["order"] else default_order()
    with atomic_output_dir(o["out"]) as tmp:
        outs = generate_morphological_variant(manifest, o["shape"], o["severities"], o["op"],
                                              tmp, order=order, workers=cfg.worker_count)
        for sev, out in zip(o["severities"], outs):
            _stamp(out, cfg, tmp / f"{o['op']}_{o['shape']}_r{sev}" / "manifest.json")


def cmd_extract(cfg: RunConfig) -> None:
    o = cfg.options
    manifest = load_manifest(o["manifest"])
    bank = extract_object_masks(manifest, o["classes"], min_area=o["min_area"],
                                preserve_classes=o["preserve_classes"], workers=cfg.worker_count)
    log.info("extracted %d object masks", len(bank))
    with atomic_output_dir(o["out"]) as tmp:
        save_bank(bank, tmp)


def cmd_silhouettes(cfg: RunConfig) -> None:
    with atomic_output_dir(cfg.options["out"]) as tmp:
        save_bank(synthetic_silhouettes(), tmp)


def cmd_inject(cfg: RunConfig) -> None:
    o = cfg.options
    manifest = load_manifest(o["manifest"])
    bank = load_bank(o["bank"])
    policy = InjectionPolicy(tuple(o["count"]), o["relabel"], cfg.master_seed)
    gen = generate_outlier_variant if o["mode"] == "outlier" else generate_corrupted_variant
    with atomic_output_dir(o["out"]) as tmp:
        out = gen(manifest, bank, policy, tmp, workers=cfg.worker_count)
        _stamp(out, cfg, tmp / "manifest.json")


def evaluate_segmentation(manifest: DatasetManifest, n_bins: int = DEFAULT_BINS,
                          workers: Optional[int] = None) -> tuple[dict[str, float], dict[str, Any]]:
    with_scores = [it.scores is not None for it in manifest.items]
    if any(with_scores) and not all(with_scores):
        raise LabelMapError("either every item or no item must list a score map")
    calibrate = bool(with_scores) and all(with_scores)

    def work(item: ManifestItem):
        if item.prediction is None:
            raise LabelMapError(f"item {item.id!r} has no prediction")
        gt = manifest.load_label(item)
        cm = update_confusion(ConfusionMatrix(manifest.n_classes), gt, manifest.load_prediction(item))
        acc = None
        if calibrate:
            acc = calibration_update(CalibrationAccumulator(n_bins), read_score_map(item.scores), gt)
        return cm, acc

    parts = parallel_map(work, manifest.items, workers)
    if not parts:
        raise LabelMapError("manifest has no items")
    cm = parts[0][0]
    for other, _ in parts[1:]:
        cm = cm.merge(other)
    seg = miou(cm)
    metrics = {"miou": seg["miou"]}
    details: dict[str, Any] = {"per_class_iou": seg["per_class"]}
    if calibrate:
        acc = parts[0][1]
        for _, other in parts[1:]:
            acc = acc.merge(other)
        metrics.update(finalize_calibration(acc))
        details.update(n_bins=n_bins, calibrated_pixels=acc.pixel_count)
    if manifest.class_names:
        details["class_names"] = list(manifest.class_names)
    return metrics, details


def evaluate_ood(manifest: DatasetManifest, workers: Optional[int] = None) -> tuple[dict[str, float], dict[str, Any]]:
    def work(item: ManifestItem) -> BinaryScoreSet:
        if item.scores is None or item.ood_mask is None:
            raise LabelMapError(f"item {item.id!r} needs both 'scores' and 'ood_mask'")
        smap = read_score_map(item.scores, require_simplex=False)
        if smap.n_classes != 1:
            raise LabelMapError(f"{item.scores}: anomaly maps must have exactly one channel")
        mask = load_binary_mask(item.ood_mask)
        if mask.shape != (smap.height, smap.width):
            raise LabelMapError(f"item {item.id!r}: OOD mask and score map sizes differ")
        keep = np.ones(mask.shape, dtype=bool)
        if item.label.is_file():
            gt = manifest.load_label(item)
            if gt.shape == mask.shape:
                keep = gt.valid_mask() | mask
        return BinaryScoreSet(smap.data[:, :, 0][keep], mask[keep])

    sets = parallel_map(work, manifest.items, workers)
    if not sets:
        raise LabelMapError("manifest has no items")
    merged = BinaryScoreSet.concat(sets)
    metrics = binary_curves(merged)
    return metrics, {"pixels": len(merged), "positives": int(merged.labels.sum())}


def _emit(report: EvalReport, out: str) -> None:
    if out == "-":
        sys.stdout.write(report.to_json())
    else:
        atomic_write_text(out, report.to_json())


def cmd_eval_seg(cfg: RunConfig) -> None:
    manifest = load_manifest(cfg.options["manifest"])
    metrics, details = evaluate_segmentation(manifest, cfg.options["bins"], cfg.worker_count)
    _emit(EvalReport(metrics, details=details, item_count=len(manifest), **_prov(cfg)), cfg.options["out"])


def cmd_eval_ood(cfg: RunConfig) -> None:
    manifest = load_manifest(cfg.options["manifest"])
    metrics, details = evaluate_ood(manifest, cfg.worker_count)
    _emit(EvalReport(metrics, details=details, item_count=len(manifest), **_prov(cfg)), cfg.options["out"])


def cmd_frechet(cfg: RunConfig) -> None:
    a = fit_feature_stats(cfg.options["features_a"])
    b = fit_feature_stats(cfg.options["features_b"])
    d = frechet_distance(a, b)
    details = {"dim": a.dim, "count_a": a.count, "count_b": b.count}
    _emit(EvalReport({"frechet_distance": d}, details=details, item_count=a.count + b.count, **_prov(cfg)),
          cfg.options["out"])


def read_image_list(path: str | Path) -> list[Path]:
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines()]
    return [(path.parent / ln).resolve() for ln in lines if ln and not ln.startswith("#")]


def cmd_spectral(cfg: RunConfig) -> None:
    o = cfg.options
    paths_a, paths_b = read_image_list(o["set_a"]), read_image_list(o["set_b"])
    if len(paths_a) != len(paths_b):
        raise LabelMapError(f"image lists differ in length: {len(paths_a)} vs {len(paths_b)}")
    set_a = parallel_map(load_rgb_image, paths_a, cfg.worker_count)
    set_b = parallel_map(load_rgb_image, paths_b, cfg.worker_count)
    d = spectral_distance(set_a, set_b, o["filter_rate"])
    details = {"filter_rate": o["filter_rate"], "cutoff": FILTER_CUTOFFS[o["filter_rate"]]}
    _emit(EvalReport({"spectral_distance": d}, details=details, item_count=len(set_a), **_prov(cfg)), o["out"])


def _prov(cfg: RunConfig) -> dict[str, Any]:
    return {"master_seed": cfg.master_seed, "tool_version": __version__, "config_digest": cfg.digest()}


_DISPATCH = {
    "morph": cmd_morph,
    "extract-masks": cmd_extract,
    "inject": cmd_inject,
    "silhouettes": cmd_silhouettes,
    "eval-seg": cmd_eval_seg,
    "eval-ood": cmd_eval_ood,
    "frechet": cmd_frechet,
    "spectral": cmd_spectral,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"segrobust {args.command}: error: argument {exc}", file=sys.stderr)
        return 2
    try:
        _DISPATCH[cfg.command](cfg)
    except (LabelMapError, ValueError, OSError, KeyError) as exc:
        print(f"segrobust {cfg.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
