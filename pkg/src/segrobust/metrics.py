"""Segmentation, calibration, OOD-detection and Fréchet-distance metrics.

Accumulators (:class:`ConfusionMatrix`, :class:`CalibrationAccumulator`)
are mergeable, so datasets can be sharded across workers and summed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .labelmap import LabelMap, LabelMapError, ScoreMap

NLL_FLOOR = 1e-12
DEFAULT_BINS = 15
FVEC_MAGIC = b"FVEC"
_FVEC_HEADER = struct.Struct("<4sII")


# -- mIoU ------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions.

    ``missed`` counts, per GT class, pixels whose prediction is the ignore
    value; they are false negatives without a matching false positive.
    """

    n_classes: int
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]
    missed: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        n = self.n_classes
        self.counts = np.zeros((n, n), np.int64) if self.counts is None else np.asarray(self.counts, np.int64)
        self.missed = np.zeros(n, np.int64) if self.missed is None else np.asarray(self.missed, np.int64)
        if self.counts.shape != (n, n) or self.missed.shape != (n,):
            raise ValueError(f"counts must be {n}x{n} and missed length {n}")
        if (self.counts < 0).any() or (self.missed < 0).any():
            raise ValueError("confusion counts must be non-negative")

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.n_classes, self.counts + other.counts, self.missed + other.missed)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return self.merge(other)


def update_confusion(cm: ConfusionMatrix, gt: LabelMap, pred: LabelMap) -> ConfusionMatrix:
    """Tally ``gt`` vs ``pred`` into a new matrix; ignore-labelled GT is skipped."""
    if gt.shape != pred.shape:
        raise ValueError(f"dimension mismatch: gt {gt.shape} vs prediction {pred.shape}")
    if gt.n_classes != cm.n_classes or pred.n_classes != cm.n_classes:
        raise ValueError("label maps and confusion matrix disagree on n_classes")
    g = gt.data.ravel().astype(np.int64)
    p = pred.data.ravel().astype(np.int64)
    keep = g != gt.ignore_value
    g, p = g[keep], p[keep]
    n = cm.n_classes
    in_space = p < n
    counts = np.bincount(g[in_space] * n + p[in_space], minlength=n * n).reshape(n, n)
    missed = np.bincount(g[~in_space], minlength=n)
    return ConfusionMatrix(n, cm.counts + counts, cm.missed + missed)


def miou(cm: ConfusionMatrix) -> dict:
    """Mean IoU over classes with a non-zero union.

    Returns ``{"miou": float, "per_class": [float | None, ...]}``; excluded
    classes appear as ``None``.
    """
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp + cm.missed
    denom = tp + fp + fn
    present = denom > 0
    if not present.any():
        raise ValueError("empty IoU mean: no class appears in ground truth or prediction")
    iou = np.divide(tp, denom, out=np.zeros_like(tp), where=present)
    per_class = [float(v) if ok else None for v, ok in zip(iou, present)]
    return {"miou": float(iou[present].mean()), "per_class": per_class}


# -- calibration ---------------------------------------------------------------------


@dataclass
class CalibrationAccumulator:
    """Equal-width confidence bins over ``(0, 1]`` plus an NLL running sum."""

    n_bins: int = DEFAULT_BINS
    conf_sum: np.ndarray = field(default=None)  # type: ignore[assignment]
    correct: np.ndarray = field(default=None)  # type: ignore[assignment]
    total: np.ndarray = field(default=None)  # type: ignore[assignment]
    nll_sum: float = 0.0
    pixel_count: int = 0

    def __post_init__(self) -> None:
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.conf_sum is None:
            self.conf_sum = np.zeros(self.n_bins, dtype=np.float64)
        if self.correct is None:
            self.correct = np.zeros(self.n_bins, dtype=np.int64)
        if self.total is None:
            self.total = np.zeros(self.n_bins, dtype=np.int64)

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_bins + 1)

    def add(self, probs: np.ndarray, targets: np.ndarray) -> "CalibrationAccumulator":
        """Fold in ``probs`` of shape ``(N, K)`` with integer ``targets`` ``(N,)``."""
        probs = np.asarray(probs, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.int64)
        if probs.ndim != 2 or targets.shape != (probs.shape[0],):
            raise ValueError("probs must be (N, K) and targets (N,)")
        conf = probs.max(axis=1)
        pred = probs.argmax(axis=1)
        hit = pred == targets
        # Bin b holds (edges[b], edges[b+1]]; confidence 0 falls in bin 0.
        b = np.clip(np.searchsorted(self.edges, conf, side="left") - 1, 0, self.n_bins - 1)
        p_true = probs[np.arange(len(targets)), targets]
        return CalibrationAccumulator(
            self.n_bins,
            self.conf_sum + np.bincount(b, weights=conf, minlength=self.n_bins),
            self.correct + np.bincount(b, weights=hit, minlength=self.n_bins).astype(np.int64),
            self.total + np.bincount(b, minlength=self.n_bins),
            self.nll_sum + float(-np.log(np.maximum(p_true, NLL_FLOOR)).sum()),
            self.pixel_count + len(targets),
        )

    def merge(self, other: "CalibrationAccumulator") -> "CalibrationAccumulator":
        if other.n_bins != self.n_bins:
            raise ValueError("cannot merge accumulators with different bin counts")
        return CalibrationAccumulator(
            self.n_bins,
            self.conf_sum + other.conf_sum,
            self.correct + other.correct,
            self.total + other.total,
            self.nll_sum + other.nll_sum,
            self.pixel_count + other.pixel_count,
        )

    def __add__(self, other: "CalibrationAccumulator") -> "CalibrationAccumulator":
        return self.merge(other)


def calibration_update(acc: CalibrationAccumulator, scores: ScoreMap, gt: LabelMap) -> CalibrationAccumulator:
    if (scores.height, scores.width) != gt.shape:
        raise ValueError(f"dimension mismatch: scores {scores.data.shape[:2]} vs gt {gt.shape}")
    if scores.n_classes != gt.n_classes:
        raise ValueError(f"score map has {scores.n_classes} classes, labels have {gt.n_classes}")
    try:
        scores.check_simplex()
    except LabelMapError as exc:
        raise ValueError(f"malformed score map: {exc}") from None
    keep = gt.valid_mask().ravel()
    probs = scores.data.reshape(-1, scores.n_classes)[keep]
    return acc.add(probs, gt.data.ravel()[keep])


def finalize_calibration(acc: CalibrationAccumulator) -> dict:
    """``{"ece": ..., "nll": ...}`` from a non-empty accumulator."""
    if acc.pixel_count <= 0:
        raise ValueError("empty calibration accumulator")
    n = acc.pixel_count
    nz = acc.total > 0
    gap = np.abs(acc.correct[nz] / acc.total[nz] - acc.conf_sum[nz] / acc.total[nz])
    ece = float((acc.total[nz] / n * gap).sum())
    return {"ece": min(max(ece, 0.0), 1.0), "nll": acc.nll_sum / n}


# -- OOD detection curves -----------------------------------------------------------------


@dataclass(frozen=True)
class BinaryScoreSet:
    """Detection scores; label 1 marks the positive (OOD) class, higher score = more positive."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        y = np.asarray(self.labels).ravel()
        if s.shape != y.shape:
            raise ValueError("scores and labels must have the same length")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        if not np.isfinite(s).all():
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y.astype(bool))

    def __len__(self) -> int:
        return len(self.scores)

    @classmethod
    def concat(cls, sets: Sequence["BinaryScoreSet"]) -> "BinaryScoreSet":
        return cls(np.concatenate([s.scores for s in sets]), np.concatenate([s.labels for s in sets]))


def roc_points(bs: BinaryScoreSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC vertices at every distinct threshold, from (0, 0) to (1, 1).

    Returns ``(fpr, tpr, thresholds)``; the first vertex has threshold +inf.
    A sample is flagged positive when its score is >= the threshold.
    """
    n_pos = int(bs.labels.sum())
    n_neg = len(bs) - n_pos
    if n_pos == 0:
        raise ValueError("degenerate score set: no positive (label 1) samples")
    if n_neg == 0:
        raise ValueError("degenerate score set: no negative (label 0) samples")
    order = np.argsort(-bs.scores, kind="mergesort")
    s = bs.scores[order]
    y = bs.labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    thr = np.r_[np.inf, s[last]]
    return fpr, tpr, thr


def binary_curves(bs: BinaryScoreSet, recall_level: float = 0.95) -> dict:
    """AUROC (trapezoid), AUPR (average precision) and FPR at 95 % TPR."""
    fpr, tpr, _ = roc_points(bs)
    auroc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))

    n_pos = int(bs.labels.sum())
    n_neg = len(bs) - n_pos
    tp = tpr[1:] * n_pos
    fp = fpr[1:] * n_neg
    precision = tp / (tp + fp)
    aupr = float(np.sum(np.diff(tpr) * precision))

    k = int(np.argmax(tpr >= recall_level - 1e-12))
    if k == 0:
        fpr95 = 0.0
    else:
        t0, t1 = tpr[k - 1], tpr[k]
        f0, f1 = fpr[k - 1], fpr[k]
        fpr95 = float(f0 + (recall_level - t0) * (f1 - f0) / (t1 - t0))
    return {"auroc": auroc, "aupr": aupr, "fpr95": min(max(fpr95, 0.0), 1.0)}


# -- Fréchet distance ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self) -> None:
        mu = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if mu.ndim != 1 or cov.shape != (mu.size, mu.size):
            raise ValueError(f"mean {mu.shape} and covariance {cov.shape} are inconsistent")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-8):
            raise ValueError("covariance is not symmetric")
        if self.count < 2:
            raise ValueError("feature statistics need at least 2 samples")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "covariance", (cov + cov.T) / 2.0)

    @property
    def dim(self) -> int:
        return self.mean.size


def write_features(features: np.ndarray, path: Path | str) -> None:
    arr = np.atleast_2d(np.asarray(features))
    count, dim = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_FVEC_HEADER.pack(FVEC_MAGIC, count, dim))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_features(path: Path | str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _FVEC_HEADER.size:
        raise ValueError(f"{path}: truncated feature file")
    magic, count, dim = _FVEC_HEADER.unpack_from(raw)
    if magic != FVEC_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {FVEC_MAGIC!r}")
    expected = _FVEC_HEADER.size + 4 * count * dim
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {count}x{dim} features, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=_FVEC_HEADER.size).reshape(count, dim)


def fit_feature_stats(features) -> FeatureStats:
    """Sample mean and unbiased covariance of a feature file or ``(N, D)`` array."""
    if isinstance(features, (str, Path)):
        features = read_features(features)
    try:
        x = np.asarray(features, dtype=np.float64)
    except ValueError:
        raise ValueError("feature rows have inconsistent dimensions") from None
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("features must be a 2-D (count, dim) array")
    if x.shape[0] < 2:
        raise ValueError(f"need at least 2 feature vectors, got {x.shape[0]}")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (x.shape[0] - 1)
    return FeatureStats(mu, (cov + cov.T) / 2.0, x.shape[0])


def _psd_eigh(mat: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh((mat + mat.T) / 2.0)
    tol = 1e-6 * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol:
        raise ValueError(f"{what} is indefinite (smallest eigenvalue {w.min():.3e})")
    return np.clip(w, 0.0, None), v


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    wa, va = _psd_eigh(a.covariance, "first covariance")
    _psd_eigh(b.covariance, "second covariance")
    sqrt_a = (va * np.sqrt(wa)) @ va.T
    inner = sqrt_a @ b.covariance @ sqrt_a
    w_inner = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_cross = float(np.sqrt(np.clip(w_inner, 0.0, None)).sum())
    diff = a.mean - b.mean
    d = float(diff @ diff) + float(np.trace(a.covariance) + np.trace(b.covariance)) - 2.0 * tr_cross
    return max(d, 0.0)

