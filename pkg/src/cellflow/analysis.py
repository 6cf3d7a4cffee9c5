"""Regression and burst-classification metrics, burst threshold derivation, and
seeded K-Means clustering over a bin-size x feature-subset grid."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, Mapping, Sequence

import numpy as np

from .features import BinnedSample

CLUSTER_FEATURE_SUBSETS = (
    ("uplink_count", "downlink_count"),
    ("uplink_count", "downlink_count", "ud_ratio"),
)
CLUSTER_BIN_SIZES = (1.0, 30.0, 60.0)


def rmse(predicted: np.ndarray, actual: np.ndarray) -> float:
    """Root mean squared error between two equal-length series."""
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {actual.shape}")
    if predicted.size == 0:
        raise ValueError("cannot compute RMSE of empty series")
    return float(np.sqrt(np.mean((predicted - actual) ** 2)))


def burst_threshold(train_targets: np.ndarray) -> float:
    """Burst threshold: the mean uplink packet count of the training targets."""
    train_targets = np.asarray(train_targets, dtype=np.float64)
    if train_targets.size == 0:
        raise ValueError("cannot derive a burst threshold from an empty series")
    return float(train_targets.mean())


def label_bursts(values: np.ndarray, threshold: float) -> np.ndarray:
    """A value is a burst iff it strictly exceeds the threshold."""
    if not math.isfinite(threshold):
        raise ValueError(f"threshold must be finite, got {threshold}")
    return np.asarray(values, dtype=np.float64) > threshold


@dataclass(frozen=True)
class BurstReport:
    """Confusion counts and the derived classification metrics for burst
    detection. ``zero_division`` flags that precision or recall had an empty
    denominator and was defined as 0."""

    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    zero_division: bool = False

    @property
    def confusion(self) -> tuple[int, int, int, int]:
        return (self.tp, self.fp, self.fn, self.tn)


def classification_report(predicted: np.ndarray, actual: np.ndarray, threshold: float = float("nan")) -> BurstReport:
    """Standard binary-classification metrics; zero-denominator precision or
    recall is defined as 0 and flagged."""
    predicted = np.asarray(predicted, dtype=bool)
    actual = np.asarray(actual, dtype=bool)
    if predicted.shape != actual.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {actual.shape}")
    if predicted.size == 0:
        raise ValueError("cannot build a report from empty series")

    tp = int((predicted & actual).sum())
    fp = int((predicted & ~actual).sum())
    fn = int((~predicted & actual).sum())
    tn = int((~predicted & ~actual).sum())
    n = tp + fp + fn + tn

    zero_division = (tp + fp == 0) or (tp + fn == 0)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return BurstReport(
        threshold=threshold,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
        accuracy=(tp + tn) / n,
        precision=precision,
        recall=recall,
        f1=f1,
        zero_division=zero_division,
    )


@dataclass(frozen=True)
class ClusterResult:
    k: int
    centroids: np.ndarray  # (k, d)
    assignments: np.ndarray  # (n,) ints in [0, k)
    inertia: float
    iterations: int
    feature_subset: tuple[str, ...] = ()
    inertia_history: tuple[float, ...] = ()


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: subsequent centers drawn proportionally to squared
    distance from the nearest center already chosen."""
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total == 0 else rng.choice(n, p=d2 / total)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int):
    k = len(centroids)
    prev_labels = None
    history: list[float] = []
    iterations = 0
    labels = np.zeros(len(points), dtype=np.intp)
    for _ in range(max_iter):
        iterations += 1
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)

        # re-seed each empty cluster to the point currently farthest from its
        # assigned centroid; zero that point's distance so a second empty
        # cluster cannot steal the same point
        assigned_d2 = np.take_along_axis(d2, labels[:, None], axis=1)[:, 0]
        for j in range(k):
            if not (labels == j).any():
                idx = int(assigned_d2.argmax())
                centroids[j] = points[idx]
                labels[idx] = j
                assigned_d2[idx] = 0.0

        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        for j in range(k):
            centroids[j] = points[labels == j].mean(axis=0)
        inertia = float(((points - centroids[labels]) ** 2).sum())
        if history:
            assert inertia <= history[-1] + 1e-9, "inertia increased across a Lloyd iteration"
        history.append(inertia)
        prev_labels = labels

    inertia = float(((points - centroids[labels]) ** 2).sum())
    return labels, centroids, inertia, iterations, history


def kmeans(
    points,
    k: int,
    seed,
    max_iter: int = 300,
    n_init: int = 10,
) -> ClusterResult:
    """Lloyd's algorithm with seeded k-means++ initialization, restarted
    ``n_init`` times; the run with the lowest inertia wins. Deterministic for a
    given seed. An empty cluster is re-seeded to the point farthest from its
    assigned centroid."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be a (n, d) matrix, got shape {points.shape}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > len(points):
        raise ValueError(f"k={k} exceeds the number of points ({len(points)})")
    if max_iter < 1 or n_init < 1:
        raise ValueError("max_iter and n_init must be positive")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centroids = _kmeanspp_init(points, k, rng)
        labels, centroids, inertia, iterations, history = _lloyd(points, centroids.copy(), max_iter)
        if best is None or inertia < best[2]:
            best = (labels, centroids, inertia, iterations, history)

    labels, centroids, inertia, iterations, history = best
    return ClusterResult(
        k=k,
        centroids=centroids,
        assignments=labels,
        inertia=inertia,
        iterations=iterations,
        inertia_history=tuple(history),
    )


@dataclass(frozen=True)
class GridCell:
    """One cell of the clustering grid; ``result`` is None when the cell was
    skipped (too few usable bins)."""

    bin_size: float
    feature_subset: tuple[str, ...]
    result: ClusterResult | None
    skip_reason: str | None = None


def cluster_grid(
    bins_by_size: Mapping[float, Sequence[BinnedSample]],
    seed: int,
    k: int = 4,
    subsets: Sequence[tuple[str, ...]] = CLUSTER_FEATURE_SUBSETS,
) -> list[GridCell]:
    """Run k-means over every (bin size, feature subset) cell. Padding bins are
    excluded; a cell with fewer than k usable bins is reported as skipped. Each
    cell derives an independent generator from (seed, cell index)."""
    cells = [(size, tuple(sub)) for size in sorted(bins_by_size) for sub in subsets]
    seeds = np.random.SeedSequence(seed).spawn(len(cells))

    out: list[GridCell] = []
    for cell_seed, (size, subset) in zip(seeds, cells):
        usable = [b for b in bins_by_size[size] if not b.is_padding]
        if len(usable) < k:
            out.append(GridCell(size, subset, None, f"only {len(usable)} non-padding bins, need {k}"))
            continue
        points = np.array([[float(getattr(b, f)) for f in subset] for b in usable])
        result = kmeans(points, k, cell_seed)
        out.append(GridCell(size, subset, ClusterResult(
            k=result.k,
            centroids=result.centroids,
            assignments=result.assignments,
            inertia=result.inertia,
            iterations=result.iterations,
            feature_subset=subset,
            inertia_history=result.inertia_history,
        )))
    return out


@dataclass(frozen=True)
class EvalReport:
    """Regression and burst-detection results for one prediction series."""

    rmse: float
    actual: np.ndarray
    predicted: np.ndarray
    burst: BurstReport


def evaluate_predictions(actual: np.ndarray, predicted: np.ndarray, threshold: float) -> EvalReport:
    """Score a prediction series: RMSE plus the burst confusion report obtained
    by thresholding both series."""
    report = classification_report(
        label_bursts(predicted, threshold), label_bursts(actual, threshold), threshold=threshold
    )
    return EvalReport(
        rmse=rmse(predicted, actual),
        actual=np.asarray(actual, dtype=np.float64),
        predicted=np.asarray(predicted, dtype=np.float64),
        burst=report,
    )


def write_predictions(sink: IO[str], target_indices, actual, predicted) -> None:
    sink.write("target_bin,actual,predicted\n")
    for idx, a, p in zip(target_indices, actual, predicted):
        sink.write(f"{int(idx)},{float(a)!r},{float(p)!r}\n")


def format_burst_report(report: BurstReport) -> str:
    lines = [
        f"threshold {report.threshold!r}",
        f"tp {report.tp}",
        f"fp {report.fp}",
        f"fn {report.fn}",
        f"tn {report.tn}",
        f"accuracy {report.accuracy!r}",
        f"precision {report.precision!r}",
        f"recall {report.recall!r}",
        f"f1 {report.f1!r}",
        f"zero_division {'true' if report.zero_division else 'false'}",
    ]
    return "\n".join(lines) + "\n"


def write_cluster_cell(sink: IO[str], cell: GridCell) -> None:
    """Per-cell delimited output: a header block, centroid rows, then one
    assignment row per point."""
    sink.write(f"bin_size,{cell.bin_size!r}\n")
    sink.write(f"features,{'|'.join(cell.feature_subset)}\n")
    if cell.result is None:
        sink.write(f"skipped,{cell.skip_reason}\n")
        return
    res = cell.result
    sink.write(f"k,{res.k}\n")
    sink.write(f"inertia,{res.inertia!r}\n")
    sink.write(f"iterations,{res.iterations}\n")
    for ci, row in enumerate(res.centroids):
        sink.write(f"centroid,{ci}," + ",".join(repr(float(v)) for v in row) + "\n")
    for pi, label in enumerate(res.assignments):
        sink.write(f"point,{pi},{int(label)}\n")
