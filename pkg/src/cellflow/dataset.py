"""Supervised dataset construction: sliding windows over bin series, nonzero-target
filtering, chronological train/test split, and min-max scaling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import IO, Iterable, Sequence

import numpy as np

from .features import BinnedSample, bin_packets, zero_pad
from .ingest import LabeledPacket

DEFAULT_FEATURES = ("uplink_count", "downlink_count", "uplink_bytes", "downlink_bytes", "ud_ratio")
DEFAULT_TARGET = "uplink_count"


@dataclass(frozen=True)
class WindowConfig:
    """Shape of the supervised problem: bin width, history length, and which
    bin features feed the model."""

    bin_size: float
    history_len: int
    feature_names: tuple[str, ...] = DEFAULT_FEATURES
    target_name: str = DEFAULT_TARGET

    def __post_init__(self):
        if self.bin_size <= 0:
            raise ValueError(f"bin_size must be positive, got {self.bin_size}")
        if self.history_len < 1:
            raise ValueError(f"history_len must be >= 1, got {self.history_len}")


# The named (bin size x history) configurations, selectable by preset name.
PRESETS = {
    "cfg-1x60": WindowConfig(bin_size=1.0, history_len=60),
    "cfg-3x20": WindowConfig(bin_size=3.0, history_len=20),
    "cfg-60x1": WindowConfig(bin_size=60.0, history_len=1),
    "cfg-1x10": WindowConfig(bin_size=1.0, history_len=10),
}


@dataclass(frozen=True)
class WindowedDataset:
    """Sliding-window samples: ``histories[i]`` is a (history_len x n_features)
    matrix and ``targets[i]`` the value to predict (or a class label when
    ``classification`` is set). ``target_indices[i]`` is the bin_index of the
    target bin, used for chronology checks."""

    histories: np.ndarray  # (n, history_len, n_features) float64
    targets: np.ndarray  # (n,) float64, or int labels for classification
    target_indices: np.ndarray  # (n,) int64
    config: WindowConfig
    classification: bool = False

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def n_features(self) -> int:
        return self.histories.shape[2]


def _feature_matrix(bins: Sequence[BinnedSample], names: tuple[str, ...]) -> np.ndarray:
    for name in names:
        if not hasattr(bins[0], name):
            raise ValueError(f"unknown bin feature {name!r}")
    return np.array([[float(getattr(b, n)) for n in names] for b in bins], dtype=np.float64)


def make_windows(bins: Sequence[BinnedSample], config: WindowConfig) -> WindowedDataset:
    """Build |bins| - history_len windows: window i holds the feature rows of
    series positions [i, i + history_len) and predicts the target feature of the
    next position. Bins must be index-ascending; a zero-padded series is dense,
    a pro-padded one may stay sparse in index space."""
    h = config.history_len
    if len(bins) <= h:
        raise ValueError(f"need more than history_len={h} bins, got {len(bins)}")
    for prev, cur in zip(bins, bins[1:]):
        if cur.bin_index <= prev.bin_index:
            raise ValueError("bins must be strictly index-ascending")

    feats = _feature_matrix(bins, config.feature_names)
    target_col = np.array([float(getattr(b, config.target_name)) for b in bins], dtype=np.float64)

    n = len(bins) - h
    histories = np.stack([feats[i : i + h] for i in range(n)])
    targets = target_col[h:].copy()
    target_indices = np.array([bins[i + h].bin_index for i in range(n)], dtype=np.int64)
    return WindowedDataset(histories, targets, target_indices, config)


def filter_nonzero_targets(ds: WindowedDataset) -> WindowedDataset:
    """Keep only windows whose target is nonzero; histories are untouched and may
    still contain zero rows. Warns when nothing is left."""
    if ds.classification:
        raise ValueError("nonzero-target filtering applies to regression targets only")
    mask = ds.targets != 0
    if not mask.any():
        warnings.warn("all targets are zero; filtered dataset is empty", stacklevel=2)
    return replace(
        ds,
        histories=ds.histories[mask],
        targets=ds.targets[mask],
        target_indices=ds.target_indices[mask],
    )


def split(ds: WindowedDataset, train_fraction: float = 0.8) -> tuple[WindowedDataset, WindowedDataset]:
    """Chronological split: the first floor(n * fraction) windows train, the rest
    test. No shuffling, so the test set is strictly later than the train set."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(ds)
    if n < 2:
        raise ValueError(f"need at least 2 windows to split, got {n}")
    n_train = int(n * train_fraction)
    if n_train == 0 or n_train == n:
        raise ValueError(f"split leaves an empty side (n={n}, fraction={train_fraction})")

    def take(lo, hi):
        return replace(
            ds,
            histories=ds.histories[lo:hi],
            targets=ds.targets[lo:hi],
            target_indices=ds.target_indices[lo:hi],
        )

    return take(0, n_train), take(n_train, n)


@dataclass(frozen=True)
class Scaler:
    """Per-feature and target min-max ranges, fitted on training data only."""

    feature_min: np.ndarray  # (n_features,)
    feature_max: np.ndarray
    target_min: float
    target_max: float


def fit_scaler(train: WindowedDataset) -> Scaler:
    """Fit [0,1] min-max ranges on the training windows. For classification the
    target range is the identity (labels are not scaled)."""
    if len(train) == 0:
        raise ValueError("cannot fit a scaler on an empty dataset")
    flat = train.histories.reshape(-1, train.n_features)
    if train.classification:
        t_min, t_max = 0.0, 1.0
    else:
        t_min, t_max = float(train.targets.min()), float(train.targets.max())
    return Scaler(
        feature_min=flat.min(axis=0),
        feature_max=flat.max(axis=0),
        target_min=t_min,
        target_max=t_max,
    )


def _scale(values: np.ndarray, lo, hi) -> np.ndarray:
    span = hi - lo
    scaled = np.where(span == 0, 0.0, (values - lo) / np.where(span == 0, 1.0, span))
    return scaled


def apply_scaler(ds: WindowedDataset, scaler: Scaler) -> WindowedDataset:
    """Scale features (and regression targets) to [0,1] ranges; a constant
    feature maps to 0."""
    if scaler is None:
        raise ValueError("scaler is not fitted")
    histories = _scale(ds.histories, scaler.feature_min, scaler.feature_max)
    if ds.classification:
        targets = ds.targets.copy()
    else:
        targets = _scale(ds.targets, scaler.target_min, scaler.target_max)
    return replace(ds, histories=histories, targets=targets)


def invert_scaler(scaled_targets: np.ndarray, scaler: Scaler) -> np.ndarray:
    """Map scaled target values back to original units (identity for a constant
    target column)."""
    if scaler is None:
        raise ValueError("scaler is not fitted")
    span = scaler.target_max - scaler.target_min
    return scaled_targets * span + scaler.target_min


def make_classification_windows(
    packets: Sequence[LabeledPacket],
    sessions: Sequence[tuple[float, float, str]],
    class_names: Sequence[str],
    config: WindowConfig,
) -> WindowedDataset:
    """Build labeled windows for the application classifier.

    Each (start, end, app) session is binned on its own, zero-padded to the
    session's full extent, and every run of ``history_len`` consecutive rows
    becomes one window labeled with the session's class index. Sessions without
    packets or too short for a full window are skipped. Packets must be in
    timestamp order.
    """
    class_index = {name: i for i, name in enumerate(class_names)}
    h = config.history_len
    times = np.array([p.timestamp for p in packets], dtype=np.float64)
    histories, labels, indices = [], [], []
    for start, end, app in sessions:
        if app not in class_index:
            raise ValueError(f"session label {app!r} not in class_names {tuple(class_names)}")
        lo, hi = np.searchsorted(times, [start, end])
        session_pkts = list(packets[lo:hi])
        if not session_pkts:
            continue
        bins = bin_packets(session_pkts, config.bin_size, anchor=start)
        n_bins = int(np.ceil((end - start) / config.bin_size))
        dense = zero_pad(bins, config.bin_size, min_index=0, max_index=n_bins - 1)
        if len(dense) < h:
            continue
        feats = _feature_matrix(dense, config.feature_names)
        base = int(start / config.bin_size)
        for i in range(len(dense) - h + 1):
            histories.append(feats[i : i + h])
            labels.append(class_index[app])
            indices.append(base + i + h - 1)
    if not histories:
        raise ValueError("no session produced a full window")
    return WindowedDataset(
        histories=np.stack(histories),
        targets=np.array(labels, dtype=np.float64),
        target_indices=np.array(indices, dtype=np.int64),
        config=config,
        classification=True,
    )


def write_windows(ds: WindowedDataset, sink: IO[str]) -> None:
    """Debug serialization: one record group per window, a ``window`` line with
    the target followed by one comma-separated feature row per history step."""
    sink.write("features," + ",".join(ds.config.feature_names) + "\n")
    sink.write(f"target,{ds.config.target_name}\n")
    for i in range(len(ds)):
        sink.write(f"window,{i},{ds.targets[i]!r},{int(ds.target_indices[i])}\n")
        for row in ds.histories[i]:
            sink.write(",".join(repr(float(v)) for v in row) + "\n")


def read_windows(source: Iterable[str], config: WindowConfig, classification: bool = False) -> WindowedDataset:
    """Parse the write_windows format back into a dataset."""
    lines = [ln.rstrip("\n") for ln in source]
    if len(lines) < 2 or not lines[0].startswith("features,") or not lines[1].startswith("target,"):
        raise ValueError("bad windows file header")
    histories, targets, indices = [], [], []
    i = 2
    while i < len(lines):
        parts = lines[i].split(",")
        if parts[0] != "window":
            raise ValueError(f"expected a window line at line {i + 1}")
        targets.append(float(parts[2]))
        indices.append(int(parts[3]))
        rows = [
            [float(v) for v in lines[j].split(",")]
            for j in range(i + 1, i + 1 + config.history_len)
        ]
        histories.append(rows)
        i += 1 + config.history_len
    return WindowedDataset(
        histories=np.array(histories, dtype=np.float64),
        targets=np.array(targets, dtype=np.float64),
        target_indices=np.array(indices, dtype=np.int64),
        config=config,
        classification=classification,
    )
