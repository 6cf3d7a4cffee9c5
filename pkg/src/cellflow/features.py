"""Time-bin feature extraction: per-bin uplink/downlink aggregates, zero padding,
capped-run "pro" padding, and inter-arrival statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from .ingest import Direction, LabeledPacket, PacketRecord

BIN_COLUMNS = (
    "bin_index",
    "bin_start",
    "uplink_count",
    "downlink_count",
    "uplink_bytes",
    "downlink_bytes",
    "ud_ratio",
    "total_bytes",
    "is_padding",
)


@dataclass(frozen=True)
class BinnedSample:
    """Aggregate features of one time bin [bin_start, bin_start + bin_size)."""

    bin_index: int
    bin_start: float
    uplink_count: int
    downlink_count: int
    uplink_bytes: int
    downlink_bytes: int
    ud_ratio: float
    total_bytes: int
    is_padding: bool = False


@dataclass(frozen=True)
class InterArrivalStats:
    deltas: tuple[float, ...]
    mean: float
    variance: float  # population variance, seconds^2
    min: float
    max: float
    histogram: tuple[tuple[float, int], ...]  # (bucket upper bound, count)


def ud_ratio(uplink_count: int, downlink_count: int) -> float:
    """Uplink/downlink count ratio with the denominator floored at 1 so it is
    always finite."""
    return uplink_count / max(downlink_count, 1)


def bin_packets(
    packets: Sequence[LabeledPacket],
    bin_size: float,
    anchor: float | None = None,
) -> list[BinnedSample]:
    """Group packets into half-open bins of ``bin_size`` seconds and aggregate
    counts and bytes per direction.

    A packet at time t lands in bin floor((t - anchor) / bin_size); the anchor
    defaults to the first packet's timestamp. Only non-empty bins are returned,
    in ascending bin_index order.
    """
    if bin_size <= 0:
        raise ValueError(f"bin_size must be positive, got {bin_size}")
    if not packets:
        return []
    t0 = packets[0].timestamp if anchor is None else anchor

    up_count: dict[int, int] = {}
    down_count: dict[int, int] = {}
    up_bytes: dict[int, int] = {}
    down_bytes: dict[int, int] = {}
    for pkt in packets:
        idx = math.floor((pkt.timestamp - t0) / bin_size)
        if idx < 0:
            raise ValueError(f"packet at t={pkt.timestamp} precedes the bin anchor t0={t0}")
        if pkt.direction is Direction.UPLINK:
            up_count[idx] = up_count.get(idx, 0) + 1
            up_bytes[idx] = up_bytes.get(idx, 0) + pkt.length
        else:
            down_count[idx] = down_count.get(idx, 0) + 1
            down_bytes[idx] = down_bytes.get(idx, 0) + pkt.length

    bins = []
    for idx in sorted(up_count.keys() | down_count.keys()):
        uc = up_count.get(idx, 0)
        dc = down_count.get(idx, 0)
        ub = up_bytes.get(idx, 0)
        db = down_bytes.get(idx, 0)
        bins.append(
            BinnedSample(
                bin_index=idx,
                bin_start=t0 + idx * bin_size,
                uplink_count=uc,
                downlink_count=dc,
                uplink_bytes=ub,
                downlink_bytes=db,
                ud_ratio=ud_ratio(uc, dc),
                total_bytes=ub + db,
            )
        )
    return bins


def _check_sorted_unique(bins: Sequence[BinnedSample]) -> None:
    for prev, cur in zip(bins, bins[1:]):
        if cur.bin_index == prev.bin_index:
            raise ValueError(f"duplicate bin_index {cur.bin_index}")
        if cur.bin_index < prev.bin_index:
            raise ValueError("bins must be sorted by bin_index")


def _padding_bin(index: int, anchor: float, bin_size: float) -> BinnedSample:
    return BinnedSample(
        bin_index=index,
        bin_start=anchor + index * bin_size,
        uplink_count=0,
        downlink_count=0,
        uplink_bytes=0,
        downlink_bytes=0,
        ud_ratio=0.0,
        total_bytes=0,
        is_padding=True,
    )


def zero_pad(
    bins: Sequence[BinnedSample],
    bin_size: float,
    *,
    min_index: int | None = None,
    max_index: int | None = None,
) -> list[BinnedSample]:
    """Insert all-zero padding bins so every index in [min_index, max_index] is
    present. The range defaults to the span of the input bins; passing explicit
    bounds widens it (used when a session's full extent is known)."""
    _check_sorted_unique(bins)
    if not bins:
        return []
    lo = bins[0].bin_index if min_index is None else min(min_index, bins[0].bin_index)
    hi = bins[-1].bin_index if max_index is None else max(max_index, bins[-1].bin_index)
    anchor = bins[0].bin_start - bins[0].bin_index * bin_size

    by_index = {b.bin_index: b for b in bins}
    return [by_index.get(idx) or _padding_bin(idx, anchor, bin_size) for idx in range(lo, hi + 1)]


def pro_pad(bins: Sequence[BinnedSample], bin_size: float, max_run: int = 2) -> list[BinnedSample]:
    """Like zero_pad, but each maximal run of missing indices contributes at most
    ``max_run`` padding bins (the earliest of the run), so long silences do not
    flood the series with zero rows. Retained bins keep their original indices."""
    if max_run < 1:
        raise ValueError(f"max_run must be >= 1, got {max_run}")
    _check_sorted_unique(bins)
    if not bins:
        return []
    anchor = bins[0].bin_start - bins[0].bin_index * bin_size

    out: list[BinnedSample] = [bins[0]]
    for prev, cur in zip(bins, bins[1:]):
        gap_start = prev.bin_index + 1
        n_missing = cur.bin_index - gap_start
        for idx in range(gap_start, gap_start + min(n_missing, max_run)):
            out.append(_padding_bin(idx, anchor, bin_size))
        out.append(cur)
    return out


def interarrival(packets: Sequence[PacketRecord], bucket_width: float) -> InterArrivalStats:
    """Successive timestamp differences over all packets (direction ignored),
    with summary stats and a histogram of buckets [k*w, (k+1)*w)."""
    if len(packets) < 2:
        raise ValueError(f"need at least 2 packets, got {len(packets)}")
    if bucket_width <= 0:
        raise ValueError(f"bucket_width must be positive, got {bucket_width}")
    times = np.array([p.timestamp for p in packets], dtype=np.float64)
    deltas = np.diff(times)
    if (deltas < 0).any():
        pos = int(np.argmax(deltas < 0))
        raise ValueError(f"timestamps decrease between packets {pos} and {pos + 1}")

    buckets = np.floor(deltas / bucket_width).astype(int)
    counts = np.bincount(buckets)
    histogram = tuple(((k + 1) * bucket_width, int(c)) for k, c in enumerate(counts))
    return InterArrivalStats(
        deltas=tuple(float(d) for d in deltas),
        mean=float(deltas.mean()),
        variance=float(deltas.var()),
        min=float(deltas.min()),
        max=float(deltas.max()),
        histogram=histogram,
    )


def write_bins(bins: Iterable[BinnedSample], sink: IO[str]) -> None:
    """Write bins as delimited text with the documented column set."""
    sink.write(",".join(BIN_COLUMNS) + "\n")
    for b in bins:
        sink.write(
            f"{b.bin_index},{b.bin_start!r},{b.uplink_count},{b.downlink_count},"
            f"{b.uplink_bytes},{b.downlink_bytes},{b.ud_ratio!r},{b.total_bytes},"
            f"{'true' if b.is_padding else 'false'}\n"
        )


def read_bins(source: Iterable[str]) -> list[BinnedSample]:
    lines = iter(source)
    header = next(lines, None)
    if header is None or tuple(header.strip().split(",")) != BIN_COLUMNS:
        raise ValueError(f"bad bins header, expected {','.join(BIN_COLUMNS)}")
    bins = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        f = line.split(",")
        bins.append(
            BinnedSample(
                bin_index=int(f[0]),
                bin_start=float(f[1]),
                uplink_count=int(f[2]),
                downlink_count=int(f[3]),
                uplink_bytes=int(f[4]),
                downlink_bytes=int(f[5]),
                ud_ratio=float(f[6]),
                total_bytes=int(f[7]),
                is_padding=f[8] == "true",
            )
        )
    return bins
