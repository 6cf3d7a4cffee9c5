"""Packet-record ingestion: delimited-text capture parsing, tower/user endpoint
inference, and uplink/downlink direction labeling."""

from __future__ import annotations

import csv
import enum
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import IO, Iterable, Mapping

log = logging.getLogger(__name__)

# Logical field -> default column name in the capture export.
DEFAULT_SCHEMA = {
    "time": "frame.time_epoch",
    "src": "ip.src",
    "dst": "ip.dst",
    "length": "frame.len",
    "protocol": "protocol",
}

REQUIRED_FIELDS = ("time", "src", "dst", "length", "protocol")


class SchemaError(ValueError):
    """The capture header does not provide a required column."""


class ParseError(ValueError):
    """A data row could not be parsed; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class AmbiguousEndpointsError(ValueError):
    """Tower inference could not single out one address; pass endpoints explicitly."""


class Direction(enum.Enum):
    UPLINK = "uplink"
    DOWNLINK = "downlink"


@dataclass(frozen=True)
class PacketRecord:
    """One captured packet at the IP level."""

    timestamp: float  # seconds since epoch, microsecond precision
    src_addr: str
    dst_addr: str
    length: int  # bytes
    protocol: str

    def __post_init__(self):
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise ValueError(f"timestamp must be finite and non-negative, got {self.timestamp}")
        if self.length < 0:
            raise ValueError(f"length must be non-negative, got {self.length}")
        if self.src_addr == self.dst_addr:
            raise ValueError(f"src and dst address must differ, both are {self.src_addr!r}")


@dataclass(frozen=True)
class LabeledPacket(PacketRecord):
    """A packet plus its inferred flow direction."""

    direction: Direction


@dataclass(frozen=True)
class EndpointMap:
    """The tower address and the set of user addresses talking to it."""

    tower_addr: str
    user_addrs: frozenset[str]

    def __post_init__(self):
        if not self.user_addrs:
            raise ValueError("user_addrs must be non-empty")
        if self.tower_addr in self.user_addrs:
            raise ValueError(f"tower address {self.tower_addr!r} cannot also be a user address")


def parse_capture(
    source: Iterable[str] | IO[str],
    schema: Mapping[str, str] | None = None,
    *,
    drop_bad_rows: bool = False,
) -> list[PacketRecord]:
    """Parse a delimited-text capture export into PacketRecords, in file order.

    ``source`` must yield a header row followed by data rows (comma-separated).
    ``schema`` maps the logical fields time/src/dst/length/protocol to column
    names; defaults to DEFAULT_SCHEMA. Malformed rows raise ParseError with the
    1-based line number, or are skipped when ``drop_bad_rows`` is set.
    """
    schema = dict(DEFAULT_SCHEMA if schema is None else schema)
    for field in REQUIRED_FIELDS:
        if field not in schema:
            raise SchemaError(f"schema does not map required field {field!r}")

    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty input: missing header row") from None

    columns = {name.strip(): idx for idx, name in enumerate(header)}
    positions = {}
    for field in REQUIRED_FIELDS:
        column = schema[field]
        if column not in columns:
            raise SchemaError(f"missing required column {column!r} (field {field!r})")
        positions[field] = columns[column]

    records: list[PacketRecord] = []
    dropped = 0
    # Header is line 1; data rows start at line 2.
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            records.append(_parse_row(row, positions, line_no))
        except ParseError:
            if not drop_bad_rows:
                raise
            dropped += 1
    if dropped:
        log.warning("dropped %d malformed row(s)", dropped)
    return records


def _parse_row(row: list[str], positions: Mapping[str, int], line_no: int) -> PacketRecord:
    if max(positions.values()) >= len(row):
        raise ParseError(line_no, f"expected at least {max(positions.values()) + 1} fields, got {len(row)}")
    raw = {field: row[idx].strip() for field, idx in positions.items()}
    try:
        timestamp = float(raw["time"])
    except ValueError:
        raise ParseError(line_no, f"bad timestamp {raw['time']!r}") from None
    try:
        length = int(raw["length"])
    except ValueError:
        raise ParseError(line_no, f"bad length {raw['length']!r}") from None
    try:
        return PacketRecord(timestamp, raw["src"], raw["dst"], length, raw["protocol"])
    except ValueError as exc:
        raise ParseError(line_no, str(exc)) from None


def write_capture(
    records: Iterable[PacketRecord],
    sink: IO[str],
    schema: Mapping[str, str] | None = None,
) -> None:
    """Serialize records to the delimited-text capture format (round-trips bit-exactly)."""
    schema = dict(DEFAULT_SCHEMA if schema is None else schema)
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow([schema[f] for f in REQUIRED_FIELDS])
    for rec in records:
        # repr() keeps the shortest decimal that round-trips the float exactly.
        writer.writerow([repr(rec.timestamp), rec.src_addr, rec.dst_addr, rec.length, rec.protocol])


def infer_endpoints(records: list[PacketRecord]) -> EndpointMap:
    """Infer the tower address as the one participating in the most distinct
    address pairs; every address it talks to becomes a user address.

    Ties are broken by the lexicographically smallest address. If no address
    participates in at least two distinct pairs and more than one candidate
    remains, the capture is ambiguous and endpoints must be given explicitly.
    """
    if not records:
        raise ValueError("cannot infer endpoints from an empty capture")

    peers: dict[str, set[str]] = defaultdict(set)
    for rec in records:
        peers[rec.src_addr].add(rec.dst_addr)
        peers[rec.dst_addr].add(rec.src_addr)

    best = max(len(p) for p in peers.values())
    candidates = sorted(addr for addr, p in peers.items() if len(p) == best)
    if best < 2 and len(candidates) > 1:
        raise AmbiguousEndpointsError(
            f"no address participates in >=2 distinct pairs ({len(candidates)} candidates); "
            "pass the tower and user addresses explicitly"
        )
    tower = candidates[0]
    return EndpointMap(tower_addr=tower, user_addrs=frozenset(peers[tower]))


def label_direction(
    records: Iterable[PacketRecord], endpoints: EndpointMap
) -> tuple[list[LabeledPacket], int]:
    """Label each packet Uplink (src is a user) or Downlink (dst is a user).

    Packets touching no user address cannot be labeled; they are skipped and
    counted in the returned tally. Order is preserved.
    """
    labeled: list[LabeledPacket] = []
    skipped = 0
    for rec in records:
        if rec.src_addr in endpoints.user_addrs:
            direction = Direction.UPLINK
        elif rec.dst_addr in endpoints.user_addrs:
            direction = Direction.DOWNLINK
        else:
            skipped += 1
            continue
        labeled.append(
            LabeledPacket(rec.timestamp, rec.src_addr, rec.dst_addr, rec.length, rec.protocol, direction)
        )
    return labeled, skipped
