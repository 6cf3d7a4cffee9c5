"""Seeded synthetic cellular-traffic generator: ON/OFF sessions with Poisson
packet arrivals for four application profiles, standing in for a real capture."""

from __future__ import annotations

from dataclasses import dataclass
from typing import IO, Iterable, NamedTuple, Sequence

import numpy as np

from .ingest import EndpointMap, PacketRecord

USER_ADDR = "10.0.0.2"
TOWER_ADDR = "172.16.0.1"
MIN_PACKET_BYTES = 40


@dataclass(frozen=True)
class AppProfile:
    """Traffic shape of one application: packet rates during active (ON)
    periods, mean ON/OFF durations, and mean packet sizes per direction."""

    name: str
    uplink_rate: float  # packets/s while ON
    downlink_rate: float
    mean_on: float  # seconds
    mean_off: float
    uplink_len_mean: float  # bytes
    downlink_len_mean: float
    protocol: str = "UDP"

    def __post_init__(self):
        for attr in ("uplink_rate", "downlink_rate", "mean_on", "mean_off"):
            if getattr(self, attr) <= 0:
                raise ValueError(f"{attr} must be positive, got {getattr(self, attr)}")
        for attr in ("uplink_len_mean", "downlink_len_mean"):
            if getattr(self, attr) <= MIN_PACKET_BYTES:
                raise ValueError(f"{attr} must exceed the {MIN_PACKET_BYTES}-byte packet minimum")


# Four stock applications, kept well separated in (uplink rate, downlink rate,
# UL/DL ratio) space so clustering and classification have signal.
DEFAULT_PROFILES = {
    "surfing": AppProfile("surfing", uplink_rate=6.0, downlink_rate=14.0, mean_on=2.0, mean_off=14.0,
                          uplink_len_mean=220.0, downlink_len_mean=900.0, protocol="TCP"),
    "video_call": AppProfile("video_call", uplink_rate=30.0, downlink_rate=30.0, mean_on=20.0, mean_off=8.0,
                             uplink_len_mean=700.0, downlink_len_mean=700.0, protocol="UDP"),
    "voice_call": AppProfile("voice_call", uplink_rate=50.0, downlink_rate=50.0, mean_on=30.0, mean_off=5.0,
                             uplink_len_mean=160.0, downlink_len_mean=160.0, protocol="UDP"),
    "streaming": AppProfile("streaming", uplink_rate=10.0, downlink_rate=120.0, mean_on=12.0, mean_off=20.0,
                            uplink_len_mean=120.0, downlink_len_mean=1200.0, protocol="TCP"),
}


class Session(NamedTuple):
    start: float
    end: float
    app_label: str


@dataclass(frozen=True)
class SynthTrace:
    packets: list[PacketRecord]
    sessions: list[Session]
    duration: float
    seed: int


def endpoints() -> EndpointMap:
    """The fixed endpoint map every synthetic trace uses."""
    return EndpointMap(tower_addr=TOWER_ADDR, user_addrs=frozenset({USER_ADDR}))


def _poisson_times(rate: float, t0: float, t1: float, rng: np.random.Generator) -> np.ndarray:
    """Arrival times of a Poisson process of the given rate on [t0, t1)."""
    chunks = []
    t = t0
    while True:
        need = max(16, int((t1 - t) * rate * 1.2) + 16)
        times = t + np.cumsum(rng.exponential(1.0 / rate, size=need))
        inside = times[times < t1]
        chunks.append(inside)
        if len(inside) < len(times):
            break
        t = times[-1]
    return np.concatenate(chunks)


def _packet_lengths(mean_len: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Geometric-like byte lengths with the given mean and a 40-byte floor."""
    extra_mean = mean_len - MIN_PACKET_BYTES
    return MIN_PACKET_BYTES + rng.geometric(1.0 / (extra_mean + 1.0), size=count) - 1


def _gen_session(profile: AppProfile, start: float, end: float, rng: np.random.Generator) -> list[PacketRecord]:
    """Alternating exponential ON/OFF periods starting ON; packets arrive only
    during ON periods, independently per direction."""
    up_times, down_times = [], []
    t, on = start, True
    while t < end:
        period_end = min(t + rng.exponential(profile.mean_on if on else profile.mean_off), end)
        if on and period_end > t:
            up_times.append(_poisson_times(profile.uplink_rate, t, period_end, rng))
            down_times.append(_poisson_times(profile.downlink_rate, t, period_end, rng))
        t, on = period_end, not on

    up = np.concatenate(up_times) if up_times else np.empty(0)
    down = np.concatenate(down_times) if down_times else np.empty(0)
    up_lens = _packet_lengths(profile.uplink_len_mean, len(up), rng)
    down_lens = _packet_lengths(profile.downlink_len_mean, len(down), rng)

    packets = [
        PacketRecord(float(ts), USER_ADDR, TOWER_ADDR, int(ln), profile.protocol)
        for ts, ln in zip(up, up_lens)
    ] + [
        PacketRecord(float(ts), TOWER_ADDR, USER_ADDR, int(ln), profile.protocol)
        for ts, ln in zip(down, down_lens)
    ]
    packets.sort(key=lambda p: (p.timestamp, p.src_addr))
    return packets


def generate(profile: AppProfile, duration: float, seed) -> SynthTrace:
    """One single-application trace on [0, duration), deterministic per
    (profile, duration, seed)."""
    if duration < 0:
        raise ValueError(f"duration must be non-negative, got {duration}")
    base_seed = seed if isinstance(seed, int) else -1
    if duration == 0:
        return SynthTrace(packets=[], sessions=[], duration=0.0, seed=base_seed)
    rng = np.random.default_rng(seed)
    packets = _gen_session(profile, 0.0, float(duration), rng)
    return SynthTrace(
        packets=packets,
        sessions=[Session(0.0, float(duration), profile.name)],
        duration=float(duration),
        seed=base_seed,
    )


def generate_mixed(
    profiles: Sequence[AppProfile],
    weights: Sequence[float],
    duration: float,
    seed: int,
    n_sessions: int,
) -> SynthTrace:
    """Partition [0, duration) into ``n_sessions`` equal sessions, assign each a
    profile by weighted choice, and generate per-session traffic from a
    generator derived from (seed, session index)."""
    if not profiles:
        raise ValueError("need at least one profile")
    if len(weights) != len(profiles):
        raise ValueError(f"{len(weights)} weights for {len(profiles)} profiles")
    if any(w <= 0 for w in weights):
        raise ValueError("weights must be positive")
    if duration < 0:
        raise ValueError(f"duration must be non-negative, got {duration}")
    if n_sessions < 1:
        raise ValueError(f"n_sessions must be >= 1, got {n_sessions}")
    if duration == 0:
        return SynthTrace(packets=[], sessions=[], duration=0.0, seed=seed)

    children = np.random.SeedSequence(seed).spawn(n_sessions + 1)
    probs = np.asarray(weights, dtype=np.float64)
    probs = probs / probs.sum()
    choices = np.random.default_rng(children[0]).choice(len(profiles), size=n_sessions, p=probs)

    session_len = duration / n_sessions
    packets: list[PacketRecord] = []
    sessions: list[Session] = []
    for s, choice in enumerate(choices):
        profile = profiles[choice]
        start = s * session_len
        end = duration if s == n_sessions - 1 else (s + 1) * session_len
        rng = np.random.default_rng(children[s + 1])
        packets.extend(_gen_session(profile, start, end, rng))
        sessions.append(Session(start, end, profile.name))
    return SynthTrace(packets=packets, sessions=sessions, duration=float(duration), seed=seed)


def write_sessions(sessions: Iterable[Session], sink: IO[str]) -> None:
    """Sidecar label file: session_start, session_end, app_label."""
    sink.write("session_start,session_end,app_label\n")
    for s in sessions:
        sink.write(f"{s.start!r},{s.end!r},{s.app_label}\n")


def read_sessions(source: Iterable[str]) -> list[Session]:
    lines = iter(source)
    header = next(lines, None)
    if header is None or header.strip() != "session_start,session_end,app_label":
        raise ValueError("bad sessions header, expected session_start,session_end,app_label")
    out = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        start, end, app = line.split(",")
        out.append(Session(float(start), float(end), app))
    return out
