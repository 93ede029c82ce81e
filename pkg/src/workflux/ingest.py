"""Message log parsing and reduction of per-user trajectories to flux matrices.

A message is one geotagged post ``(message_id, user_id, timestamp, city_id)``.
Each user's posts are ordered in time, runs of consecutive posts from the same
city are collapsed to the last post of the run, and the remaining sequence is
cut into adjacent origin/destination transitions. Summing transitions over all
users gives the directed flux ``f[i, j]``; the undirected flux is
``F[i, j] = f[i, j] + f[j, i]``.
"""

from __future__ import annotations

import csv
import io
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence, TextIO

from .errors import ContractError, FormatError

MESSAGE_COLUMNS = ("message_id", "user_id", "timestamp", "city_id")
REJECT_REASONS = ("malformed", "unknown_city", "out_of_window")

Pair = tuple[str, str]


def canonical_pair(a: str, b: str) -> Pair:
    """Order an unordered pair so the lexicographically smaller id comes first."""
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True, slots=True)
class GeoMessage:
    message_id: str
    user_id: str
    timestamp: int
    city_id: str


@dataclass(frozen=True, slots=True)
class LocationEvent:
    timestamp: int
    city_id: str


@dataclass(frozen=True, slots=True)
class Transition:
    origin: str
    destination: str

    def __post_init__(self):
        if self.origin == self.destination:
            raise ContractError(f"transition with origin == destination ({self.origin})")


@dataclass(frozen=True)
class FluxMatrix:
    """Sparse pair -> count map.

    Undirected matrices store canonical pairs only. Counts produced by
    extraction are integers; synthetic generators may store positive reals.
    """

    directed: bool
    entries: Mapping[Pair, float]

    def __post_init__(self):
        for pair, count in self.entries.items():
            if count <= 0:
                raise ContractError(f"flux entry {pair} must be positive, got {count}")
            if pair[0] == pair[1]:
                raise ContractError(f"self-loop {pair} in flux matrix")
            if not self.directed and pair != canonical_pair(*pair):
                raise ContractError(f"undirected flux key {pair} is not canonical")

    def get(self, a: str, b: str) -> float:
        key = (a, b) if self.directed else canonical_pair(a, b)
        return self.entries.get(key, 0)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Pair]:
        return iter(self.entries)

    def items(self):
        return self.entries.items()

    @property
    def cities(self) -> list[str]:
        return sorted({c for pair in self.entries for c in pair})

    @property
    def city_count(self) -> int:
        return len(self.cities)

    @property
    def total(self) -> float:
        return sum(self.entries.values())

    def restrict(self, pairs: Iterable[Pair]) -> "FluxMatrix":
        keep = set(pairs)
        return FluxMatrix(self.directed, {p: v for p, v in self.entries.items() if p in keep})

    def undirected(self) -> "FluxMatrix":
        if not self.directed:
            return self
        merged: Counter = Counter()
        for (a, b), count in self.entries.items():
            merged[canonical_pair(a, b)] += count
        return FluxMatrix(False, dict(sorted(merged.items())))


@dataclass
class RejectReport:
    counts: dict[str, int] = field(default_factory=lambda: {r: 0 for r in REJECT_REASONS})

    def add(self, reason: str) -> None:
        self.counts[reason] += 1

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@dataclass(frozen=True)
class TimeWindow:
    """Inclusive ``[start, end]`` bounds in epoch seconds; ``None`` leaves a side open."""

    start: int | None = None
    end: int | None = None

    def __contains__(self, t: int) -> bool:
        if self.start is not None and t < self.start:
            return False
        if self.end is not None and t > self.end:
            return False
        return True


def parse_time(text: str) -> int:
    """Parse an ISO-8601 timestamp or integer epoch seconds; naive times are UTC."""
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _epoch(text: str) -> int:
    return int(text.strip())


def _iso(text: str) -> int:
    text = text.strip()
    if text.lstrip("-").isdigit():
        raise ValueError("epoch value in ISO-8601 file")
    return parse_time(text)


def load_registry(path: str | Path) -> dict[str, str]:
    """Read a ``raw,city_id`` CSV mapping raw location codes to canonical ids."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(_skip_comments(fh))
        if reader.fieldnames is None or not {"raw", "city_id"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: registry header must contain raw,city_id")
        registry = {}
        for row in reader:
            raw = row["raw"].strip()
            city = row["city_id"].strip()
            if raw in registry and registry[raw] != city:
                raise FormatError(f"{path}: raw code {raw!r} maps to both {registry[raw]!r} and {city!r}")
            registry[raw] = city
    if not registry:
        raise FormatError(f"{path}: empty registry")
    return registry


def _skip_comments(lines: Iterable[str]) -> Iterator[str]:
    for line in lines:
        if not line.startswith("#"):
            yield line


def parse_messages(
    log: TextIO | Iterable[str],
    registry: Mapping[str, str],
    window: TimeWindow | None = None,
) -> tuple[list[GeoMessage], RejectReport]:
    """Parse a message log CSV.

    The timestamp flavour (integer epoch or ISO-8601) is detected from the
    first data row and enforced for the whole file. Rows that cannot be read,
    whose city is not in ``registry`` or that fall outside ``window`` are
    dropped and counted in the returned report.
    """
    if not registry:
        raise ContractError("city registry is empty")
    window = window or TimeWindow()
    reader = csv.reader(_skip_comments(log))
    header = next(reader, None)
    if header is None:
        return [], RejectReport()
    if tuple(h.strip().lstrip("﻿") for h in header) != MESSAGE_COLUMNS:
        raise FormatError(f"message log header must be {','.join(MESSAGE_COLUMNS)}, got {','.join(header)}")

    report = RejectReport()
    messages: list[GeoMessage] = []
    to_epoch = None
    for row in reader:
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 4 or not row[0].strip() or not row[1].strip():
            report.add("malformed")
            continue
        mid, uid, ts, raw_city = (v.strip() for v in row)
        if to_epoch is None:
            to_epoch = _epoch if ts.lstrip("-").isdigit() else _iso
        try:
            t = to_epoch(ts)
        except ValueError:
            report.add("malformed")
            continue
        city = registry.get(raw_city)
        if city is None:
            report.add("unknown_city")
            continue
        if t not in window:
            report.add("out_of_window")
            continue
        messages.append(GeoMessage(mid, uid, t, city))
    return messages, report


def read_messages(path: str | Path, registry: Mapping[str, str], window: TimeWindow | None = None):
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_messages(fh, registry, window)


def user_sequences(messages: Iterable[GeoMessage]) -> dict[str, list[LocationEvent]]:
    """Group messages per user, ordered by (timestamp, message_id)."""
    grouped: dict[str, list[GeoMessage]] = defaultdict(list)
    for m in messages:
        grouped[m.user_id].append(m)
    out = {}
    for user in sorted(grouped):
        ordered = sorted(grouped[user], key=lambda m: (m.timestamp, m.message_id))
        out[user] = [LocationEvent(m.timestamp, m.city_id) for m in ordered]
    return out


def compress_runs(events: Sequence[LocationEvent]) -> list[LocationEvent]:
    """Collapse each run of same-city events to the run's last event."""
    out: list[LocationEvent] = []
    for ev in events:
        if out and out[-1].city_id == ev.city_id:
            out[-1] = ev
        else:
            out.append(ev)
    return out


def cut_trajectory(events: Sequence[LocationEvent]) -> list[Transition]:
    transitions = []
    for prev, nxt in zip(events, events[1:]):
        if prev.city_id == nxt.city_id:
            raise ContractError(
                f"adjacent events share city {prev.city_id}; compress runs before cutting"
            )
        transitions.append(Transition(prev.city_id, nxt.city_id))
    return transitions


def build_flux(transitions: Iterable[Transition], directed: bool) -> FluxMatrix:
    counts: Counter = Counter()
    for tr in transitions:
        if tr.origin == tr.destination:
            raise ContractError(f"transition {tr} has origin == destination")
        key = (tr.origin, tr.destination) if directed else canonical_pair(tr.origin, tr.destination)
        counts[key] += 1
    return FluxMatrix(directed, dict(sorted(counts.items())))


@dataclass(frozen=True)
class ExtractResult:
    directed: FluxMatrix
    undirected: FluxMatrix
    n_messages: int
    n_users: int
    n_stationary_users: int
    n_events_compressed: int
    n_transitions: int
    rejects: RejectReport

    def summary(self) -> dict[str, object]:
        return {
            "messages": self.n_messages,
            "users": self.n_users,
            "stationary_users": self.n_stationary_users,
            "events_before_compression": self.n_messages,
            "events_after_compression": self.n_events_compressed,
            "transitions": self.n_transitions,
            "cities": self.undirected.city_count,
            "directed_pairs": len(self.directed),
            "undirected_pairs": len(self.undirected),
            **{f"rejected_{k}": v for k, v in self.rejects.counts.items()},
        }


def _reduce_users(chunk: list[list[LocationEvent]]) -> tuple[dict[Pair, int], int, int, int]:
    counts: Counter = Counter()
    stationary = compressed_total = n_transitions = 0
    for events in chunk:
        compressed = compress_runs(events)
        compressed_total += len(compressed)
        if len(compressed) <= 1:
            stationary += 1
            continue
        for tr in cut_trajectory(compressed):
            counts[(tr.origin, tr.destination)] += 1
            n_transitions += 1
    return dict(counts), stationary, compressed_total, n_transitions


def extract_flux(
    messages: Sequence[GeoMessage],
    rejects: RejectReport | None = None,
    workers: int = 1,
) -> ExtractResult:
    """Build directed and undirected flux from parsed messages.

    Users are processed in sorted order, optionally split across ``workers``
    processes; the merge is a sum of integer counters followed by a key sort,
    so the result does not depend on the worker count.
    """
    sequences = list(user_sequences(messages).values())
    if workers > 1 and len(sequences) > 1:
        size = -(-len(sequences) // workers)
        chunks = [sequences[i:i + size] for i in range(0, len(sequences), size)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_reduce_users, chunks))
    else:
        parts = [_reduce_users(sequences)]

    directed: Counter = Counter()
    stationary = compressed_total = n_transitions = 0
    for counts, s, c, n in parts:
        directed.update(counts)
        stationary += s
        compressed_total += c
        n_transitions += n
    directed_flux = FluxMatrix(True, dict(sorted(directed.items())))
    return ExtractResult(
        directed=directed_flux,
        undirected=directed_flux.undirected(),
        n_messages=len(messages),
        n_users=len(sequences),
        n_stationary_users=stationary,
        n_events_compressed=compressed_total,
        n_transitions=n_transitions,
        rejects=rejects or RejectReport(),
    )


def _fmt_count(v: float) -> str:
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def write_flux_csv(flux: FluxMatrix, out: TextIO) -> None:
    header = ("origin", "destination", "count") if flux.directed else ("city_a", "city_b", "count")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for (a, b), v in sorted(flux.items()):
        writer.writerow((a, b, _fmt_count(v)))


def read_flux_csv(path: str | Path) -> FluxMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_flux_csv(fh, source=str(path))


def parse_flux_csv(lines: TextIO | Iterable[str], source: str = "<flux>") -> FluxMatrix:
    reader = csv.reader(_skip_comments(lines))
    header = next(reader, None)
    if header is None:
        raise FormatError(f"{source}: empty flux file")
    header = tuple(h.strip() for h in header)
    if header == ("origin", "destination", "count"):
        directed = True
    elif header == ("city_a", "city_b", "count"):
        directed = False
    else:
        raise FormatError(f"{source}: unexpected flux header {','.join(header)}")
    entries: dict[Pair, float] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            a, b, v = row[0].strip(), row[1].strip(), row[2].strip()
            count = int(v) if v.lstrip("-").isdigit() else float(v)
        except (IndexError, ValueError) as exc:
            raise FormatError(f"{source}:{lineno}: bad flux row {row}") from exc
        key = (a, b)
        if not directed and key != canonical_pair(a, b):
            raise FormatError(f"{source}:{lineno}: undirected row must have city_a < city_b")
        if key in entries:
            raise FormatError(f"{source}:{lineno}: duplicate pair {key}")
        entries[key] = count
    return FluxMatrix(directed, dict(sorted(entries.items())))


def flux_to_text(flux: FluxMatrix) -> str:
    buf = io.StringIO()
    write_flux_csv(flux, buf)
    return buf.getvalue()
