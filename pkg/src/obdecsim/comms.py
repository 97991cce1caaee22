"""Observation sharing: message format, lossy broadcast channel and double-check integration."""

from __future__ import annotations

import json
import math
import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Sequence

import numpy as np

from .belief import LocalObservation
from .dynamics import UavState

DETECTION_AGREEMENT = 0.5


@dataclass(frozen=True)
class SharedDetection:
    status: bool
    position: tuple[float, float]
    uav_id: int


@dataclass(frozen=True)
class SharedMessage:
    sender: int
    seq: int
    detection: SharedDetection | None = None
    latest_explored: tuple[int, int] | None = None
    all_explored: frozenset[int] = frozenset()
    altitude: float = 0.0

    def to_dict(self) -> dict:
        return {
            "sender": self.sender,
            "seq": self.seq,
            "detection": None if self.detection is None else {
                "status": self.detection.status,
                "position": list(self.detection.position),
                "uav_id": self.detection.uav_id,
            },
            "latest_explored": None if self.latest_explored is None else list(
                self.latest_explored),
            "all_explored": sorted(self.all_explored),
            "altitude": self.altitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SharedMessage":
        det = d.get("detection")
        latest = d.get("latest_explored")
        return cls(
            sender=int(d["sender"]),
            seq=int(d["seq"]),
            detection=None if det is None else SharedDetection(
                bool(det["status"]), tuple(det["position"]), int(det["uav_id"])),
            latest_explored=None if latest is None else (int(latest[0]), int(latest[1])),
            all_explored=frozenset(int(c) for c in d.get("all_explored", ())),
            altitude=float(d.get("altitude", 0.0)),
        )

    def to_bytes(self) -> bytes:
        """Length-prefixed (4-byte big-endian) UTF-8 JSON frame."""
        body = json.dumps(self.to_dict(), separators=(",", ":")).encode()
        return struct.pack(">I", len(body)) + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "SharedMessage":
        (n,) = struct.unpack(">I", data[:4])
        if len(data) - 4 != n:
            raise ValueError(f"frame length {n} does not match payload of {len(data) - 4} bytes")
        return cls.from_dict(json.loads(data[4:].decode()))

    def summary(self) -> str:
        det = "-" if self.detection is None else "({:.2f},{:.2f})@{}".format(
            *self.detection.position, self.detection.uav_id)
        latest = "-" if self.latest_explored is None else str(self.latest_explored[0])
        return f"det={det} latest={latest} n_explored={len(self.all_explored)} z={self.altitude:.2f}"


def encode(local: LocalObservation, ledger: Iterable[int], state: UavState,
           seq: int) -> SharedMessage:
    """Compress a local observation into the broadcast record."""
    det = None
    if local.detection.seen:
        det = SharedDetection(True, tuple(local.detection.estimated_world_position), state.id)
    cells = frozenset(int(c) for c in ledger)
    latest = None
    if local.newly_explored is not None:
        latest = (int(local.newly_explored), state.id)
        cells = cells | {int(local.newly_explored)}
    return SharedMessage(state.id, seq, det, latest, cells, state.z)


@dataclass(frozen=True)
class ChannelConfig:
    drop_prob: float = 0.1
    corrupt_prob: float = 0.02
    delay_steps: int = 0

    def __post_init__(self):
        if not (0 <= self.drop_prob <= 1 and 0 <= self.corrupt_prob <= 1):
            raise ValueError("channel probabilities must lie in [0, 1]")
        if self.delay_steps < 0:
            raise ValueError("delay_steps must be >= 0")

    @classmethod
    def perfect(cls) -> "ChannelConfig":
        return cls(0.0, 0.0, 0)


@dataclass(frozen=True)
class Delivery:
    step: int
    receiver: int
    message: SharedMessage
    corrupted: bool = False

    def trace_line(self) -> str:
        return json.dumps({
            "step": self.step, "sender": self.message.sender, "receiver": self.receiver,
            "seq": self.message.seq, "corrupted": self.corrupted,
            "payload": self.message.summary(),
        }, separators=(",", ":"))


@dataclass
class Channel:
    """Full-mesh broadcast with independent per-receiver loss, corruption and fixed delay."""

    config: ChannelConfig
    n_cells: int
    rng: np.random.Generator
    pending: dict[int, list[Delivery]] = field(default_factory=lambda: defaultdict(list))
    trace: IO[str] | None = None

    def transmit(self, msg: SharedMessage, receivers: Sequence[int], step: int) -> list[Delivery]:
        """Queue copies of msg; returns the surviving copies, stamped with the step they arrive."""
        out = []
        # sent after the agents act at ``step``; read at the start of the next epoch
        due = step + 1 + self.config.delay_steps
        for r in receivers:
            if r == msg.sender:
                continue
            if self.rng.random() < self.config.drop_prob:
                continue
            copy, corrupted = msg, False
            if msg.latest_explored is not None and self.rng.random() < self.config.corrupt_prob:
                cell = int(self.rng.integers(0, self.n_cells))
                copy = replace(msg, latest_explored=(cell, msg.latest_explored[1]))
                corrupted = True
            d = Delivery(due, r, copy, corrupted)
            self.pending[due].append(d)
            out.append(d)
        return out

    def broadcast(self, messages: Iterable[SharedMessage], agents: Sequence[int],
                  step: int) -> None:
        # agent-index order keeps multi-agent runs reproducible
        for msg in sorted(messages, key=lambda m: m.sender):
            self.transmit(msg, agents, step)

    def collect(self, step: int) -> dict[int, list[Delivery]]:
        """Deliveries due at ``step`` grouped by receiver (in submission order)."""
        due = self.pending.pop(step, [])
        by_receiver: dict[int, list[Delivery]] = defaultdict(list)
        for d in due:
            by_receiver[d.receiver].append(d)
            if self.trace is not None:
                self.trace.write(d.trace_line() + "\n")
        return dict(by_receiver)


@dataclass
class IntegrationResult:
    new_cells: list[tuple[int, int]]
    detection: SharedDetection | None
    peer_altitudes: dict[int, float]
    rejected: int = 0


@dataclass
class Inbox:
    buffers: dict[int, deque] = field(default_factory=dict)
    confirmed_cells: set[int] = field(default_factory=set)
    confirmed_detection: SharedDetection | None = None
    last_seq: dict[int, int] = field(default_factory=dict)
    altitudes: dict[int, float] = field(default_factory=dict)

    def seen_cells(self) -> set[int]:
        cells: set[int] = set()
        for buf in self.buffers.values():
            for m in buf:
                cells |= _cells_of(m)
        return cells


def _cells_of(m: SharedMessage) -> set[int]:
    cells = set(m.all_explored)
    if m.latest_explored is not None:
        cells.add(m.latest_explored[0])
    return cells


def integrate(inbox: Inbox, deliveries: Iterable[Delivery | SharedMessage]) -> IntegrationResult:
    """Apply the two-latest-messages rule; confirmations are emitted once.

    A cell is confirmed when it appears in both of the two most recent
    messages delivered from the same sender; a detection likewise, with the two
    reported positions within 0.5 m.  Messages whose seq does not exceed the
    last accepted one from that sender are rejected.
    """
    new_cells: list[tuple[int, int]] = []
    detection = None
    rejected = 0
    for d in deliveries:
        m = d.message if isinstance(d, Delivery) else d
        if m.seq <= inbox.last_seq.get(m.sender, -1):
            rejected += 1
            continue
        inbox.last_seq[m.sender] = m.seq
        buf = inbox.buffers.setdefault(m.sender, deque(maxlen=2))
        buf.append(m)
        inbox.altitudes[m.sender] = m.altitude
        if len(buf) < 2:
            continue
        prev, cur = buf[0], buf[1]
        both = _cells_of(prev) & _cells_of(cur)
        for c in sorted(both - inbox.confirmed_cells):
            inbox.confirmed_cells.add(c)
            who = m.sender
            if cur.latest_explored is not None and cur.latest_explored[0] == c:
                who = cur.latest_explored[1]
            new_cells.append((c, who))
        if (inbox.confirmed_detection is None and prev.detection is not None
                and cur.detection is not None and prev.detection.status and cur.detection.status):
            (x0, y0), (x1, y1) = prev.detection.position, cur.detection.position
            if math.hypot(x1 - x0, y1 - y0) <= DETECTION_AGREEMENT:
                detection = SharedDetection(True, ((x0 + x1) / 2, (y0 + y1) / 2),
                                            cur.detection.uav_id)
                inbox.confirmed_detection = detection
    return IntegrationResult(new_cells, detection, dict(inbox.altitudes), rejected)


@dataclass(frozen=True)
class ChannelTrial:
    confirmed: int
    spurious: int
    delivered: int
    corrupted: int


def channel_trial(config: ChannelConfig, n_cells: int, seed, n_senders: int = 3,
                  steps: int = 200, explore_prob: float = 0.2) -> ChannelTrial:
    """Synthetic sharing run used to measure false confirmations.

    Each sender explores a new random cell with probability ``explore_prob`` per
    step and broadcasts its record; one listener integrates whatever arrives.
    A confirmation is spurious when no sender has explored that cell yet.
    """
    if n_cells <= 0 or n_senders <= 0:
        raise ValueError("need at least one cell and one sender")
    ch_seq, ag_seq = np.random.SeedSequence(seed).spawn(2)
    channel = Channel(config, n_cells, np.random.default_rng(ch_seq))
    rng = np.random.default_rng(ag_seq)
    listener = n_senders
    ledgers: list[set[int]] = [set() for _ in range(n_senders)]
    truth: set[int] = set()
    inbox = Inbox()
    confirmed = spurious = delivered = corrupted = 0
    for step in range(steps):
        due = channel.collect(step).get(listener, [])
        delivered += len(due)
        corrupted += sum(d.corrupted for d in due)
        for cell, _ in integrate(inbox, due).new_cells:
            confirmed += 1
            spurious += cell not in truth
        for s in range(n_senders):
            latest = None
            if rng.random() < explore_prob and len(ledgers[s]) < n_cells:
                free = [c for c in range(n_cells) if c not in ledgers[s]]
                latest = int(free[rng.integers(0, len(free))])
                ledgers[s].add(latest)
                truth.add(latest)
            msg = SharedMessage(s, step, None, None if latest is None else (latest, s),
                                frozenset(ledgers[s]), 1.0)
            channel.transmit(msg, [listener], step)
    return ChannelTrial(confirmed, spurious, delivered, corrupted)
