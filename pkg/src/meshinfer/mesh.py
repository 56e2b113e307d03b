"""Lossy all-to-all round simulator.

Models the round contract of a synchronous-broadcast mesh: every device
contributes a payload of selected activation columns and, absent losses, every
device ends the round holding all payloads. Three stochastic loss modes apply:
per-pair loss, receive blackout (a device hears nothing) and transmit blackout
(a device's payload reaches no one). Topology, slotting and coding are
abstracted away; hop count only enters the latency model.

All randomness is counter-based: each potential loss event is an independent
hash of (seed, round, participant ids), so traces are reproducible regardless
of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError, ShapeError
from .kernels import Matrix

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_TAG_PAIR = 0x50414952
_TAG_RX = 0x52585858
_TAG_TX = 0x54585858


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = (z + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
    return z ^ (z >> np.uint64(31))


def event_uniform(seed: int, round_id: int, a, b, tag: int) -> np.ndarray:
    """Deterministic uniforms in [0, 1) keyed by (seed, round, a, b, tag)."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        z = _splitmix64(z ^ np.uint64(round_id))
        z = _splitmix64(z ^ a)
        z = _splitmix64(z ^ b)
        z = _splitmix64(z ^ np.uint64(tag))
    return (z >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


@dataclass(frozen=True)
class LossModel:
    """Per-round loss probabilities for the three modes.

    p_pair: a given (sender, receiver) payload is lost.
    p_rx_blackout: a device receives nothing this round.
    p_tx_blackout: a device's payload reaches no one.
    """

    p_pair: float = 0.0
    p_rx_blackout: float = 0.0
    p_tx_blackout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_pair", "p_rx_blackout", "p_tx_blackout"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ShapeError(f"{name} must be in [0, 1], got {p}")


LOSSLESS = LossModel()


@dataclass(frozen=True)
class LossEvents:
    """Sampled loss events of one round."""

    tx_blackouts: frozenset[int]
    rx_blackouts: frozenset[int]
    pair_losses: frozenset[tuple[int, int]]

    def delivered(self, sender: int, receiver: int) -> bool:
        return (sender != receiver
                and sender not in self.tx_blackouts
                and receiver not in self.rx_blackouts
                and (sender, receiver) not in self.pair_losses)


def sample_losses(loss: LossModel, devices: int, round_id: int) -> LossEvents:
    """Sample all loss events of a round; deterministic in (seed, round_id)."""
    ids = np.arange(devices, dtype=np.uint64)
    tx = event_uniform(loss.seed, round_id, ids, 0, _TAG_TX) < loss.p_tx_blackout
    rx = event_uniform(loss.seed, round_id, ids, 0, _TAG_RX) < loss.p_rx_blackout
    senders, receivers = np.meshgrid(ids, ids, indexing="ij")
    pair = event_uniform(loss.seed, round_id, senders.ravel(), receivers.ravel(),
                         _TAG_PAIR).reshape(devices, devices) < loss.p_pair
    pairs = frozenset(
        (int(s), int(r))
        for s in range(devices) for r in range(devices)
        if s != r and pair[s, r]
    )
    return LossEvents(
        tx_blackouts=frozenset(int(i) for i in np.flatnonzero(tx)),
        rx_blackouts=frozenset(int(i) for i in np.flatnonzero(rx)),
        pair_losses=pairs,
    )


@dataclass(frozen=True)
class Payload:
    """Columns one device broadcasts in a round: global indices plus values."""

    cols: np.ndarray        # int64, strictly increasing
    values: Matrix          # tokens x len(cols)


@dataclass
class GatherTrace:
    """Byte-accurate record of one all-to-all round."""

    round_id: int
    site: str
    sent_cols: list[np.ndarray]
    sent_bytes: list[int]
    delivered: np.ndarray               # (D, D) bool, diagonal True
    events: LossEvents = field(repr=False, default=None)

    @property
    def total_bytes(self) -> int:
        return sum(self.sent_bytes)


def comm_bytes(trace: GatherTrace) -> int:
    """Bytes put on the air in this round; losses do not reduce them
    (broadcasts are sent regardless of receipt)."""
    return trace.total_bytes


def somegather_round(
    payloads: list[Payload],
    loss: LossModel,
    round_id: int,
    bytes_per_element: int = 1,
    site: str = "",
) -> tuple[list[dict[int, Payload]], GatherTrace]:
    """Execute one all-to-all round.

    Returns, per receiver, the payloads that arrived (own payload excluded:
    a device always retains its own columns without communication), plus the
    trace. With a single device nothing is transmitted.
    """
    devices = len(payloads)
    seen: set[int] = set()
    for p in payloads:
        cols = set(int(c) for c in p.cols)
        if seen & cols:
            raise ProtocolError(
                f"overlapping column ownership: {sorted(seen & cols)}")
        seen |= cols
        if p.values.shape[1] != len(p.cols):
            raise ShapeError("payload values do not match its column count")

    events = sample_losses(loss, devices, round_id)
    delivered = np.eye(devices, dtype=bool)
    received: list[dict[int, Payload]] = [dict() for _ in range(devices)]
    sent_cols = []
    sent_bytes = []
    for s in range(devices):
        if devices > 1:
            sent_cols.append(np.asarray(payloads[s].cols, dtype=np.int64))
            sent_bytes.append(
                len(payloads[s].cols) * payloads[s].values.shape[0] * bytes_per_element)
        else:
            sent_cols.append(np.empty(0, dtype=np.int64))
            sent_bytes.append(0)
        for r in range(devices):
            if s == r:
                continue
            if events.delivered(s, r):
                delivered[s, r] = True
                received[r][s] = payloads[s]
    trace = GatherTrace(round_id=round_id, site=site, sent_cols=sent_cols,
                        sent_bytes=sent_bytes, delivered=delivered, events=events)
    return received, trace
