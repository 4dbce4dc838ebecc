"""Simulated CAN bus with standard-id arbitration plus a segmented transport.

Transport wire format (all frames dlc <= 8, payload <= 65535 bytes):

    header frame:  A0 | len_lo len_hi | crc32 (4 bytes, little-endian) | 00
    body frame:    seq (mod 256, from 0) | up to 7 payload bytes

The CRC in the header is CRC-32/MPEG-2 over the whole payload and is what
receivers check after reassembly.  One bus step transmits exactly one
frame: the pending frame with the lowest id wins arbitration (FIFO order
breaks ties).  Fault injection corrupts or drops the frame under
transmission; a corrupted frame is signalled as an error frame and never
reaches a receive FIFO, and the sender re-queues it until its retransmit
budget runs out, at which point the node counts a bus-off.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from random import Random

from .integrity import crc32

MAX_STANDARD_ID = 0x7FF
MAX_FRAME_DATA = 8
MAX_SEGMENTED_PAYLOAD = 0xFFFF

HEADER_MARKER = 0xA0
BODY_CHUNK = 7

ACCEPT_ALL = ((0x000, 0x000),)

_HEADER = struct.Struct("<BHIB")


class CanError(Exception):
    pass


class MalformedFrame(CanError):
    pass


class DuplicateNode(CanError):
    pass


class PayloadTooLarge(CanError):
    pass


class SequenceGap(CanError):
    """A body frame arrived out of order (or without a header)."""


class ChecksumMismatch(CanError):
    """Reassembled payload does not match the CRC announced in the header."""


class FrameKind(Enum):
    DATA = "data"
    ERROR = "error"


@dataclass(frozen=True)
class CanFrame:
    can_id: int
    data: bytes
    kind: FrameKind = FrameKind.DATA

    def __post_init__(self) -> None:
        if not 0 <= self.can_id <= MAX_STANDARD_ID:
            raise MalformedFrame(f"id 0x{self.can_id:X} exceeds the 11-bit range")
        if len(self.data) > MAX_FRAME_DATA:
            raise MalformedFrame(f"dlc {len(self.data)} exceeds 8")
        object.__setattr__(self, "data", bytes(self.data))

    @property
    def dlc(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class SegmentedMessage:
    can_id: int
    payload: bytes


@dataclass(frozen=True)
class BusConfig:
    frame_time_us: int = 500
    corruption_probability: float = 0.0
    drop_probability: float = 0.0
    rng_seed: int = 0
    # None lifts the budget entirely.
    max_auto_retransmit: int | None = 3


@dataclass
class _TxEntry:
    order: int
    frame: CanFrame
    attempts: int = 0


class _Assembly:
    __slots__ = ("expected", "crc", "buf", "seq")

    def __init__(self, expected: int, crc: int):
        self.expected = expected
        self.crc = crc
        self.buf = bytearray()
        self.seq = 0


class Endpoint:
    """One attached node: its acceptance filters, FIFOs and link statistics."""

    def __init__(self, node_id: int, filters: tuple[tuple[int, int], ...]):
        self.node_id = node_id
        self.filters = tuple(filters)
        self.rx: deque[CanFrame] = deque()
        self.tx: deque[_TxEntry] = deque()
        self.retransmissions = 0
        self.bus_off_count = 0
        self._assembly: dict[int, _Assembly] = {}

    def accepts(self, can_id: int) -> bool:
        return any((can_id & mask) == match for mask, match in self.filters)

    def clear(self) -> None:
        """Controller reset: drops FIFOs and any half-assembled payloads."""
        self.rx.clear()
        self.tx.clear()
        self._assembly.clear()


@dataclass
class BusStats:
    frames_sent: int = 0
    payload_bytes: int = 0
    deliveries: int = 0
    corrupted: int = 0
    dropped: int = 0
    retransmissions: int = 0
    bus_off_events: int = 0
    busy_time_us: int = 0


class Bus:
    def __init__(self, config: BusConfig | None = None):
        self.config = config or BusConfig()
        self.rng = Random(self.config.rng_seed)
        self.endpoints: dict[int, Endpoint] = {}
        self.stats = BusStats()
        self.trace: list[dict] = []
        self.trace_enabled = False
        self._order = 0

    def attach(self, node_id: int, filters: tuple[tuple[int, int], ...] = ACCEPT_ALL) -> Endpoint:
        if node_id in self.endpoints:
            raise DuplicateNode(f"node id {node_id} already attached")
        endpoint = Endpoint(node_id, filters)
        self.endpoints[node_id] = endpoint
        return endpoint

    def transmit(self, endpoint: Endpoint, frame: CanFrame) -> None:
        if frame.kind is not FrameKind.DATA:
            raise MalformedFrame("only data frames can be queued for transmission")
        self._order += 1
        endpoint.tx.append(_TxEntry(self._order, frame))

    def pending(self) -> bool:
        return any(ep.tx for ep in self.endpoints.values())

    def step(self, now_us: int = 0) -> tuple[list[tuple[int, CanFrame]], int]:
        """Transmit at most one frame; returns ``(delivered, elapsed_us)``.

        ``delivered`` lists ``(receiver node_id, frame)`` pairs.  ``elapsed``
        is the frame time when a frame occupied the bus, zero when idle.
        """
        contenders = [(ep.tx[0].frame.can_id, ep.tx[0].order, ep) for ep in self.endpoints.values() if ep.tx]
        if not contenders:
            return [], 0
        _, _, sender = min(contenders, key=lambda c: (c[0], c[1]))
        entry = sender.tx.popleft()
        frame = entry.frame

        self.stats.frames_sent += 1
        self.stats.payload_bytes += frame.dlc
        self.stats.busy_time_us += self.config.frame_time_us
        elapsed = self.config.frame_time_us

        roll = self.rng.random()
        if roll < self.config.corruption_probability and frame.dlc > 0:
            mangled = bytearray(frame.data)
            mangled[self.rng.randrange(frame.dlc)] ^= 1 << self.rng.randrange(8)
            self.stats.corrupted += 1
            self._trace(now_us, CanFrame(frame.can_id, bytes(mangled), FrameKind.ERROR))
            self._retransmit(sender, entry)
            return [], elapsed
        if roll < self.config.corruption_probability + self.config.drop_probability:
            self.stats.dropped += 1
            self._retransmit(sender, entry)
            return [], elapsed

        self._trace(now_us, frame)
        delivered = []
        for node_id, ep in self.endpoints.items():
            if ep is sender or not ep.accepts(frame.can_id):
                continue
            ep.rx.append(frame)
            delivered.append((node_id, frame))
        self.stats.deliveries += len(delivered)
        return delivered, elapsed

    def _retransmit(self, sender: Endpoint, entry: _TxEntry) -> None:
        budget = self.config.max_auto_retransmit
        if budget is None or entry.attempts < budget:
            entry.attempts += 1
            sender.retransmissions += 1
            self.stats.retransmissions += 1
            sender.tx.appendleft(entry)  # keeps its original arbitration slot
        else:
            sender.bus_off_count += 1
            self.stats.bus_off_events += 1

    def _trace(self, now_us: int, frame: CanFrame) -> None:
        if self.trace_enabled:
            self.trace.append(
                {
                    "time_us": now_us,
                    "id": frame.can_id,
                    "dlc": frame.dlc,
                    "data": frame.data.hex(),
                    "kind": frame.kind.value,
                }
            )


def send_segmented(bus: Bus, endpoint: Endpoint, can_id: int, payload: bytes) -> int:
    """Queue one payload as a header frame plus 7-byte body frames; returns
    the number of frames queued."""
    if len(payload) == 0:
        raise ValueError("refusing to send an empty payload")
    if len(payload) > MAX_SEGMENTED_PAYLOAD:
        raise PayloadTooLarge(f"{len(payload)} bytes exceeds the 16-bit length field")
    bus.transmit(endpoint, CanFrame(can_id, _HEADER.pack(HEADER_MARKER, len(payload), crc32(payload), 0)))
    frames = 1
    seq = 0
    for start in range(0, len(payload), BODY_CHUNK):
        chunk = payload[start : start + BODY_CHUNK]
        bus.transmit(endpoint, CanFrame(can_id, bytes([seq & 0xFF]) + chunk))
        seq += 1
        frames += 1
    return frames


def recv_segmented(endpoint: Endpoint) -> SegmentedMessage | None:
    """Feed queued frames into reassembly; returns the next complete message,
    or None while one is still pending.

    Raises :class:`SequenceGap` when a body frame is missing or out of phase
    and :class:`ChecksumMismatch` when a reassembled payload fails its CRC;
    either way the partial payload is discarded and later frames start fresh.
    """
    while endpoint.rx:
        frame = endpoint.rx.popleft()
        state = endpoint._assembly.get(frame.can_id)
        if state is None:
            if frame.dlc == _HEADER.size and frame.data[0] == HEADER_MARKER:
                marker, length, crc, _ = _HEADER.unpack(frame.data)
                endpoint._assembly[frame.can_id] = _Assembly(length, crc)
                continue
            raise SequenceGap(f"body frame on id 0x{frame.can_id:X} without a header")
        if frame.dlc < 1 or frame.data[0] != state.seq & 0xFF:
            del endpoint._assembly[frame.can_id]
            got = frame.data[0] if frame.dlc else None
            raise SequenceGap(f"expected seq {state.seq & 0xFF}, got {got}")
        state.buf += frame.data[1:]
        state.seq += 1
        if len(state.buf) >= state.expected:
            del endpoint._assembly[frame.can_id]
            payload = bytes(state.buf[: state.expected])
            if len(state.buf) != state.expected or crc32(payload) != state.crc:
                raise ChecksumMismatch(f"payload on id 0x{frame.can_id:X} failed its checksum")
            return SegmentedMessage(frame.can_id, payload)
    return None
