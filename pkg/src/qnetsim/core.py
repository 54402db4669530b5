"""Shared vocabulary for the simulator.

Packets, messages, protocol tags, per-pair sequence counters, the seeded
randomness bank, ID generation, error types, and the wire format used by
the CLI's record/replay log.
"""
from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

import numpy as np

TTL_DEFAULT = 64
BROADCAST_ADDR = "*"


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class QNetSimError(Exception):
    """Base class for all simulator errors."""


class InvalidQubit(QNetSimError):
    """Operation on a released or destructively measured qubit handle."""


class DuplicateQubitId(QNetSimError):
    pass


class SameQubit(QNetSimError):
    pass


class SelfLink(QNetSimError):
    pass


class AlreadyStarted(QNetSimError):
    pass


class HostStopped(QNetSimError):
    pass


class NoRoute(QNetSimError):
    pass


class UnknownHost(QNetSimError):
    pass


class DuplicateHost(QNetSimError):
    pass


class InvalidLimit(QNetSimError):
    pass


class InvalidMessage(QNetSimError):
    pass


class MissingEntanglement(QNetSimError):
    pass


class SwapFailed(QNetSimError):
    pass


class RoutingError(QNetSimError):
    pass


class ConfigError(QNetSimError):
    pass


class InsufficientKey(QNetSimError):
    pass


# ---------------------------------------------------------------------------
# Protocol tags and packets
# ---------------------------------------------------------------------------

class ProtocolTag(Enum):
    SEND_CLASSICAL = "SEND_CLASSICAL"
    SEND_QUBIT = "SEND_QUBIT"
    SEND_EPR = "SEND_EPR"
    SEND_TELEPORT = "SEND_TELEPORT"
    SEND_SUPERDENSE = "SEND_SUPERDENSE"
    SEND_GHZ = "SEND_GHZ"
    SEND_BROADCAST = "SEND_BROADCAST"
    ACK = "ACK"
    EPR_SWAP_CONTROL = "EPR_SWAP_CONTROL"
    RELAY = "RELAY"


class AckResult(Enum):
    """Outcome of a send operation.

    ACKED/SENT are truthy so protocol code can write
    ``if host.send_qubit(...):`` like the usual idiom.  SENT means the
    packet was handed off without an acknowledgement being requested.
    """

    ACKED = "acked"
    SENT = "sent"
    TIMEOUT = "timeout"
    NO_ROUTE = "no_route"
    REJECTED = "rejected"

    def __bool__(self) -> bool:
        return self in (AckResult.ACKED, AckResult.SENT)


@dataclass
class Message:
    """A received classical payload.

    ``content`` is text; sniffer hooks may mutate it in place while the
    carrying packet is being relayed.
    """

    sender: str
    content: str
    seq_num: int


@dataclass
class TransportPacket:
    """Transport-layer envelope: who, what protocol, and the payload.

    ``payload`` is a str for classical content, a QubitRef for quantum
    payloads, a CorrectionBits record for teleportation, or an internal
    control dict.  ``payload_meta`` carries small string key/values such
    as the EPR id or the GHZ distributor.
    """

    sender: str
    receiver: str
    protocol: ProtocolTag
    payload: Any
    sequence: int
    await_ack: bool = False
    payload_meta: dict[str, str] = field(default_factory=dict)


def new_id() -> str:
    """Return a fresh 128-bit id as 32 lowercase hex chars."""
    return _BANK.id_bytes(16).hex()


@dataclass
class NetworkPacket:
    """Network-layer envelope wrapping a transport packet.

    ``at`` tracks the current holder while the packet moves hop by hop;
    ``route_hint`` pins the full route when hop-by-hop routing is off.
    """

    src: str
    dst: str
    ttl: int
    inner: TransportPacket
    route_hint: Optional[list[str]] = None
    at: str = ""
    packet_id: str = field(default_factory=new_id)

    def __post_init__(self):
        if not self.at:
            self.at = self.src


class SequenceCounters:
    """Monotone per-(sender, receiver) sequence numbers, starting at 0."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counters: dict[tuple[str, str], int] = {}

    def next(self, sender: str, receiver: str) -> int:
        with self._lock:
            key = (sender, receiver)
            value = self._counters.get(key, -1) + 1
            self._counters[key] = value
            return value


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

def _stable_digest(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


class HostRandom:
    """Thread-safe random stream owned by one host.

    Streams are derived from (seed, host id) so that concurrent
    scheduling of other hosts never perturbs this host's draws.
    """

    def __init__(self, seed: int, host_id: str):
        self._lock = threading.Lock()
        self._host_id = host_id
        self._gen = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, _stable_digest(host_id)]))

    def rebind(self, seed: int):
        with self._lock:
            self._gen = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, _stable_digest(self._host_id)]))

    def random(self) -> float:
        with self._lock:
            return float(self._gen.random())

    def bit(self) -> int:
        with self._lock:
            return int(self._gen.integers(0, 2))

    def integers(self, low: int, high: int) -> int:
        with self._lock:
            return int(self._gen.integers(low, high))

    def choice(self, seq):
        with self._lock:
            return seq[int(self._gen.integers(0, len(seq)))]


class RandomBank:
    """All simulator randomness flows from here.

    One (seed, host-id) substream per host plus a dedicated stream for
    qubit/packet id generation.
    """

    def __init__(self, seed: int = 0):
        self._lock = threading.Lock()
        self._seed = seed
        self._hosts: dict[str, HostRandom] = {}
        self._ids = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, _stable_digest("::ids::")]))

    def reseed(self, seed: int):
        with self._lock:
            self._seed = seed
            self._ids = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, _stable_digest("::ids::")]))
            for stream in self._hosts.values():
                stream.rebind(seed)

    def for_host(self, host_id: str) -> HostRandom:
        with self._lock:
            stream = self._hosts.get(host_id)
            if stream is None:
                stream = HostRandom(self._seed, host_id)
                self._hosts[host_id] = stream
            return stream

    def id_bytes(self, n: int) -> bytes:
        with self._lock:
            return self._ids.bytes(n)


_BANK = RandomBank(0)


def reseed(seed: int):
    """Reseed every random stream in the simulation."""
    _BANK.reseed(seed)


def host_random(host_id: str) -> HostRandom:
    return _BANK.for_host(host_id)


# ---------------------------------------------------------------------------
# Structured logging helper
# ---------------------------------------------------------------------------

def event_log(logger, who: str, event: str, detail: str, level: int = 10):
    """Emit one `who | event | detail` line; the handler prepends the ts."""
    logger.log(level, "%s | %s | %s", who, event, detail)


# ---------------------------------------------------------------------------
# Classical-payload packet serialization (record/replay log format)
# ---------------------------------------------------------------------------
#
# Length-prefixed fields in declaration order, big-endian integers,
# UTF-8 strings.  Only packets whose payload is classical text (or empty)
# can be serialized; qubit payloads are in-process references.

_MAGIC = b"QNP1"


def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack(">I", len(raw)) + raw


def _unpack_str(data: bytes, offset: int) -> tuple[str, int]:
    (length,) = struct.unpack_from(">I", data, offset)
    offset += 4
    value = data[offset:offset + length].decode("utf-8")
    return value, offset + length


def serialize_packet(packet: NetworkPacket) -> bytes:
    inner = packet.inner
    if inner.payload is not None and not isinstance(inner.payload, str):
        raise ValueError("only classical-payload packets can be serialized")
    parts = [_MAGIC]
    parts.append(_pack_str(packet.src))
    parts.append(_pack_str(packet.dst))
    parts.append(struct.pack(">I", packet.ttl))
    # inner transport packet, declaration order
    parts.append(_pack_str(inner.sender))
    parts.append(_pack_str(inner.receiver))
    parts.append(_pack_str(inner.protocol.value))
    parts.append(struct.pack(">B", 1 if inner.payload is not None else 0))
    if inner.payload is not None:
        parts.append(_pack_str(inner.payload))
    parts.append(struct.pack(">Q", inner.sequence))
    parts.append(struct.pack(">B", 1 if inner.await_ack else 0))
    parts.append(struct.pack(">I", len(inner.payload_meta)))
    for key, value in inner.payload_meta.items():
        parts.append(_pack_str(key))
        parts.append(_pack_str(str(value)))
    # trailing network fields
    parts.append(struct.pack(">B", 1 if packet.route_hint is not None else 0))
    if packet.route_hint is not None:
        parts.append(struct.pack(">I", len(packet.route_hint)))
        for node in packet.route_hint:
            parts.append(_pack_str(node))
    parts.append(_pack_str(packet.at))
    parts.append(_pack_str(packet.packet_id))
    return b"".join(parts)


def deserialize_packet(data: bytes) -> NetworkPacket:
    if data[:4] != _MAGIC:
        raise ValueError("bad packet magic")
    offset = 4
    src, offset = _unpack_str(data, offset)
    dst, offset = _unpack_str(data, offset)
    (ttl,) = struct.unpack_from(">I", data, offset)
    offset += 4
    sender, offset = _unpack_str(data, offset)
    receiver, offset = _unpack_str(data, offset)
    proto, offset = _unpack_str(data, offset)
    (has_payload,) = struct.unpack_from(">B", data, offset)
    offset += 1
    payload = None
    if has_payload:
        payload, offset = _unpack_str(data, offset)
    (sequence,) = struct.unpack_from(">Q", data, offset)
    offset += 8
    (await_ack,) = struct.unpack_from(">B", data, offset)
    offset += 1
    (n_meta,) = struct.unpack_from(">I", data, offset)
    offset += 4
    meta = {}
    for _ in range(n_meta):
        key, offset = _unpack_str(data, offset)
        value, offset = _unpack_str(data, offset)
        meta[key] = value
    (has_hint,) = struct.unpack_from(">B", data, offset)
    offset += 1
    hint = None
    if has_hint:
        (n_nodes,) = struct.unpack_from(">I", data, offset)
        offset += 4
        hint = []
        for _ in range(n_nodes):
            node, offset = _unpack_str(data, offset)
            hint.append(node)
    at, offset = _unpack_str(data, offset)
    packet_id, offset = _unpack_str(data, offset)
    inner = TransportPacket(sender, receiver, ProtocolTag(proto), payload,
                            sequence, bool(await_ack), meta)
    return NetworkPacket(src, dst, ttl, inner, hint, at, packet_id)
