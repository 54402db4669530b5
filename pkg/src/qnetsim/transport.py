"""Transport layer: per-protocol packet preparation and decoding.

The sender side makes sure entanglement preconditions hold (creating EPR
pairs through the network when absent), produces teleport correction
bits, and applies the superdense encoding.  The receiver side decodes
arriving payloads into host stores and emits acknowledgements.

Pinned gate conventions (all relative to Phi+ = (|00> + |11>)/sqrt(2)):

* teleport encode: CNOT(data -> epr half), H(data), measure data (m1,
  the Z trigger) and the half (m2, the X trigger); decode applies X if
  m2 then Z if m1.
* superdense encode on the sender half: 00 -> I, 01 -> X, 10 -> Z,
  11 -> X.Z; decode: CNOT(arrived -> kept), H(arrived), measure both,
  bits = (m_arrived, m_kept).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

from . import core
from .backend import GateSpec, QubitRef
from .core import (AckResult, InvalidMessage, InvalidQubit,
                   MissingEntanglement, NetworkPacket, NoRoute, ProtocolTag,
                   TransportPacket, event_log)

if TYPE_CHECKING:
    from .host import Host

logger = logging.getLogger("qnetsim.transport")

QUANTUM_TAGS = frozenset({
    ProtocolTag.SEND_QUBIT,
    ProtocolTag.SEND_EPR,
    ProtocolTag.SEND_SUPERDENSE,
    ProtocolTag.SEND_GHZ,
    ProtocolTag.EPR_SWAP_CONTROL,
})

SUPERDENSE_MESSAGES = ("00", "01", "10", "11")


@dataclass
class CorrectionBits:
    """Teleportation corrections: m1 triggers Z, m2 triggers X."""

    m1: int
    m2: int
    epr_id: str


def _network():
    from .network import Network
    return Network.get_instance()


# ---------------------------------------------------------------------------
# Core transport operations
# ---------------------------------------------------------------------------

def ensure_epr(host: "Host", partner: str, qubit_id: Optional[str] = None) -> str:
    """Return the id of an EPR pair shared with partner, creating one if needed.

    An existing stored pair is reused without any new creation.  When
    absent, a SEND_EPR request is pushed straight to the network (which
    may run a swap chain) and we block until the partner acknowledges
    the commit of its half.
    """
    existing = host.peek_epr_id(partner, qubit_id)
    if existing is not None:
        return existing
    net = _network()
    if not net.has_route("quantum", host.host_id, partner):
        raise NoRoute(f"no quantum route {host.host_id} -> {partner}")
    qid = qubit_id or core.new_id()
    seq = host.next_sequence(partner)
    pending = host.register_pending(partner, seq)
    tpacket = TransportPacket(host.host_id, partner, ProtocolTag.SEND_EPR,
                              None, seq, await_ack=True,
                              payload_meta={"epr_id": qid})
    net.enqueue(NetworkPacket(host.host_id, partner, core.TTL_DEFAULT, tpacket))
    result = host.wait_pending(pending)
    if result is AckResult.ACKED:
        return qid
    if result is AckResult.NO_ROUTE:
        raise NoRoute(f"no quantum route {host.host_id} -> {partner}")
    raise MissingEntanglement(
        f"EPR establishment with {partner} failed: {result.value}")


def teleport_encode(host: "Host", q: QubitRef, epr_half: QubitRef) -> CorrectionBits:
    """Bell-measure the data qubit against the local EPR half.

    Consumes both sender-side qubits and returns the two correction
    bits the receiver needs.
    """
    if not (q.alive and epr_half.alive):
        raise InvalidQubit("teleport_encode needs two live qubits")
    backend = host.backend
    epr_id = epr_half.qubit_id
    backend.apply_gate(q, GateSpec.cnot(), epr_half)
    backend.apply_gate(q, GateSpec.h())
    m1 = backend.measure(q)
    m2 = backend.measure(epr_half)
    event_log(logger, host.host_id, "teleport_encode",
              f"m1={m1} m2={m2} epr={epr_id}")
    return CorrectionBits(m1, m2, epr_id)


def teleport_decode(host: "Host", epr_half: QubitRef, bits: CorrectionBits) -> QubitRef:
    """Apply the Pauli frame fix and return the recovered data qubit."""
    if epr_half.qubit_id != bits.epr_id:
        raise MissingEntanglement(
            f"correction bits reference pair {bits.epr_id}, got {epr_half.qubit_id}")
    backend = host.backend
    if bits.m2:
        backend.apply_gate(epr_half, GateSpec.x())
    if bits.m1:
        backend.apply_gate(epr_half, GateSpec.z())
    event_log(logger, host.host_id, "teleport_decode",
              f"m1={bits.m1} m2={bits.m2} epr={bits.epr_id}")
    return epr_half


def superdense_encode(two_bits: str, epr_half: QubitRef) -> QubitRef:
    """Encode two classical bits onto one Phi+ half."""
    if two_bits not in SUPERDENSE_MESSAGES:
        raise InvalidMessage(f"superdense message must be one of {SUPERDENSE_MESSAGES}")
    if not epr_half.alive:
        raise InvalidQubit("superdense_encode needs a live EPR half")
    if two_bits == "01":
        epr_half.X()
    elif two_bits == "10":
        epr_half.Z()
    elif two_bits == "11":
        epr_half.Z()
        epr_half.X()
    return epr_half


def superdense_decode(arrived: QubitRef, kept: QubitRef) -> str:
    """Joint Bell-basis readout of the arrived and kept halves."""
    if arrived.qubit_id != kept.qubit_id:
        raise MissingEntanglement(
            f"superdense halves disagree: {arrived.qubit_id} vs {kept.qubit_id}")
    arrived.cnot(kept)
    arrived.H()
    m_arrived = arrived.measure()
    m_kept = kept.measure()
    return f"{m_arrived}{m_kept}"


def emit_ack(host: "Host", original: TransportPacket, status: str = "ok",
             extra_meta: Optional[dict] = None):
    """Mirror an ACK (or NACK for rejected payloads) back to the sender."""
    meta = {"status": status}
    if extra_meta:
        meta.update(extra_meta)
    ack = TransportPacket(host.host_id, original.sender, ProtocolTag.ACK,
                          None, original.sequence, await_ack=False,
                          payload_meta=meta)
    event_log(logger, host.host_id, "ack",
              f"to={original.sender} seq={original.sequence} status={status}")
    _network().enqueue(NetworkPacket(host.host_id, original.sender,
                                     core.TTL_DEFAULT, ack))


def _ack_if_requested(host: "Host", tpacket: TransportPacket):
    if tpacket.await_ack:
        emit_ack(host, tpacket)


def _nack(host: "Host", tpacket: TransportPacket, extra_meta: Optional[dict] = None):
    # Rejections are always reported so the sender can purge bad state.
    emit_ack(host, tpacket, status="rejected", extra_meta=extra_meta)


# ---------------------------------------------------------------------------
# Sender-side request handling (runs on the host's queue processor or a
# worker thread for handlers that may block)
# ---------------------------------------------------------------------------

def handle_request(host: "Host", packet: NetworkPacket):
    tag = packet.inner.protocol
    if tag in (ProtocolTag.SEND_CLASSICAL, ProtocolTag.SEND_QUBIT,
               ProtocolTag.SEND_EPR, ProtocolTag.SEND_BROADCAST):
        _network().enqueue(packet)
    elif tag is ProtocolTag.SEND_GHZ:
        _request_ghz(host, packet)
    elif tag is ProtocolTag.SEND_TELEPORT:
        _request_teleport(host, packet)
    elif tag is ProtocolTag.SEND_SUPERDENSE:
        _request_superdense(host, packet)
    else:
        logger.warning("%s | request | unhandled tag %s", host.host_id, tag)


def _request_ghz(host: "Host", packet: NetworkPacket):
    req = packet.inner.payload
    receivers = req["receivers"]
    distribute = req["distribute"]
    ghz_id = req["ghz_id"]
    seqs = req["seqs"]
    await_ack = packet.inner.await_ack
    owners = list(receivers) if distribute else [host.host_id] + list(receivers)
    refs = host.backend.make_ghz(owners, qubit_id=ghz_id)
    if not distribute:
        own, refs = refs[0], refs[1:]
        if not host.commit_ghz(host.host_id, own):
            for ref in refs:
                host.backend.release(ref)
            host.backend.release(own)
            for receiver in receivers:
                host.resolve_pending(receiver, seqs[receiver], AckResult.REJECTED)
            return
    net = _network()
    for receiver, ref in zip(receivers, refs):
        tpacket = TransportPacket(host.host_id, receiver, ProtocolTag.SEND_GHZ,
                                  ref, seqs[receiver], await_ack,
                                  payload_meta={"ghz_id": ghz_id,
                                                "distributor": host.host_id})
        net.enqueue(NetworkPacket(host.host_id, receiver, core.TTL_DEFAULT, tpacket))


def _request_teleport(host: "Host", packet: NetworkPacket):
    tpacket = packet.inner
    receiver = tpacket.receiver
    q = tpacket.payload
    try:
        epr_id = ensure_epr(host, receiver)
        half = host.take_epr_ref(receiver, epr_id)
        if half is None:
            raise MissingEntanglement(f"stored pair {epr_id} vanished")
        bits = teleport_encode(host, q, half)
    except NoRoute:
        host.backend.release(q)
        host.resolve_pending(receiver, tpacket.sequence, AckResult.NO_ROUTE)
        return
    except (MissingEntanglement, InvalidQubit) as exc:
        logger.warning("%s | teleport | failed: %s", host.host_id, exc)
        if q.alive:
            host.backend.release(q)
        host.resolve_pending(receiver, tpacket.sequence, AckResult.TIMEOUT)
        return
    correction_packet = TransportPacket(
        host.host_id, receiver, ProtocolTag.SEND_TELEPORT, bits,
        tpacket.sequence, tpacket.await_ack,
        payload_meta={"epr_id": bits.epr_id})
    _network().enqueue(NetworkPacket(host.host_id, receiver,
                                     core.TTL_DEFAULT, correction_packet))


def _request_superdense(host: "Host", packet: NetworkPacket):
    tpacket = packet.inner
    receiver = tpacket.receiver
    two_bits = tpacket.payload
    try:
        epr_id = ensure_epr(host, receiver)
        half = host.take_epr_ref(receiver, epr_id)
        if half is None:
            raise MissingEntanglement(f"stored pair {epr_id} vanished")
        encoded = superdense_encode(two_bits, half)
    except NoRoute:
        host.resolve_pending(receiver, tpacket.sequence, AckResult.NO_ROUTE)
        return
    except (MissingEntanglement, InvalidQubit, InvalidMessage) as exc:
        logger.warning("%s | superdense | failed: %s", host.host_id, exc)
        host.resolve_pending(receiver, tpacket.sequence, AckResult.TIMEOUT)
        return
    qubit_packet = TransportPacket(
        host.host_id, receiver, ProtocolTag.SEND_SUPERDENSE, encoded,
        tpacket.sequence, tpacket.await_ack,
        payload_meta={"epr_id": epr_id})
    _network().enqueue(NetworkPacket(host.host_id, receiver,
                                     core.TTL_DEFAULT, qubit_packet))


# ---------------------------------------------------------------------------
# Receiver-side decoding
# ---------------------------------------------------------------------------

def handle_inbound(host: "Host", packet: NetworkPacket):
    tpacket = packet.inner
    tag = tpacket.protocol
    if tag is ProtocolTag.SEND_CLASSICAL:
        host.commit_message(core.Message(tpacket.sender, tpacket.payload,
                                         tpacket.sequence))
        _ack_if_requested(host, tpacket)
    elif tag is ProtocolTag.SEND_BROADCAST:
        host.commit_message(core.Message(tpacket.sender, tpacket.payload,
                                         tpacket.sequence))
    elif tag is ProtocolTag.SEND_QUBIT:
        if host.commit_data_qubit(tpacket.sender, tpacket.payload):
            _ack_if_requested(host, tpacket)
        else:
            host.backend.release(tpacket.payload)
            _nack(host, tpacket)
    elif tag in (ProtocolTag.SEND_EPR, ProtocolTag.EPR_SWAP_CONTROL):
        epr_id = tpacket.payload_meta.get("epr_id")
        if host.commit_epr(tpacket.sender, tpacket.payload, epr_id):
            _ack_if_requested(host, tpacket)
        else:
            host.backend.release(tpacket.payload)
            _nack(host, tpacket, extra_meta={"epr_id": epr_id or ""})
    elif tag is ProtocolTag.SEND_GHZ:
        distributor = tpacket.payload_meta.get("distributor", tpacket.sender)
        if host.commit_ghz(distributor, tpacket.payload):
            _ack_if_requested(host, tpacket)
        else:
            host.backend.release(tpacket.payload)
            _nack(host, tpacket)
    elif tag is ProtocolTag.SEND_TELEPORT:
        _receive_teleport(host, tpacket)
    elif tag is ProtocolTag.SEND_SUPERDENSE:
        _receive_superdense(host, tpacket)
    elif tag is ProtocolTag.ACK:
        host.resolve_ack(tpacket)
    else:
        logger.warning("%s | inbound | unhandled tag %s", host.host_id, tag)


def _receive_teleport(host: "Host", tpacket: TransportPacket):
    bits: CorrectionBits = tpacket.payload
    half = host.get_epr(tpacket.sender, bits.epr_id, wait=host.ack_timeout)
    if half is None:
        logger.warning("%s | teleport | missing EPR half %s from %s",
                       host.host_id, bits.epr_id, tpacket.sender)
        _nack(host, tpacket, extra_meta={"epr_id": bits.epr_id})
        return
    recovered = teleport_decode(host, half, bits)
    if host.commit_data_qubit(tpacket.sender, recovered):
        _ack_if_requested(host, tpacket)
    else:
        host.backend.release(recovered)
        _nack(host, tpacket)


def _receive_superdense(host: "Host", tpacket: TransportPacket):
    arrived: QubitRef = tpacket.payload
    epr_id = tpacket.payload_meta.get("epr_id", arrived.qubit_id)
    kept = host.get_epr(tpacket.sender, epr_id, wait=host.ack_timeout)
    if kept is None:
        logger.warning("%s | superdense | missing EPR half %s from %s",
                       host.host_id, epr_id, tpacket.sender)
        host.backend.release(arrived)
        _nack(host, tpacket, extra_meta={"epr_id": epr_id})
        return
    two_bits = superdense_decode(arrived, kept)
    host.commit_message(core.Message(tpacket.sender, two_bits, tpacket.sequence))
    _ack_if_requested(host, tpacket)
