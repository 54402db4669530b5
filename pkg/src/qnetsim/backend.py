"""Thread-safe state-vector simulation of qubits grouped into registers.

Tensor convention (pinned so oracle tests can be bit-exact): position i of
a register's qubit order occupies bit i of the amplitude index, little
endian.  For a two-qubit register [a, b] the amplitude at index
``k = bit(a) + 2 * bit(b)`` is the coefficient of |b a>.  A Bell pair
built as H on position 0 followed by CNOT(0 -> 1) therefore has
amplitudes (1/sqrt(2), 0, 0, 1/sqrt(2)).

Two-qubit gate matrices act in the basis ``index = 2 * bit(first) +
bit(second)`` where ``first`` is the qubit passed as ``q`` to
``apply_gate`` and ``second`` is ``target2``.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import core
from .core import DuplicateQubitId, InvalidQubit, SameQubit

ATOL = 1e-9
FLUSH_EPS = 1e-12

_SQ2 = 1.0 / math.sqrt(2.0)


class GateKind(Enum):
    I = "I"
    X = "X"
    Y = "Y"
    Z = "Z"
    H = "H"
    S = "S"
    T = "T"
    RX = "RX"
    RY = "RY"
    RZ = "RZ"
    CUSTOM1Q = "CUSTOM1Q"
    CNOT = "CNOT"
    CZ = "CZ"
    CUSTOM2Q = "CUSTOM2Q"


_TWO_QUBIT_KINDS = {GateKind.CNOT, GateKind.CZ, GateKind.CUSTOM2Q}
_ROTATION_KINDS = {GateKind.RX, GateKind.RY, GateKind.RZ}
_CUSTOM_KINDS = {GateKind.CUSTOM1Q, GateKind.CUSTOM2Q}

_FIXED_1Q = {
    GateKind.I: np.eye(2, dtype=complex),
    GateKind.X: np.array([[0, 1], [1, 0]], dtype=complex),
    GateKind.Y: np.array([[0, -1j], [1j, 0]], dtype=complex),
    GateKind.Z: np.array([[1, 0], [0, -1]], dtype=complex),
    GateKind.H: np.array([[_SQ2, _SQ2], [_SQ2, -_SQ2]], dtype=complex),
    GateKind.S: np.array([[1, 0], [0, 1j]], dtype=complex),
    GateKind.T: np.array([[1, 0], [0, np.exp(1j * math.pi / 4)]], dtype=complex),
}

_CNOT = np.array([[1, 0, 0, 0],
                  [0, 1, 0, 0],
                  [0, 0, 0, 1],
                  [0, 0, 1, 0]], dtype=complex)
_CZ = np.diag([1, 1, 1, -1]).astype(complex)


def _require_unitary(matrix: np.ndarray, dim: int):
    m = np.asarray(matrix, dtype=complex)
    if m.shape != (dim, dim):
        raise ValueError(f"expected a {dim}x{dim} matrix, got {m.shape}")
    if not np.allclose(m.conj().T @ m, np.eye(dim), atol=ATOL):
        raise ValueError("matrix is not unitary within 1e-9")
    return m


@dataclass(frozen=True)
class GateSpec:
    """A gate selection: fixed kind, rotation with angle, or custom matrix."""

    kind: GateKind
    angle: Optional[float] = None
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind in _ROTATION_KINDS and self.angle is None:
            raise ValueError(f"{self.kind.value} requires an angle")
        if self.kind in _CUSTOM_KINDS:
            dim = 4 if self.kind is GateKind.CUSTOM2Q else 2
            object.__setattr__(self, "matrix", _require_unitary(self.matrix, dim))

    @property
    def two_qubit(self) -> bool:
        return self.kind in _TWO_QUBIT_KINDS

    def matrix_for(self) -> np.ndarray:
        kind = self.kind
        if kind in _FIXED_1Q:
            return _FIXED_1Q[kind]
        if kind is GateKind.CNOT:
            return _CNOT
        if kind is GateKind.CZ:
            return _CZ
        if kind in _CUSTOM_KINDS:
            return self.matrix
        half = self.angle / 2.0
        c, s = math.cos(half), math.sin(half)
        if kind is GateKind.RX:
            return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)
        if kind is GateKind.RY:
            return np.array([[c, -s], [s, c]], dtype=complex)
        if kind is GateKind.RZ:
            return np.array([[np.exp(-1j * half), 0], [0, np.exp(1j * half)]], dtype=complex)
        raise ValueError(f"unknown gate kind {kind}")

    # Convenience constructors
    @classmethod
    def i(cls):
        return cls(GateKind.I)

    @classmethod
    def x(cls):
        return cls(GateKind.X)

    @classmethod
    def y(cls):
        return cls(GateKind.Y)

    @classmethod
    def z(cls):
        return cls(GateKind.Z)

    @classmethod
    def h(cls):
        return cls(GateKind.H)

    @classmethod
    def s(cls):
        return cls(GateKind.S)

    @classmethod
    def t(cls):
        return cls(GateKind.T)

    @classmethod
    def rx(cls, angle: float):
        return cls(GateKind.RX, angle=angle)

    @classmethod
    def ry(cls, angle: float):
        return cls(GateKind.RY, angle=angle)

    @classmethod
    def rz(cls, angle: float):
        return cls(GateKind.RZ, angle=angle)

    @classmethod
    def cnot(cls):
        return cls(GateKind.CNOT)

    @classmethod
    def cz(cls):
        return cls(GateKind.CZ)

    @classmethod
    def custom1q(cls, matrix):
        return cls(GateKind.CUSTOM1Q, matrix=np.asarray(matrix, dtype=complex))

    @classmethod
    def custom2q(cls, matrix):
        return cls(GateKind.CUSTOM2Q, matrix=np.asarray(matrix, dtype=complex))


class StateRegister:
    """One entangling group: an amplitude vector plus its qubit order."""

    __slots__ = ("amplitudes", "refs")

    def __init__(self, amplitudes: np.ndarray, refs: list["QubitRef"]):
        self.amplitudes = amplitudes
        self.refs = refs

    @property
    def qubit_order(self) -> list[str]:
        return [r.qubit_id for r in self.refs]

    @property
    def n_qubits(self) -> int:
        return len(self.refs)


class QubitRef:
    """An owned handle to one simulated qubit.

    EPR and GHZ partners deliberately share a qubit_id; the handle object
    itself is the unit of ownership.  A released or destructively
    measured handle is dead and rejects all further operations.
    """

    __slots__ = ("qubit_id", "owner", "_backend", "_register")

    def __init__(self, qubit_id: str, owner: str, backend: "Backend", register):
        self.qubit_id = qubit_id
        self.owner = owner
        self._backend = backend
        self._register = register

    @property
    def alive(self) -> bool:
        return self._register is not None

    def __repr__(self):
        state = "live" if self.alive else "dead"
        return f"<QubitRef {self.qubit_id[:8]} owner={self.owner} {state}>"

    # Gate sugar mirroring the host-level protocol code style.
    def apply(self, gate: GateSpec, other: "QubitRef" = None):
        self._backend.apply_gate(self, gate, other)
        return self

    def H(self):
        return self.apply(GateSpec.h())

    def X(self):
        return self.apply(GateSpec.x())

    def Y(self):
        return self.apply(GateSpec.y())

    def Z(self):
        return self.apply(GateSpec.z())

    def S(self):
        return self.apply(GateSpec.s())

    def T(self):
        return self.apply(GateSpec.t())

    def rx(self, angle: float):
        return self.apply(GateSpec.rx(angle))

    def ry(self, angle: float):
        return self.apply(GateSpec.ry(angle))

    def rz(self, angle: float):
        return self.apply(GateSpec.rz(angle))

    def cnot(self, target: "QubitRef"):
        return self.apply(GateSpec.cnot(), target)

    def cz(self, target: "QubitRef"):
        return self.apply(GateSpec.cz(), target)

    def measure(self, non_destructive: bool = False) -> int:
        return self._backend.measure(self, non_destructive=non_destructive)

    def release(self):
        self._backend.release(self)


class Backend:
    """Registers, gates, Born-rule measurement, and EPR/GHZ construction.

    All mutating operations are serialized by one re-entrant lock;
    callers never observe a half-applied gate.  Measurement randomness
    is drawn from the owning host's seeded substream.
    """

    def __init__(self, diagnostics: bool = False):
        self.diagnostics = diagnostics
        self._lock = threading.RLock()
        self._registers: set[StateRegister] = set()
        self._live_ids: dict[tuple[str, str], int] = {}
        self.stats = {"create_qubit": 0, "make_epr": 0, "make_ghz": 0, "measure": 0}

    # -- registry helpers ---------------------------------------------------

    def _track(self, owner: str, qubit_id: str):
        key = (owner, qubit_id)
        self._live_ids[key] = self._live_ids.get(key, 0) + 1

    def _untrack(self, owner: str, qubit_id: str):
        key = (owner, qubit_id)
        count = self._live_ids.get(key, 0) - 1
        if count <= 0:
            self._live_ids.pop(key, None)
        else:
            self._live_ids[key] = count

    def _position(self, q: QubitRef) -> int:
        reg = q._register
        if reg is None:
            raise InvalidQubit(f"qubit {q.qubit_id} is no longer live")
        for i, ref in enumerate(reg.refs):
            if ref is q:
                return i
        raise InvalidQubit(f"qubit {q.qubit_id} not found in its register")

    # -- construction -------------------------------------------------------

    def create_qubit(self, owner: str, qubit_id: Optional[str] = None) -> QubitRef:
        """Return a fresh qubit in state |0> inside its own register."""
        with self._lock:
            if qubit_id is not None and (owner, qubit_id) in self._live_ids:
                raise DuplicateQubitId(f"{owner} already holds live qubit {qubit_id}")
            qid = qubit_id or core.new_id()
            amps = np.zeros(2, dtype=complex)
            amps[0] = 1.0
            ref = QubitRef(qid, owner, self, None)
            reg = StateRegister(amps, [ref])
            ref._register = reg
            self._registers.add(reg)
            self._track(owner, qid)
            self.stats["create_qubit"] += 1
            return ref

    def make_epr(self, owner_a: str, owner_b: str, qubit_id: Optional[str] = None):
        """Create a Phi+ pair; both refs share one qubit_id."""
        with self._lock:
            qid = qubit_id or core.new_id()
            ra = QubitRef(qid, owner_a, self, None)
            rb = QubitRef(qid, owner_b, self, None)
            amps = np.zeros(4, dtype=complex)
            amps[0] = _SQ2
            amps[3] = _SQ2
            reg = StateRegister(amps, [ra, rb])
            ra._register = reg
            rb._register = reg
            self._registers.add(reg)
            self._track(owner_a, qid)
            self._track(owner_b, qid)
            self.stats["make_epr"] += 1
            return ra, rb

    def make_ghz(self, owners: Sequence[str], qubit_id: Optional[str] = None) -> list[QubitRef]:
        """Create (|0..0> + |1..1>)/sqrt(2) over len(owners) qubits.

        Built as H on the first qubit followed by a CNOT chain; all refs
        share one qubit_id.
        """
        if not owners:
            raise ValueError("make_ghz needs at least one owner")
        with self._lock:
            qid = qubit_id or core.new_id()
            refs = [self.create_qubit(owner) for owner in owners]
            for ref, owner in zip(refs, owners):
                self._untrack(owner, ref.qubit_id)
                ref.qubit_id = qid
                self._track(owner, qid)
            self.apply_gate(refs[0], GateSpec.h())
            for left, right in zip(refs, refs[1:]):
                self.apply_gate(left, GateSpec.cnot(), right)
            self.stats["make_ghz"] += 1
            return refs

    # -- gates --------------------------------------------------------------

    def _merge(self, ra: StateRegister, rb: StateRegister) -> StateRegister:
        # kron(b, a) keeps a's qubits on the low bits (little endian).
        merged = StateRegister(np.kron(rb.amplitudes, ra.amplitudes), ra.refs + rb.refs)
        for ref in merged.refs:
            ref._register = merged
        self._registers.discard(ra)
        self._registers.discard(rb)
        self._registers.add(merged)
        return merged

    @staticmethod
    def _apply_1q(amps: np.ndarray, t: int, u: np.ndarray):
        idx = np.arange(amps.size)
        i0 = idx[(idx >> t) & 1 == 0]
        i1 = i0 | (1 << t)
        a0 = amps[i0]
        a1 = amps[i1]
        amps[i0] = u[0, 0] * a0 + u[0, 1] * a1
        amps[i1] = u[1, 0] * a0 + u[1, 1] * a1

    @staticmethod
    def _apply_2q(amps: np.ndarray, t_first: int, t_second: int, u: np.ndarray):
        idx = np.arange(amps.size)
        base = idx[((idx >> t_first) & 1 == 0) & ((idx >> t_second) & 1 == 0)]
        groups = [base,
                  base | (1 << t_second),
                  base | (1 << t_first),
                  base | (1 << t_first) | (1 << t_second)]
        vec = np.vstack([amps[g] for g in groups])
        out = u @ vec
        for g, row in zip(groups, out):
            amps[g] = row

    def apply_gate(self, q: QubitRef, gate: GateSpec, target2: Optional[QubitRef] = None):
        with self._lock:
            if not q.alive:
                raise InvalidQubit(f"qubit {q.qubit_id} is no longer live")
            if gate.two_qubit:
                if target2 is None:
                    raise ValueError(f"{gate.kind.value} needs a second qubit")
                if target2 is q:
                    raise SameQubit("two-qubit gate needs two distinct qubits")
                if not target2.alive:
                    raise InvalidQubit(f"qubit {target2.qubit_id} is no longer live")
                if q._register is not target2._register:
                    self._merge(q._register, target2._register)
                reg = q._register
                self._apply_2q(reg.amplitudes, self._position(q),
                               self._position(target2), gate.matrix_for())
            else:
                if target2 is not None:
                    raise ValueError(f"{gate.kind.value} takes no second qubit")
                reg = q._register
                self._apply_1q(reg.amplitudes, self._position(q), gate.matrix_for())

    # -- measurement --------------------------------------------------------

    def measure(self, q: QubitRef, non_destructive: bool = False) -> int:
        """Born-rule measurement in the computational basis.

        Destructive measurement removes the qubit from its register by
        projecting onto the outcome and renormalizing the surviving
        vector; non-destructive keeps the collapsed qubit usable.
        """
        with self._lock:
            if not q.alive:
                raise InvalidQubit(f"qubit {q.qubit_id} is no longer live")
            reg = q._register
            t = self._position(q)
            idx = np.arange(reg.amplitudes.size)
            one_mask = (idx >> t) & 1 == 1
            p1 = float(np.sum(np.abs(reg.amplitudes[one_mask]) ** 2))
            p1 = min(max(p1, 0.0), 1.0)
            draw = core.host_random(q.owner).random()
            outcome = 1 if draw < p1 else 0
            norm = math.sqrt(p1 if outcome else 1.0 - p1)
            if norm < FLUSH_EPS:
                # Guard against a zero-probability branch from rounding.
                outcome = 1 - outcome
                norm = math.sqrt(p1 if outcome else 1.0 - p1)
            self.stats["measure"] += 1
            if non_destructive:
                keep = one_mask if outcome else ~one_mask
                reg.amplitudes[~keep] = 0.0
                reg.amplitudes /= norm
                self._flush(reg.amplitudes)
            else:
                self._remove_qubit(reg, q, outcome, norm)
            return outcome

    @staticmethod
    def _flush(amps: np.ndarray):
        amps[np.abs(amps) < FLUSH_EPS] = 0.0

    def _remove_qubit(self, reg: StateRegister, q: QubitRef, outcome: int, norm: float):
        t = self._position(q)
        n = reg.n_qubits
        if n == 1:
            self._registers.discard(reg)
        else:
            m = np.arange(1 << (n - 1))
            low = m & ((1 << t) - 1)
            high = (m >> t) << (t + 1)
            src = high | (outcome << t) | low
            survivors = reg.amplitudes[src] / norm
            self._flush(survivors)
            reg.amplitudes = survivors
            reg.refs.pop(t)
        self._untrack(q.owner, q.qubit_id)
        q._register = None

    def release(self, q: QubitRef):
        """Remove a qubit by destructive measurement, discarding the result."""
        with self._lock:
            if not q.alive:
                return
            self.measure(q, non_destructive=False)

    # -- ownership and handles ------------------------------------------------

    def set_owner(self, q: QubitRef, owner: str):
        with self._lock:
            if not q.alive:
                raise InvalidQubit(f"qubit {q.qubit_id} is no longer live")
            if owner != q.owner:
                self._untrack(q.owner, q.qubit_id)
                q.owner = owner
                self._track(owner, q.qubit_id)

    def set_qubit_id(self, q: QubitRef, qubit_id: str):
        with self._lock:
            if not q.alive:
                raise InvalidQubit(f"qubit {q.qubit_id} is no longer live")
            if qubit_id != q.qubit_id:
                self._untrack(q.owner, q.qubit_id)
                q.qubit_id = qubit_id
                self._track(q.owner, qubit_id)

    def reissue(self, q: QubitRef) -> QubitRef:
        """Invalidate a handle and return a fresh one for the same qubit.

        Used when a qubit is handed to a packet so the sender's handle
        goes dead while the in-flight qubit stays usable.
        """
        with self._lock:
            if not q.alive:
                raise InvalidQubit(f"qubit {q.qubit_id} is no longer live")
            reg = q._register
            t = self._position(q)
            fresh = QubitRef(q.qubit_id, q.owner, self, reg)
            reg.refs[t] = fresh
            q._register = None
            return fresh

    # -- diagnostics ----------------------------------------------------------

    def inspect_state(self, q: QubitRef):
        """Copy of (qubit_order, amplitudes) for the containing register.

        Test/diagnostics interface; disabled unless the backend was
        built with diagnostics=True.
        """
        if not self.diagnostics:
            raise RuntimeError("inspect_state requires a diagnostics-enabled backend")
        with self._lock:
            if not q.alive:
                raise InvalidQubit(f"qubit {q.qubit_id} is no longer live")
            reg = q._register
            return list(reg.qubit_order), reg.amplitudes.copy()

    def live_qubit_count(self) -> int:
        with self._lock:
            return sum(reg.n_qubits for reg in self._registers)

    def register_count(self) -> int:
        with self._lock:
            return len(self._registers)

    def reset(self):
        with self._lock:
            for reg in self._registers:
                for ref in reg.refs:
                    ref._register = None
            self._registers.clear()
            self._live_ids.clear()
            for key in self.stats:
                self.stats[key] = 0


def state_fidelity(a: np.ndarray, b: np.ndarray) -> float:
    """|<a|b>|^2 for two pure-state amplitude vectors."""
    a = np.asarray(a, dtype=complex).ravel()
    b = np.asarray(b, dtype=complex).ravel()
    return float(abs(np.vdot(a, b)) ** 2)


_default_backend: Optional[Backend] = None
_default_lock = threading.Lock()


def default_backend() -> Backend:
    global _default_backend
    with _default_lock:
        if _default_backend is None:
            _default_backend = Backend()
        return _default_backend


def reset_default_backend(diagnostics: bool = False) -> Backend:
    """Replace the process-wide backend; used between scenario runs."""
    global _default_backend
    with _default_lock:
        _default_backend = Backend(diagnostics=diagnostics)
        return _default_backend
