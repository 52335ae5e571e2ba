"""Manager/worker model exchange: sparse deltas, packed vectors, framing.

Wire envelope (all integers big-endian)::

    "PCGA" | version u8 | type u8 | payload length u32 | payload

Payloads:

    HELLO      version u8 | token length u16 | token
    SNAPSHOT   N u64 | ℓ u32 | packed counts
    DELTA      evaluations u64 | entry count u32 | (gene u32, delta i32)* | best fitness f64
    UPDATE     packed counts
    TERMINATE  reason u8

Packed counts hold one ``ceil(log2(N+1))``-bit field per gene, most
significant bit first, gene 0 first, zero-padded to a whole byte.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

from .cga import ProbabilityVector

MAGIC = b"PCGA"
VERSION = 1
HEADER = struct.Struct(">4sBBI")
MAX_PAYLOAD = 64 * 1024 * 1024
MAX_POPULATION = 2**62

_SNAPSHOT_HEAD = struct.Struct(">QI")
_DELTA_HEAD = struct.Struct(">QI")
_ENTRY = np.dtype([("gene", ">u4"), ("delta", ">i4")])
_BEST = struct.Struct(">d")
_HELLO_HEAD = struct.Struct(">BH")


class ProtocolError(Exception):
    """Base class for every decoding failure."""


class BadMagic(ProtocolError):
    pass


class UnsupportedVersion(ProtocolError):
    pass


class UnknownMessageType(ProtocolError):
    pass


class TruncatedFrame(ProtocolError):
    pass


class FrameTooLarge(ProtocolError):
    pass


class TrailingData(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


class PayloadLengthError(MalformedPayload):
    pass


class CountOutOfRange(MalformedPayload):
    pass


# ---------------------------------------------------------------------------
# deltas


class DeltaReport:
    """Sparse signed count differences, ascending by gene index."""

    __slots__ = ("genes", "deltas", "evaluations")

    def __init__(self, entries=(), evaluations: int = 0):
        pairs = list(entries)
        genes = np.array([g for g, _ in pairs], dtype=np.int64)
        deltas = np.array([d for _, d in pairs], dtype=np.int64)
        if genes.size:
            if genes.min() < 0:
                raise ValueError("gene indices must be non-negative")
            if np.any(np.diff(genes) <= 0):
                raise ValueError("gene indices must be strictly ascending")
            if np.any(deltas == 0):
                raise ValueError("delta entries must be non-zero")
        if evaluations < 0:
            raise ValueError("evaluations must be non-negative")
        self.genes = genes
        self.deltas = deltas
        self.evaluations = int(evaluations)

    @classmethod
    def _from_arrays(cls, genes, deltas, evaluations):
        r = cls.__new__(cls)
        r.genes = genes
        r.deltas = deltas
        r.evaluations = int(evaluations)
        return r

    @property
    def entries(self) -> list[tuple[int, int]]:
        return list(zip(self.genes.tolist(), self.deltas.tolist()))

    def __len__(self):
        return int(self.genes.size)

    def __eq__(self, other):
        if not isinstance(other, DeltaReport):
            return NotImplemented
        return (
            self.evaluations == other.evaluations
            and np.array_equal(self.genes, other.genes)
            and np.array_equal(self.deltas, other.deltas)
        )

    def __repr__(self):
        return f"DeltaReport(entries={self.entries}, evaluations={self.evaluations})"


def _check_compatible(a: ProbabilityVector, b: ProbabilityVector):
    if a.length != b.length:
        raise ValueError(f"vector lengths differ: {a.length} != {b.length}")
    if a.population_size != b.population_size:
        raise ValueError(f"population sizes differ: {a.population_size} != {b.population_size}")


def compute_delta(
    snapshot: ProbabilityVector, local: ProbabilityVector, evaluations: int
) -> DeltaReport:
    _check_compatible(snapshot, local)
    diff = local.counts - snapshot.counts
    genes = np.flatnonzero(diff)
    return DeltaReport._from_arrays(genes, diff[genes], evaluations)


def apply_delta(
    manager: ProbabilityVector, report: DeltaReport
) -> tuple[ProbabilityVector, int]:
    """Merge ``report`` into ``manager``; also returns how many entries were clamped."""
    if report.genes.size and report.genes[-1] >= manager.length:
        raise IndexError(
            f"gene index {int(report.genes[-1])} out of range for vector of length {manager.length}"
        )
    counts = manager.counts.copy()
    raw = counts[report.genes] + report.deltas
    clipped = np.clip(raw, 0, manager.population_size)
    counts[report.genes] = clipped
    clamps = int(np.count_nonzero(raw != clipped))
    return ProbabilityVector._trusted(counts, manager.population_size), clamps


def merge_delta(manager: ProbabilityVector, report: DeltaReport) -> ProbabilityVector:
    return apply_delta(manager, report)[0]


# ---------------------------------------------------------------------------
# packed counts


def field_width(population_size: int) -> int:
    """Bits per count: ``ceil(log2(N + 1))``."""
    return int(population_size).bit_length()


def packed_size(population_size: int, length: int) -> int:
    return math.ceil(length * field_width(population_size) / 8)


def encode_counts(v: ProbabilityVector) -> bytes:
    w = field_width(v.population_size)
    shifts = np.arange(w - 1, -1, -1, dtype=np.uint64)
    bits = (v.counts.astype(np.uint64)[:, None] >> shifts) & np.uint64(1)
    return np.packbits(bits.astype(np.uint8).ravel()).tobytes()


def decode_counts(payload: bytes, population_size: int, length: int) -> ProbabilityVector:
    if not 1 <= population_size <= MAX_POPULATION or length < 1:
        raise MalformedPayload(f"invalid dimensions N={population_size}, length={length}")
    w = field_width(population_size)
    expected = packed_size(population_size, length)
    if len(payload) != expected:
        raise PayloadLengthError(
            f"packed vector must be {expected} bytes for N={population_size}, length={length}; got {len(payload)}"
        )
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    used = length * w
    if bits[used:].any():
        raise MalformedPayload("non-zero padding bits after the last count")
    weights = np.uint64(1) << np.arange(w - 1, -1, -1, dtype=np.uint64)
    counts = bits[:used].reshape(length, w).astype(np.uint64) @ weights
    if counts.max() > population_size:
        i = int(np.argmax(counts > population_size))
        raise CountOutOfRange(f"gene {i} decodes to {int(counts[i])} > N={population_size}")
    return ProbabilityVector._trusted(counts.astype(np.int64), int(population_size))


# ---------------------------------------------------------------------------
# messages


class MessageType(enum.IntEnum):
    HELLO = 1
    SNAPSHOT = 2
    DELTA = 3
    UPDATE = 4
    TERMINATE = 5


class TerminateReason(enum.IntEnum):
    SOLVED = 1
    CONVERGED = 2
    SHUTDOWN = 3


@dataclass(frozen=True)
class Hello:
    version: int = VERSION
    token: bytes = b""
    kind = MessageType.HELLO


@dataclass(frozen=True)
class Snapshot:
    vector: ProbabilityVector
    kind = MessageType.SNAPSHOT


@dataclass(frozen=True)
class Delta:
    report: DeltaReport
    best_fitness: float = float("-inf")
    kind = MessageType.DELTA


@dataclass(frozen=True)
class Update:
    """Full refreshed vector; the receiver supplies N and ℓ from its snapshot."""

    packed: bytes
    kind = MessageType.UPDATE

    @classmethod
    def of(cls, v: ProbabilityVector) -> "Update":
        return cls(encode_counts(v))

    def vector(self, population_size: int, length: int) -> ProbabilityVector:
        return decode_counts(self.packed, population_size, length)


@dataclass(frozen=True)
class Terminate:
    reason: TerminateReason
    kind = MessageType.TERMINATE


Message = Hello | Snapshot | Delta | Update | Terminate


def _encode_payload(msg) -> bytes:
    if isinstance(msg, Hello):
        if len(msg.token) > 0xFFFF:
            raise ValueError("resume token longer than 65535 bytes")
        return _HELLO_HEAD.pack(msg.version, len(msg.token)) + msg.token
    if isinstance(msg, Snapshot):
        v = msg.vector
        return _SNAPSHOT_HEAD.pack(v.population_size, v.length) + encode_counts(v)
    if isinstance(msg, Delta):
        r = msg.report
        if math.isnan(msg.best_fitness):
            raise ValueError("best_fitness must not be NaN")
        if r.genes.size and (r.genes[-1] > 0xFFFFFFFF or np.abs(r.deltas).max() > 0x7FFFFFFF):
            raise ValueError("delta entry does not fit the 32-bit wire fields")
        entries = np.empty(len(r), dtype=_ENTRY)
        entries["gene"] = r.genes
        entries["delta"] = r.deltas
        return (
            _DELTA_HEAD.pack(r.evaluations, len(r))
            + entries.tobytes()
            + _BEST.pack(msg.best_fitness)
        )
    if isinstance(msg, Update):
        return bytes(msg.packed)
    if isinstance(msg, Terminate):
        return bytes([int(msg.reason)])
    raise TypeError(f"not a protocol message: {msg!r}")


def frame(msg) -> bytes:
    payload = _encode_payload(msg)
    return HEADER.pack(MAGIC, VERSION, int(msg.kind), len(payload)) + payload


def parse_header(header: bytes) -> tuple[MessageType, int]:
    """Validate the 10-byte envelope; returns (type, payload length)."""
    if len(header) < HEADER.size:
        raise TruncatedFrame(f"header needs {HEADER.size} bytes, got {len(header)}")
    magic, version, kind, length = HEADER.unpack_from(header)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported protocol version {version}")
    try:
        kind = MessageType(kind)
    except ValueError:
        raise UnknownMessageType(f"unknown message type {kind}") from None
    if length > MAX_PAYLOAD:
        raise FrameTooLarge(f"payload length {length} exceeds limit {MAX_PAYLOAD}")
    return kind, length


def decode_payload(kind: MessageType, payload: bytes):
    n = len(payload)
    if kind is MessageType.HELLO:
        if n < _HELLO_HEAD.size:
            raise TruncatedFrame("HELLO payload shorter than its fixed fields")
        version, tlen = _HELLO_HEAD.unpack_from(payload)
        if n < _HELLO_HEAD.size + tlen:
            raise TruncatedFrame(f"HELLO token declares {tlen} bytes, {n - _HELLO_HEAD.size} present")
        if n > _HELLO_HEAD.size + tlen:
            raise TrailingData("HELLO payload longer than its token")
        return Hello(version, bytes(payload[_HELLO_HEAD.size :]))
    if kind is MessageType.SNAPSHOT:
        if n < _SNAPSHOT_HEAD.size:
            raise TruncatedFrame("SNAPSHOT payload shorter than its fixed fields")
        pop, length = _SNAPSHOT_HEAD.unpack_from(payload)
        if not 2 <= pop <= MAX_POPULATION or length < 1:
            raise MalformedPayload(f"invalid SNAPSHOT dimensions N={pop}, length={length}")
        need = packed_size(pop, length)
        body = payload[_SNAPSHOT_HEAD.size :]
        if len(body) < need:
            raise TruncatedFrame(f"SNAPSHOT needs {need} packed bytes, got {len(body)}")
        if len(body) > need:
            raise TrailingData(f"SNAPSHOT carries {len(body) - need} bytes past the packed vector")
        return Snapshot(decode_counts(bytes(body), pop, length))
    if kind is MessageType.DELTA:
        if n < _DELTA_HEAD.size:
            raise TruncatedFrame("DELTA payload shorter than its fixed fields")
        evaluations, count = _DELTA_HEAD.unpack_from(payload)
        need = _DELTA_HEAD.size + count * _ENTRY.itemsize + _BEST.size
        if n < need:
            raise TruncatedFrame(f"DELTA declares {count} entries; payload is {n} of {need} bytes")
        if n > need:
            raise TrailingData(f"DELTA payload has {n - need} unexpected trailing bytes")
        if evaluations > 2**63 - 1:
            raise MalformedPayload(f"evaluation count {evaluations} out of range")
        end = _DELTA_HEAD.size + count * _ENTRY.itemsize
        entries = np.frombuffer(payload, dtype=_ENTRY, count=count, offset=_DELTA_HEAD.size)
        genes = entries["gene"].astype(np.int64)
        deltas = entries["delta"].astype(np.int64)
        if count and np.any(np.diff(genes) <= 0):
            raise MalformedPayload("DELTA gene indices not strictly ascending")
        if count and np.any(deltas == 0):
            raise MalformedPayload("DELTA carries a zero delta")
        (best,) = _BEST.unpack_from(payload, end)
        if math.isnan(best):
            raise MalformedPayload("DELTA best fitness is NaN")
        return Delta(DeltaReport._from_arrays(genes, deltas, evaluations), best)
    if kind is MessageType.UPDATE:
        if n == 0:
            raise TruncatedFrame("UPDATE payload is empty")
        return Update(bytes(payload))
    if kind is MessageType.TERMINATE:
        if n < 1:
            raise TruncatedFrame("TERMINATE payload is empty")
        if n > 1:
            raise TrailingData("TERMINATE payload longer than one byte")
        try:
            return Terminate(TerminateReason(payload[0]))
        except ValueError:
            raise MalformedPayload(f"unknown TERMINATE reason {payload[0]}") from None
    raise UnknownMessageType(f"unknown message type {kind}")


def unframe(data: bytes):
    """Decode exactly one frame from ``data``."""
    kind, length = parse_header(data)
    end = HEADER.size + length
    if len(data) < end:
        raise TruncatedFrame(f"frame declares {length} payload bytes, {len(data) - HEADER.size} present")
    if len(data) > end:
        raise TrailingData(f"{len(data) - end} bytes after the end of the frame")
    return decode_payload(kind, memoryview(data)[HEADER.size :].tobytes())


def split_frame(buffer: bytes):
    """Pop one complete frame off the front of ``buffer``.

    Returns ``(message, rest)``, or ``(None, buffer)`` when more bytes are
    needed.  Envelope errors raise immediately.
    """
    if len(buffer) < HEADER.size:
        if not MAGIC.startswith(bytes(buffer[:4])):
            raise BadMagic(f"bad magic {bytes(buffer[:4])!r}")
        return None, buffer
    kind, length = parse_header(buffer)
    end = HEADER.size + length
    if len(buffer) < end:
        return None, buffer
    return decode_payload(kind, bytes(buffer[HEADER.size : end])), buffer[end:]


async def read_message(reader):
    """Read one frame from an ``asyncio.StreamReader``.

    Raises ``asyncio.IncompleteReadError`` on a clean EOF between frames.
    """
    header = await reader.readexactly(HEADER.size)
    kind, length = parse_header(header)
    payload = await reader.readexactly(length) if length else b""
    return decode_payload(kind, payload)


def recv_message(sock):
    """Blocking read of one frame from a socket; ``ConnectionError`` on EOF."""
    header = _recv_exact(sock, HEADER.size)
    kind, length = parse_header(header)
    return decode_payload(kind, _recv_exact(sock, length))


def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-frame" if buf else "connection closed")
        buf += chunk
    return bytes(buf)
