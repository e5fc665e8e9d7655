"""Fixed-length packet codec and per-phase onion packing.

Wire layout of every packet (bit-exact):

    magic "MXNN" | version 0x01 | payload_ct_len u32 BE | payload_ct
    | onion_ct_len u32 BE | onion_ct | random padding to the cascade length L

Every packet in a cascade is exactly L bytes no matter the phase, hop, or
payload. A hop opens only its own routing record; the record's inner
ciphertext is sealed to the next hop and is indecipherable here.

Records are encoded as tag-length-value fields: [tag u8][len u32 BE][value].
"""

import os
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import crypto
from .crypto import Address
from .nn import LINEAR, PrimitiveOp, LayerSpec

MAGIC = b"MXNN"
VERSION = 1
DEFAULT_PACKET_LEN = 524288
HEADER_LEN = len(MAGIC) + 1 + 4 + 4


class FramingError(ValueError):
    """Bad magic/version, truncation, or a packet of unexpected length."""


class CapacityError(ValueError):
    def __init__(self, needed: int, limit: int):
        super().__init__(
            f"serialized packet needs {needed} bytes but the cascade length is {limit}"
        )
        self.needed = needed
        self.limit = limit


class OpCode(IntEnum):
    INIT = 0
    FORWARD = 1
    BACKWARD = 2
    TEST = 3


# record field tags
_T_OP = 1
_T_COVER = 2
_T_NEXT = 3
_T_NEXT_PK = 4
_T_INNER = 5
_T_ROLE = 6
_T_CHAIN = 7
_T_LR = 8
_T_MOMENTUM = 9
_T_SEED = 10
_T_LABELS = 11
_T_RETURN = 12
_T_RETURN_PK = 13
_T_END = 14
_T_REPLY = 15
_T_JUNK = 16

ROLE_ACTUAL = "actual"
ROLE_DUMMY = "dummy"

REPLY_LOSS = "loss"
REPLY_ACK = "ack"
REPLY_OUTPUT = "output"


@dataclass
class OnionRecord:
    """The plaintext a single hop sees after opening its onion layer."""

    op: OpCode
    cover: bool = False
    next: Address | None = None
    next_pk: bytes | None = None
    inner: bytes | None = None
    # init fields
    role: str | None = None
    chain: list | None = None
    learning_rate: float | None = None
    momentum: float | None = None
    seed: int | None = None
    # forward/test fields
    labels: np.ndarray | None = None
    return_addr: Address | None = None
    return_pk: bytes | None = None
    end: bool = False
    # designer-bound replies
    reply: str | None = None
    junk: bytes | None = None


def _tlv(tag: int, value: bytes) -> bytes:
    return struct.pack(">BI", tag, len(value)) + value


def encode_chain(chain) -> bytes:
    out = struct.pack(">H", len(chain))
    for op in chain:
        out += struct.pack(">BII", _chain_kind_code(op.kind), op.in_dim, op.out_dim)
    return out


_KIND_CODES = {"linear": 1, "relu": 2, "logsoftmax": 3, "nllloss": 4, "identity": 5}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def _chain_kind_code(kind: str) -> int:
    return _KIND_CODES[kind]


def decode_chain(data: bytes):
    (count,) = struct.unpack(">H", data[:2])
    chain = []
    off = 2
    for _ in range(count):
        code, in_dim, out_dim = struct.unpack(">BII", data[off:off + 9])
        off += 9
        kind = _CODE_KINDS[code]
        chain.append(PrimitiveOp(kind, in_dim, out_dim) if kind == LINEAR else PrimitiveOp(kind))
    return chain


def encode_record(rec: OnionRecord) -> bytes:
    parts = [_tlv(_T_OP, bytes([int(rec.op)]))]
    if rec.cover:
        parts.append(_tlv(_T_COVER, b"\x01"))
    if rec.next is not None:
        parts.append(_tlv(_T_NEXT, str(rec.next).encode()))
    if rec.next_pk is not None:
        parts.append(_tlv(_T_NEXT_PK, rec.next_pk))
    if rec.inner is not None:
        parts.append(_tlv(_T_INNER, rec.inner))
    if rec.role is not None:
        parts.append(_tlv(_T_ROLE, rec.role.encode()))
    if rec.chain is not None:
        parts.append(_tlv(_T_CHAIN, encode_chain(rec.chain)))
    if rec.learning_rate is not None:
        parts.append(_tlv(_T_LR, struct.pack(">d", rec.learning_rate)))
    if rec.momentum is not None:
        parts.append(_tlv(_T_MOMENTUM, struct.pack(">d", rec.momentum)))
    if rec.seed is not None:
        parts.append(_tlv(_T_SEED, struct.pack(">Q", rec.seed)))
    if rec.labels is not None:
        parts.append(_tlv(_T_LABELS, encode_labels(rec.labels)))
    if rec.return_addr is not None:
        parts.append(_tlv(_T_RETURN, str(rec.return_addr).encode()))
    if rec.return_pk is not None:
        parts.append(_tlv(_T_RETURN_PK, rec.return_pk))
    if rec.end:
        parts.append(_tlv(_T_END, b"\x01"))
    if rec.reply is not None:
        parts.append(_tlv(_T_REPLY, rec.reply.encode()))
    if rec.junk is not None:
        parts.append(_tlv(_T_JUNK, rec.junk))
    return b"".join(parts)


def decode_record(data: bytes) -> OnionRecord:
    fields = {}
    off = 0
    while off < len(data):
        if off + 5 > len(data):
            raise FramingError("truncated record field header")
        tag, length = struct.unpack(">BI", data[off:off + 5])
        off += 5
        if off + length > len(data):
            raise FramingError("truncated record field value")
        fields[tag] = data[off:off + length]
        off += length
    if _T_OP not in fields:
        raise FramingError("record missing op code")
    rec = OnionRecord(op=OpCode(fields[_T_OP][0]))
    rec.cover = _T_COVER in fields
    if _T_NEXT in fields:
        rec.next = Address.parse(fields[_T_NEXT].decode())
    if _T_NEXT_PK in fields:
        rec.next_pk = fields[_T_NEXT_PK]
    if _T_INNER in fields:
        rec.inner = fields[_T_INNER]
    if _T_ROLE in fields:
        rec.role = fields[_T_ROLE].decode()
    if _T_CHAIN in fields:
        rec.chain = decode_chain(fields[_T_CHAIN])
    if _T_LR in fields:
        (rec.learning_rate,) = struct.unpack(">d", fields[_T_LR])
    if _T_MOMENTUM in fields:
        (rec.momentum,) = struct.unpack(">d", fields[_T_MOMENTUM])
    if _T_SEED in fields:
        (rec.seed,) = struct.unpack(">Q", fields[_T_SEED])
    if _T_LABELS in fields:
        rec.labels = decode_labels(fields[_T_LABELS])
    if _T_RETURN in fields:
        rec.return_addr = Address.parse(fields[_T_RETURN].decode())
    if _T_RETURN_PK in fields:
        rec.return_pk = fields[_T_RETURN_PK]
    rec.end = _T_END in fields
    if _T_REPLY in fields:
        rec.reply = fields[_T_REPLY].decode()
    if _T_JUNK in fields:
        rec.junk = fields[_T_JUNK]
    return rec


def encode_matrix(m: np.ndarray) -> bytes:
    """[rows u32 BE][cols u32 BE][row-major float32 LE data]."""
    m = np.ascontiguousarray(m, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"expected 2-D matrix, got shape {m.shape}")
    return struct.pack(">II", m.shape[0], m.shape[1]) + m.astype("<f4").tobytes()


def decode_matrix(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise FramingError("matrix header truncated")
    rows, cols = struct.unpack(">II", data[:8])
    body = data[8:]
    if len(body) != rows * cols * 4:
        raise FramingError(
            f"matrix body is {len(body)} bytes, header says {rows}x{cols}"
        )
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)


def encode_labels(labels: np.ndarray) -> bytes:
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    return struct.pack(">I", labels.shape[0]) + labels.astype("<i8").tobytes()


def decode_labels(data: bytes) -> np.ndarray:
    (count,) = struct.unpack(">I", data[:4])
    body = data[4:]
    if len(body) != count * 8:
        raise FramingError("label vector length mismatch")
    return np.frombuffer(body, dtype="<i8").astype(np.int64)


@dataclass
class CascadeEntry:
    node_id: str
    address: Address
    pk: bytes
    layer: LayerSpec | None  # None marks a dummy relay


@dataclass
class CascadeSpec:
    """Ordered node assignments for one model, plus the designer endpoint.

    held_first/held_last keep a boundary layer in the designer process; those
    specs never appear in any packed onion.
    """

    entries: list
    designer_addr: Address
    designer_pk: bytes
    packet_len: int = DEFAULT_PACKET_LEN
    learning_rate: float = 0.01
    momentum: float = 0.9
    held_first: LayerSpec | None = None
    held_last: LayerSpec | None = None

    def __post_init__(self):
        if not any(e.layer is not None for e in self.entries):
            raise ValueError("cascade needs at least one actual layer")
        if self.entries[0].layer is None or self.entries[-1].layer is None:
            raise ValueError("first and last cascade slots must hold actual layers")
        last = self.held_last if self.held_last is not None else self.entries[-1].layer
        if not last.ends_in_loss():
            raise ValueError("final actual layer must end in nllloss")

    @property
    def n(self) -> int:
        return len(self.entries)

    def actual_slots(self):
        return [i for i, e in enumerate(self.entries) if e.layer is not None]


def build_packet(payload_ct: bytes, onion_ct: bytes, packet_len: int) -> bytes:
    """Assemble a packet and pad it with fresh random bytes to packet_len."""
    body = MAGIC + bytes([VERSION])
    body += struct.pack(">I", len(payload_ct)) + payload_ct
    body += struct.pack(">I", len(onion_ct)) + onion_ct
    if len(body) > packet_len:
        raise CapacityError(needed=len(body), limit=packet_len)
    return body + os.urandom(packet_len - len(body))


def parse_packet(buf: bytes, expected_len: int | None = None):
    """Split a packet into (payload_ct, onion_ct); verifies framing only."""
    if expected_len is not None and len(buf) != expected_len:
        raise FramingError(f"packet is {len(buf)} bytes, expected {expected_len}")
    if len(buf) < HEADER_LEN or buf[:4] != MAGIC:
        raise FramingError("bad magic")
    if buf[4] != VERSION:
        raise FramingError(f"unsupported version {buf[4]}")
    off = 5
    (plen,) = struct.unpack(">I", buf[off:off + 4])
    off += 4
    if off + plen + 4 > len(buf):
        raise FramingError("payload length exceeds packet")
    payload_ct = buf[off:off + plen]
    off += plen
    (olen,) = struct.unpack(">I", buf[off:off + 4])
    off += 4
    if off + olen > len(buf):
        raise FramingError("onion length exceeds packet")
    return payload_ct, buf[off:off + olen]


def _nest(cascade: CascadeSpec, records) -> bytes:
    """Seal records innermost-out; records[i] belongs to entries[i]."""
    inner = None
    for i in range(len(records) - 1, -1, -1):
        rec = records[i]
        rec.inner = inner
        inner = crypto.seal(cascade.entries[i].pk, encode_record(rec))
    return inner


def pack_init(cascade: CascadeSpec) -> bytes:
    """Model-initialization onion: each hop learns its own role, chain,
    optimizer settings and seed, plus its successor's address."""
    records = []
    for i, e in enumerate(cascade.entries):
        rec = OnionRecord(op=OpCode.INIT)
        if e.layer is not None:
            rec.role = ROLE_ACTUAL
            rec.chain = e.layer.chain
            rec.seed = e.layer.seed
            rec.learning_rate = cascade.learning_rate
            rec.momentum = cascade.momentum
        else:
            rec.role = ROLE_DUMMY
        if i + 1 < cascade.n:
            rec.next = cascade.entries[i + 1].address
            rec.next_pk = cascade.entries[i + 1].pk
        records.append(rec)
    return build_packet(b"", _nest(cascade, records), cascade.packet_len)


def pack_forward(cascade: CascadeSpec, data: np.ndarray, labels: np.ndarray | None) -> bytes:
    """Forward onion plus the input batch sealed to the first hop.

    Labels ride only in the innermost record. labels=None means the designer
    holds the loss layer; the last hop then returns its output to the
    designer instead of computing a loss.
    """
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.shape[0] < 1:
        raise ValueError("empty batch")
    if labels is not None and len(labels) != data.shape[0]:
        raise ValueError(f"batch {data.shape[0]} vs {len(labels)} labels")
    records = []
    for i, e in enumerate(cascade.entries):
        rec = OnionRecord(op=OpCode.FORWARD)
        if i + 1 < cascade.n:
            rec.next = cascade.entries[i + 1].address
            rec.next_pk = cascade.entries[i + 1].pk
        else:
            if labels is not None:
                rec.labels = np.asarray(labels)
            rec.return_addr = cascade.designer_addr
            rec.return_pk = cascade.designer_pk
        records.append(rec)
    onion = _nest(cascade, records)
    payload = crypto.seal(cascade.entries[0].pk, encode_matrix(data))
    return build_packet(payload, onion, cascade.packet_len)


def pack_backward(cascade: CascadeSpec, initial_grad: np.ndarray | None = None) -> bytes:
    """Backward onion, nested in reverse cascade order; carries no data or
    labels. initial_grad is only present when the designer holds the loss
    layer and must hand the last remote hop its starting gradient."""
    records = []
    for i, e in enumerate(cascade.entries):
        rec = OnionRecord(op=OpCode.BACKWARD)
        if i > 0:
            rec.next = cascade.entries[i - 1].address
            rec.next_pk = cascade.entries[i - 1].pk
        else:
            rec.return_addr = cascade.designer_addr
            rec.return_pk = cascade.designer_pk
        records.append(rec)
    # outermost hop is layer n: nest against the reversed cascade
    inner = None
    for i in range(cascade.n):
        rec = records[i]
        rec.inner = inner
        inner = crypto.seal(cascade.entries[i].pk, encode_record(rec))
    payload = b""
    if initial_grad is not None:
        payload = crypto.seal(cascade.entries[-1].pk, encode_matrix(initial_grad))
    return build_packet(payload, inner, cascade.packet_len)


def pack_test(cascade: CascadeSpec, data: np.ndarray, end_slot: int) -> bytes:
    """Test onion: one-way route that stops at end_slot (1-based) and returns
    that hop's activations to the designer. Hops past end_slot are omitted."""
    if not (1 <= end_slot <= cascade.n):
        raise ValueError(f"end slot {end_slot} out of range 1..{cascade.n}")
    if cascade.entries[end_slot - 1].layer is None:
        raise ValueError(f"end slot {end_slot} is a dummy relay")
    data = np.ascontiguousarray(data, dtype=np.float32)
    records = []
    for i in range(end_slot):
        rec = OnionRecord(op=OpCode.TEST)
        if i + 1 < end_slot:
            rec.next = cascade.entries[i + 1].address
            rec.next_pk = cascade.entries[i + 1].pk
        else:
            rec.end = True
            rec.return_addr = cascade.designer_addr
            rec.return_pk = cascade.designer_pk
        records.append(rec)
    inner = None
    for i in range(end_slot - 1, -1, -1):
        rec = records[i]
        rec.inner = inner
        inner = crypto.seal(cascade.entries[i].pk, encode_record(rec))
    payload = crypto.seal(cascade.entries[0].pk, encode_matrix(data))
    return build_packet(payload, inner, cascade.packet_len)


def pack_cover_loop(cascade: CascadeSpec, payload_len: int = 4096) -> bytes:
    """A loop message: forward-shaped cover onion that traverses every hop and
    comes back to the designer. Every record is flagged cover and padded with
    random junk fields; hops relay it without any model computation."""
    terminal = OnionRecord(op=OpCode.FORWARD, cover=True, junk=os.urandom(32))
    inner = crypto.seal(cascade.designer_pk, encode_record(terminal))
    for i in range(cascade.n - 1, -1, -1):
        rec = OnionRecord(op=OpCode.FORWARD, cover=True, junk=os.urandom(32))
        rec.inner = inner
        if i + 1 < cascade.n:
            rec.next = cascade.entries[i + 1].address
            rec.next_pk = cascade.entries[i + 1].pk
        else:
            rec.next = cascade.designer_addr
            rec.next_pk = cascade.designer_pk
        inner = crypto.seal(cascade.entries[i].pk, encode_record(rec))
    payload = crypto.seal(cascade.entries[0].pk, os.urandom(payload_len))
    return build_packet(payload, inner, cascade.packet_len)


def pack_single_cover(target_pk: bytes, packet_len: int, payload_len: int = 4096) -> bytes:
    """One-hop cover packet a node sends to an adjacent peer, who drops it."""
    rec = OnionRecord(op=OpCode.FORWARD, cover=True, junk=os.urandom(32))
    onion = crypto.seal(target_pk, encode_record(rec))
    payload = crypto.seal(target_pk, os.urandom(payload_len))
    return build_packet(payload, onion, packet_len)


def pack_reply(op: OpCode, kind: str, designer_pk: bytes, payload_plain: bytes,
               packet_len: int) -> bytes:
    """Designer-bound reply (loss, ack, or activations), full packet length."""
    rec = OnionRecord(op=op, reply=kind)
    onion = crypto.seal(designer_pk, encode_record(rec))
    payload = crypto.seal(designer_pk, payload_plain) if payload_plain else b""
    return build_packet(payload, onion, packet_len)


def unwrap(sk: bytes, packet: bytes, expected_len: int | None = None):
    """Open one onion layer.

    Returns (record, payload_plain, next_packet). next_packet is the inner
    onion repackaged with an empty payload and fresh padding at the incoming
    packet's length; callers that forward a payload rebuild the packet
    themselves via build_packet. Raises DecryptionError for onion or payload
    material not sealed to this key, FramingError for malformed packets.
    """
    payload_ct, onion_ct = parse_packet(packet, expected_len)
    record = decode_record(crypto.open_sealed(sk, onion_ct))
    payload_plain = crypto.open_sealed(sk, payload_ct) if payload_ct else None
    next_packet = None
    if record.inner is not None:
        next_packet = build_packet(b"", record.inner, len(packet))
    return record, payload_plain, next_packet
