"""Binary wire formats.

All integers and floats are little-endian. Every record starts with a
4-byte magic, and its length is computable from its header alone:

expert  ``EXPR | class u8 | flags u8 | id u32 | h u32 | h_ff u32 | r u32 | origin (u16 len + utf8)``
        then f64 payload ``W1 b1 W2 b2`` (when flags bit 0) and ``A1 B1 A2 B2`` (when r > 0)
gate    ``GATE | mode u8 | in u32 | M u32 | C u32`` then ``W_g b_g cond_prior fallback_prior``
tokenizer ``TOKN | d u32 | p u32 | h u32 | h_z u32`` then ``W_in b_in W_cov b_cov``
backbone  ``BKBN | h u32 | H u32 | nq u32 | levels f64[nq]`` then ``W_pool W_out b_out``

A federation message wraps records:
``FMSG | kind u8 | round u32 | sender (u16+utf8) | receiver (u16+utf8) | n u32 | records...``
and an archive is a sequence of ``u32 length | message``. Checkpoints are
``CKPT | u32 n | JSON manifest (n bytes)`` followed by records.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .backbone import BackboneParams
from .cov_smoe import EXPERT_CLASSES, ExpertParams, GateParams
from .numkit import Tensor
from .tokenizer import TokenizerParams

MSG_KINDS = ("ExpertUpload", "GateBroadcast", "DeployBundle")
GATE_MODES = ("covariate-only", "covariate-plus-token")
FLAG_BASE = 1


class SchemaError(ValueError):
    pass


def _str(s: str) -> bytes:
    b = s.encode()
    return struct.pack("<H", len(b)) + b


def _f64(*arrays: np.ndarray) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise SchemaError(f"truncated record at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode()
        except UnicodeDecodeError as e:
            raise SchemaError("bad utf8 string") from e

    def floats(self, *shape: int) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    def magic(self, expected: bytes) -> None:
        got = self.take(4)
        if got != expected:
            raise SchemaError(f"expected {expected!r}, got {got!r}")


# ---------------------------------------------------------------------------
# records


def expert_header_len(origin_client: str) -> int:
    return 4 + 1 + 1 + 4 * 4 + 2 + len(origin_client.encode())


def encode_expert(e: ExpertParams, include_base: bool = True) -> bytes:
    r = e.r
    head = b"EXPR" + struct.pack("<BBIIII", EXPERT_CLASSES.index(e.cls), FLAG_BASE if include_base else 0,
                                 e.expert_id, e.h, e.h_ff, r) + _str(e.origin_client)
    body = _f64(*(t.value for t in e.base())) if include_base else b""
    if r:
        body += _f64(*(t.value for t in e.factors()))
    return head + body


def expert_record_len(h: int, h_ff: int, r: int, origin_client: str = "", include_base: bool = True) -> int:
    n = (h * h_ff + h_ff + h_ff * h + h) if include_base else 0
    n += (h * r + r * h_ff + h_ff * r + r * h) if r else 0
    return expert_header_len(origin_client) + 8 * n


def decode_expert(rd: _Reader) -> ExpertParams:
    rd.magic(b"EXPR")
    cls_i, flags, eid, h, h_ff, r = rd.unpack("<BBIIII")
    if cls_i >= len(EXPERT_CLASSES) or flags & ~FLAG_BASE:
        raise SchemaError("bad expert header")
    origin = rd.string()
    if flags & FLAG_BASE:
        W1, b1, W2, b2 = rd.floats(h, h_ff), rd.floats(h_ff), rd.floats(h_ff, h), rd.floats(h)
    else:
        W1, b1, W2, b2 = np.zeros((h, h_ff)), np.zeros(h_ff), np.zeros((h_ff, h)), np.zeros(h)
    tag = f"{EXPERT_CLASSES[cls_i]}{eid}"
    e = ExpertParams(eid, EXPERT_CLASSES[cls_i], Tensor(W1, True, f"{tag}.W1"), Tensor(b1, True, f"{tag}.b1"),
                     Tensor(W2, True, f"{tag}.W2"), Tensor(b2, True, f"{tag}.b2"), origin_client=origin)
    if r:
        e.lowrank = {
            "A1": Tensor(rd.floats(h, r), True, f"{tag}.A1"), "B1": Tensor(rd.floats(r, h_ff), True, f"{tag}.B1"),
            "A2": Tensor(rd.floats(h_ff, r), True, f"{tag}.A2"), "B2": Tensor(rd.floats(r, h), True, f"{tag}.B2"),
        }
        e.freeze_base()
    return e


GATE_HEADER_LEN = 4 + 1 + 3 * 4


def encode_gate(g: GateParams) -> bytes:
    d_in, M = g.W_g.shape
    head = b"GATE" + struct.pack("<BIII", GATE_MODES.index(g.input_mode), d_in, M, g.cond_prior.shape[0])
    return head + _f64(g.W_g.value, g.b_g.value, g.cond_prior.value, g.fallback_prior.value)


def decode_gate(rd: _Reader) -> GateParams:
    rd.magic(b"GATE")
    mode, d_in, M, C = rd.unpack("<BIII")
    if mode >= len(GATE_MODES):
        raise SchemaError("bad gate mode")
    return GateParams(Tensor(rd.floats(d_in, M), True, "gate.W_g"), Tensor(rd.floats(M), True, "gate.b_g"),
                      GATE_MODES[mode], Tensor(rd.floats(C), True, "gate.cond_prior"),
                      Tensor(rd.floats(M), True, "gate.fallback_prior"))


TOKENIZER_HEADER_LEN = 4 + 4 * 4


def encode_tokenizer(t: TokenizerParams) -> bytes:
    d, h = t.W_in.shape
    p, h_z = t.W_cov.shape
    return b"TOKN" + struct.pack("<IIII", d, p, h, h_z) + _f64(*(x.value for x in t.tensors()))


def decode_tokenizer(rd: _Reader) -> TokenizerParams:
    rd.magic(b"TOKN")
    d, p, h, h_z = rd.unpack("<IIII")
    return TokenizerParams(Tensor(rd.floats(d, h), name="tok.W_in"), Tensor(rd.floats(h), name="tok.b_in"),
                           Tensor(rd.floats(p, h_z), name="tok.W_cov"), Tensor(rd.floats(h_z), name="tok.b_cov"))


def encode_backbone(b: BackboneParams) -> bytes:
    nq = len(b.levels)
    return (b"BKBN" + struct.pack("<III", b.h, b.H, nq) + _f64(np.array(b.levels))
            + _f64(*(t.value for t in b.tensors())))


def decode_backbone(rd: _Reader) -> BackboneParams:
    rd.magic(b"BKBN")
    h, H, nq = rd.unpack("<III")
    levels = tuple(float(x) for x in rd.floats(nq))
    b = BackboneParams(Tensor(rd.floats(h, h), name="bb.W_pool"), Tensor(rd.floats(h, H * nq), name="bb.W_out"),
                       Tensor(rd.floats(H * nq), name="bb.b_out"), H=H, levels=levels)
    b.fingerprint = b.compute_fingerprint()
    return b


_DECODERS = {b"EXPR": decode_expert, b"GATE": decode_gate, b"TOKN": decode_tokenizer, b"BKBN": decode_backbone}


def decode_records(buf: bytes, n: int, pos: int = 0) -> tuple[list, int]:
    rd = _Reader(buf, pos)
    out = []
    for _ in range(n):
        magic = buf[rd.pos:rd.pos + 4]
        dec = _DECODERS.get(bytes(magic))
        if dec is None:
            raise SchemaError(f"unknown record magic {bytes(magic)!r} at byte {rd.pos}")
        out.append(dec(rd))
    return out, rd.pos


def float_payloads(rec) -> list[np.ndarray]:
    """Parameter arrays a decoded record carries (what the privacy scan inspects)."""
    return [t.value for t in rec.tensors()]


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class FedMessage:
    """The only object that crosses the client/server boundary.

    Its payload is a sequence of parameter records; there is no field for
    anything else.
    """

    kind: str
    sender: str
    receiver: str
    round: int
    payload: bytes  # concatenated parameter records
    n_records: int

    def __post_init__(self):
        if self.kind not in MSG_KINDS:
            raise SchemaError(f"unknown message kind {self.kind!r}")

    @classmethod
    def build(cls, kind: str, sender: str, receiver: str, round: int, records: Sequence[bytes]) -> "FedMessage":
        return cls(kind, sender, receiver, round, b"".join(records), len(records))

    def header(self) -> bytes:
        return (b"FMSG" + struct.pack("<BI", MSG_KINDS.index(self.kind), self.round)
                + _str(self.sender) + _str(self.receiver) + struct.pack("<I", self.n_records))

    def to_bytes(self) -> bytes:
        return self.header() + self.payload

    @property
    def byte_len(self) -> int:
        return len(self.header()) + len(self.payload)

    def records(self) -> list:
        recs, end = decode_records(self.payload, self.n_records)
        if end != len(self.payload):
            raise SchemaError(f"{len(self.payload) - end} trailing bytes after records")
        return recs


def message_header_len(sender: str, receiver: str) -> int:
    return 4 + 1 + 4 + 2 + len(sender.encode()) + 2 + len(receiver.encode()) + 4


def decode_message(buf: bytes) -> FedMessage:
    rd = _Reader(buf)
    rd.magic(b"FMSG")
    kind, rnd = rd.unpack("<BI")
    if kind >= len(MSG_KINDS):
        raise SchemaError("bad message kind")
    sender, receiver = rd.string(), rd.string()
    (n,) = rd.unpack("<I")
    msg = FedMessage(MSG_KINDS[kind], sender, receiver, rnd, bytes(buf[rd.pos:]), n)
    msg.records()  # strict: must parse completely
    return msg


def write_archive(messages: Iterable[FedMessage], path) -> None:
    with open(path, "wb") as fh:
        for m in messages:
            b = m.to_bytes()
            fh.write(struct.pack("<I", len(b)))
            fh.write(b)


def read_archive(path) -> list[bytes]:
    data = open(path, "rb").read()
    out, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise SchemaError("truncated archive length prefix")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise SchemaError("truncated archive message")
        out.append(data[pos:pos + n])
        pos += n
    return out


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def encode_checkpoint(manifest: dict, records: Sequence[bytes]) -> bytes:
    body = b"".join(records)
    man = dict(manifest, n_records=len(records), body_sha256=hashlib.sha256(body).hexdigest())
    head = json.dumps(man, sort_keys=True).encode()
    return b"CKPT" + struct.pack("<I", len(head)) + head + body


def decode_checkpoint(buf: bytes) -> tuple[dict, list]:
    if buf[:4] != b"CKPT" or len(buf) < 8:
        raise CheckpointError("not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<I", buf, 4)
    if 8 + n > len(buf):
        raise CheckpointError("truncated checkpoint manifest")
    try:
        man = json.loads(buf[8:8 + n])
    except ValueError as e:
        raise CheckpointError(f"corrupt checkpoint manifest: {e}") from e
    body = buf[8 + n:]
    if hashlib.sha256(body).hexdigest() != man.get("body_sha256"):
        raise CheckpointError("checkpoint body digest mismatch")
    try:
        recs, end = decode_records(body, int(man["n_records"]))
    except (SchemaError, KeyError) as e:
        raise CheckpointError(f"corrupt checkpoint records: {e}") from e
    if end != len(body):
        raise CheckpointError("trailing bytes after checkpoint records")
    return man, recs
