import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from covmoe.backbone import build_frozen_backbone
from covmoe.cov_smoe import ExpertParams, GateParams, MoEConfig
from covmoe.numkit import Rng
from covmoe.records import (
    CheckpointError, FedMessage, SchemaError, decode_checkpoint, decode_message, decode_records,
    encode_backbone, encode_checkpoint, encode_expert, encode_gate, encode_tokenizer, expert_record_len,
    message_header_len, read_archive, write_archive,
)
from covmoe.tokenizer import TokenizerParams


def _same(a, b):
    return len(a.tensors()) == len(b.tensors()) and all(
        np.array_equal(x.value, y.value) for x, y in zip(a.tensors(), b.tensors()))


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 3), st.sampled_from(["", "client-0", "é"]),
       st.booleans())
def test_expert_round_trip_and_length(h, h_ff, r, origin, include_base):
    e = ExpertParams.init(3, "routed", h, h_ff, Rng(h * 10 + h_ff, "e"), origin_client=origin)
    if r:
        e.add_lowrank(r, Rng(1, "lr"))
    buf = encode_expert(e, include_base)
    assert len(buf) == expert_record_len(h, h_ff, r, origin, include_base)
    (back,), end = decode_records(buf, 1)
    assert end == len(buf) and back.origin_client == origin and back.expert_id == 3 and back.r == r
    if include_base:
        assert _same(back, e) and back.fingerprint() == e.fingerprint()


def test_gate_tokenizer_backbone_round_trip():
    g = GateParams.init(MoEConfig(h=8, h_z=4, h_ff=8, C=2, M=4), Rng(0, "g"))
    t = TokenizerParams.init(2, 3, 8, 4, Rng(0, "t"))
    b = build_frozen_backbone(42, 8, 4, (0.1, 0.5, 0.9))
    recs, end = decode_records(encode_gate(g) + encode_tokenizer(t) + encode_backbone(b), 3)
    assert _same(recs[0], g) and recs[0].input_mode == g.input_mode
    assert _same(recs[1], t) and recs[1].fingerprint() == t.fingerprint()
    assert recs[2].fingerprint == b.fingerprint and recs[2].levels == b.levels


def test_message_round_trip_and_header_length():
    e = ExpertParams.init(0, "routed", 4, 4, Rng(0, "e"))
    msg = FedMessage.build("ExpertUpload", "client-1", "server", 0, [encode_expert(e)])
    buf = msg.to_bytes()
    assert msg.byte_len == len(buf) == message_header_len("client-1", "server") + expert_record_len(4, 4, 0)
    assert decode_message(buf) == msg


def test_message_strictness():
    e = ExpertParams.init(0, "routed", 4, 4, Rng(0, "e"))
    buf = FedMessage.build("ExpertUpload", "c", "server", 0, [encode_expert(e)]).to_bytes()
    with pytest.raises(SchemaError):
        decode_message(buf + b"\x00")
    with pytest.raises(SchemaError):
        decode_message(buf[:-1])
    with pytest.raises(SchemaError):
        decode_message(b"XMSG" + buf[4:])
    with pytest.raises(SchemaError):
        FedMessage.build("Telemetry", "c", "server", 0, [])


def test_archive_round_trip(tmp_path):
    e = ExpertParams.init(0, "routed", 4, 4, Rng(0, "e"))
    msgs = [FedMessage.build("ExpertUpload", f"c{i}", "server", 0, [encode_expert(e)]) for i in range(3)]
    write_archive(msgs, tmp_path / "a.bin")
    assert [decode_message(b) for b in read_archive(tmp_path / "a.bin")] == msgs
    (tmp_path / "b.bin").write_bytes((tmp_path / "a.bin").read_bytes()[:-3])
    with pytest.raises(SchemaError):
        read_archive(tmp_path / "b.bin")


def _checkpoint():
    recs = [encode_expert(ExpertParams.init(i, "routed", 4, 4, Rng(i, "e"))) for i in range(2)]
    return encode_checkpoint({"note": "x"}, recs)


def test_checkpoint_round_trip():
    man, recs = decode_checkpoint(_checkpoint())
    assert man["note"] == "x" and man["n_records"] == 2 and len(recs) == 2


@pytest.mark.parametrize("mangle", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:-1],
    lambda b: b + b"\x00",
    lambda b: b[:-8] + struct.pack("<d", 1.5),
    lambda b: b[:8] + b"}" + b[9:],
    lambda b: b[:4] + struct.pack("<I", 10 ** 6) + b[8:],
])
def test_checkpoint_corruption(mangle):
    with pytest.raises(CheckpointError):
        decode_checkpoint(mangle(_checkpoint()))
