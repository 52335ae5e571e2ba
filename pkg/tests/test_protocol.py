import asyncio
import json
import math
import pathlib
import socket

import numpy as np
import pytest

from pcga.cga import ProbabilityVector
from pcga.protocol import (
    BadMagic,
    CountOutOfRange,
    Delta,
    DeltaReport,
    FrameTooLarge,
    Hello,
    MalformedPayload,
    MessageType,
    PayloadLengthError,
    ProtocolError,
    Snapshot,
    Terminate,
    TerminateReason,
    TrailingData,
    TruncatedFrame,
    UnknownMessageType,
    UnsupportedVersion,
    Update,
    apply_delta,
    compute_delta,
    decode_counts,
    encode_counts,
    field_width,
    frame,
    merge_delta,
    read_message,
    recv_message,
    split_frame,
    unframe,
)

from props import _bitwriter, make_codec_roundtrip, make_delta_merge, make_frame_fuzz

GOLDEN = json.loads((pathlib.Path(__file__).parent / "fixtures" / "golden_frames.json").read_text())


def golden(name):
    return bytes.fromhex(GOLDEN[name].replace(" ", ""))


def vec(counts, n):
    return ProbabilityVector(counts, n)


# deltas

def test_compute_delta_examples():
    assert compute_delta(vec([5, 5], 10), vec([6, 4], 10), 8).entries == [(0, 1), (1, -1)]
    r = compute_delta(vec([5, 5], 10), vec([5, 5], 10), 80)
    assert r.entries == [] and r.evaluations == 80
    assert compute_delta(vec([0, 5], 10), vec([0, 5], 10), 8).entries == []


def test_compute_delta_mismatch():
    with pytest.raises(ValueError):
        compute_delta(vec([5, 5], 10), vec([5], 10), 8)
    with pytest.raises(ValueError):
        compute_delta(vec([5, 5], 10), vec([5, 5], 12), 8)


def test_merge_examples():
    assert merge_delta(vec([6, 5], 10), DeltaReport([(0, 1), (1, -1)], 8)).counts.tolist() == [7, 4]
    assert merge_delta(vec([10, 3], 10), DeltaReport([(0, 2)], 8)).counts.tolist() == [10, 3]
    assert merge_delta(vec([4, 3], 10), DeltaReport([], 8)).counts.tolist() == [4, 3]


def test_merge_counts_clamps():
    _, clamps = apply_delta(vec([10, 0, 5], 10), DeltaReport([(0, 2), (1, -1), (2, 1)], 8))
    assert clamps == 2


def test_merge_out_of_range_gene():
    with pytest.raises(IndexError):
        merge_delta(vec([5, 5], 10), DeltaReport([(2, 1)], 8))


def test_order_dependence_with_clamp():
    snap = vec([9], 10)
    a = DeltaReport([(0, 1)], 8)
    b = DeltaReport([(0, -3)], 8)
    start = vec([10], 10)
    assert merge_delta(merge_delta(start, a), b).counts.tolist() == [7]
    assert merge_delta(merge_delta(start, b), a).counts.tolist() == [8]
    assert snap.counts.tolist() == [9]


def test_order_independence_without_clamp():
    start = vec([5, 5, 5], 10)
    a = DeltaReport([(0, 1), (2, -2)], 8)
    b = DeltaReport([(0, 2), (1, -1)], 8)
    assert merge_delta(merge_delta(start, a), b) == merge_delta(merge_delta(start, b), a)


@pytest.mark.parametrize("bad", [[(1, 1), (0, 1)], [(0, 1), (0, 2)], [(0, 0)], [(-1, 1)]])
def test_delta_report_invariants(bad):
    with pytest.raises(ValueError):
        DeltaReport(bad, 8)


# codec

def test_codec_small_golden():
    v = vec([5] * 5, 10)
    assert field_width(10) == 4
    assert encode_counts(v) == bytes([0x55, 0x55, 0x50])
    assert encode_counts(v) == _bitwriter([5] * 5, 10)
    assert decode_counts(bytes([0x55, 0x55, 0x50]), 10, 5) == v


def test_codec_model_size():
    rng = np.random.default_rng(0)
    v = vec(rng.integers(0, 10**6, 1000, endpoint=True), 10**6)
    packed = encode_counts(v)
    assert field_width(10**6) == 20
    assert len(packed) == 2500
    assert decode_counts(packed, 10**6, 1000) == v


@pytest.mark.parametrize("n,w", [(2, 2), (3, 2), (7, 3), (8, 4), (10, 4), (15, 4), (16, 5), (100000, 17), (2**40, 41)])
def test_field_width_is_ceil_log2(n, w):
    assert field_width(n) == w == math.ceil(math.log2(n + 1))


def test_decode_rejects_count_above_n():
    with pytest.raises(CountOutOfRange):
        decode_counts(bytes([0xB0]), 10, 1)  # 1011 = 11


def test_decode_rejects_wrong_length():
    with pytest.raises(PayloadLengthError):
        decode_counts(bytes([0x55, 0x55]), 10, 5)
    with pytest.raises(PayloadLengthError):
        decode_counts(bytes([0x55, 0x55, 0x50, 0]), 10, 5)


def test_decode_rejects_dirty_padding():
    with pytest.raises(MalformedPayload):
        decode_counts(bytes([0x55, 0x55, 0x51]), 10, 5)


def test_model_beats_explicit_population():
    for n in list(range(4, 200, 2)) + [10**5, 10**6, 2**40]:
        assert field_width(n) < n
    # N = 2 is the one tie: three lattice values need two bits
    assert field_width(2) == 2
    # the motivating case: 1000 genes at N = 10**6
    assert 1000 * field_width(10**6) == 20000 < 1000 * 10**6


# framing

MESSAGES = {
    "hello_v1_empty": Hello(),
    "hello_v1_token": Hello(1, b"\xab\xcd"),
    "snapshot_n10_l5_half": Snapshot(vec([5] * 5, 10)),
    "delta_two_entries": Delta(DeltaReport([(0, 1), (1, -1)], 8), 2.5),
    "delta_empty_solved": Delta(DeltaReport([], 80), 10.0),
    "update_n10_l5_half": Update.of(vec([5] * 5, 10)),
    "terminate_solved": Terminate(TerminateReason.SOLVED),
    "terminate_converged": Terminate(TerminateReason.CONVERGED),
    "terminate_shutdown": Terminate(TerminateReason.SHUTDOWN),
}


@pytest.mark.parametrize("name", sorted(MESSAGES))
def test_golden_frames(name):
    assert frame(MESSAGES[name]) == golden(name)
    assert unframe(golden(name)) == MESSAGES[name]


def test_update_decodes_with_receiver_dimensions():
    u = unframe(golden("update_n10_l5_half"))
    assert u.vector(10, 5).counts.tolist() == [5] * 5


def test_bad_magic():
    data = b"X" + golden("terminate_solved")[1:]
    with pytest.raises(BadMagic):
        unframe(data)


def test_bad_version_and_type():
    data = bytearray(golden("terminate_solved"))
    data[4] = 2
    with pytest.raises(UnsupportedVersion):
        unframe(bytes(data))
    data[4], data[5] = 1, 9
    with pytest.raises(UnknownMessageType):
        unframe(bytes(data))


def test_truncated_delta_entries():
    # entry count says 2 but only one entry follows
    payload = (bytes.fromhex("0000000000000008 00000002 00000000 00000001".replace(" ", ""))
               + bytes.fromhex("4004000000000000"))
    data = b"PCGA\x01\x03" + len(payload).to_bytes(4, "big") + payload
    with pytest.raises(TruncatedFrame):
        unframe(data)


def test_truncated_stream():
    data = golden("delta_two_entries")
    for cut in range(len(data)):
        with pytest.raises(TruncatedFrame):
            unframe(data[:cut])


def test_trailing_data():
    with pytest.raises(TrailingData):
        unframe(golden("terminate_solved") + b"\x00")


def test_oversized_frame():
    data = b"PCGA\x01\x02" + (2**31).to_bytes(4, "big")
    with pytest.raises(FrameTooLarge):
        unframe(data)


def test_errors_are_distinct():
    kinds = {BadMagic, UnsupportedVersion, UnknownMessageType, TruncatedFrame, FrameTooLarge,
             TrailingData, MalformedPayload, PayloadLengthError, CountOutOfRange}
    assert len(kinds) == 9 and all(issubclass(k, ProtocolError) for k in kinds)


def test_split_frame_stream():
    stream = golden("hello_v1_empty") + golden("delta_two_entries") + golden("terminate_solved")[:5]
    out = []
    while True:
        msg, stream = split_frame(stream)
        if msg is None:
            break
        out.append(msg)
    assert out == [MESSAGES["hello_v1_empty"], MESSAGES["delta_two_entries"]]
    assert stream == golden("terminate_solved")[:5]


def test_socket_and_asyncio_readers():
    a, b = socket.socketpair()
    with a, b:
        a.sendall(golden("snapshot_n10_l5_half") + golden("terminate_shutdown"))
        assert recv_message(b) == MESSAGES["snapshot_n10_l5_half"]
        assert recv_message(b) == MESSAGES["terminate_shutdown"]

    async def go():
        reader = asyncio.StreamReader()
        reader.feed_data(golden("delta_two_entries"))
        reader.feed_eof()
        return await read_message(reader)

    assert asyncio.run(go()) == MESSAGES["delta_two_entries"]


def test_message_kinds():
    assert [int(m) for m in MessageType] == [1, 2, 3, 4, 5]


# properties (moderate budgets here; the acceptance suite runs 10**4 each)

test_codec_roundtrip_property = make_codec_roundtrip(300)
test_delta_merge_property = make_delta_merge(300)
test_frame_fuzz_property = make_frame_fuzz(1000)
