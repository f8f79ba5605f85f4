import struct
import zlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icp2pfl.controller import ControlDirective
from icp2pfl.metrics import MetricVector
from icp2pfl.proto.wire import (FRAME_OVERHEAD, HEADER_SIZE, BadMagic, CrcMismatch,
                                LengthMismatch, MalformedPayload, ModelPacket, ScoreReport,
                                UnsupportedVersion, WireError, decode, encode, param_digest,
                                read_header)

GOLDEN = Path(__file__).parent / "golden" / "model_packet_2params.bin"
MV = MetricVector(30.0, 0.9, 0.001)


def random_packet(rng, n=None):
    n = n or int(rng.integers(1, 64))
    g_prev = rng.standard_normal(n) if rng.random() < 0.5 else None
    directive = None
    if rng.random() < 0.5:
        k = int(rng.integers(1, 6))
        seq = tuple(int(v) for v in rng.permutation(k) + 1)
        directive = ControlDirective(seq, tuple(int(v) for v in rng.integers(1, 10, k)),
                                     int(rng.integers(1, 20)), bool(rng.random() < 0.5),
                                     int(rng.integers(0, 3)))
    mv = MetricVector(float(rng.uniform(0, 60)), float(rng.uniform(-1, 1)), float(rng.uniform(0, 1)))
    return ModelPacket(int(rng.integers(0, 2 ** 32)), int(rng.integers(0, 100)),
                       int(rng.integers(1, 10)), rng.standard_normal(n), mv, g_prev, directive)


def test_golden_two_parameter_packet():
    pkt = ModelPacket(2, 1, 5, np.array([1.0, -0.5]), MV)
    assert encode(pkt) == GOLDEN.read_bytes()
    assert decode(GOLDEN.read_bytes()) == pkt


def test_header_layout():
    data = encode(ModelPacket(1, 0, 1, np.ones(3), MV, g_prev=np.zeros(3)))
    magic, version, mtype, flags, n = struct.unpack("<4sHBBQ", data[:HEADER_SIZE])
    assert (magic, version, mtype, flags) == (b"ICP2", 1, 1, 1)
    assert len(data) == n + FRAME_OVERHEAD
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])
    assert read_header(data) == (1, 1, n)


def test_round_trip_random_packets():
    rng = np.random.default_rng(0)
    for _ in range(200):
        pkt = random_packet(rng)
        data = encode(pkt)
        back = decode(data)
        assert back == pkt
        assert encode(back) == data


def test_score_report_and_directive_round_trip():
    rep = ScoreReport(3, 7, MV, 1.25)
    assert decode(encode(rep)) == rep
    d = ControlDirective((2, 1, 3), (7, 5, 5), 10, converged=True, streak=2)
    assert decode(encode(d)) == d


def test_tensor_bundle_round_trip():
    tensors = {"w0": np.arange(6, dtype=np.float32).reshape(2, 3), "b0": np.array([0.5], np.float32)}
    back = decode(encode(tensors))
    assert list(back) == ["w0", "b0"]
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        np.testing.assert_array_equal(back[k], tensors[k])


def test_payload_bit_flips_are_caught():
    data = encode(ModelPacket(4, 2, 3, np.linspace(-1, 1, 5), MV, g_prev=np.ones(5)))
    for byte in range(HEADER_SIZE, len(data) - 4):
        for bit in range(8):
            bad = bytearray(data)
            bad[byte] ^= 1 << bit
            with pytest.raises(CrcMismatch):
                decode(bytes(bad))


def test_truncation_and_extension():
    data = encode(ModelPacket(1, 0, 1, np.ones(4), MV))
    for cut in (0, 5, HEADER_SIZE, len(data) - 1):
        with pytest.raises(LengthMismatch):
            decode(data[:cut])
    with pytest.raises(LengthMismatch):
        decode(data + b"\x00")


def test_bad_magic_and_version():
    data = bytearray(encode(ModelPacket(1, 0, 1, np.ones(2), MV)))
    with pytest.raises(BadMagic):
        decode(b"XCP2" + bytes(data[4:]))
    data[4:6] = struct.pack("<H", 2)
    with pytest.raises(UnsupportedVersion):
        decode(bytes(data))


def _reframe(mtype, flags, payload):
    body = b"ICP2" + struct.pack("<HBBQ", 1, mtype, flags, len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def test_malformed_payloads_with_valid_crc():
    with pytest.raises(MalformedPayload):
        decode(_reframe(9, 0, b""))
    with pytest.raises(MalformedPayload):
        decode(_reframe(1, 0, struct.pack("<III", 1, 0, 1)))  # ends before params
    with pytest.raises(MalformedPayload):
        decode(_reframe(1, 0x80, b""))
    nan_params = struct.pack("<IIIQ", 1, 0, 1, 1) + struct.pack("<f", float("nan")) + struct.pack("<3d", 1, 1, 1)
    with pytest.raises(MalformedPayload):
        decode(_reframe(1, 0, nan_params))
    good = encode(ScoreReport(1, 0, MV, 0.5))
    with pytest.raises(MalformedPayload):
        decode(_reframe(2, 0, good[HEADER_SIZE:-4] + b"\x00"))


def test_encode_rejects_bad_packets():
    with pytest.raises(WireError):
        encode(ModelPacket(1, 0, 1, np.ones(3), MV, g_prev=np.ones(2)))
    with pytest.raises(WireError):
        encode(ModelPacket(1, 0, 1, np.array([np.inf]), MV))
    with pytest.raises(WireError):
        encode(ModelPacket(-1, 0, 1, np.ones(1), MV))
    with pytest.raises(WireError):
        encode("hello")


def test_param_digest():
    a = np.array([1.0, 2.0], np.float32)
    assert param_digest(a) == param_digest(a.astype(np.float64))
    assert param_digest(a) != param_digest(a[::-1])
    assert len(param_digest(a)) == 64


def test_random_bytes_never_crash():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        n = int(rng.integers(0, 80))
        blob = rng.integers(0, 256, n, dtype=np.uint8).tobytes()
        if rng.random() < 0.5 and n >= HEADER_SIZE:
            blob = b"ICP2" + struct.pack("<H", 1) + blob[6:]
        with pytest.raises(WireError):
            decode(blob)


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=200))
def test_decode_only_raises_wire_errors(blob):
    try:
        decode(blob)
    except WireError:
        pass


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_round_trip_property(seed):
    pkt = random_packet(np.random.default_rng(seed))
    assert decode(encode(pkt)) == pkt
