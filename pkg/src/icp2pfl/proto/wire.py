"""Binary framing for ring messages.

Frame (little-endian)::

    magic "ICP2" | version u16 | type u8 | flags u8 | payload_len u64 | payload | crc32 u32

The CRC (zlib / IEEE 802.3) covers header and payload.  Flags: bit0 marks a
reference gradient, bit1 a control directive inside a ModelPacket.

Payloads::

    ParamVector     count u64, count x f32
    MetricVector    p f64, s f64, m f64
    Directive       n u32, n x (id u32, site_rounds u32), trans_rounds u32,
                    converged u8, streak u32
    ModelPacket     sender u32, cycle u32, site_rounds u32, params ParamVector,
                    [g_prev ParamVector], MetricVector, [Directive]
    ScoreReport     sender u32, cycle u32, MetricVector, rho f64
    TensorBundle    n u32, n x (name_len u16, name utf-8, rank u32,
                    rank x dim u64, data ParamVector)
"""
from __future__ import annotations

import hashlib
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ..controller import ControlDirective
from ..metrics import MetricVector

MAGIC = b"ICP2"
VERSION = 1
HEADER = struct.Struct("<4sHBBQ")
CRC = struct.Struct("<I")
HEADER_SIZE = HEADER.size
FRAME_OVERHEAD = HEADER.size + CRC.size

MODEL_PACKET, SCORE_REPORT, CONTROL_DIRECTIVE, TENSOR_BUNDLE = 1, 2, 3, 4
FLAG_GPREV = 0x01
FLAG_DIRECTIVE = 0x02


class WireError(ValueError):
    """Base class for every decode/encode failure."""


class BadMagic(WireError):
    pass


class UnsupportedVersion(WireError):
    pass


class LengthMismatch(WireError):
    pass


class CrcMismatch(WireError):
    pass


class MalformedPayload(WireError):
    pass


def _params_bytes(p):
    return p.astype("<f4", copy=False).tobytes()


@dataclass(frozen=True, eq=False)
class ModelPacket:
    sender: int
    cycle: int
    site_rounds: int
    params: np.ndarray
    metrics: MetricVector
    g_prev: np.ndarray | None = None
    directive: ControlDirective | None = None

    def __post_init__(self):
        object.__setattr__(self, "params", np.asarray(self.params, dtype=np.float32))
        if self.g_prev is not None:
            object.__setattr__(self, "g_prev", np.asarray(self.g_prev, dtype=np.float32))

    def __eq__(self, other):
        if not isinstance(other, ModelPacket):
            return NotImplemented
        return ((self.sender, self.cycle, self.site_rounds, self.directive)
                == (other.sender, other.cycle, other.site_rounds, other.directive)
                and _same_metrics(self.metrics, other.metrics)
                and _params_bytes(self.params) == _params_bytes(other.params)
                and (self.g_prev is None) == (other.g_prev is None)
                and (self.g_prev is None or _params_bytes(self.g_prev) == _params_bytes(other.g_prev)))


@dataclass(frozen=True, eq=False)
class ScoreReport:
    sender: int
    cycle: int
    metrics: MetricVector
    rho: float

    def __eq__(self, other):
        if not isinstance(other, ScoreReport):
            return NotImplemented
        return ((self.sender, self.cycle) == (other.sender, other.cycle)
                and _same_metrics(self.metrics, other.metrics)
                and struct.pack("<d", self.rho) == struct.pack("<d", other.rho))


def _same_metrics(a, b):
    return struct.pack("<3d", *a.as_tuple()) == struct.pack("<3d", *b.as_tuple())


# ---- encoding -------------------------------------------------------------

def _u32(v, what):
    if not 0 <= v < 2 ** 32:
        raise WireError(f"{what} {v} does not fit in u32")
    return struct.pack("<I", v)


def _enc_params(p, what="params"):
    p = np.asarray(p)
    if p.ndim != 1 or p.size == 0:
        raise WireError(f"{what} must be a non-empty flat vector")
    if not np.isfinite(p).all():
        raise WireError(f"{what} contains non-finite values")
    return struct.pack("<Q", p.size) + _params_bytes(p)


def _enc_metrics(mv):
    if any(math.isnan(v) for v in mv.as_tuple()):
        raise WireError("metric vector contains NaN")
    return struct.pack("<3d", *mv.as_tuple())


def _enc_directive(d: ControlDirective):
    out = [_u32(len(d.sequence), "sequence length")]
    for k, s in zip(d.sequence, d.site_rounds):
        out += [_u32(k, "institution id"), _u32(s, "site_rounds")]
    out += [_u32(d.trans_rounds, "trans_rounds"), struct.pack("<B", int(d.converged)),
            _u32(d.streak, "streak")]
    return b"".join(out)


def _enc_bundle(tensors):
    out = [_u32(len(tensors), "tensor count")]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) >= 2 ** 16:
            raise WireError("tensor name too long")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(_u32(arr.ndim, "rank") + b"".join(struct.pack("<Q", d) for d in arr.shape))
        out.append(_enc_params(arr.ravel(), f"tensor {name!r}"))
    return b"".join(out)


def frame(msg_type: int, flags: int, payload: bytes) -> bytes:
    head = HEADER.pack(MAGIC, VERSION, msg_type, flags, len(payload))
    return head + payload + CRC.pack(zlib.crc32(head + payload))


def encode(msg) -> bytes:
    """Serialize a ModelPacket, ScoreReport, ControlDirective or tensor dict."""
    if isinstance(msg, ModelPacket):
        flags = 0
        body = [_u32(msg.sender, "sender"), _u32(msg.cycle, "cycle"),
                _u32(msg.site_rounds, "site_rounds"), _enc_params(msg.params)]
        if msg.g_prev is not None:
            if msg.g_prev.shape != msg.params.shape:
                raise WireError("g_prev length differs from params length")
            flags |= FLAG_GPREV
            body.append(_enc_params(msg.g_prev, "g_prev"))
        body.append(_enc_metrics(msg.metrics))
        if msg.directive is not None:
            flags |= FLAG_DIRECTIVE
            body.append(_enc_directive(msg.directive))
        return frame(MODEL_PACKET, flags, b"".join(body))
    if isinstance(msg, ScoreReport):
        if math.isnan(msg.rho):
            raise WireError("rho is NaN")
        body = (_u32(msg.sender, "sender") + _u32(msg.cycle, "cycle")
                + _enc_metrics(msg.metrics) + struct.pack("<d", msg.rho))
        return frame(SCORE_REPORT, 0, body)
    if isinstance(msg, ControlDirective):
        return frame(CONTROL_DIRECTIVE, 0, _enc_directive(msg))
    if isinstance(msg, dict):
        return frame(TENSOR_BUNDLE, 0, _enc_bundle(msg))
    raise WireError(f"cannot encode {type(msg).__name__}")


# ---- decoding -------------------------------------------------------------

class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if n < 0 or self.pos + n > len(self.buf):
            raise MalformedPayload("payload ends early")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def u32(self):
        return self.unpack("<I")[0]

    def params(self):
        (n,) = self.unpack("<Q")
        if n == 0:
            raise MalformedPayload("empty parameter vector")
        if n > (len(self.buf) - self.pos) // 4:
            raise MalformedPayload("parameter count exceeds payload")
        arr = np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32)
        if not np.isfinite(arr).all():
            raise MalformedPayload("non-finite parameter values")
        return arr

    def metrics(self):
        p, s, m = self.unpack("<3d")
        try:
            return MetricVector(p, s, m)
        except ValueError as exc:
            raise MalformedPayload(str(exc)) from None

    def directive(self):
        n = self.u32()
        if n == 0 or n > (len(self.buf) - self.pos) // 8:
            raise MalformedPayload("bad directive length")
        pairs = [self.unpack("<II") for _ in range(n)]
        trans = self.u32()
        (conv,) = self.unpack("<B")
        if conv > 1:
            raise MalformedPayload("converged flag must be 0 or 1")
        streak = self.u32()
        try:
            return ControlDirective(tuple(k for k, _ in pairs), tuple(s for _, s in pairs),
                                    trans, bool(conv), streak)
        except ValueError as exc:
            raise MalformedPayload(str(exc)) from None

    def done(self):
        if self.pos != len(self.buf):
            raise MalformedPayload(f"{len(self.buf) - self.pos} trailing payload bytes")


def read_header(head: bytes):
    """Validate a 16-byte header; returns ``(msg_type, flags, payload_len)``."""
    if len(head) < HEADER_SIZE:
        raise LengthMismatch(f"truncated header: {len(head)} of {HEADER_SIZE} bytes")
    magic, version, msg_type, flags, n = HEADER.unpack(head[:HEADER_SIZE])
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    return msg_type, flags, n


def decode(data: bytes):
    """Parse one frame; every failure raises a :class:`WireError` subclass."""
    data = bytes(data)
    msg_type, flags, n = read_header(data)
    if len(data) != FRAME_OVERHEAD + n:
        raise LengthMismatch(f"frame is {len(data)} bytes, header implies {FRAME_OVERHEAD + n}")
    body = data[:HEADER_SIZE + n]
    (crc,) = CRC.unpack(data[HEADER_SIZE + n:])
    if zlib.crc32(body) != crc:
        raise CrcMismatch("crc32 mismatch")
    r = _Reader(body[HEADER_SIZE:])

    if msg_type == MODEL_PACKET:
        if flags & ~(FLAG_GPREV | FLAG_DIRECTIVE):
            raise MalformedPayload(f"unknown flags 0x{flags:02x}")
        sender, cycle, rounds = r.u32(), r.u32(), r.u32()
        params = r.params()
        g_prev = r.params() if flags & FLAG_GPREV else None
        if g_prev is not None and g_prev.size != params.size:
            raise MalformedPayload("g_prev length differs from params length")
        mv = r.metrics()
        directive = r.directive() if flags & FLAG_DIRECTIVE else None
        r.done()
        return ModelPacket(sender, cycle, rounds, params, mv, g_prev, directive)
    if flags:
        raise MalformedPayload(f"unexpected flags 0x{flags:02x} for type {msg_type}")
    if msg_type == SCORE_REPORT:
        sender, cycle = r.u32(), r.u32()
        mv = r.metrics()
        (rho,) = r.unpack("<d")
        if math.isnan(rho):
            raise MalformedPayload("rho is NaN")
        r.done()
        return ScoreReport(sender, cycle, mv, rho)
    if msg_type == CONTROL_DIRECTIVE:
        d = r.directive()
        r.done()
        return d
    if msg_type == TENSOR_BUNDLE:
        out = {}
        for _ in range(r.u32()):
            (ln,) = r.unpack("<H")
            try:
                name = r.take(ln).decode("utf-8")
            except UnicodeDecodeError:
                raise MalformedPayload("tensor name is not utf-8") from None
            rank = r.u32()
            if rank > 8:
                raise MalformedPayload(f"tensor rank {rank} too large")
            shape = tuple(r.unpack("<Q")[0] for _ in range(rank))
            flat = r.params()
            if math.prod(shape) != flat.size:
                raise MalformedPayload(f"tensor {name!r} shape {shape} vs {flat.size} values")
            if name in out:
                raise MalformedPayload(f"duplicate tensor {name!r}")
            out[name] = flat.reshape(shape)
        r.done()
        return out
    raise MalformedPayload(f"unknown message type {msg_type}")


def param_digest(params) -> str:
    return hashlib.sha256(_params_bytes(np.asarray(params))).hexdigest()
