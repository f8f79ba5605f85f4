from .node import (EvaluationComplete, ForwardComplete, Node, Phase, ProtocolError, Received,
                   Start, TrainingComplete, advance)
from .transport import InProcessTransport, SocketTransport, TransportError, make_transport
from .wire import (BadMagic, CrcMismatch, LengthMismatch, MalformedPayload, ModelPacket,
                   ScoreReport, UnsupportedVersion, WireError, decode, encode, param_digest)

__all__ = [
    "BadMagic", "CrcMismatch", "EvaluationComplete", "ForwardComplete", "InProcessTransport",
    "LengthMismatch", "MalformedPayload", "ModelPacket", "Node", "Phase", "ProtocolError",
    "Received", "ScoreReport", "SocketTransport", "Start", "TrainingComplete", "TransportError",
    "UnsupportedVersion", "WireError", "advance", "decode", "encode", "make_transport",
    "param_digest",
]
