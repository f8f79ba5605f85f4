"""Per-institution ring node.

``advance`` is a pure transition function: it returns a new node and the
messages to send, or raises :class:`ProtocolError` and leaves the caller's
node untouched.

Legal phases::

    Idle -> AwaitingModel -> Training -> Evaluating -> AwaitingModel ...
                                                     \\-> Broadcasting -> Terminated
    (initiator: Idle -> Training)

A ModelPacket whose directive is marked converged moves any live node to
Broadcasting; the packet is relayed unchanged along the directive's ring
until the next hop would be its original sender, so K nodes are reached
with K - 1 sends.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from ..controller import ControlDirective
from .wire import ModelPacket


class Phase(enum.Enum):
    IDLE = "Idle"
    TRAINING = "Training"
    EVALUATING = "Evaluating"
    AWAITING = "AwaitingModel"
    BROADCASTING = "Broadcasting"
    TERMINATED = "Terminated"


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class Start:
    pass


@dataclass(frozen=True)
class Received:
    packet: ModelPacket


@dataclass(frozen=True)
class TrainingComplete:
    pass


@dataclass(frozen=True)
class EvaluationComplete:
    """Carries the packet to hand to the successor.

    If the packet's directive differs from the node's, the node is closing
    a cycle: the packet goes to the head of the new sequence.
    """
    packet: ModelPacket


@dataclass(frozen=True)
class ForwardComplete:
    pass


@dataclass(frozen=True)
class Node:
    node_id: int
    directive: ControlDirective
    phase: Phase = Phase.IDLE
    last_packet: ModelPacket | None = None
    dataset: object = None

    @property
    def is_initiator(self):
        return self.directive.sequence[0] == self.node_id


def _fail(node, event):
    raise ProtocolError(f"node {node.node_id}: {type(event).__name__} not allowed in {node.phase.value}")


def _broadcast(node, packet):
    nxt = packet.directive.successor(node.node_id)
    out = [] if nxt == packet.sender or nxt == node.node_id else [(nxt, packet)]
    return replace(node, phase=Phase.BROADCASTING, directive=packet.directive, last_packet=packet), out


def advance(node: Node, event) -> tuple[Node, list]:
    """Apply one event; returns ``(new_node, [(destination, packet), ...])``."""
    ph = node.phase
    if ph is Phase.TERMINATED:
        _fail(node, event)

    if isinstance(event, Start):
        if ph is not Phase.IDLE:
            _fail(node, event)
        return replace(node, phase=Phase.TRAINING if node.is_initiator else Phase.AWAITING), []

    if isinstance(event, Received):
        pkt = event.packet
        if pkt.directive is not None and pkt.directive.converged:
            if ph is Phase.BROADCASTING:
                _fail(node, event)
            return _broadcast(node, pkt)
        if ph is not Phase.AWAITING:
            _fail(node, event)
        return replace(node, phase=Phase.TRAINING, last_packet=pkt,
                       directive=pkt.directive or node.directive), []

    if isinstance(event, TrainingComplete):
        if ph is not Phase.TRAINING:
            _fail(node, event)
        return replace(node, phase=Phase.EVALUATING), []

    if isinstance(event, EvaluationComplete):
        if ph is not Phase.EVALUATING:
            _fail(node, event)
        pkt = event.packet
        if pkt.sender != node.node_id:
            raise ProtocolError(f"node {node.node_id} cannot send a packet from {pkt.sender}")
        if pkt.directive is not None and pkt.directive.converged:
            return _broadcast(node, pkt)
        new = pkt.directive or node.directive
        if new != node.directive:
            dst = new.sequence[0]
        else:
            dst = node.directive.successor(node.node_id)
        return replace(node, phase=Phase.AWAITING, directive=new, last_packet=pkt), [(dst, pkt)]

    if isinstance(event, ForwardComplete):
        if ph is not Phase.BROADCASTING:
            _fail(node, event)
        return replace(node, phase=Phase.TERMINATED), []

    raise ProtocolError(f"unknown event {event!r}")
