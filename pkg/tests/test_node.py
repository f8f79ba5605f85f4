from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icp2pfl.controller import ControlDirective
from icp2pfl.metrics import MetricVector
from icp2pfl.proto import (EvaluationComplete, ForwardComplete, ModelPacket, Node, Phase,
                           ProtocolError, Received, Start, TrainingComplete, advance)

D = ControlDirective((1, 2, 3), (2, 2, 2), 4)
MV = MetricVector(25.0, 0.8, 0.003)


def pkt(sender, directive=None, cycle=0):
    return ModelPacket(sender, cycle, 2, np.ones(4), MV, directive=directive)


def started(k, directive=D):
    node, out = advance(Node(k, directive), Start())
    assert out == []
    return node


def test_start_phases():
    assert started(1).phase is Phase.TRAINING
    assert started(2).phase is Phase.AWAITING


def test_visit_forwards_to_successor():
    n = started(1)
    n, _ = advance(n, TrainingComplete())
    assert n.phase is Phase.EVALUATING
    p = pkt(1)
    n, out = advance(n, EvaluationComplete(p))
    assert n.phase is Phase.AWAITING
    assert out == [(2, p)]
    assert n.last_packet is p


def test_received_packet_starts_training_and_adopts_directive():
    n = started(2)
    new = ControlDirective((3, 2, 1), (4, 2, 2), 4)
    n, out = advance(n, Received(pkt(1, new)))
    assert out == [] and n.phase is Phase.TRAINING and n.directive == new


def test_cycle_close_sends_to_new_head():
    n = started(3)
    n, _ = advance(n, Received(pkt(2)))
    n, _ = advance(n, TrainingComplete())
    new = ControlDirective((2, 3, 1), (4, 2, 2), 4)
    n, out = advance(n, EvaluationComplete(pkt(3, new)))
    assert out[0][0] == 2 and n.directive == new


def test_last_node_wraps_to_first():
    n = started(3)
    n, _ = advance(n, Received(pkt(2)))
    n, _ = advance(n, TrainingComplete())
    _, out = advance(n, EvaluationComplete(pkt(3, D)))
    assert out[0][0] == 1


def test_converged_packet_is_relayed_once_around():
    done = replace(D, converged=True)
    final = pkt(2, done)
    n2 = started(2)
    n2, _ = advance(n2, Received(pkt(1)))
    n2, _ = advance(n2, TrainingComplete())
    n2, out = advance(n2, EvaluationComplete(final))
    assert n2.phase is Phase.BROADCASTING and out == [(3, final)]
    n3, out = advance(started(3), Received(final))
    assert out == [(1, final)]
    n1, _ = advance(started(1), TrainingComplete())
    n1, _ = advance(n1, EvaluationComplete(pkt(1)))
    n1, out = advance(n1, Received(final))
    assert out == []  # next hop would be the original sender
    for n in (n1, n2, n3):
        n, _ = advance(n, ForwardComplete())
        assert n.phase is Phase.TERMINATED
        with pytest.raises(ProtocolError):
            advance(n, Start())


def test_illegal_transitions():
    with pytest.raises(ProtocolError):
        advance(Node(1, D), TrainingComplete())
    n = started(2)
    with pytest.raises(ProtocolError):
        advance(n, Start())
    with pytest.raises(ProtocolError):
        advance(n, EvaluationComplete(pkt(2)))
    with pytest.raises(ProtocolError):
        advance(started(1), Received(pkt(3)))
    with pytest.raises(ProtocolError):
        advance(n, ForwardComplete())
    with pytest.raises(ProtocolError):
        advance(n, object())


def test_cannot_send_someone_elses_packet():
    n, _ = advance(started(1), TrainingComplete())
    with pytest.raises(ProtocolError):
        advance(n, EvaluationComplete(pkt(2)))


def test_advance_leaves_input_untouched():
    n = started(1)
    before = (n.phase, n.directive, n.last_packet)
    advance(n, TrainingComplete())
    assert (n.phase, n.directive, n.last_packet) == before


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(0, 6))
def test_relay_reaches_everyone_with_k_minus_1_sends(K, start):
    seq = tuple(range(1, K + 1))
    done = ControlDirective(seq, (1,) * K, 1, converged=True)
    origin = seq[start % K]
    final = ModelPacket(origin, 0, 1, np.ones(2), MV, directive=done)
    reached, sends = {origin}, 0
    queue = [(done.successor(origin), final)]
    sends += 1
    while queue:
        dst, p = queue.pop()
        reached.add(dst)
        _, out = advance(Node(dst, done, Phase.AWAITING), Received(p))
        sends += len(out)
        queue += out
    assert reached == set(seq)
    assert sends == K - 1
