"""Fast self-checks behind ``icp2pfl validate``.

Each check is small enough to run in well under a second and uses only the
package itself plus numpy, so an installed build can verify itself without
the test suite.
"""
from __future__ import annotations

import math
import traceback

import numpy as np

from .continual import GradientConstraintSet, TrainConfig, qp_project
from .controller import ControlDirective, odm_decide
from .data import make_institutions
from .metrics import MetricVector, mse, psnr, ssim
from .nn import Arch, Denoiser, backward, forward, loss_mse
from .orchestrator import run_icp2pfl
from .proto import CrcMismatch, ModelPacket, decode, encode


def check_gradient():
    m = Denoiser.init(Arch(blocks=1, channels=2, patch=8), 0, tail_scale=1.0,
                      branch_scale=1.0).astype(np.float64)
    rng = np.random.default_rng(1)
    x, y = rng.random((8, 8)), rng.random((8, 8))
    g = backward(m, x, y)
    worst = 0.0
    for i in rng.choice(g.size, 20, replace=False):
        p = m.params.copy()
        p[i] += 1e-4
        lp = loss_mse(forward(m.with_params(p), x), y)
        p[i] -= 2e-4
        lm = loss_mse(forward(m.with_params(p), x), y)
        fd = (lp - lm) / 2e-4
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-8))
    return worst < 1e-4, f"max relative error {worst:.1e} over 20 coordinates"


def check_projection():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        g = rng.standard_normal(20)
        rows = [rng.standard_normal(20) for _ in range(int(rng.integers(1, 4)))]
        z = qp_project(g, GradientConstraintSet(*(rows + [None] * (3 - len(rows)))))
        worst = min(worst, float(np.min(np.stack(rows) @ z)))
        # the origin is feasible, so the projection is never farther from g
        if np.linalg.norm(z - g) > np.linalg.norm(g) + 1e-9:
            return False, "projection moved farther than the origin"
    g = np.array([1.0, 0.0])
    same = qp_project(g, GradientConstraintSet(np.array([0.0, 1.0]))) is g
    return worst >= -1e-8 and same, f"worst slack {worst:.1e}"


def check_metrics():
    a = np.full((16, 16), 0.5)
    ok = psnr(a, a + 0.1) == 20.0 and ssim(a, a) == 1.0 and mse(a, a) == 0.0
    ok &= math.isinf(psnr(a, a))
    return ok, "psnr 20 dB at 0.1 offset, ssim(a, a) = 1"


def check_wire():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        pkt = ModelPacket(int(rng.integers(0, 9)), 0, 1, rng.standard_normal(n),
                          MetricVector(30.0, 0.9, 0.001), g_prev=rng.standard_normal(n))
        data = encode(pkt)
        if decode(data) != pkt:
            return False, "round trip changed a packet"
        bad = bytearray(data)
        bad[20] ^= 0x10
        try:
            decode(bytes(bad))
            return False, "bit flip not detected"
        except CrcMismatch:
            pass
    return True, "50 packets round-trip, bit flips caught"


def check_controller():
    cfg = TrainConfig()
    rng = np.random.default_rng(4)
    cur = ControlDirective.initial((1, 2, 3), cfg)
    for _ in range(200):
        scores = {k: float(rng.uniform(1.0, 2.0)) for k in (1, 2, 3)}
        out = odm_decide(scores, cfg, cur)
        if sorted(out.sequence) != [1, 2, 3]:
            return False, "sequence is not a permutation"
        if (out is not cur) != any(v >= cfg.threshold for v in scores.values()):
            return False, "trigger does not match the threshold"
    return True, "200 random decisions"


def check_ring():
    cfg = TrainConfig(lr=0.05, batch=4, transmissions=2, site_rounds=1, patch=16, stride=16)
    ds = make_institutions((1, 2, 3), n_train=1, n_test=1, n_char=1, size=32, patch=16, stride=16)
    rep = run_icp2pfl(cfg, ds, Arch(blocks=1, channels=2, patch=16))
    ok = len(set(rep.node_digests.values())) == 1 and rep.messages == 3 * 2 - 1 + 2
    return ok, f"{rep.messages} messages, digest {rep.final_digest[:12]}"


CHECKS = [
    ("gradient vs finite differences", check_gradient),
    ("projection feasibility", check_projection),
    ("metric identities", check_metrics),
    ("wire round trip and crc", check_wire),
    ("controller permutations", check_controller),
    ("three-node ring agreement", check_ring),
]


def run_checks():
    """Yield ``(name, passed, detail)`` for every check; exceptions count as failures."""
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # report, keep going
            ok, detail = False, "".join(traceback.format_exception_only(type(exc), exc)).strip()
        yield name, bool(ok), detail
