"""End-to-end runs: the controlled peer-to-peer ring and its baselines.

Every method spends the same number of SGD steps: T cycles of S passes
over each institution's training set.  SI makes up the count by running
K*S epochs of its one site per cycle.

* ``run_icp2pfl``   ring of nodes exchanging encoded packets, corrected
                    gradients, controller at each cycle boundary
* ``run_sequential`` same schedule with plain SGD and no protocol layer;
                    the reference the epsilon = 0 ring must reproduce
* ``run_fedavg``    T*S rounds of one local epoch, size-weighted average
* ``run_centralized`` SI(k): one institution, MI: pooled data
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .continual import (GradientConstraintSet, TrainConfig, corrected_gradient,
                        reference_gradient, update_params)
from .controller import ControlDirective, IntermediateController, PamMlp, pam_score
from .data import InstitutionDataset, PairSet
from .metrics import MetricVector, evaluate_pairs
from .nn import Arch, Denoiser, NumericError, predict, value_and_grad
from .proto import (EvaluationComplete, ForwardComplete, ModelPacket, Node, Phase, Received,
                    Start, TrainingComplete, advance, decode, encode, make_transport,
                    param_digest)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "seed", "cycle", "institution", "split", "psnr", "ssim", "mse", "rho")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunReport:
    method: str
    seed: int
    institutions: list[int]
    cycles: int = 0
    # institution -> split ("test" / "char") -> one MetricVector per cycle
    trajectories: dict = field(default_factory=dict)
    # institution -> one score per cycle
    rho: dict = field(default_factory=dict)
    input_metrics: dict = field(default_factory=dict)
    directives: list = field(default_factory=list)
    visits: list = field(default_factory=list)
    final_digest: str = ""
    node_digests: dict = field(default_factory=dict)
    messages: int = 0
    bytes_sent: int = 0
    transcript: list = field(default_factory=list)
    odm_converged: bool = False
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    params: np.ndarray | None = None

    def final(self, k: int, split: str = "test") -> MetricVector:
        return self.trajectories[k][split][-1]

    def mean_final_psnr(self, split: str = "test") -> float:
        return float(np.mean([self.final(k, split).p for k in self.institutions]))

    def final_rho(self):
        return {k: v[-1] for k, v in self.rho.items()}

    def to_dict(self):
        """JSON-ready view; wall-clock time is left out so reports are reproducible."""
        def mv(m):
            return {"psnr": m.p, "ssim": m.s, "mse": m.m}
        return {
            "method": self.method,
            "seed": self.seed,
            "institutions": self.institutions,
            "cycles": self.cycles,
            "config": self.config,
            "input_metrics": {str(k): mv(v) for k, v in self.input_metrics.items()},
            "trajectories": {str(k): {s: [mv(m) for m in ms] for s, ms in splits.items()}
                             for k, splits in self.trajectories.items()},
            "rho": {str(k): v for k, v in self.rho.items()},
            "final_rho": {str(k): v for k, v in self.final_rho().items()},
            "directives": [_directive_dict(d) for d in self.directives],
            "visits": self.visits,
            "final_digest": self.final_digest,
            "node_digests": {str(k): v for k, v in self.node_digests.items()},
            "messages": self.messages,
            "bytes_sent": self.bytes_sent,
            "transcript": self.transcript,
            "odm_converged": self.odm_converged,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def csv_rows(self, splits=("test", "char")):
        for k in self.institutions:
            for split in splits:
                for c, m in enumerate(self.trajectories[k][split]):
                    yield (self.method, self.seed, c, k, split, m.p, m.s, m.m, self.rho[k][c])

    def to_csv(self, splits=("test", "char")) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(self.csv_rows(splits))
        return buf.getvalue()


def _directive_dict(d: ControlDirective):
    return {"sequence": list(d.sequence), "site_rounds": list(d.site_rounds),
            "trans_rounds": d.trans_rounds, "converged": d.converged, "streak": d.streak}


# ---- shared pieces --------------------------------------------------------

def evaluate(model: Denoiser, pairs: PairSet) -> MetricVector:
    return evaluate_pairs(predict(model, pairs.noisy), pairs.clean)


def fedavg_aggregate(param_list, sizes) -> np.ndarray:
    """Average parameter vectors with weights n_k / sum(n)."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if len(param_list) != len(sizes) or len(sizes) == 0 or np.any(sizes <= 0):
        raise ValueError("need one positive size per parameter vector")
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in param_list])
    out = (sizes / sizes.sum()) @ stack
    return out.astype(np.asarray(param_list[0]).dtype)


def batch_count(n: int, batch: int) -> int:
    return -(-n // batch)


class Corrector:
    """Builds the constraint rows for one institution visit.

    ``g_prev`` is the reference gradient that arrived with the model,
    ``anchor`` the received weights; the running mean of this site-round's
    raw batch gradients is reset by :meth:`new_round`.
    """

    def __init__(self, epsilon, g_prev=None, anchor=None):
        self.epsilon = epsilon
        self.g_prev = None if g_prev is None else np.asarray(g_prev, dtype=np.float64)
        self.anchor = None if anchor is None else np.asarray(anchor, dtype=np.float64)
        self.running = None
        self.count = 0
        self.steps = 0
        self.active = 0
        self.gap_total = 0.0

    def new_round(self):
        self.running = None
        self.count = 0

    def __call__(self, g, params):
        delta = None
        if self.anchor is not None:
            delta = params.astype(np.float64) - self.anchor
            if not np.any(delta):
                delta = None
        G = GradientConstraintSet(self.g_prev, self.running, delta)
        g_hat, gap = corrected_gradient(g, G, self.epsilon)
        g64 = g.astype(np.float64)
        if self.running is None:
            self.running = g64
        else:
            self.running = self.running + (g64 - self.running) / (self.count + 1)
        self.count += 1
        self.steps += 1
        self.active += gap > 0
        self.gap_total += gap
        return g_hat


def train_epoch(arch: Arch, params, data: PairSet, batch: int, lr: float, key,
                corrector: Corrector | None = None) -> tuple[np.ndarray, float]:
    """One shuffled pass over ``data``; returns new params and mean batch loss."""
    perm = np.random.default_rng(list(key)).permutation(len(data))
    losses = []
    for start in range(0, len(data), batch):
        idx = perm[start:start + batch]
        try:
            loss, g = value_and_grad(Denoiser(arch, params), data.noisy[idx], data.clean[idx])
        except NumericError as exc:
            raise TrainingDiverged(f"non-finite values while training ({key}): {exc}") from exc
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at batch {start // batch} ({key})")
        if corrector is not None:
            g = corrector(g, params)
        try:
            params = update_params(params, g, lr)
        except NumericError as exc:
            raise TrainingDiverged(f"update diverged ({key}): {exc}") from exc
        losses.append(loss)
    return params, float(np.mean(losses))


def _check_inputs(cfg: TrainConfig, datasets, arch: Arch, min_k=1):
    ids = [d.k for d in datasets]
    if len(ids) < min_k:
        raise ValueError(f"need at least {min_k} institutions, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate institution ids {ids}")
    for d in datasets:
        for split in ("train", "test", "char"):
            s = d.split(split)
            if len(s) == 0:
                raise ValueError(f"institution {d.k}: empty {split} split")
            if s.clean.shape[1:] != (arch.patch, arch.patch):
                raise ValueError(f"institution {d.k}: {split} patches {s.clean.shape[1:]} "
                                 f"do not match the network patch {arch.patch}")
    if cfg.patch != arch.patch:
        raise ValueError(f"config patch {cfg.patch} differs from network patch {arch.patch}")
    return ids


def _new_report(method, cfg, datasets, arch):
    ids = [d.k for d in datasets]
    rep = RunReport(method, cfg.seed, ids)
    rep.config = {"train": asdict(cfg), "arch": asdict(arch)}
    for d in datasets:
        rep.trajectories[d.k] = {"test": [], "char": []}
        rep.rho[d.k] = []
        rep.input_metrics[d.k] = evaluate_pairs(d.test.noisy, d.test.clean)
    return rep


def _record_cycle(rep, model, datasets, cfg, pam, rho_override=None):
    for d in datasets:
        test = evaluate(model, d.test)
        char = evaluate(model, d.char)
        rep.trajectories[d.k]["test"].append(test)
        rep.trajectories[d.k]["char"].append(char)
        if rho_override is not None:
            rep.rho[d.k].append(rho_override[d.k])
        else:
            rep.rho[d.k].append(pam_score(pam, char, cfg.psnr_cap))
    rep.cycles += 1


def _finish(rep, params, t0):
    rep.params = params
    rep.final_digest = param_digest(params)
    rep.wall_clock = time.perf_counter() - t0
    return rep


# ---- the ring -------------------------------------------------------------

def _token_holders(nodes):
    return [k for k, n in nodes.items() if n.phase in (Phase.TRAINING, Phase.EVALUATING)]


def run_icp2pfl(cfg: TrainConfig, datasets: list[InstitutionDataset], arch: Arch | None = None,
                *, transport="inproc", addresses=None, pam: PamMlp | None = None,
                method: str = "icp2pfl") -> RunReport:
    """Train around the ring until the controller converges or T cycles pass.

    Each visit: S' site-rounds of corrected SGD, metrics and a reference
    gradient on the characteristic set, then one encoded ModelPacket to
    the successor.  The last institution of a cycle asks the controller for
    the next directive.  At the end the final model is relayed once around
    the ring so every node holds it.
    """
    arch = arch or Arch(patch=cfg.patch)
    ids = _check_inputs(cfg, datasets, arch, min_k=2)
    t0 = time.perf_counter()
    by_id = {d.k: d for d in datasets}
    rep = _new_report(method, cfg, datasets, arch)
    init = Denoiser.init(arch, cfg.seed).params
    directive = ControlDirective.initial(ids, cfg)
    controller = IntermediateController(cfg, pam)
    nodes = {k: Node(k, directive, dataset=by_id[k]) for k in ids}
    for k in ids:
        nodes[k], _ = advance(nodes[k], Start())

    tr = transport if hasattr(transport, "send") else make_transport(transport, ids, addresses)
    owns_transport = tr is not transport

    def send(src, dst, pkt):
        data = encode(pkt)
        tr.send(src, dst, data)
        rep.messages += 1
        rep.bytes_sent += len(data)
        rep.transcript.append([src, dst, hashlib.sha256(data).hexdigest()[:32]])

    def deliver(dst):
        src, data = tr.recv(dst)
        return decode(data)

    try:
        holder = directive.sequence[0]
        cycle = 0
        visit_rho = {}
        while True:
            holders = _token_holders(nodes)
            if holders != [holder]:
                raise RuntimeError(f"token invariant broken: {holders} active, expected [{holder}]")
            node = nodes[holder]
            data = by_id[holder]
            pkt_in = node.last_packet
            if pkt_in is None:
                params, g_prev, anchor = init.copy(), None, None
            else:
                params = pkt_in.params.copy() if cfg.fine_tune else init.copy()
                g_prev, anchor = pkt_in.g_prev, pkt_in.params
            s_k = node.directive.rounds_for(holder)
            if not cfg.drift_row:
                anchor = None
            corrector = Corrector(cfg.epsilon, g_prev, anchor) if cfg.epsilon > 0 else None
            loss = float("nan")
            for r in range(s_k):
                if corrector is not None:
                    corrector.new_round()
                params, loss = train_epoch(arch, params, data.train, cfg.batch,
                                           cfg.lr_at(cycle * cfg.site_rounds + r),
                                           (cfg.seed, holder, cycle, r), corrector)
            nodes[holder], _ = advance(node, TrainingComplete())

            model = Denoiser(arch, params)
            mv = evaluate(model, data.char)
            rho = controller.observe(holder, mv)
            visit_rho[holder] = rho
            g_ref = reference_gradient(model, data.char.clean, data.char.noisy)
            rep.visits.append({
                "cycle": cycle, "institution": holder, "site_rounds": s_k, "loss": loss,
                "char_psnr": mv.p, "char_ssim": mv.s, "char_mse": mv.m, "rho": rho,
                "projected_steps": corrector.active if corrector else 0,
                "steps": corrector.steps if corrector else 0,
                "mean_l1_gap": corrector.gap_total / corrector.steps if corrector and corrector.steps else 0.0,
            })

            closing = holder == node.directive.sequence[-1]
            out_directive = node.directive
            stop = False
            if closing:
                _record_cycle(rep, model, datasets, cfg, pam, rho_override=visit_rho)
                new = controller.decide(node.directive)
                rep.directives.append(new)
                rep.odm_converged = new.converged
                stop = new.converged or cycle + 1 >= new.trans_rounds
                out_directive = replace(new, converged=True) if stop else new
                visit_rho = {}
            pkt = ModelPacket(holder, cycle, s_k, params, mv, g_ref, out_directive)
            nodes[holder], out = advance(nodes[holder], EvaluationComplete(pkt))

            if stop:
                _relay_final(nodes, holder, out, send, deliver)
                break
            (dst, p), = out
            send(holder, dst, p)
            nodes[dst], _ = advance(nodes[dst], Received(deliver(dst)))
            holder = dst
            if closing:
                cycle += 1
    finally:
        if owns_transport:
            tr.close()

    for k, n in nodes.items():
        rep.node_digests[k] = param_digest(n.last_packet.params)
    digests = set(rep.node_digests.values())
    if len(digests) != 1:
        raise RuntimeError(f"nodes disagree on the final model: {rep.node_digests}")
    return _finish(rep, nodes[holder].last_packet.params, t0)


def _relay_final(nodes, origin, out, send, deliver):
    k = origin
    while True:
        nodes[k], _ = advance(nodes[k], ForwardComplete())
        if not out:
            break
        (dst, p), = out
        send(k, dst, p)
        nodes[dst], out = advance(nodes[dst], Received(deliver(dst)))
        k = dst
    live = [k for k, n in nodes.items() if n.phase is not Phase.TERMINATED]
    if live:
        raise RuntimeError(f"nodes {live} never received the final model")


# ---- references and baselines ----------------------------------------------

def run_sequential(cfg: TrainConfig, datasets, arch: Arch | None = None, *,
                   pam: PamMlp | None = None, method: str = "sequential") -> RunReport:
    """Plain sequential fine-tuning on the ring schedule, without packets or correction."""
    arch = arch or Arch(patch=cfg.patch)
    ids = _check_inputs(cfg, datasets, arch)
    t0 = time.perf_counter()
    by_id = {d.k: d for d in datasets}
    rep = _new_report(method, cfg, datasets, arch)
    init = Denoiser.init(arch, cfg.seed).params
    params = init.copy()
    directive = ControlDirective.initial(ids, cfg)
    controller = IntermediateController(cfg, pam)
    for cycle in range(cfg.transmissions):
        scores = {}
        for k in directive.sequence:
            params = (params if cfg.fine_tune else init).copy()
            for r in range(directive.rounds_for(k)):
                params, _ = train_epoch(arch, params, by_id[k].train, cfg.batch,
                                        cfg.lr_at(cycle * cfg.site_rounds + r), (cfg.seed, k, cycle, r))
            scores[k] = controller.observe(k, evaluate(Denoiser(arch, params), by_id[k].char))
        _record_cycle(rep, Denoiser(arch, params), datasets, cfg, pam, rho_override=scores)
        directive = controller.decide(directive)
        rep.directives.append(directive)
        rep.odm_converged = directive.converged
        if directive.converged or cycle + 1 >= directive.trans_rounds:
            break
    return _finish(rep, params, t0)


def run_fedavg(cfg: TrainConfig, datasets, arch: Arch | None = None, *,
               pam: PamMlp | None = None) -> RunReport:
    """T*S rounds; each round every institution runs one local epoch from the shared weights."""
    arch = arch or Arch(patch=cfg.patch)
    _check_inputs(cfg, datasets, arch)
    t0 = time.perf_counter()
    rep = _new_report("fedavg", cfg, datasets, arch)
    params = Denoiser.init(arch, cfg.seed).params
    sizes = [d.n for d in datasets]
    for rnd in range(cfg.transmissions * cfg.site_rounds):
        cycle, r = divmod(rnd, cfg.site_rounds)
        local = [train_epoch(arch, params.copy(), d.train, cfg.batch, cfg.lr_at(rnd),
                             (cfg.seed, d.k, cycle, r))[0] for d in datasets]
        params = fedavg_aggregate(local, sizes)
        rep.messages += 2 * len(datasets)
        if r == cfg.site_rounds - 1:
            _record_cycle(rep, Denoiser(arch, params), datasets, cfg, pam)
    return _finish(rep, params, t0)


def run_centralized(cfg: TrainConfig, datasets, mode="MI", arch: Arch | None = None, *,
                    pam: PamMlp | None = None) -> RunReport:
    """Centralized training: ``mode="MI"`` pools every institution, ``("SI", k)`` uses one.

    Every method gets the ring's optimizer steps: SI runs K*S epochs of
    one site's data per cycle, MI runs S epochs of the pooled data.
    """
    arch = arch or Arch(patch=cfg.patch)
    ids = _check_inputs(cfg, datasets, arch)
    t0 = time.perf_counter()
    if mode == "MI":
        train = PairSet.concat(d.train for d in datasets)
        name = "cl-mi"
    elif isinstance(mode, tuple) and len(mode) == 2 and mode[0] == "SI":
        k = mode[1]
        if k not in ids:
            raise ValueError(f"SI institution {k} not among {ids}")
        train = next(d for d in datasets if d.k == k).train
        name = "cl-si"
    else:
        raise ValueError(f"unknown centralized mode {mode!r}")
    epochs = cfg.site_rounds * (1 if mode == "MI" else len(datasets))
    rep = _new_report(name, cfg, datasets, arch)
    rep.config["mode"] = list(mode) if isinstance(mode, tuple) else mode
    params = Denoiser.init(arch, cfg.seed).params
    for cycle in range(cfg.transmissions):
        for e in range(epochs):
            rnd = cycle * cfg.site_rounds + (e * cfg.site_rounds) // epochs
            params, _ = train_epoch(arch, params, train, cfg.batch, cfg.lr_at(rnd),
                                    (cfg.seed, 0, cycle, e))
        _record_cycle(rep, Denoiser(arch, params), datasets, cfg, pam)
    return _finish(rep, params, t0)


METHODS = ("icp2pfl", "fedavg", "cl-si", "cl-mi", "seq-ablation")


def run_method(method: str, cfg: TrainConfig, datasets, arch: Arch | None = None, *,
               si_institution: int | None = None, transport="inproc", addresses=None,
               pam: PamMlp | None = None) -> RunReport:
    if method == "icp2pfl":
        return run_icp2pfl(cfg, datasets, arch, transport=transport, addresses=addresses, pam=pam)
    if method == "seq-ablation":
        return run_icp2pfl(replace(cfg, epsilon=0.0), datasets, arch, transport=transport,
                           addresses=addresses, pam=pam, method="seq-ablation")
    if method == "fedavg":
        return run_fedavg(cfg, datasets, arch, pam=pam)
    if method == "cl-mi":
        return run_centralized(cfg, datasets, "MI", arch, pam=pam)
    if method == "cl-si":
        k = si_institution if si_institution is not None else datasets[0].k
        return run_centralized(cfg, datasets, ("SI", k), arch, pam=pam)
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
