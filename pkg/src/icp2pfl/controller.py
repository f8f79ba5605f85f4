"""Intermediate controller: performance scoring and online sequencing.

Scores come from a small MLP over normalized ``[psnr, ssim, mse]`` or, when
no trained MLP is supplied, from the closed-form fallback

    rho = 0.5 * min(psnr, cap) / 30 + 0.5 * ssim
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .metrics import PSNR_CAP, MetricVector

HIDDEN = (16, 16, 8)
MSE_SCALE = 0.01


def normalize(mv: MetricVector, cap: float = PSNR_CAP) -> np.ndarray:
    p, s, m = mv.as_tuple()
    if math.isnan(p) or not math.isfinite(s) or not math.isfinite(m):
        raise ValueError(f"non-finite metric vector {mv}")
    return np.array([min(p, cap) / cap, s, min(max(m / MSE_SCALE, 0.0), 1.0)])


def fallback_score(mv: MetricVector, cap: float = PSNR_CAP) -> float:
    p, s, m = mv.as_tuple()
    if math.isnan(p) or not math.isfinite(s) or not math.isfinite(m):
        raise ValueError(f"non-finite metric vector {mv}")
    return 0.5 * min(p, cap) / 30.0 + 0.5 * s


@dataclass
class PamMlp:
    """Four fully connected layers 3 -> 16 -> 16 -> 8 -> 1, ReLU between."""
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    cap: float = PSNR_CAP

    def __post_init__(self):
        sizes = (3, *HIDDEN, 1)
        if len(self.weights) != 4 or len(self.biases) != 4:
            raise ValueError("PAM needs exactly four layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise ValueError(f"layer {i} has shape {w.shape}/{b.shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i} has non-finite weights")

    @classmethod
    def init(cls, seed: int = 0) -> PamMlp:
        rng = np.random.default_rng(seed)
        sizes = (3, *HIDDEN, 1)
        ws, bs = [], []
        for i in range(4):
            bound = math.sqrt(6.0 / sizes[i]) if i < 3 else math.sqrt(3.0 / sizes[i])
            ws.append(rng.uniform(-bound, bound, size=(sizes[i + 1], sizes[i])))
            bs.append(np.zeros(sizes[i + 1]))
        return cls(ws, bs)

    def forward(self, X):
        """Rows of normalized inputs -> (predictions, activations for backprop)."""
        acts = [np.atleast_2d(X)]
        h = acts[0]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < 3:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h[:, 0], acts

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    @classmethod
    def from_tensors(cls, tensors) -> PamMlp:
        return cls([np.asarray(tensors[f"w{i}"], dtype=np.float64) for i in range(4)],
                   [np.asarray(tensors[f"b{i}"], dtype=np.float64) for i in range(4)])


def pam_score(pam: PamMlp | None, mv: MetricVector, cap: float = PSNR_CAP,
              features=None) -> float:
    """Score one institution.  ``features`` is reserved for a feature-map
    summary; the three-input PAM has nowhere to put it, so it must be None."""
    if features is not None:
        raise ValueError("this PAM takes no feature summary")
    if pam is None:
        return fallback_score(mv, cap)
    pred, _ = pam.forward(normalize(mv, pam.cap))
    return float(pred[0])


def pam_pretrain(calibration, seed: int = 0, *, lr: float = 1e-2, max_steps: int = 5000,
                 tol: float = 1e-6, cap: float = PSNR_CAP) -> PamMlp:
    """Fit the PAM to ``(MetricVector, target)`` pairs with full-batch Adam.

    Stops once the mean squared calibration error drops to ``tol`` or after
    ``max_steps`` steps.  The output layer starts at zero.
    """
    calibration = list(calibration)
    if len(calibration) < 32:
        raise ValueError(f"need at least 32 calibration points, got {len(calibration)}")
    X = np.stack([normalize(mv, cap) for mv, _ in calibration])
    y = np.array([float(t) for _, t in calibration])
    pam = PamMlp.init(seed)
    pam.cap = cap
    # start from a constant map; the head then grows only the variation the data asks for
    pam.weights[3][:] = 0.0
    params = pam.weights + pam.biases
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    for step in range(1, max_steps + 1):
        pred, acts = pam.forward(X)
        err = pred - y
        if np.mean(err * err) <= tol:
            break
        d = (2.0 / len(y)) * err[:, None]
        gw, gb = [None] * 4, [None] * 4
        for i in reversed(range(4)):
            gw[i] = d.T @ acts[i]
            gb[i] = d.sum(axis=0)
            if i:
                d = (d @ pam.weights[i]) * (acts[i] > 0)
        for j, (p, gr) in enumerate(zip(params, gw + gb)):
            m1[j] = b1 * m1[j] + (1 - b1) * gr
            m2[j] = b2 * m2[j] + (1 - b2) * gr * gr
            p -= lr * (m1[j] / (1 - b1 ** step)) / (np.sqrt(m2[j] / (1 - b2 ** step)) + eps)
    return pam


@dataclass(frozen=True)
class ControlDirective:
    """Sequence and round counts for the next cycle.

    ``site_rounds`` is parallel to ``sequence``.  ``streak`` counts
    consecutive cycles in which every score cleared the threshold.
    """
    sequence: tuple[int, ...]
    site_rounds: tuple[int, ...]
    trans_rounds: int
    converged: bool = False
    streak: int = 0

    def __post_init__(self):
        seq = tuple(int(k) for k in self.sequence)
        rounds = tuple(int(s) for s in self.site_rounds)
        object.__setattr__(self, "sequence", seq)
        object.__setattr__(self, "site_rounds", rounds)
        if len(set(seq)) != len(seq) or not seq:
            raise ValueError(f"sequence {seq} is not a permutation of distinct ids")
        if len(rounds) != len(seq) or any(s < 1 for s in rounds):
            raise ValueError("site_rounds must give a count >= 1 per institution")
        if self.trans_rounds < 1 or self.streak < 0:
            raise ValueError("trans_rounds must be >= 1")

    @classmethod
    def initial(cls, ids, cfg) -> ControlDirective:
        ids = tuple(ids)
        return cls(ids, (cfg.site_rounds,) * len(ids), cfg.transmissions)

    def rounds_for(self, k: int) -> int:
        return self.site_rounds[self.sequence.index(k)]

    def successor(self, k: int) -> int:
        i = self.sequence.index(k)
        return self.sequence[(i + 1) % len(self.sequence)]


def odm_decide(scores, cfg, current: ControlDirective) -> ControlDirective:
    """Reorder worst-first and extend the worst site when any score clears the threshold.

    Returns ``current`` (with its streak reset) when nothing triggers.  Two
    consecutive cycles with every score at or above the threshold set
    ``converged``.
    """
    missing = [k for k in current.sequence if k not in scores]
    if missing:
        raise KeyError(f"missing scores for institutions {missing}")
    vals = {k: float(scores[k]) for k in current.sequence}
    if any(math.isnan(v) for v in vals.values()):
        raise ValueError("scores must not be NaN")
    thr = cfg.threshold
    if not any(v >= thr for v in vals.values()):
        return replace(current, streak=0) if current.streak else current

    streak = current.streak + 1 if all(v >= thr for v in vals.values()) else 0
    ranked = sorted(current.sequence, key=lambda k: (vals[k], k))
    seq = tuple(ranked) if cfg.switch else current.sequence
    worst = ranked[0]
    S = cfg.site_rounds
    rounds = tuple(min(S + 2, 2 * S) if k == worst else S for k in seq)
    return ControlDirective(seq, rounds, current.trans_rounds,
                            converged=streak >= 2, streak=streak)


@dataclass
class IntermediateController:
    """Collects per-visit metric vectors during a cycle and issues the next directive."""
    cfg: object
    pam: PamMlp | None = None
    seen: dict = field(default_factory=dict)

    def observe(self, k: int, mv: MetricVector) -> float:
        rho = pam_score(self.pam, mv, self.cfg.psnr_cap)
        self.seen[k] = (mv, rho)
        return rho

    def decide(self, current: ControlDirective) -> ControlDirective:
        scores = {k: rho for k, (_, rho) in self.seen.items()}
        out = odm_decide(scores, self.cfg, current)
        self.seen = {}
        return out
