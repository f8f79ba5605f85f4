"""Gradient correction for cyclic institution-incremental training.

The raw gradient ``g`` is projected onto the cone ``{z : <z, row> >= 0}``
spanned by up to three reference rows (previous site's reference gradient,
the running mean of this site-round's gradients, and the drift from the
received weights).  With at most three rows the dual problem

    min_{v >= 0}  1/2 v^T (R R^T) v + (R g)^T v,      z = g + R^T v

is solved exactly by trying every active set.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from .nn import Denoiser, NumericError, value_and_grad


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; defaults are the full-scale settings."""
    lr: float = 1e-4                # sigma, per-institution learning rate
    batch: int = 64
    epsilon: float = 1.0            # correction strength
    transmissions: int = 10         # T
    site_rounds: int = 5            # S
    threshold: float = 1.4759       # controller determination threshold
    patch: int = 64
    stride: int = 64
    seed: int = 0
    decay_round: int = 100
    decay_factor: float = 0.2
    switch: bool = True             # allow the controller to reorder sites
    fine_tune: bool = True          # incoming weights seed local training
    psnr_cap: float = 60.0
    drift_row: bool = False         # add the (w - w_received) constraint row

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.transmissions < 1 or self.site_rounds < 1:
            raise ValueError("transmissions and site_rounds must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.patch < 1 or self.stride < 1:
            raise ValueError("patch and stride must be >= 1")
        if self.decay_round < 1 or not 0 < self.decay_factor <= 1:
            raise ValueError("decay_round must be >= 1 and decay_factor in (0, 1]")

    def lr_at(self, round_index: int) -> float:
        """Step-decayed learning rate; ``round_index`` counts site-rounds from 0."""
        return self.lr * (self.decay_factor if round_index >= self.decay_round else 1.0)


@dataclass(frozen=True)
class GradientConstraintSet:
    g_prev: np.ndarray | None = None
    g_curr: np.ndarray | None = None
    delta: np.ndarray | None = None

    def __post_init__(self):
        n = None
        for name in ("g_prev", "g_curr", "delta"):
            row = getattr(self, name)
            if row is None:
                continue
            row = np.asarray(row)
            if row.ndim != 1:
                raise ValueError(f"{name} must be a flat vector")
            if not np.isfinite(row).all():
                raise ValueError(f"{name} contains non-finite values")
            if n is not None and row.size != n:
                raise ValueError("constraint rows have different lengths")
            n = row.size

    @property
    def present(self):
        return tuple(r is not None for r in (self.g_prev, self.g_curr, self.delta))

    def rows(self):
        return [np.asarray(r) for r in (self.g_prev, self.g_curr, self.delta) if r is not None]


def _objective(g, z):
    d = z - g
    return float(d @ d)


def qp_project(g, G: GradientConstraintSet) -> np.ndarray:
    """Closest point to ``g`` with a non-negative inner product against every row.

    Returns ``g`` itself (same object) when it is already feasible.  All-zero
    rows are dropped with a warning; singular active sets are skipped.
    """
    g = np.asarray(g)
    rows = G.rows()
    if not rows:
        raise ValueError("at least one constraint row is required")
    if any(r.size != g.size for r in rows):
        raise ValueError("constraint rows and gradient differ in length")
    kept = []
    for r in rows:
        if not np.any(r):
            warnings.warn("dropping all-zero constraint row", RuntimeWarning, stacklevel=2)
        else:
            kept.append(r)
    if not kept:
        return g

    R = np.stack(kept).astype(np.float64)
    g64 = g.astype(np.float64)
    Rg = R @ g64
    if np.all(Rg >= 0):
        return g

    M = R @ R.T
    scale = np.sqrt(np.diag(M))
    tol = 1e-12 * scale * max(1.0, float(np.linalg.norm(g64)))
    best = None
    fallback = None
    r = len(kept)
    for size in range(1, r + 1):
        for active in itertools.combinations(range(r), size):
            idx = list(active)
            sub = M[np.ix_(idx, idx)]
            if np.linalg.cond(sub) > 1e12:
                continue
            v = np.linalg.solve(sub, -Rg[idx])
            if np.any(v < 0):
                continue
            z = g64 + v @ R[idx]
            slack = R @ z
            obj = _objective(g64, z)
            if np.all(slack >= -tol):
                if best is None or obj < best[0]:
                    best = (obj, z)
            else:
                worst = float(np.min(slack / scale))
                if fallback is None or worst > fallback[0]:
                    fallback = (worst, z)
    if best is not None:
        z = best[1]
    elif fallback is not None:
        z = fallback[1]
    else:
        raise NumericError("no admissible active set in gradient projection")
    return z.astype(g.dtype, copy=False) if g.dtype != np.float64 else z


def corrected_gradient(g, G: GradientConstraintSet, epsilon: float):
    """Blend ``g`` toward its projection: ``g + epsilon * (qp_project(g) - g)``.

    Returns ``(corrected, l1_gap)`` where ``l1_gap = ||g - qp_project(g)||_1``.
    With no constraint rows there is nothing to correct and ``g`` comes back.
    """
    if not epsilon >= 0:
        raise ValueError("epsilon must be >= 0")
    g = np.asarray(g)
    if not G.rows():
        return g, 0.0
    gt = qp_project(g, G)
    gap = float(np.sum(np.abs(g.astype(np.float64) - gt.astype(np.float64))))
    if epsilon == 0:
        return g, gap
    if epsilon == 1:
        return gt, gap
    return g + epsilon * (gt - g), gap


def update_params(params, grad, lr: float) -> np.ndarray:
    params = np.asarray(params)
    grad = np.asarray(grad)
    if params.shape != grad.shape:
        raise ValueError(f"length mismatch {params.shape} vs {grad.shape}")
    if not lr > 0:
        raise ValueError("learning rate must be > 0")
    with np.errstate(over="ignore", invalid="ignore"):
        out = (params - lr * grad).astype(params.dtype, copy=False)
    if not np.isfinite(out).all():
        raise NumericError("parameter update produced non-finite values")
    return out


def reference_gradient(model: Denoiser, clean, noisy, chunk: int = 64) -> np.ndarray:
    """Mean data-term gradient over a set of (noisy -> clean) pairs."""
    clean = np.asarray(clean)
    noisy = np.asarray(noisy)
    if len(clean) == 0 or len(clean) != len(noisy):
        raise ValueError("reference set must be non-empty with matching pairs")
    total = np.zeros(model.params.size, dtype=np.float64)
    for i in range(0, len(clean), chunk):
        _, g = value_and_grad(model, noisy[i:i + chunk], clean[i:i + chunk])
        total += len(clean[i:i + chunk]) * g.astype(np.float64)
    return (total / len(clean)).astype(model.params.dtype)
