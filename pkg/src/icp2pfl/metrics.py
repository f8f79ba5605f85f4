"""PSNR / SSIM / MSE.

SSIM follows Wang et al. (2004): 11x11 Gaussian window with sigma 1.5,
K1 = 0.01, K2 = 0.03, valid-region filtering, mean of the SSIM map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WIN = 11
WIN_SIGMA = 1.5
PSNR_CAP = 60.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    d = (a - b).ravel()
    # correctly rounded sum keeps the analytic cases exact
    return math.fsum((d * d).tolist()) / d.size


def psnr_from_mse(m: float, L: float = 1.0) -> float:
    if L <= 0:
        raise ValueError("dynamic range L must be positive")
    if m == 0:
        return math.inf
    return 20.0 * math.log10(L) - 10.0 * math.log10(m)


def psnr(a, b, L: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    if L <= 0:
        raise ValueError("dynamic range L must be positive")
    return psnr_from_mse(mse(a, b), L)


def gaussian_window_1d(size=WIN, sigma=WIN_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    # separable: the 2-D window is outer(g, g)
    rows = sliding_window_view(img, len(g), axis=-1) @ g
    return sliding_window_view(rows, len(g), axis=-2) @ g


def ssim_map(a, b, L: float = 1.0) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if min(a.shape) < WIN:
        raise ValueError(f"image {a.shape} smaller than the {WIN}x{WIN} window")
    if L <= 0:
        raise ValueError("dynamic range L must be positive")
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2
    g = gaussian_window_1d()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, L: float = 1.0) -> float:
    return float(np.mean(ssim_map(a, b, L)))


@dataclass(frozen=True)
class MetricVector:
    """[PSNR dB, SSIM, MSE]; PSNR is always derived from the MSE."""
    p: float
    s: float
    m: float

    def __post_init__(self):
        if not self.m >= 0 or math.isnan(self.p) or math.isnan(self.s):
            raise ValueError(f"invalid metric vector {self}")

    @classmethod
    def from_mse_ssim(cls, m: float, s: float, L: float = 1.0) -> MetricVector:
        return cls(psnr_from_mse(m, L), float(s), float(m))

    def as_tuple(self):
        return (self.p, self.s, self.m)

    def clamped(self, cap=PSNR_CAP) -> MetricVector:
        return MetricVector(min(self.p, cap), self.s, self.m)


def evaluate_pairs(pred, target, L: float = 1.0) -> MetricVector:
    """Aggregate over a stack of images.

    The MSE is averaged over images and PSNR is taken from that mean MSE;
    SSIM is averaged per image.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    m = float(np.mean([mse(p, t) for p, t in zip(pred, target)]))
    s = float(np.mean([ssim(p, t, L) for p, t in zip(pred, target)]))
    return MetricVector.from_mse_ssim(m, s, L)
