"""Synthetic phantom institutions.

Each institution gets its own acquisition protocol: a signal-dependent
Gaussian noise model (variance ``gain * clean + sigma**2``), an intensity
window the phantoms are mapped into, and an anatomy style that changes the
ellipse statistics.  Everything is a pure function of integer seeds.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

MIN_SIZE = 32
SPLITS = ("train", "test", "char")
# phantom seeds are split_base + index; indices stay below this
SEED_STRIDE = 1_000_000
_NOISE_STREAM = 0x6E6F69


@dataclass(frozen=True)
class ProtocolParams:
    institution: int
    gain: float = 0.005
    sigma: float = 0.02
    window: tuple[float, float] = (0.0, 1.0)
    style: int = 0

    def __post_init__(self):
        if self.gain < 0 or self.sigma < 0:
            raise ValueError(f"institution {self.institution}: noise gain and sigma must be >= 0")
        lo, hi = self.window
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"institution {self.institution}: window {self.window} not inside [0, 1]")
        object.__setattr__(self, "window", (float(lo), float(hi)))


# Defaults for up to four sites; magnitudes are free choices, chosen so the
# noise levels and contrast differ enough to make cross-site transfer lossy.
DEFAULT_PROTOCOLS = {
    1: ProtocolParams(1, gain=0.002, sigma=0.010, window=(0.05, 0.70), style=0),
    2: ProtocolParams(2, gain=0.006, sigma=0.025, window=(0.10, 0.85), style=1),
    3: ProtocolParams(3, gain=0.020, sigma=0.050, window=(0.20, 1.00), style=2),
    4: ProtocolParams(4, gain=0.010, sigma=0.035, window=(0.00, 0.90), style=1),
}


def default_protocol(k: int) -> ProtocolParams:
    if k in DEFAULT_PROTOCOLS:
        return DEFAULT_PROTOCOLS[k]
    rng = np.random.default_rng([k, 0x70726F])
    return ProtocolParams(k, gain=float(rng.uniform(0.002, 0.02)),
                          sigma=float(rng.uniform(0.01, 0.05)),
                          window=(0.05, 0.95), style=int(rng.integers(0, 3)))


# per-style ellipse statistics: (min count, max count, radius scale, edge blur)
_STYLES = {
    0: (3, 6, 0.35, 1.0),
    1: (6, 10, 0.25, 0.7),
    2: (10, 16, 0.15, 0.5),
}


def _size(size):
    if np.isscalar(size):
        size = (int(size), int(size))
    h, w = int(size[0]), int(size[1])
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValueError(f"phantom size must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")
    return h, w


def generate_phantom(seed: int, size=(64, 64), protocol: ProtocolParams | None = None) -> np.ndarray:
    """Random overlapping ellipses inside a body outline, values in the protocol window."""
    h, w = _size(size)
    protocol = protocol or ProtocolParams(0)
    n_lo, n_hi, rscale, blur = _STYLES[protocol.style % len(_STYLES)]
    rng = np.random.default_rng(seed)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = 2.0 * yy / (h - 1) - 1.0
    xx = 2.0 * xx / (w - 1) - 1.0

    def ellipse(cy, cx, ry, rx, theta):
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0

    img = np.zeros((h, w))
    body = ellipse(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                   rng.uniform(0.75, 0.92), rng.uniform(0.75, 0.92), rng.uniform(0, np.pi))
    img[body] = rng.uniform(0.35, 0.55)
    for _ in range(int(rng.integers(n_lo, n_hi + 1))):
        r = rng.uniform(0.3, 1.0) * rscale
        mask = ellipse(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                       r * rng.uniform(0.5, 1.5), r * rng.uniform(0.5, 1.5), rng.uniform(0, np.pi))
        img[mask & body] += rng.uniform(-0.35, 0.45)
    # slow shading across the field, then soften edges
    gy, gx = rng.uniform(-0.08, 0.08, size=2)
    img[body] += (gy * yy + gx * xx)[body]
    img = ndimage.gaussian_filter(img, blur, mode="nearest")
    img = np.clip(img, 0.0, 1.0)
    lo, hi = protocol.window
    return (lo + (hi - lo) * img).astype(np.float32)


def simulate_low_dose(clean, protocol: ProtocolParams, seed: int) -> np.ndarray:
    """Add zero-mean Gaussian noise with per-pixel variance gain*clean + sigma^2."""
    clean = np.asarray(clean)
    if not np.isfinite(clean).all():
        raise ValueError("clean image contains non-finite values")
    if protocol.gain < 0 or protocol.sigma < 0:
        raise ValueError("noise parameters must be non-negative")
    c = clean.astype(np.float64)
    var = protocol.gain * np.clip(c, 0.0, None) + protocol.sigma ** 2
    rng = np.random.default_rng([seed, _NOISE_STREAM])
    noisy = c + np.sqrt(var) * rng.standard_normal(c.shape)
    return noisy.astype(np.float32)


def extract_patches(img, patch: int, stride: int) -> list[np.ndarray]:
    """Aligned ``patch`` x ``patch`` windows in row-major order; overflow is dropped."""
    img = np.asarray(img)
    h, w = img.shape
    if patch < 1 or patch > min(h, w):
        raise ValueError(f"patch {patch} does not fit a {h}x{w} image")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return [img[i:i + patch, j:j + patch].copy()
            for i in range(0, h - patch + 1, stride)
            for j in range(0, w - patch + 1, stride)]


@dataclass
class PairSet:
    """Stacked patch pairs: ``clean`` and ``noisy`` are ``(N, P, P)``."""
    clean: np.ndarray
    noisy: np.ndarray
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.clean.shape != self.noisy.shape:
            raise ValueError("clean/noisy shape mismatch")

    def __len__(self):
        return len(self.clean)

    def subset(self, idx) -> PairSet:
        return PairSet(self.clean[idx], self.noisy[idx])

    @staticmethod
    def concat(sets) -> PairSet:
        sets = list(sets)
        return PairSet(np.concatenate([s.clean for s in sets]),
                       np.concatenate([s.noisy for s in sets]),
                       [x for s in sets for x in s.seeds])


@dataclass
class InstitutionDataset:
    k: int
    protocol: ProtocolParams
    train: PairSet
    test: PairSet
    char: PairSet

    @property
    def n(self):
        return len(self.train)

    def split(self, name) -> PairSet:
        return getattr(self, name)


def split_seed_base(seed: int, k: int, split: str) -> int:
    """First phantom seed of a split; ranges of SEED_STRIDE never overlap."""
    if not 0 <= k < 4096:
        raise ValueError("institution id out of range")
    return ((seed * 4096 + k) * len(SPLITS) + SPLITS.index(split)) * SEED_STRIDE


def make_pairs(protocol, seeds, size, patch, stride) -> PairSet:
    clean, noisy = [], []
    for s in seeds:
        c = generate_phantom(s, size, protocol)
        n = simulate_low_dose(c, protocol, s)
        clean += extract_patches(c, patch, stride)
        noisy += extract_patches(n, patch, stride)
    return PairSet(np.stack(clean), np.stack(noisy), list(seeds))


def make_institution(k, protocol=None, *, n_train=200, n_test=50, n_char=50,
                     size=64, patch=64, stride=64, seed=0) -> InstitutionDataset:
    """Build one institution's train/test/characteristic splits.

    Counts are numbers of phantom images; each yields one or more patches.
    """
    if n_train < 1 or n_test < 1 or n_char < 1:
        raise ValueError("every split needs at least one image")
    protocol = protocol or default_protocol(k)
    if protocol.institution != k:
        raise ValueError(f"protocol belongs to institution {protocol.institution}, not {k}")
    splits = {}
    for name, n in zip(SPLITS, (n_train, n_test, n_char)):
        if n >= SEED_STRIDE:
            raise ValueError("split too large for the seed layout")
        base = split_seed_base(seed, k, name)
        splits[name] = make_pairs(protocol, range(base, base + n), size, patch, stride)
    return InstitutionDataset(k, protocol, **splits)


def make_institutions(ids=(1, 2, 3), protocols=None, **kw) -> list[InstitutionDataset]:
    protocols = protocols or {}
    return [make_institution(k, protocols.get(k), **kw) for k in ids]
