"""Synthetic degradations: white Gaussian, Rician and Rayleigh noise.

Images live in [0, 1]; noise parameters quoted in 8-bit units are divided
by 255 before they reach these functions. All draws come from a Philox
(counter-based) generator so a seed reproduces the same field on every
platform.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

KINDS = ("gaussian", "rician", "rayleigh")

# Parameter intervals in 8-bit units.
GAUSSIAN_SIGMA_RANGE = (0.0, 55.0)
RICIAN_SIGMA_RANGE = (0.0, 25.0)
RICIAN_NU_RANGE = (0.0, 15.0)
RAYLEIGH_SIGMA_RANGE = (0.0, 25.0)


def _label(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def substream(seed: int, *labels) -> np.random.Generator:
    """Independent Philox stream for ``seed`` and a path of labels (ints or strings)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_label(p) for p in labels))
    return np.random.Generator(np.random.Philox(ss))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return substream(seed)


def uniform_open_closed(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws on (0, 1]."""
    return 1.0 - rng.random(shape)


def box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal draws from pairs of uniforms."""
    size = int(np.prod(shape))
    half = (size + 1) // 2
    u1 = uniform_open_closed(rng, half)
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
    return z[:size].reshape(shape)


def _check(**params):
    for k, v in params.items():
        if v < 0:
            raise ValueError(f"{k} must be >= 0, got {v}")


def add_gaussian(x, sigma: float, seed=0) -> np.ndarray:
    """y = x + N(0, sigma^2), not clipped."""
    _check(sigma=sigma)
    x = np.asarray(x)
    if sigma == 0:
        return x.copy()
    n = sigma * box_muller(_rng(seed), x.shape)
    return (x + n).astype(x.dtype, copy=False)


def rician_samples(rng, shape, sigma: float, nu: float) -> np.ndarray:
    g1 = sigma * box_muller(rng, shape)
    g2 = sigma * box_muller(rng, shape)
    return np.sqrt((nu + g1) ** 2 + g2**2)


def add_rician(x, sigma: float, nu: float, seed=0, magnitude: bool = False) -> np.ndarray:
    """Rician degradation.

    Default (additive): ``y = x + sqrt((nu + g1)^2 + g2^2)`` with
    ``g1, g2 ~ N(0, sigma^2)``. With ``magnitude=True`` the signal itself is
    the noncentral component: ``y = sqrt((x + nu + g1)^2 + g2^2)``.
    """
    _check(sigma=sigma, nu=nu)
    x = np.asarray(x)
    rng = _rng(seed)
    if magnitude:
        g1 = sigma * box_muller(rng, x.shape)
        g2 = sigma * box_muller(rng, x.shape)
        return np.sqrt((x + nu + g1) ** 2 + g2**2).astype(x.dtype, copy=False)
    return (x + rician_samples(rng, x.shape, sigma, nu)).astype(x.dtype, copy=False)


def rayleigh_samples(rng, shape, sigma: float) -> np.ndarray:
    return sigma * np.sqrt(-2.0 * np.log(uniform_open_closed(rng, shape)))


def add_rayleigh(x, sigma: float, seed=0) -> np.ndarray:
    """y = x + sigma * sqrt(-2 ln u), u ~ U(0, 1]."""
    _check(sigma=sigma)
    x = np.asarray(x)
    if sigma == 0:
        return x.copy()
    return (x + rayleigh_samples(_rng(seed), x.shape, sigma)).astype(x.dtype, copy=False)


@dataclass
class NoiseSpec:
    kind: str = "gaussian"
    sigma: float = 25.0 / 255.0  # normalized units
    nu: float = 0.0
    seed: int = 0
    magnitude: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {KINDS}")
        _check(sigma=self.sigma, nu=self.nu)

    def apply(self, x, seed=None) -> np.ndarray:
        s = self.seed if seed is None else seed
        if self.kind == "gaussian":
            return add_gaussian(x, self.sigma, s)
        if self.kind == "rician":
            return add_rician(x, self.sigma, self.nu, s, self.magnitude)
        return add_rayleigh(x, self.sigma, s)


def sample_training_spec(rng: np.random.Generator, mode: str = "2d", seed: int = 0, kinds=None) -> NoiseSpec:
    """Draw a degradation uniformly from the training intervals.

    2-d training uses white Gaussian noise only; 3-d draws the kind uniformly
    from ``kinds`` (all three by default).
    """
    if mode == "2d":
        kinds = ("gaussian",) if kinds is None else tuple(kinds)
    elif mode == "3d":
        kinds = KINDS if kinds is None else tuple(kinds)
    else:
        raise ValueError("mode must be '2d' or '3d'")
    kind = kinds[int(rng.integers(len(kinds)))] if len(kinds) > 1 else kinds[0]
    if kind == "gaussian":
        sigma = rng.uniform(*GAUSSIAN_SIGMA_RANGE)
        nu = 0.0
    elif kind == "rician":
        sigma = rng.uniform(*RICIAN_SIGMA_RANGE)
        nu = rng.uniform(*RICIAN_NU_RANGE)
    else:
        sigma = rng.uniform(*RAYLEIGH_SIGMA_RANGE)
        nu = 0.0
    return NoiseSpec(kind, sigma / 255.0, nu / 255.0, seed)
