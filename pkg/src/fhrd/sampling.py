"""Seeded random generation of FHRD datasets.

Streams are derived from a root seed and a tuple of integer keys with
:class:`numpy.random.SeedSequence` (hash-based spawning), so a replicate's
draws depend only on ``(seed, keys)`` and never on how work is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError
from .model import AreaData, ModelParams

_U64 = (1 << 64) - 1
_TINY_ETA = 1e-300

# first stream key, one per purpose, so different uses of a seed never collide
STREAM_DATA = 1
STREAM_BOOTSTRAP = 2
STREAM_TABLE1 = 11
STREAM_TABLE2 = 12
STREAM_TABLE3_TRUE = 13
STREAM_TABLE3_EST = 14


@dataclass(frozen=True)
class RngSeed:
    """Root seed plus a stream path; identical pairs give identical draws."""

    seed: int
    stream: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not 0 <= int(self.seed) <= _U64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if any(not 0 <= int(k) <= _U64 for k in self.stream):
            raise DomainError("stream keys must be 64-bit unsigned integers")
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "stream", tuple(int(k) for k in self.stream))

    def child(self, *keys: int) -> "RngSeed":
        return RngSeed(self.seed, self.stream + tuple(keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.PCG64(ss))


def sample_standard(rng: np.random.Generator, size=None):
    """Standard normal draw(s)."""
    return rng.standard_normal(size)


def sample_chisq(rng: np.random.Generator, df, size=None):
    """Chi-square draw(s) with ``df`` degrees of freedom."""
    if np.any(np.asarray(df) < 1):
        raise DomainError("chi-square degrees of freedom must be >= 1")
    return rng.chisquare(df, size)


def sample_gamma(rng: np.random.Generator, shape, scale, size=None):
    """Gamma(shape, scale) draw(s); mean shape*scale.

    Ga(alpha/2, 2/gamma) therefore has mean alpha/gamma.
    """
    if np.any(np.asarray(shape) <= 0) or np.any(np.asarray(scale) <= 0):
        raise DomainError("gamma shape and scale must be > 0")
    return rng.gamma(shape, scale, size)


@dataclass(frozen=True)
class Design:
    """Covariates ``z`` (m, p) and degrees of freedom ``n`` (m,)."""

    z: np.ndarray
    n: np.ndarray

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.z, dtype=float))
        n = np.asarray(self.n, dtype=float).reshape(-1)
        if z.shape[0] != n.shape[0] or z.shape[0] == 0:
            raise DomainError("design must be nonempty with matching z and n")
        if np.any(n < 1):
            raise DomainError("n must be >= 1")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "n", n)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[Sequence[float], int]]) -> "Design":
        return cls(z=np.array([p[0] for p in pairs], dtype=float), n=np.array([p[1] for p in pairs]))

    @classmethod
    def of(cls, data: AreaData) -> "Design":
        n = data.n if data.n.ndim == 1 else data.n[0]
        return cls(z=data.z, n=n)

    @property
    def m(self) -> int:
        return self.z.shape[0]


@dataclass(frozen=True)
class SyntheticDataset:
    data: AreaData
    xi: np.ndarray
    sigma2: np.ndarray
    params_used: ModelParams


def _draw(params: ModelParams, design: Design, rng: np.random.Generator):
    m = design.m
    mu = design.z @ params.beta
    eta = np.maximum(sample_gamma(rng, params.alpha / 2.0, 2.0 / params.gamma, m), _TINY_ETA)
    sigma2 = 1.0 / eta
    xi = mu + np.sqrt(params.tau2) * sample_standard(rng, m)
    y = xi + np.sqrt(sigma2) * sample_standard(rng, m)
    v = sigma2 * sample_chisq(rng, design.n)
    return y, v, xi, sigma2


def generate_fhrd(params: ModelParams, design: Design, seed: RngSeed) -> SyntheticDataset:
    """Draw one dataset from the model, keeping the latent means and variances."""
    if params.beta.shape[0] != design.z.shape[1]:
        raise DomainError("beta length does not match the number of covariates")
    y, v, xi, sigma2 = _draw(params, design, seed.generator())
    data = AreaData(y=y, v=v, n=design.n.copy(), z=design.z)
    return SyntheticDataset(data=data, xi=xi, sigma2=sigma2, params_used=params)


def generate_bootstrap(fit: ModelParams, design: Design, seed: RngSeed) -> SyntheticDataset:
    """Parametric bootstrap draw from the fitted model; same law as generate_fhrd."""
    return generate_fhrd(fit, design, seed)


def generate_many(params: ModelParams, design: Design, seeds: Sequence[RngSeed]) -> SyntheticDataset:
    """Stack independent datasets (one per seed) along a leading batch axis."""
    k, m = len(seeds), design.m
    y = np.empty((k, m))
    v = np.empty((k, m))
    xi = np.empty((k, m))
    s2 = np.empty((k, m))
    for j, s in enumerate(seeds):
        y[j], v[j], xi[j], s2[j] = _draw(params, design, s.generator())
    data = AreaData(y=y, v=v, n=np.broadcast_to(design.n, (k, m)).copy(), z=design.z)
    return SyntheticDataset(data=data, xi=xi, sigma2=s2, params_used=params)
