"""Model parameters, seeded random streams and correlated Gaussian increments.

Every simulator in the package draws its randomness from an :class:`RngStream`.
Streams are backed by numpy's counter-based ``Philox`` bit generator keyed by a
``SeedSequence(seed, spawn_key=(stream_id, ...))``, so distinct stream ids give
independent sequences by construction and ``(seed, stream_id)`` reproduces the
same draws on every run. Standard normals come from numpy's ziggurat sampler
(``Generator.standard_normal``), which is deterministic for a fixed bit stream.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

DEFAULT_CHUNK = 8192


class SymbranchError(Exception):
    """Base class for all package errors."""


class ParameterError(SymbranchError, ValueError):
    """Invalid model or numerical parameter."""


class ConfigurationError(SymbranchError, ValueError):
    """Inconsistent simulation setup (bad mode, stability violation, ...)."""


class DomainError(SymbranchError, ValueError):
    """Argument outside the domain of an analytic function."""


class NumericalError(SymbranchError, ArithmeticError):
    """A numerical routine failed to reach its tolerance."""


class BudgetError(SymbranchError, RuntimeError):
    """A simulation exceeded its step budget.

    ``partial`` carries whatever state the simulator had reached.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class ModelParams:
    """The two scalars of SBM(rho, kappa).

    Parameters
    ----------
    rho : float
        Correlation of the two driving noises, in [-1, 1].
    kappa : float
        Branching rate, > 0.
    """

    rho: float
    kappa: float

    def __post_init__(self):
        rho, kappa = float(self.rho), float(self.kappa)
        if not (-1.0 <= rho <= 1.0) or math.isnan(rho):
            raise ParameterError(f"rho must lie in [-1, 1], got {self.rho!r}")
        if not kappa > 0.0 or math.isinf(kappa):
            raise ParameterError(f"kappa must be a finite positive number, got {self.kappa!r}")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "kappa", kappa)


@dataclass
class RngStream:
    """A reproducible, independently keyed random stream.

    Identical ``(seed, stream_id)`` pairs produce identical draw sequences.
    A stream must not be shared between threads; use :meth:`substream` to
    derive one stream per worker or per replica chunk.
    """

    seed: int
    stream_id: int = 0
    _path: tuple = field(default=(), repr=False)
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.seed < 0 or self.stream_id < 0:
            raise ParameterError("seed and stream_id must be nonnegative")
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(self.stream_id) & 0xFFFFFFFFFFFFFFFF
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,) + self._path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, index: int) -> "RngStream":
        """Child stream keyed by ``index``; independent of the parent and siblings."""
        return RngStream(self.seed, self.stream_id, _path=self._path + (int(index),))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def random(self, size=None):
        return self._gen.random(size)

    def exponential(self, scale=1.0, size=None):
        return self._gen.exponential(scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)


def as_stream(rng) -> RngStream:
    """Accept an :class:`RngStream` or an integer seed."""
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    raise TypeError(f"expected RngStream or int seed, got {type(rng).__name__}")


def _check_increment_args(rho, dt):
    if not dt > 0 or not math.isfinite(dt):
        raise ParameterError(f"dt must be positive, got {dt!r}")
    if not -1.0 <= rho <= 1.0:
        raise ParameterError(f"|rho| must be <= 1, got {rho!r}")


def correlate(rho: float, z1, z2):
    """Map independent standard normals to a rho-correlated pair (lower Cholesky, Z1 first)."""
    return z1, rho * z1 + math.sqrt(max(0.0, 1.0 - rho * rho)) * z2


def correlated_pair_increment(rho: float, dt: float, rng: RngStream) -> tuple[float, float]:
    """One bivariate Gaussian increment with variances ``dt`` and covariance ``rho*dt``."""
    _check_increment_args(rho, dt)
    z = rng.standard_normal(2)
    a, b = correlate(rho, z[0], z[1])
    s = math.sqrt(dt)
    return float(s * a), float(s * b)


def correlated_field_increments(rho: float, dt: float, n_sites: int, rng: RngStream, batch=()):
    """Per-site rho-correlated increments, independent across sites.

    Returns two arrays of shape ``batch + (n_sites,)``. With ``n_sites == 1``
    and no batch the draws coincide with :func:`correlated_pair_increment`.
    """
    _check_increment_args(rho, dt)
    if n_sites < 1:
        raise ParameterError("n_sites must be >= 1")
    batch = tuple(batch) if not isinstance(batch, int) else (batch,)
    z = rng.standard_normal((2,) + batch + (int(n_sites),))
    a, b = correlate(rho, z[0], z[1])
    s = math.sqrt(dt)
    return s * a, s * b


def n_threads() -> int:
    """Worker cap from ``SYMBRANCH_THREADS`` (default 1)."""
    raw = os.environ.get("SYMBRANCH_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"SYMBRANCH_THREADS must be an integer, got {raw!r}")


def chunk_sizes(n: int, chunk: int = DEFAULT_CHUNK) -> list[int]:
    if n < 1:
        raise ParameterError("need at least one replica")
    full, rest = divmod(n, chunk)
    return [chunk] * full + ([rest] if rest else [])


def map_chunks(fn: Callable[[int, RngStream], T], n: int, rng: RngStream,
               chunk: int = DEFAULT_CHUNK) -> list[T]:
    """Run ``fn(size, substream)`` over fixed-size replica chunks.

    Chunk ``j`` always receives ``rng.substream(j)``, so the results depend on
    the seed and ``chunk`` but never on the number of worker threads.
    """
    sizes = chunk_sizes(n, chunk)
    streams = [rng.substream(j) for j in range(len(sizes))]
    workers = min(n_threads(), len(sizes))
    if workers <= 1:
        return [fn(s, st) for s, st in zip(sizes, streams)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, sizes, streams))


def concat_fields(parts: Sequence, axis: int = 0):
    return np.concatenate([np.asarray(p) for p in parts], axis=axis)
