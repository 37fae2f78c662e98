"""dSBM(rho, kappa) on a finite torus of Z^d, and a 1-D grid discretisation of cSBM.

Discrete mode uses the nearest-neighbour Laplacian with weights 1/(2d) and
per-site noise variance ``dt``. Continuum mode (d = 1) uses
``(1/2)(u[i+1] - 2u[i] + u[i-1]) / h^2`` and per-site noise variance ``dt/h``
so that the increments approximate space-time white noise. Negative values
are clamped to zero site by site after every step; a clamped site can be
re-seeded by its neighbours through the Laplacian.

Field arrays may carry leading batch axes; the last ``d`` axes are space.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (ConfigurationError, ModelParams, ParameterError, RngStream, as_stream,
                   concat_fields, correlate, map_chunks)

DISCRETE_DT_MAX = 0.2
CONTINUUM_DT_FACTOR = 0.2


@dataclass(frozen=True)
class LatticeConfig:
    d: int = 1
    side: int = 16
    mode: str = "discrete"
    h: float = 1.0
    max_sites: int = 50_000_000

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ConfigurationError(f"d must be 1, 2 or 3, got {self.d}")
        if self.mode not in ("discrete", "continuum"):
            raise ConfigurationError(f"mode must be 'discrete' or 'continuum', got {self.mode!r}")
        if self.side < 1:
            raise ConfigurationError("side must be positive")
        if self.mode == "continuum":
            if self.d != 1:
                raise ConfigurationError("continuum mode is one-dimensional")
            if not self.h > 0:
                raise ConfigurationError("continuum mode needs h > 0")
        if self.side ** self.d > self.max_sites:
            raise ConfigurationError("lattice exceeds the site budget")

    @property
    def shape(self) -> tuple:
        return (self.side,) * self.d

    @property
    def n_sites(self) -> int:
        return self.side ** self.d

    @property
    def space_axes(self) -> tuple:
        return tuple(range(-self.d, 0))

    @property
    def weight(self) -> float:
        """Quadrature weight of one site in mass functionals."""
        return self.h if self.mode == "continuum" else 1.0

    @property
    def noise_scale(self) -> float:
        return 1.0 / self.h if self.mode == "continuum" else 1.0

    def dt_max(self) -> float:
        if self.mode == "continuum":
            return CONTINUUM_DT_FACTOR * self.h ** 2
        return DISCRETE_DT_MAX

    def check_dt(self, dt: float):
        if not dt > 0:
            raise ParameterError(f"dt must be positive, got {dt!r}")
        if dt > self.dt_max() * (1 + 1e-12):
            raise ConfigurationError(
                f"dt={dt} violates the explicit-scheme bound dt <= {self.dt_max():g}")

    def coordinates(self) -> np.ndarray:
        """Physical x-coordinates of the sites (continuum mode): x_i = (i - side/2) h."""
        if self.mode != "continuum":
            return np.arange(self.side, dtype=float)
        return (np.arange(self.side) - self.side // 2) * self.h

    def site_index(self, site) -> tuple:
        if np.ndim(site) == 0:
            site = (site,) * self.d
        site = tuple(int(s) % self.side for s in site)
        if len(site) != self.d:
            raise ConfigurationError(f"site {site} does not have {self.d} coordinates")
        return site


@dataclass
class LatticeField:
    config: LatticeConfig
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0


@dataclass
class MassLedger:
    """Running total masses and the accumulated square function.

    ``qv`` is ``kappa * int_0^t <u_s, v_s> ds`` (left-point rule, same quadrature
    weight as the masses); the cross-variation is ``rho * qv`` by construction.
    """

    mu: np.ndarray
    mv: np.ndarray
    qv: np.ndarray
    rho: float = 0.0

    @property
    def xv(self) -> np.ndarray:
        return self.rho * self.qv


def discrete_laplacian(values, config: LatticeConfig) -> np.ndarray:
    """Torus Laplacian over the trailing ``config.d`` axes."""
    u = np.asarray(values, dtype=float)
    out = np.zeros_like(u)
    if config.mode == "continuum":
        ax = -1
        return 0.5 * (np.roll(u, 1, ax) - 2.0 * u + np.roll(u, -1, ax)) / config.h ** 2
    w = 1.0 / (2 * config.d)
    for ax in config.space_axes:
        out += w * (np.roll(u, 1, ax) + np.roll(u, -1, ax) - 2.0 * u)
    return out


def laplacian_symbol(config: LatticeConfig) -> np.ndarray:
    """Eigenvalues of the torus Laplacian on the FFT grid (shape ``config.shape``)."""
    k = 2.0 * np.pi * np.fft.fftfreq(config.side)
    c = np.cos(k) - 1.0
    if config.mode == "continuum":
        return c / config.h ** 2
    grids = np.meshgrid(*([c] * config.d), indexing="ij")
    return sum(grids) / config.d


def heat_semigroup(field0, t: float, config: LatticeConfig) -> np.ndarray:
    """Exact solution of dm/dt = Laplacian m at time ``t`` (spectral, via FFT)."""
    if t < 0:
        raise ParameterError("t must be nonnegative")
    f = np.asarray(field0, dtype=float)
    if t == 0:
        return f.copy()
    axes = config.space_axes
    fh = np.fft.fftn(f, axes=axes)
    return np.real(np.fft.ifftn(fh * np.exp(t * laplacian_symbol(config)), axes=axes))


def total_masses(fld: LatticeField):
    """(<u, 1>, <v, 1>) with the mode's quadrature weight; arrays for batched fields."""
    ax = fld.config.space_axes
    w = fld.config.weight
    mu = w * np.sum(fld.u, axis=ax)
    mv = w * np.sum(fld.v, axis=ax)
    if np.ndim(mu) == 0:
        return float(mu), float(mv)
    return mu, mv


def _step_arrays(u, v, config, rho, kappa, dt, z1, z2, noise=True):
    lu = discrete_laplacian(u, config)
    lv = discrete_laplacian(v, config)
    un = u + lu * dt
    vn = v + lv * dt
    if noise:
        sigma = np.sqrt(kappa * config.noise_scale * dt * u * v)
        dw1, dw2 = correlate(rho, z1, z2)
        un += sigma * dw1
        vn += sigma * dw2
    np.maximum(un, 0.0, out=un)
    np.maximum(vn, 0.0, out=vn)
    return un, vn


def _step_feller(u, v, config, rho, kappa, dt, rng):
    """Heat step, then an exact Feller step for the smaller component at each site.

    With the larger component ``b`` frozen over the step, the smaller one
    ``s`` is a critical Feller diffusion ``ds = sqrt(k b s) dW`` and its
    transition is compound Poisson-Gamma: ``N ~ Poisson(2 s / (k b dt))``,
    ``s' ~ Gamma(N, k b dt / 2)``. The larger component receives
    ``rho (s' - s)`` plus an independent Gaussian part of variance
    ``(1 - rho^2) k s b dt``. Small masses die with the right probability,
    which the Euler step gets badly wrong. For ``rho < 0`` the new small
    value is capped at ``s + b / |rho|``.
    """
    un = u + discrete_laplacian(u, config) * dt
    vn = v + discrete_laplacian(v, config) * dt
    gen = rng.generator
    k = kappa * config.noise_scale
    act = (un > 0.0) & (vn > 0.0)
    idx = np.nonzero(act)
    if idx[0].size:
        a, b = un[idx], vn[idx]
        swap = a > b
        s = np.where(swap, b, a)
        big = np.where(swap, a, b)
        scale = 0.5 * k * big * dt
        n = gen.poisson(s / scale)
        s1 = gen.gamma(n, 1.0) * scale
        if rho < 0.0:
            # the correlated push alone must not drive the larger component below 0;
            # at rho = -1 this keeps u + v exact
            np.minimum(s1, s + big / -rho, out=s1)
        z = gen.standard_normal(s.size)
        big1 = big + rho * (s1 - s) + math.sqrt(max(0.0, 1.0 - rho * rho)) * np.sqrt(k * dt * s * big) * z
        np.maximum(big1, 0.0, out=big1)
        un[idx] = np.where(swap, big1, s1)
        vn[idx] = np.where(swap, s1, big1)
    np.maximum(un, 0.0, out=un)
    np.maximum(vn, 0.0, out=vn)
    return un, vn


SCHEMES = ("euler", "feller")


def _advance(u, v, config, rho, kappa, dt, rng, scheme):
    if scheme == "feller":
        return _step_feller(u, v, config, rho, kappa, dt, rng)
    z = rng.standard_normal((2,) + np.shape(u))
    return _step_arrays(u, v, config, rho, kappa, dt, z[0], z[1])


def _check_scheme(scheme):
    if scheme not in SCHEMES:
        raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {scheme!r}")


def step_lattice(fld: LatticeField, params: ModelParams, dt: float, rng: RngStream,
                 scheme: str = "euler") -> LatticeField:
    """One step of the whole field (explicit Euler-Maruyama unless ``scheme='feller'``)."""
    cfg = fld.config
    cfg.check_dt(dt)
    _check_scheme(scheme)
    u = np.asarray(fld.u, dtype=float)
    un, vn = _advance(u, np.asarray(fld.v, dtype=float), cfg, params.rho, params.kappa, dt, rng,
                      scheme)
    return LatticeField(cfg, un, vn, fld.t + dt)


@dataclass(frozen=True)
class InitSpec:
    """Initial condition.

    kind is one of ``homogeneous`` (constants ``u``, ``v``), ``indicator``
    (``u * 1_site``, ``v * 1_site``), ``heaviside`` (continuum d = 1:
    ``1_{x<0}``, ``1_{x>=0}``) or ``arrays`` (explicit ``u0``, ``v0``).
    """

    kind: str = "homogeneous"
    u: float = 1.0
    v: float = 1.0
    site: tuple = (0,)
    u0: np.ndarray | None = field(default=None, compare=False)
    v0: np.ndarray | None = field(default=None, compare=False)

    def build(self, config: LatticeConfig):
        shape = config.shape
        if self.kind == "homogeneous":
            return np.full(shape, float(self.u)), np.full(shape, float(self.v))
        if self.kind == "indicator":
            u0, v0 = np.zeros(shape), np.zeros(shape)
            idx = config.site_index(self.site)
            u0[idx], v0[idx] = self.u, self.v
            return u0, v0
        if self.kind == "heaviside":
            if config.mode != "continuum" or config.d != 1:
                raise ConfigurationError("heaviside initial data needs continuum mode with d = 1")
            x = config.coordinates()
            return (x < 0).astype(float), (x >= 0).astype(float)
        if self.kind == "arrays":
            u0 = np.asarray(self.u0, dtype=float)
            v0 = np.asarray(self.v0, dtype=float)
            if u0.shape != shape or v0.shape != shape:
                raise ConfigurationError("initial arrays do not match the lattice shape")
            if (u0 < 0).any() or (v0 < 0).any():
                raise ConfigurationError("initial arrays must be nonnegative")
            return u0.copy(), v0.copy()
        raise ConfigurationError(f"unknown initial condition kind {self.kind!r}")


@dataclass
class LatticeRun:
    """Snapshots (batched over replicas along axis 0) and ledgers at each checkpoint."""

    times: np.ndarray
    snapshots: list
    ledgers: list


def _lattice_chunk(config, params, u0, v0, n_steps, steps, dt, n, rng, keep_fields, site_probe,
                   scheme):
    rho, kappa = params.rho, params.kappa
    u = np.broadcast_to(u0, (n,) + u0.shape).copy()
    v = np.broadcast_to(v0, (n,) + v0.shape).copy()
    ax = config.space_axes
    w = config.weight
    qv = np.zeros(n)
    snaps, ledg = [], []
    c = 0

    def record():
        snap = (u.copy(), v.copy()) if keep_fields else (u[(slice(None),) + site_probe].copy(),
                                                        v[(slice(None),) + site_probe].copy())
        snaps.append(snap)
        ledg.append((w * u.sum(axis=ax), w * v.sum(axis=ax), qv.copy()))

    while c < len(steps) and steps[c] == 0:
        record()
        c += 1
    for i in range(1, n_steps + 1):
        qv += kappa * dt * w * np.sum(u * v, axis=ax)
        u, v = _advance(u, v, config, rho, kappa, dt, rng, scheme)
        while c < len(steps) and steps[c] == i:
            record()
            c += 1
        if c == len(steps):
            break
    return snaps, ledg


def simulate_lattice(config: LatticeConfig, params: ModelParams, init: InitSpec, T: float, dt: float,
                     checkpoints: Sequence[float] | None = None, rng=0, n_replicas: int = 1,
                     keep_fields: bool = True, probe_site=None, scheme: str = "euler") -> LatticeRun:
    """Simulate ``n_replicas`` independent fields and record snapshots plus mass ledgers.

    With ``keep_fields=False`` only the values at ``probe_site`` are stored
    (arrays of shape ``(n_replicas,)``), which keeps large ensembles small.
    """
    config.check_dt(dt)
    _check_scheme(scheme)
    if T < 0:
        raise ParameterError("horizon must be nonnegative")
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ParameterError(f"horizon T={T} is not a multiple of dt={dt}")
    cps = np.asarray([T] if not checkpoints else checkpoints, dtype=float)
    if np.any(np.diff(cps) < 0) or cps[0] < 0 or cps[-1] > T + 1e-12:
        raise ParameterError("checkpoints must be sorted and lie in [0, T]")
    steps = np.rint(cps / dt).astype(np.int64)
    u0, v0 = init.build(config)
    site_probe = config.site_index(0 if probe_site is None else probe_site)
    rng = as_stream(rng)
    parts = map_chunks(
        lambda n, st: _lattice_chunk(config, params, u0, v0, n_steps, steps, dt, n, st,
                                     keep_fields, site_probe, scheme),
        n_replicas, rng, chunk=max(1, min(8192, 2_000_000 // config.n_sites)))
    snapshots, ledgers = [], []
    for k, t in enumerate(cps):
        uu = concat_fields([p[0][k][0] for p in parts])
        vv = concat_fields([p[0][k][1] for p in parts])
        snapshots.append(LatticeField(config, uu, vv, float(t)))
        mu, mv, qv = (concat_fields([p[1][k][j] for p in parts]) for j in range(3))
        ledgers.append(MassLedger(mu, mv, qv, params.rho))
    return LatticeRun(cps, snapshots, ledgers)


# -- serialisation -----------------------------------------------------------

BINARY_MAGIC = b"SBMF"
BINARY_VERSION = 1
_HEADER = struct.Struct("<4sIiiidd")  # magic, version, d, side, mode, h, t
_MODE_CODES = {"discrete": 0, "continuum": 1}


def write_field_csv(fld: LatticeField, path):
    """One row per site: flat index, x-coordinate (continuum only), u, v."""
    cfg = fld.config
    u = np.asarray(fld.u, dtype=float)
    if u.shape != cfg.shape:
        raise ConfigurationError("write_field_csv expects a single (unbatched) field")
    uf, vf = u.ravel(), np.asarray(fld.v, dtype=float).ravel()
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write("# schema=1\n")
        wr = csv.writer(fh, lineterminator="\n")
        if cfg.mode == "continuum":
            wr.writerow(["index", "x", "u", "v"])
            x = cfg.coordinates()
            for i in range(uf.size):
                wr.writerow([i, repr(float(x[i])), repr(float(uf[i])), repr(float(vf[i]))])
        else:
            wr.writerow(["index", "u", "v"])
            for i in range(uf.size):
                wr.writerow([i, repr(float(uf[i])), repr(float(vf[i]))])
    return path


def write_field_binary(fld: LatticeField, path):
    """Little-endian dump: header (magic, version, d, side, mode, h, t) then u, v as float64."""
    cfg = fld.config
    u = np.asarray(fld.u, dtype="<f8")
    if u.shape != cfg.shape:
        raise ConfigurationError("write_field_binary expects a single (unbatched) field")
    v = np.asarray(fld.v, dtype="<f8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, cfg.d, cfg.side,
                              _MODE_CODES[cfg.mode], float(cfg.h), float(fld.t)))
        fh.write(u.tobytes(order="C"))
        fh.write(v.tobytes(order="C"))
    return path


def read_field_binary(path) -> LatticeField:
    data = Path(path).read_bytes()
    magic, version, d, side, mode, h, t = _HEADER.unpack_from(data, 0)
    if magic != BINARY_MAGIC or version != BINARY_VERSION:
        raise ConfigurationError("not a field dump (bad magic or version)")
    mode_name = {c: m for m, c in _MODE_CODES.items()}[mode]
    cfg = LatticeConfig(d=d, side=side, mode=mode_name, h=h)
    n = cfg.n_sites
    off = _HEADER.size
    arr = np.frombuffer(data, dtype="<f8", count=2 * n, offset=off)
    if arr.size != 2 * n:
        raise ConfigurationError("truncated field dump")
    return LatticeField(cfg, arr[:n].reshape(cfg.shape).astype(float),
                        arr[n:].reshape(cfg.shape).astype(float), t)
