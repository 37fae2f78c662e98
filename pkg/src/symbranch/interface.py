"""Interface extraction and front-speed experiments for continuum-mode fields.

The interface of ``(u, v)`` is the closure of ``{x : u(x) v(x) > 0}``. On the
grid strict positivity is replaced by an absolute floor (default 1e-12),
because clamped Euler steps leave residue at denormal scale.

Complementary Heaviside data on a torus produces two interfaces: the one at
the origin and a second one where the two half-lines meet across the wrap.
Speed experiments therefore only look at the central window ``|x| < W/2``
(``W`` the torus half-width); a replica whose front reaches the window edge
is flagged as a boundary contact and excluded.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ConfigurationError, ModelParams, ParameterError, as_stream, map_chunks
from .lattice import InitSpec, LatticeConfig, LatticeField, _advance, _check_scheme, _step_arrays
from .stats import ols_fit

DEFAULT_THRESHOLD = 1e-12
SENSITIVITY_THRESHOLD = 1e-8
MAX_EXCLUDED_SHARE = 0.2
CONTAINMENT_FACTOR = 1.5
CONTAINMENT_SHARE = 0.9
NO_POSITION = -math.inf


@dataclass(frozen=True)
class InterfaceSnapshot:
    t: float
    left: float
    right: float
    empty: bool

    @property
    def width(self) -> float:
        return self.right - self.left if not self.empty else 0.0


def _check_field(fld: LatticeField):
    cfg = fld.config
    if cfg.mode != "continuum" or cfg.d != 1:
        raise ConfigurationError("interface extraction needs a continuum-mode field with d = 1")
    u = np.asarray(fld.u, dtype=float)
    if u.shape != cfg.shape:
        raise ConfigurationError("interface extraction expects a single (unbatched) field")
    return cfg, u, np.asarray(fld.v, dtype=float)


def extract_interface(fld: LatticeField, threshold: float = DEFAULT_THRESHOLD) -> InterfaceSnapshot:
    """Leftmost and rightmost grid points with ``u * v > threshold``."""
    cfg, u, v = _check_field(fld)
    idx = np.flatnonzero(u * v > threshold)
    if idx.size == 0:
        return InterfaceSnapshot(fld.t, math.nan, math.nan, True)
    x = cfg.coordinates()
    return InterfaceSnapshot(fld.t, float(x[idx[0]]), float(x[idx[-1]]), False)


def right_endpoint(fld: LatticeField, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Largest x with ``u(x) > threshold``; ``-inf`` when there is none."""
    cfg, u, _ = _check_field(fld)
    idx = np.flatnonzero(u > threshold)
    return float(cfg.coordinates()[idx[-1]]) if idx.size else NO_POSITION


def left_endpoint(fld: LatticeField, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Smallest x with ``v(x) > threshold``; ``+inf`` when there is none."""
    cfg, _, v = _check_field(fld)
    idx = np.flatnonzero(v > threshold)
    return float(cfg.coordinates()[idx[0]]) if idx.size else math.inf


def domain_side(T_max: float, h: float, factor: float = 8.0) -> int:
    """Even site count whose physical half-width is at least ``factor * sqrt(T log T)``."""
    half = factor * math.sqrt(T_max * math.log(max(T_max, math.e)))
    n = int(math.ceil(2.0 * half / h))
    return n + (n % 2)


def _fronts(mask, x, lo, hi):
    # rightmost / leftmost flagged site inside [lo, hi) per row
    n = mask.shape[-1]
    m = mask[:, lo:hi]
    anyr = m.any(axis=1)
    r = hi - 1 - np.argmax(m[:, ::-1], axis=1)
    left = lo + np.argmax(m, axis=1)
    xr = np.where(anyr, x[np.minimum(r, n - 1)], -np.inf)
    xl = np.where(anyr, x[np.minimum(left, n - 1)], np.inf)
    return xr, xl


def _speed_chunk(config, params, steps, dt, n, rng, thresholds, noise, scheme):
    u0, v0 = InitSpec("heaviside").build(config)
    u = np.broadcast_to(u0, (n,) + u0.shape).copy()
    v = np.broadcast_to(v0, (n,) + v0.shape).copy()
    x = config.coordinates()
    side = config.side
    lo, hi = side // 4, side - side // 4
    edge_r, edge_l = x[hi - 1], x[lo]
    K, J = len(steps), len(thresholds)
    # running sups of R(u) and -L(v), per threshold
    sup_r = np.full((J, n), -np.inf)
    sup_l = np.full((J, n), -np.inf)
    contact = np.zeros(n, dtype=bool)
    out_r = np.empty((K, J, n))
    out_l = np.empty((K, J, n))
    nonempty = np.zeros((K, n), dtype=bool)

    def observe():
        for j, thr in enumerate(thresholds):
            xr, _ = _fronts(u > thr, x, lo, hi)
            _, xl = _fronts(v > thr, x, lo, hi)
            np.maximum(sup_r[j], xr, out=sup_r[j])
            np.maximum(sup_l[j], -xl, out=sup_l[j])
            if j == 0:
                contact[:] |= (xr >= edge_r) | (xl <= edge_l)

    observe()
    c = 0
    while c < K and steps[c] == 0:
        out_r[c], out_l[c] = sup_r, sup_l
        c += 1
    i = 0
    while c < K:
        i += 1
        if noise:
            u, v = _advance(u, v, config, params.rho, params.kappa, dt, rng, scheme)
        else:
            u, v = _step_arrays(u, v, config, params.rho, params.kappa, dt, None, None, noise=False)
        observe()
        while c < K and steps[c] == i:
            out_r[c], out_l[c] = sup_r, sup_l
            nonempty[c] = ((u * v)[:, lo:hi] > thresholds[0]).any(axis=1)
            c += 1
    return out_r, out_l, contact, nonempty


@dataclass
class SpeedFit:
    exponent: float
    exponent_ci: tuple
    r2_log_t: float
    slope_sqrt_t: float
    r2_sqrt_t: float
    slope_sqrt_tlogt: float
    r2_sqrt_tlogt: float


@dataclass
class SpeedResult:
    """Outcome of :func:`speed_experiment`.

    ``M`` has shape (K, R) over the T grid and the retained replicas. The
    running sups of ``R(u)`` and ``-L(v)`` are kept separately in
    ``sup_right`` / ``sup_left`` for the mirror-symmetry check.
    """

    T: np.ndarray
    M: np.ndarray
    sup_right: np.ndarray
    sup_left: np.ndarray
    median: np.ndarray
    p90: np.ndarray
    fit: SpeedFit | None
    C: np.ndarray
    containment_share: float
    monotone: bool
    n_replicas: int
    n_excluded: int
    valid: bool
    nonempty_share: np.ndarray
    sensitivity: dict = field(default_factory=dict)
    config: LatticeConfig | None = None
    rho: float = 0.0
    kappa: float = 1.0

    @property
    def replica_ids(self) -> np.ndarray:
        return self._ids

    def write_envelope_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            fh.write("# schema=1\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["replica", "T", "M"])
            for r in range(self.M.shape[1]):
                for k, t in enumerate(self.T):
                    wr.writerow([int(self._ids[r]), repr(float(t)), repr(float(self.M[k, r]))])
        return path

    def summary(self) -> dict:
        f = self.fit
        return {
            "rho": self.rho, "kappa": self.kappa,
            "T": [float(t) for t in self.T],
            "median_M": [float(m) for m in self.median],
            "p90_M": [float(m) for m in self.p90],
            "exponent": None if f is None else f.exponent,
            "exponent_ci": None if f is None else list(f.exponent_ci),
            "r2_log_t": None if f is None else f.r2_log_t,
            "slope_sqrt_t": None if f is None else f.slope_sqrt_t,
            "r2_sqrt_t": None if f is None else f.r2_sqrt_t,
            "slope_sqrt_tlogt": None if f is None else f.slope_sqrt_tlogt,
            "r2_sqrt_tlogt": None if f is None else f.r2_sqrt_tlogt,
            "C_median": float(np.median(self.C)) if self.C.size else None,
            "C_max": float(np.max(self.C)) if self.C.size else None,
            "containment_share": self.containment_share,
            "monotone": self.monotone,
            "n_replicas": self.n_replicas, "n_excluded": self.n_excluded, "valid": self.valid,
            "threshold_sensitivity": self.sensitivity,
        }

    def write_fit_json(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return path


def _envelope(T):
    T = np.asarray(T, dtype=float)
    return np.sqrt(T * np.log(T))


def containment(T, M, factor: float = CONTAINMENT_FACTOR):
    """Per-replica constants on the first half of the grid and the share contained on the second.

    ``C_r = max_{T in first half} M_r(T) / sqrt(T log T)``; replica r is
    contained when ``M_r(T) <= factor * C_r * sqrt(T log T)`` for every T in
    the second half.
    """
    T = np.asarray(T, dtype=float)
    M = np.asarray(M, dtype=float)
    K = T.size
    if K < 2:
        raise ParameterError("containment needs at least two grid points")
    half = K // 2
    env = _envelope(T)[:, None]
    C = np.max(M[:half] / env[:half], axis=0)
    ok = np.all(M[half:] <= factor * C[None, :] * env[half:], axis=0)
    return C, float(ok.mean()) if ok.size else 0.0


def fit_growth(T, med) -> SpeedFit | None:
    """Least-squares fits of log median M over the upper half of the T grid."""
    T = np.asarray(T, dtype=float)
    med = np.asarray(med, dtype=float)
    k0 = T.size // 2
    t, m = T[k0:], med[k0:]
    if t.size < 3 or np.any(~np.isfinite(m)) or np.any(m <= 0):
        return None
    y = np.log(m)
    a = ols_fit(np.log(t), y)
    b = ols_fit(np.log(np.sqrt(t)), y)
    c = ols_fit(np.log(_envelope(t)), y)
    return SpeedFit(a.slope, (a.ci_low, a.ci_high), a.r2, b.slope, b.r2, c.slope, c.r2)


def speed_grid(T_min: float = 32.0, T_max: float = 512.0, per_octave: int = 2) -> np.ndarray:
    """Geometric T grid with ``per_octave`` points per doubling."""
    k = int(round(per_octave * math.log2(T_max / T_min)))
    return T_min * 2.0 ** (np.arange(k + 1) / per_octave)


def speed_experiment(config: LatticeConfig, params: ModelParams, T_list: Sequence[float], dt: float,
                     replicas: int, threshold: float = DEFAULT_THRESHOLD, rng=0,
                     sensitivity_threshold: float | None = SENSITIVITY_THRESHOLD,
                     noise: bool = True, scheme: str = "feller") -> SpeedResult:
    """Running-sup front envelope ``M(T) = sup_{t<=T} max(R(u_t), -L(v_t))``.

    Starts from ``u = 1_{x<0}``, ``v = 1_{x>=0}``. Each T is rounded to the
    step grid. ``noise=False`` runs the deterministic heat flow (plumbing
    check only). The default ``scheme='feller'`` is the small-mass-respecting
    step of :mod:`symbranch.lattice`; with plain Euler the front moves by about
    one cell per step whatever the noise, so its speed scales like h/dt.
    """
    if config.mode != "continuum" or config.d != 1:
        raise ConfigurationError("speed experiments need continuum mode with d = 1")
    config.check_dt(dt)
    _check_scheme(scheme)
    if replicas < 1:
        raise ParameterError("need at least one replica")
    T = np.asarray(sorted(T_list), dtype=float)
    if T.size == 0 or T[0] <= 1.0:
        raise ParameterError("T grid must be nonempty with T > 1 (sqrt(T log T) envelope)")
    steps = np.rint(T / dt).astype(np.int64)
    T = steps * dt
    thr = [float(threshold)]
    if sensitivity_threshold is not None:
        thr.append(float(sensitivity_threshold))
    rng = as_stream(rng)
    chunk = max(1, min(64, 2_000_000 // config.side))
    parts = map_chunks(lambda n, st: _speed_chunk(config, params, steps, dt, n, st, thr, noise, scheme),
                       replicas, rng, chunk=chunk)
    sr = np.concatenate([p[0] for p in parts], axis=2)
    sl = np.concatenate([p[1] for p in parts], axis=2)
    contact = np.concatenate([p[2] for p in parts])
    nonempty = np.concatenate([p[3] for p in parts], axis=1)
    keep = np.flatnonzero(~contact)
    M_all = np.maximum(sr, sl)  # (K, J, R)
    M = M_all[:, 0, keep]
    monotone = bool(np.all(np.diff(M, axis=0) >= 0)) if M.size else True
    n_exc = int(contact.sum())
    valid = n_exc <= MAX_EXCLUDED_SHARE * replicas and keep.size > 0
    if keep.size:
        med = np.median(M, axis=1)
        p90 = np.percentile(M, 90, axis=1)
        fit = fit_growth(T, med)
        C, share = containment(T, M) if T.size > 1 else (np.empty(0), 0.0)
    else:
        med = p90 = np.full(T.size, np.nan)
        fit, C, share = None, np.empty(0), 0.0
    sens = {}
    if len(thr) > 1 and keep.size:
        med2 = np.median(M_all[:, 1, keep], axis=1)
        fit2 = fit_growth(T, med2)
        sens = {"threshold": thr[1], "median_M": [float(m) for m in med2],
                "exponent": None if fit2 is None else fit2.exponent,
                "max_abs_median_shift": float(np.max(np.abs(med2 - med)))}
    res = SpeedResult(T, M, sr[:, 0, keep], sl[:, 0, keep], med, p90, fit, C, share, monotone,
                      replicas, n_exc, bool(valid), nonempty.mean(axis=1), sens, config,
                      params.rho, params.kappa)
    res._ids = keep
    return res
