"""Euler-Maruyama simulation of the nonspatial model SBM(rho, kappa).

    du = sqrt(kappa u v) dB1,   dv = sqrt(kappa u v) dB2,   d[B1, B2] = rho dt

The exact process is absorbed once ``u v = 0``. The scheme evaluates the
diffusion coefficient on the positive parts of the state and, when a step
leaves the open quadrant, clamps both coordinates at zero and freezes them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import (ModelParams, ParameterError, RngStream, as_stream, concat_fields,
                   correlate, map_chunks)


def default_dt(kappa: float) -> float:
    return 1e-3 * min(1.0, 1.0 / kappa)


@dataclass(frozen=True)
class PairState:
    """State of one replica, or of a batch when the fields are arrays."""

    u: float | np.ndarray
    v: float | np.ndarray
    t: float = 0.0
    absorbed: bool | np.ndarray = False


def _initial_absorbed(u, v):
    return np.asarray(u) * np.asarray(v) <= 0.0


def _euler(u, v, rho, kappa, dt, z1, z2):
    s = math.sqrt(dt)
    dw1, dw2 = correlate(rho, z1, z2)
    sigma = np.sqrt(kappa * np.maximum(u, 0.0) * np.maximum(v, 0.0))
    un = u + sigma * s * dw1
    vn = v + sigma * s * dw2
    hit = (un <= 0.0) | (vn <= 0.0)
    return np.maximum(un, 0.0), np.maximum(vn, 0.0), hit


def step_pair(state: PairState, params: ModelParams, dt: float, rng: RngStream) -> PairState:
    """Advance ``state`` by one Euler step of size ``dt``.

    Absorbed entries do not move and consume no random numbers.
    """
    if not dt > 0:
        raise ParameterError(f"dt must be positive, got {dt!r}")
    u = np.atleast_1d(np.asarray(state.u, dtype=float))
    v = np.atleast_1d(np.asarray(state.v, dtype=float))
    ab = np.atleast_1d(np.asarray(state.absorbed, dtype=bool)) | _initial_absorbed(u, v)
    u, v, ab = u.copy(), v.copy(), ab.copy()
    act = np.flatnonzero(~ab)
    if act.size:
        z = rng.standard_normal((2, act.size))
        un, vn, hit = _euler(u[act], v[act], params.rho, params.kappa, dt, z[0], z[1])
        u[act], v[act] = un, vn
        ab[act] = hit
    scalar = np.ndim(state.u) == 0
    if scalar:
        return PairState(float(u[0]), float(v[0]), state.t + dt, bool(ab[0]))
    return PairState(u, v, state.t + dt, ab)


@dataclass
class PairEnsemble:
    """Checkpoint snapshots of a batch of independent replicas.

    Arrays are indexed ``[checkpoint, replica]``. ``time_change`` holds the
    running trapezoidal value of ``kappa * int_0^t u_s v_s ds``.
    """

    times: np.ndarray
    u: np.ndarray
    v: np.ndarray
    absorbed: np.ndarray
    time_change: np.ndarray

    @property
    def n_replicas(self) -> int:
        return self.u.shape[1]

    def state(self, k: int) -> PairState:
        return PairState(self.u[k], self.v[k], float(self.times[k]), self.absorbed[k])


def _checkpoint_steps(T, dt, checkpoints):
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ParameterError(f"horizon T={T} is not a multiple of dt={dt}")
    if checkpoints is None or len(checkpoints) == 0:
        checkpoints = [T]
    cps = np.asarray(checkpoints, dtype=float)
    if np.any(np.diff(cps) < 0) or cps[0] < 0 or cps[-1] > T + 1e-12:
        raise ParameterError("checkpoints must be sorted and lie in [0, T]")
    steps = np.rint(cps / dt).astype(np.int64)
    return n_steps, cps, steps


def _run_chunk(u0, v0, params, n_steps, steps, dt, n, rng):
    rho, kappa = params.rho, params.kappa
    u = np.full(n, float(u0))
    v = np.full(n, float(v0))
    ab = _initial_absorbed(u, v)
    acc = np.zeros(n)
    k = len(steps)
    out_u, out_v = np.empty((k, n)), np.empty((k, n))
    out_ab, out_acc = np.empty((k, n), dtype=bool), np.empty((k, n))
    act = np.flatnonzero(~ab)
    ua, va = u[act], v[act]
    c = 0

    def record():
        u[act], v[act] = ua, va
        out_u[c], out_v[c], out_ab[c], out_acc[c] = u, v, ab, acc

    while c < k and steps[c] == 0:
        record()
        c += 1
    for i in range(1, n_steps + 1):
        if act.size:
            z = rng.standard_normal((2, act.size))
            prod_old = ua * va
            un, vn, hit = _euler(ua, va, rho, kappa, dt, z[0], z[1])
            acc[act] += 0.5 * kappa * dt * (prod_old + un * vn)
            ua, va = un, vn
            if hit.any():
                u[act], v[act] = ua, va
                ab[act[hit]] = True
                keep = ~hit
                act, ua, va = act[keep], ua[keep], va[keep]
        while c < k and steps[c] == i:
            record()
            c += 1
        if c == k:
            break
    return out_u, out_v, out_ab, out_acc


def simulate_ensemble(u0: float, v0: float, params: ModelParams, T: float, dt: float | None = None,
                      checkpoints: Sequence[float] | None = None, n_replicas: int = 1,
                      rng=0) -> PairEnsemble:
    """Simulate ``n_replicas`` independent paths from ``(u0, v0)`` and keep checkpoints.

    Replicas are processed in fixed-size chunks with one substream each, so
    results depend only on the seed.
    """
    if u0 < 0 or v0 < 0:
        raise ParameterError("initial masses must be nonnegative")
    if T < 0:
        raise ParameterError("horizon must be nonnegative")
    dt = default_dt(params.kappa) if dt is None else float(dt)
    if not dt > 0:
        raise ParameterError("dt must be positive")
    n_steps, cps, steps = _checkpoint_steps(T, dt, checkpoints)
    rng = as_stream(rng)
    parts = map_chunks(lambda n, st: _run_chunk(u0, v0, params, n_steps, steps, dt, n, st),
                       n_replicas, rng)
    u, v, ab, acc = (concat_fields([p[j] for p in parts], axis=1) for j in range(4))
    return PairEnsemble(cps, u, v, ab, acc)


@dataclass
class PairPath:
    """Densely retained single path (every Euler step)."""

    times: np.ndarray
    u: np.ndarray
    v: np.ndarray
    kappa: float
    states: list


def simulate_pair_path(u0: float, v0: float, params: ModelParams, T: float, dt: float | None = None,
                       checkpoints: Sequence[float] | None = None, rng=0, dense: bool = False):
    """One path; returns the list of :class:`PairState` at ``checkpoints``.

    Stepping stops once the path is absorbed (later states repeat the frozen
    values). An empty checkpoint list returns only the final state. With
    ``dense=True`` a :class:`PairPath` carrying every step is returned instead.
    """
    dt = default_dt(params.kappa) if dt is None else float(dt)
    n_steps, cps, steps = _checkpoint_steps(T, dt, checkpoints)
    rng = as_stream(rng)
    state = PairState(float(u0), float(v0), 0.0, bool(u0 * v0 <= 0))
    us, vs = [state.u], [state.v]
    out = []
    c = 0
    while c < len(steps) and steps[c] == 0:
        out.append(replace(state, t=float(cps[c])))
        c += 1
    for i in range(1, n_steps + 1):
        if not state.absorbed:
            state = step_pair(state, params, dt, rng)
        state = replace(state, t=i * dt)
        if dense:
            us.append(state.u)
            vs.append(state.v)
        while c < len(steps) and steps[c] == i:
            out.append(state)
            c += 1
        if c == len(steps) and not dense:
            break
    if dense:
        times = dt * np.arange(len(us))
        return PairPath(times, np.array(us), np.array(vs), params.kappa, out)
    return out


def time_change_accumulator(path: PairPath) -> np.ndarray:
    """Running trapezoidal value of ``kappa * int_0^t u_s v_s ds`` along a dense path.

    The final value approximates the quadrant exit time of the correlated
    Brownian motion that the path is a time change of.
    """
    prod = path.kappa * path.u * path.v
    inc = 0.5 * (prod[1:] + prod[:-1]) * np.diff(path.times)
    return np.concatenate([[0.0], np.cumsum(inc)])


def mixed_moment_exact(rho: float, kappa: float, t):
    """E[u_t v_t] from (1, 1): exp(rho kappa t)."""
    return np.exp(rho * kappa * np.asarray(t, dtype=float))


def second_moment_exact(rho: float, kappa: float, t):
    """E[u_t^2] from (1, 1): 1 + (exp(rho kappa t) - 1)/rho, or 1 + kappa t at rho = 0."""
    t = np.asarray(t, dtype=float)
    if rho == 0.0:
        return 1.0 + kappa * t
    return 1.0 + np.expm1(rho * kappa * t) / rho


def time_change_mean_exact(rho: float, kappa: float, t):
    """E[kappa int_0^t u_s v_s ds] from (1, 1), the integral of the mixed moment."""
    t = np.asarray(t, dtype=float)
    if rho == 0.0:
        return kappa * t
    return np.expm1(rho * kappa * t) / rho
