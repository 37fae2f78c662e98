"""Exact event-driven simulation of the colored-particle moment dual.

Each particle performs a rate-1 simple random walk on the torus (each of the
2d neighbours with probability 1/(2d)). Every unordered pair of co-located
particles of the same colour carries a rate-kappa clock; when it rings one
member of the pair switches colour. ``L_same`` / ``L_diff`` accumulate the
total co-location time of same-colour / different-colour pairs, and the
moment weight is ``(u0, v0)^{l_t} * exp(kappa (L_same + rho L_diff))``.

The simulator is vectorised over replicas: every state array carries a
leading replica axis and each replica runs its own event clock.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import BudgetError, ModelParams, ParameterError, RngStream, as_stream, map_chunks
from .lattice import LatticeConfig
from .stats import EnsembleEstimate, estimate_ensemble, heavy_tail_share, lyapunov_fit

HEAVY_TAIL_TOP = 0.01
HEAVY_TAIL_SHARE = 0.5


class HeavyTailWarning(UserWarning):
    """The top weights dominate a duality estimate; its interval is untrustworthy."""


@dataclass(frozen=True)
class Particle:
    site: tuple
    color: int


@dataclass
class DualState:
    """Batch of dual configurations.

    ``sites`` has shape (R, N, d), ``colors`` (R, N) with values 1 or 2;
    ``L_same``, ``L_diff`` and ``t`` have shape (R,).
    """

    sites: np.ndarray
    colors: np.ndarray
    L_same: np.ndarray
    L_diff: np.ndarray
    t: np.ndarray

    @classmethod
    def start(cls, config: LatticeConfig, color1_sites: Sequence = (), color2_sites: Sequence = (),
              n_replicas: int = 1) -> "DualState":
        pts = [config.site_index(s) for s in color1_sites] + [config.site_index(s) for s in color2_sites]
        if not pts:
            raise ParameterError("the dual needs at least one particle")
        cols = [1] * len(color1_sites) + [2] * len(color2_sites)
        sites = np.broadcast_to(np.array(pts, dtype=np.int64), (n_replicas, len(pts), config.d)).copy()
        colors = np.broadcast_to(np.array(cols, dtype=np.int8), (n_replicas, len(pts))).copy()
        z = np.zeros(n_replicas)
        return cls(sites, colors, z.copy(), z.copy(), z.copy())

    @property
    def n_particles(self) -> int:
        return self.sites.shape[1]

    def particles(self, r: int = 0) -> list:
        return [Particle(tuple(int(c) for c in self.sites[r, i]), int(self.colors[r, i]))
                for i in range(self.n_particles)]

    def copy(self) -> "DualState":
        return DualState(self.sites.copy(), self.colors.copy(), self.L_same.copy(),
                         self.L_diff.copy(), self.t.copy())


class _Pairs:
    def __init__(self, n):
        ij = list(combinations(range(n), 2))
        self.i = np.array([p[0] for p in ij], dtype=np.int64)
        self.j = np.array([p[1] for p in ij], dtype=np.int64)

    def counts(self, sites, colors):
        if self.i.size == 0:
            z = np.zeros((sites.shape[0], 0), dtype=bool)
            return z, z
        co = np.all(sites[:, self.i] == sites[:, self.j], axis=-1)
        same = colors[:, self.i] == colors[:, self.j]
        return co & same, co & ~same


def pair_counts(state: DualState):
    """(S, D): co-located same-colour and different-colour pair counts per replica."""
    sm, dm = _Pairs(state.n_particles).counts(state.sites, state.colors)
    return sm.sum(axis=1), dm.sum(axis=1)


def _apply_events(sites, colors, S, sm, pairs, N, kappa, side, d, rng, flip_rule, rows):
    """Draw and apply one event for each replica in ``rows``.

    ``S`` and ``sm`` (same-colour pair count and mask) are aligned with ``rows``.
    """
    m = rows.size
    rate = N + kappa * S
    u = rng.random((3, m))
    is_jump = u[0] * rate < N
    jr = rows[is_jump]
    if jr.size:
        k = jr.size
        who = np.minimum((u[1, is_jump] * N).astype(np.int64), N - 1)
        move = np.minimum((u[2, is_jump] * 2 * d).astype(np.int64), 2 * d - 1)
        axis = move // 2
        step = np.where(move % 2 == 0, 1, -1)
        cur = sites[jr, who, axis]
        sites[jr, who, axis] = (cur + step) % side
    fr = rows[~is_jump]
    if fr.size:
        smr = sm[~is_jump]
        cnt = S[~is_jump]
        pick = np.minimum((u[1, ~is_jump] * cnt).astype(np.int64), cnt - 1)
        cum = np.cumsum(smr, axis=1)
        pidx = np.argmax(cum > pick[:, None], axis=1)
        if flip_rule == "uniform":
            first = u[2, ~is_jump] < 0.5
        else:
            first = np.ones(fr.size, dtype=bool)
        who = np.where(first, pairs.i[pidx], pairs.j[pidx])
        colors[fr, who] = 3 - colors[fr, who]


def dual_step(state: DualState, params: ModelParams, config: LatticeConfig, rng: RngStream,
              flip_rule: str = "uniform") -> DualState:
    """One Gillespie event for every replica in ``state`` (returns a new state)."""
    if flip_rule not in ("uniform", "first"):
        raise ParameterError("flip_rule must be 'uniform' or 'first'")
    st = state.copy()
    N = st.n_particles
    pairs = _Pairs(N)
    sm, dm = pairs.counts(st.sites, st.colors)
    S, D = sm.sum(axis=1), dm.sum(axis=1)
    rate = N + params.kappa * S
    dt = rng.exponential(1.0, st.t.shape) / rate
    st.L_same += S * dt
    st.L_diff += D * dt
    st.t += dt
    rows = np.arange(st.t.size)
    _apply_events(st.sites, st.colors, S, sm, pairs, N, params.kappa, config.side, config.d,
                  rng, flip_rule, rows)
    return st


@dataclass
class DualRecord:
    """Accumulators and moment factors recorded at each checkpoint, shape (K, R)."""

    times: np.ndarray
    L_same: np.ndarray
    L_diff: np.ndarray
    init_factor: np.ndarray
    n_events: np.ndarray


def _init_factor(sites, colors, init, config):
    if init is None:
        return np.ones(sites.shape[0])
    if isinstance(init, tuple) and len(init) == 2 and np.ndim(init[0]) == 0:
        u, v = float(init[0]), float(init[1])
        n1 = (colors == 1).sum(axis=1)
        n2 = (colors == 2).sum(axis=1)
        return (u ** n1) * (v ** n2)
    u0, v0 = (np.asarray(a, dtype=float) for a in init)
    idx = tuple(sites[..., k] for k in range(config.d))
    val = np.where(colors == 1, u0[idx], v0[idx])
    return np.prod(val, axis=1)


def _dual_chunk(params, config, c1, c2, cps, n, rng, flip_rule, init, max_events):
    st = DualState.start(config, c1, c2, n)
    N = st.n_particles
    pairs = _Pairs(N)
    K = len(cps)
    Ls = np.zeros((K, n))
    Ld = np.zeros((K, n))
    fac = np.ones((K, n))
    nev = np.zeros(n, dtype=np.int64)
    T_end = cps[-1]
    # checkpoints at t = 0
    nxt = np.zeros(n, dtype=np.int64)
    act = np.arange(n)
    kappa = params.kappa
    f0 = _init_factor(st.sites, st.colors, init, config)
    while True:
        zero = np.flatnonzero(cps[nxt[act]] <= 0.0) if K else np.empty(0, dtype=np.int64)
        if zero.size == 0:
            break
        r = act[zero]
        fac[nxt[r], r] = f0[r]
        nxt[r] += 1
        act = act[nxt[act] < K]
        if act.size == 0:
            break
    it = 0
    while act.size:
        it += 1
        if it > max_events:
            raise BudgetError("dual event budget exceeded", partial=st)
        sm, dm = pairs.counts(st.sites[act], st.colors[act])
        S, D = sm.sum(axis=1), dm.sum(axis=1)
        rate = N + kappa * S
        dt = rng.exponential(1.0, act.size) / rate
        t0 = st.t[act]
        t1 = t0 + dt
        # record every checkpoint crossed during the holding time
        while True:
            c = cps[np.minimum(nxt[act], K - 1)]
            hit = (nxt[act] < K) & (c <= t1)
            if not hit.any():
                break
            h = np.flatnonzero(hit)
            r = act[h]
            k = nxt[r]
            span = cps[k] - t0[h]
            Ls[k, r] = st.L_same[r] + S[h] * span
            Ld[k, r] = st.L_diff[r] + D[h] * span
            fac[k, r] = _init_factor(st.sites[r], st.colors[r], init, config)
            nxt[r] += 1
        alive = nxt[act] < K
        if not alive.any():
            break
        sel = np.flatnonzero(alive)
        r = act[sel]
        st.L_same[r] += S[sel] * dt[sel]
        st.L_diff[r] += D[sel] * dt[sel]
        st.t[r] = t1[sel]
        nev[r] += 1
        _apply_events(st.sites, st.colors, S[sel], sm[sel], pairs, N, kappa, config.side,
                      config.d, rng, flip_rule, r)
        act = r
    return Ls, Ld, fac, nev


def simulate_dual(params: ModelParams, config: LatticeConfig, color1_sites: Sequence,
                  color2_sites: Sequence, checkpoints: Sequence[float], n_replicas: int, rng=0,
                  flip_rule: str = "uniform", init=None, max_events: int = 10**8) -> DualRecord:
    """Run the dual up to each checkpoint time for ``n_replicas`` replicas.

    ``init`` is None (homogeneous 1, 1), a pair of constants ``(u, v)`` or a
    pair of arrays over the lattice; it determines the ``(u0, v0)^{l_t}`` factor.
    """
    if flip_rule not in ("uniform", "first"):
        raise ParameterError("flip_rule must be 'uniform' or 'first'")
    cps = np.asarray(checkpoints, dtype=float)
    if cps.size == 0 or np.any(np.diff(cps) < 0) or cps[0] < 0:
        raise ParameterError("checkpoints must be a nonempty sorted list of times >= 0")
    rng = as_stream(rng)
    parts = map_chunks(lambda n, st: _dual_chunk(params, config, list(color1_sites),
                                                 list(color2_sites), cps, n, st, flip_rule, init,
                                                 max_events),
                       n_replicas, rng)
    Ls = np.concatenate([p[0] for p in parts], axis=1)
    Ld = np.concatenate([p[1] for p in parts], axis=1)
    fac = np.concatenate([p[2] for p in parts], axis=1)
    nev = np.concatenate([p[3] for p in parts])
    return DualRecord(cps, Ls, Ld, fac, nev)


# -- conditional estimator ----------------------------------------------------
#
# Particle motion does not depend on colour, so the flip clocks can be
# integrated out given the walk paths. Between two jumps the positions are
# fixed and the colouring is a finite Markov chain with generator Q; with
# potential V(c) = kappa (S(c) + rho D(c)) the conditional weight propagates
# as a row vector over the 2^N colourings, p -> p expm((Q + V) dt).


def _coloring_tables(N, pairs):
    M = 1 << N
    codes = np.arange(M)
    bits = (codes[:, None] >> np.arange(N)[None, :]) & 1  # 1 means colour 2
    same = bits[:, pairs.i] == bits[:, pairs.j]  # (M, P)
    return bits, same


def _generator(co, N, pairs, bits, same, kappa, rho, flip_rule):
    """(Q + V) for each row of the co-location mask ``co`` (R, P); shape (R, M, M)."""
    M = bits.shape[0]
    R = co.shape[0]
    A = np.zeros((R, M, M))
    S = co.astype(float) @ same.T.astype(float)  # (R, M)
    D = co.astype(float) @ (~same).T.astype(float)
    for k in range(pairs.i.size):
        act = co[:, k]
        if not act.any():
            continue
        rows = np.flatnonzero(act)
        for c in range(M):
            if not same[c, k]:
                continue
            if flip_rule == "uniform":
                targets = ((pairs.i[k], 0.5), (pairs.j[k], 0.5))
            else:
                targets = ((pairs.i[k], 1.0),)
            for who, share in targets:
                A[rows, c, c ^ (1 << who)] += kappa * share
    out_rate = A.sum(axis=2)
    idx = np.arange(M)
    A[:, idx, idx] = kappa * (S + rho * D) - out_rate
    return A


def _final_factor(sites, bits, init, config):
    """F(c) per replica and colouring, shape (R, M)."""
    R = sites.shape[0]
    M = bits.shape[0]
    if init is None:
        return np.ones((R, M))
    if isinstance(init, tuple) and len(init) == 2 and np.ndim(init[0]) == 0:
        u, v = float(init[0]), float(init[1])
        n2 = bits.sum(axis=1)
        n1 = bits.shape[1] - n2
        return np.broadcast_to((u ** n1) * (v ** n2), (R, M)).copy()
    u0, v0 = (np.asarray(a, dtype=float) for a in init)
    idx = tuple(sites[..., k] for k in range(config.d))
    uu, vv = u0[idx], v0[idx]  # (R, N)
    f = np.where(bits[None, :, :] == 1, vv[:, None, :], uu[:, None, :])
    return np.prod(f, axis=2)


def _propagate(p, A, dt):
    from scipy.linalg import expm

    E = expm(A * dt[:, None, None])
    return np.einsum("rm,rmk->rk", p, E)


def _conditional_chunk(params, config, c1, c2, cps, n, rng, flip_rule, init, max_events):
    st = DualState.start(config, c1, c2, n)
    N = st.n_particles
    pairs = _Pairs(N)
    bits, same = _coloring_tables(N, pairs)
    M = bits.shape[0]
    c0 = int(sum(1 << i for i in range(N) if st.colors[0, i] == 2))
    p = np.zeros((n, M))
    p[:, c0] = 1.0
    logw = np.zeros(n)
    K = len(cps)
    out = np.zeros((K, n))
    nev = np.zeros(n, dtype=np.int64)
    nxt = np.zeros(n, dtype=np.int64)
    t = np.zeros(n)
    kappa, rho = params.kappa, params.rho
    act = np.arange(n)
    it = 0
    while act.size:
        it += 1
        if it > max_events:
            raise BudgetError("dual event budget exceeded", partial=st)
        if pairs.i.size:
            co = np.all(st.sites[act][:, pairs.i] == st.sites[act][:, pairs.j], axis=-1)
        else:
            co = np.zeros((act.size, 0), dtype=bool)
        A = _generator(co, N, pairs, bits, same, kappa, rho, flip_rule)
        hold = rng.exponential(1.0, act.size) / N
        t0 = t[act]
        t1 = t0 + hold
        while True:
            c = cps[np.minimum(nxt[act], K - 1)]
            hit = (nxt[act] < K) & (c <= t1)
            if not hit.any():
                break
            h = np.flatnonzero(hit)
            r = act[h]
            k = nxt[r]
            q = _propagate(p[r], A[h], cps[k] - t0[h])
            F = _final_factor(st.sites[r], bits, init, config)
            out[k, r] = np.exp(logw[r]) * np.sum(q * F, axis=1)
            nxt[r] += 1
        alive = nxt[act] < K
        if not alive.any():
            break
        sel = np.flatnonzero(alive)
        r = act[sel]
        q = _propagate(p[r], A[sel], hold[sel])
        tot = q.sum(axis=1)
        tot = np.where(tot > 0, tot, 1.0)
        p[r] = q / tot[:, None]
        logw[r] += np.log(tot)
        t[r] = t1[sel]
        nev[r] += 1
        # jump only: a uniform particle to a uniform neighbour
        u = rng.random((2, r.size))
        who = np.minimum((u[0] * N).astype(np.int64), N - 1)
        move = np.minimum((u[1] * 2 * config.d).astype(np.int64), 2 * config.d - 1)
        axis = move // 2
        step = np.where(move % 2 == 0, 1, -1)
        st.sites[r, who, axis] = (st.sites[r, who, axis] + step) % config.side
        act = r
    return out, nev


def conditional_weights(params: ModelParams, config: LatticeConfig, color1_sites: Sequence,
                        color2_sites: Sequence, checkpoints: Sequence[float], n_replicas: int,
                        rng=0, flip_rule: str = "uniform", init=None,
                        max_events: int = 10**8) -> np.ndarray:
    """Walk-conditional dual weights, shape (K, R).

    Each entry is ``E[(u0, v0)^{l_t} exp(kappa (L_same + rho L_diff)) | walks]``
    with the flip clocks integrated exactly; the mean over replicas estimates
    the same moment as :func:`dual_weights` with much lighter tails.
    """
    if flip_rule not in ("uniform", "first"):
        raise ParameterError("flip_rule must be 'uniform' or 'first'")
    cps = np.asarray(checkpoints, dtype=float)
    if cps.size == 0 or np.any(np.diff(cps) < 0) or cps[0] < 0:
        raise ParameterError("checkpoints must be a nonempty sorted list of times >= 0")
    n_part = len(color1_sites) + len(color2_sites)
    if n_part > 8:
        raise ParameterError("the conditional estimator supports at most 8 particles")
    rng = as_stream(rng)
    parts = map_chunks(lambda n, st: _conditional_chunk(params, config, list(color1_sites),
                                                        list(color2_sites), cps, n, st, flip_rule,
                                                        init, max_events),
                       n_replicas, rng, chunk=2048)
    return np.concatenate([q[0] for q in parts], axis=1)


def dual_weights(record: DualRecord, params: ModelParams) -> np.ndarray:
    """Per-replica moment weights, shape (K, R)."""
    return record.init_factor * np.exp(params.kappa * (record.L_same + params.rho * record.L_diff))


@dataclass(frozen=True)
class MomentSpec:
    """Sites carrying u-factors (colour 1) and v-factors (colour 2)."""

    u_sites: tuple = ((0,),)
    v_sites: tuple = ()

    @property
    def n(self) -> int:
        return len(self.u_sites)

    @property
    def m(self) -> int:
        return len(self.v_sites)


@dataclass
class MomentEstimate:
    T: float
    estimate: EnsembleEstimate
    heavy_tail_share: float
    heavy_tail_flag: bool

    @property
    def value(self) -> float:
        return self.estimate.mean


@dataclass
class MomentRun:
    rho: float
    kappa: float
    spec: MomentSpec
    estimates: list = field(default_factory=list)
    n_replicas: int = 0

    @property
    def any_heavy_tail(self) -> bool:
        return any(e.heavy_tail_flag for e in self.estimates)


def moment_via_duality(spec: MomentSpec, params: ModelParams, T, n_replicas: int, rng=0,
                       config: LatticeConfig | None = None, init=None, flip_rule: str = "uniform",
                       n_batches: int = 20, warn: bool = True,
                       estimator: str = "gillespie") -> MomentRun:
    """Estimate ``E[u_T(k_1) ... v_T(k_{n+m})]`` by the colored-particle dual.

    ``T`` may be a scalar or a sorted grid (common random numbers across the
    grid). A replica's weight is ``(u0, v0)^{l_T} exp(kappa (L_same + rho L_diff))``;
    a heavy-tail flag is raised when the top 1% of weights carries more than
    half of the total. ``estimator='conditional'`` replaces each weight by its
    conditional expectation given the walk paths (see
    :func:`conditional_weights`).
    """
    config = config or LatticeConfig(d=1, side=1)
    grid = np.atleast_1d(np.asarray(T, dtype=float))
    if estimator == "gillespie":
        rec = simulate_dual(params, config, spec.u_sites, spec.v_sites, grid, n_replicas, rng,
                            flip_rule=flip_rule, init=init)
        w = dual_weights(rec, params)
    elif estimator == "conditional":
        w = conditional_weights(params, config, spec.u_sites, spec.v_sites, grid, n_replicas, rng,
                                flip_rule=flip_rule, init=init)
    else:
        raise ParameterError(f"estimator must be 'gillespie' or 'conditional', got {estimator!r}")
    run = MomentRun(params.rho, params.kappa, spec, n_replicas=n_replicas)
    for k, t in enumerate(grid):
        share = heavy_tail_share(w[k], HEAVY_TAIL_TOP)
        flag = share > HEAVY_TAIL_SHARE
        if flag and warn:
            warnings.warn(f"heavy-tailed duality weights at T={t:g} (top 1% share {share:.2f})",
                          HeavyTailWarning, stacklevel=2)
        run.estimates.append(MomentEstimate(float(t), estimate_ensemble(w[k], n_batches), share, flag))
    return run


@dataclass
class LyapunovRow:
    rho: float
    kappa: float
    n: int
    times: np.ndarray
    log_moments: np.ndarray
    fit: object
    heavy_tail: bool
    run: MomentRun


def lyapunov_sweep(n: int, params_grid: Sequence[ModelParams], T_grid: Sequence[float],
                   config: LatticeConfig, n_replicas: int, rng=0, window: float = 0.5,
                   flip_rule: str = "uniform", estimator: str = "gillespie") -> list:
    """Log-moment curves of ``E[u_t(0)^n]`` from (1, 1) and their late-window slopes.

    All ``n`` particles start at the origin with colour 1.
    """
    if n < 2:
        raise ParameterError("Lyapunov sweeps need moment order n >= 2")
    rng = as_stream(rng)
    origin = (0,) * config.d
    spec = MomentSpec(u_sites=(origin,) * n)
    rows = []
    for j, p in enumerate(params_grid):
        run = moment_via_duality(spec, p, T_grid, n_replicas, rng.substream(j), config=config,
                                 flip_rule=flip_rule, warn=False, estimator=estimator)
        t = np.array([e.T for e in run.estimates])
        lm = np.log([e.value for e in run.estimates])
        fit = lyapunov_fit(t, lm, window)
        rows.append(LyapunovRow(p.rho, p.kappa, n, t, lm, fit, run.any_heavy_tail, run))
    return rows


MOMENT_COLUMNS = ("rho", "kappa", "n", "m", "T", "estimate", "ci_low", "ci_high", "n_replicas",
                  "heavy_tail_flag")


def write_moment_table(runs: Sequence[MomentRun], path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write("# schema=1\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MOMENT_COLUMNS)
        for run in runs:
            for e in run.estimates:
                wr.writerow([repr(run.rho), repr(run.kappa), run.spec.n, run.spec.m, repr(e.T),
                             repr(e.estimate.mean), repr(e.estimate.ci_low),
                             repr(e.estimate.ci_high), run.n_replicas, int(e.heavy_tail_flag)])
    return path
