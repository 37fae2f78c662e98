"""Cross-route checks, experiment dispatch and report emission."""

from __future__ import annotations

import csv
import json
import math
import platform
import time
import traceback
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .core import (ConfigurationError, ModelParams, RngStream, SymbranchError, as_stream)
from .dual import MomentSpec, lyapunov_sweep, moment_via_duality, write_moment_table
from .interface import domain_side, speed_experiment, speed_grid
from .lattice import InitSpec, LatticeConfig, simulate_lattice
from .nonspatial import mixed_moment_exact, second_moment_exact, simulate_ensemble
from .stats import EnsembleEstimate, combined_z, estimate_ensemble, ols_fit
from .wedge import (build_geometry, critical_p, critical_rho, exit_axis_probability,
                    write_critical_curve)
from .wedge_mc import ensemble_exit

FLOAT_FLOOR = 1e-10


# -- self-duality ------------------------------------------------------------


@dataclass
class SelfDualityResult:
    T: float
    lhs_re: EnsembleEstimate
    lhs_im: EnsembleEstimate
    rhs_re: EnsembleEstimate
    rhs_im: EnsembleEstimate

    @property
    def z_real(self) -> float:
        return combined_z(self.lhs_re, self.rhs_re)

    @property
    def z_imag(self) -> float:
        return combined_z(self.lhs_im, self.rhs_im)

    def as_dict(self):
        return {"T": self.T, "lhs_re": self.lhs_re.as_dict(), "lhs_im": self.lhs_im.as_dict(),
                "rhs_re": self.rhs_re.as_dict(), "rhs_im": self.rhs_im.as_dict(),
                "z_real": self.z_real, "z_imag": self.z_imag}


def _duality_function(rho, w, a, b, c, d, space_dims):
    """exp(-sqrt(1-rho) <a + b, c + d> + i sqrt(1+rho) <a - b, c - d>) over the space axes."""
    ax = tuple(range(-space_dims, 0))
    s = np.sum((a + b) * (c + d), axis=ax) * w
    q = np.sum((a - b) * (c - d), axis=ax) * w
    return np.exp(-math.sqrt(1.0 - rho) * s + 1j * math.sqrt(1.0 + rho) * q)


def _const_estimate(x):
    return EnsembleEstimate(float(x), 0.0, float(x), float(x), float(x), float(x), 1)


def self_duality_check(params: ModelParams, config: LatticeConfig, T: float, replicas: int, rng=0,
                       u_tilde=None, v_tilde=None, dt: float | None = None,
                       scheme: str = "euler") -> SelfDualityResult:
    """Both sides of the self-duality identity for homogeneous (1, 1) against finite data.

    The left side evolves ``(u, v)`` from ``(1, 1)`` and pairs it with the
    fixed ``(u_tilde, v_tilde)``; the right side evolves ``(u_tilde, v_tilde)``
    and pairs it with ``(1, 1)``. The default finite data is
    ``u_tilde = v_tilde = 1/2 * 1_0``. At ``T = 0`` both sides are returned
    as the exact deterministic value.
    """
    rho = params.rho
    if not -1.0 < rho < 1.0:
        raise ConfigurationError("self-duality needs rho in (-1, 1)")
    shape = config.shape
    if u_tilde is None:
        u_tilde = np.zeros(shape)
        u_tilde[config.site_index(0)] = 0.5
    if v_tilde is None:
        v_tilde = np.zeros(shape)
        v_tilde[config.site_index(0)] = 0.5
    u_tilde = np.asarray(u_tilde, dtype=float)
    v_tilde = np.asarray(v_tilde, dtype=float)
    one = np.ones(shape)
    w = config.weight
    if T == 0:
        a = complex(_duality_function(rho, w, one, one, u_tilde, v_tilde, config.d))
        b = complex(_duality_function(rho, w, u_tilde, v_tilde, one, one, config.d))
        return SelfDualityResult(0.0, _const_estimate(a.real), _const_estimate(a.imag),
                                 _const_estimate(b.real), _const_estimate(b.imag))
    if dt is None:
        dt = min(1e-3, config.dt_max())
    rng = as_stream(rng)
    left = simulate_lattice(config, params, InitSpec("homogeneous", 1.0, 1.0), T, dt, rng=rng.substream(0),
                            n_replicas=replicas, scheme=scheme)
    snap = left.snapshots[-1]
    lhs = _duality_function(rho, w, snap.u, snap.v, u_tilde, v_tilde, config.d)
    right = simulate_lattice(config, params, InitSpec("arrays", u0=u_tilde, v0=v_tilde), T, dt,
                             rng=rng.substream(1), n_replicas=replicas, scheme=scheme)
    snap = right.snapshots[-1]
    rhs = _duality_function(rho, w, snap.u, snap.v, one, one, config.d)
    return SelfDualityResult(float(T), estimate_ensemble(lhs.real), estimate_ensemble(lhs.imag),
                             estimate_ensemble(rhs.real), estimate_ensemble(rhs.imag))


# -- reports -----------------------------------------------------------------


@dataclass
class Check:
    name: str
    measured: float
    tolerance: str
    passed: bool

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: measured={self.measured:.6g} ({self.tolerance})"

    def as_dict(self):
        m = self.measured
        return {"name": self.name, "measured": m if math.isfinite(m) else str(m),
                "tolerance": self.tolerance, "passed": bool(self.passed)}


@dataclass
class RunReport:
    kind: str
    config: dict
    config_hash: str
    seed: int
    checks: list = field(default_factory=list)
    estimates: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    error: str | None = None
    wall_time: float = 0.0
    started: str = ""

    @property
    def passed(self) -> bool:
        return self.error is None and all(c.passed for c in self.checks)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def check(self, name, measured, passed, tolerance):
        c = Check(name, float(measured), tolerance, bool(passed))
        self.checks.append(c)
        return c

    def as_dict(self):
        return {
            "kind": self.kind, "passed": self.passed, "error": self.error,
            "checks": [c.as_dict() for c in self.checks],
            "estimates": _jsonable(self.estimates), "files": list(self.files),
            "provenance": {"seed": self.seed, "config_hash": self.config_hash,
                           "config": self.config, "wall_time_s": self.wall_time,
                           "started_utc": self.started, "package_version": __version__,
                           "python": platform.python_version(), "numpy": np.__version__},
        }

    def append_to(self, path):
        """Add this run to the ``runs`` list of ``path``; earlier runs are left untouched."""
        path = Path(path)
        runs = []
        if path.exists():
            try:
                runs = json.loads(path.read_text()).get("runs", [])
            except (ValueError, AttributeError):
                raise ConfigurationError(f"{path} is not a report file") from None
        runs.append(self.as_dict())
        path.write_text(json.dumps({"runs": runs}, indent=2, sort_keys=True) + "\n")
        return path


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, EnsembleEstimate):
        return _jsonable(x.as_dict())
    return x


def _writer(path):
    fh = Path(path).open("w", newline="")
    fh.write("# schema=1\n")
    return fh, csv.writer(fh, lineterminator="\n")


# -- experiment kinds ---------------------------------------------------------


def _times(cfg, default):
    return tuple(cfg.times) if cfg.times is not None else default


def _lattice(cfg: ExperimentConfig, side_default=16) -> LatticeConfig:
    side = cfg.side if cfg.side is not None else side_default
    return LatticeConfig(d=cfg.d, side=side, mode=cfg.mode, h=cfg.h)


def _run_critical_curve(cfg, rep, out, rng):
    rhos = np.asarray(cfg.rhos) if cfg.rhos is not None else np.linspace(-0.99, 0.99, 199)
    path = write_critical_curve(out / "critical_curve.csv", rhos)
    rep.files.append(path.name)
    p0 = critical_p(0.0)
    rep.check("critical_p(0) == 2", p0, p0 == 2.0, "exact")
    r35 = critical_rho(35.0)
    rep.check("critical_rho(35) near -0.9958", r35, abs(r35 + 0.9958) <= 2e-3, "|x + 0.9958| <= 2e-3")
    grid = np.linspace(-0.999, 0.999, 1999)
    err = max(abs(critical_rho(critical_p(float(r))) - r) for r in grid)
    rep.check("round trip rho -> p -> rho", err, err <= 1e-10, "<= 1e-10")
    rep.estimates["critical_rho_35"] = r35
    if cfg.svg:
        from .svg import line_plot

        p = line_plot(out / "critical_curve.svg", [(rhos, [critical_p(float(r)) for r in rhos], "p(rho)")],
                      xlabel="rho", ylabel="p(rho)", logy=True, title="critical curve")
        rep.files.append(p.name)


def _run_exit_dist(cfg, rep, out, rng):
    n = cfg.replicas or 10_000
    dt = cfg.dt or 1e-4
    ens = ensemble_exit(cfg.u0, cfg.v0, cfg.rho, dt, n, rng)
    rep.files.append(ens.write_csv(out / "exit_samples.csv").name)
    geom = build_geometry(cfg.u0, cfg.v0, cfg.rho)
    for axis in ("x", "y"):
        ks = ens.ks_against_theory(axis)
        rep.check(f"KS {axis}-axis exit law", ks, ks <= cfg.tol_ks, f"<= {cfg.tol_ks}")
    pr = ens.axis_probability("x")
    exact = exit_axis_probability(geom, "x")
    z = pr.z_score(exact)
    rep.check("P(x-axis exit)", z, z <= cfg.tol_z, f"z <= {cfg.tol_z} vs {exact:.6f}")
    b1 = ens.coordinate_mean(1)
    z = b1.z_score(cfg.u0)
    calibrated = critical_p(cfg.rho) > 2.0
    rep.check("E[B1_tau] = u0" + ("" if calibrated else " (infinite variance, se uncalibrated)"),
              z, z <= cfg.tol_z, f"z <= {cfg.tol_z}")
    tau, suspect = ens.mean_exit_time()
    rep.estimates.update({"p_x": pr, "p_x_exact": exact, "mean_B1": b1, "mean_tau": tau,
                          "tau_infinite_suspect": suspect, "n_excluded": ens.n_excluded,
                          "critical_p": critical_p(cfg.rho)})


def _run_nonspatial(cfg, rep, out, rng):
    rhos = cfg.rhos if cfg.rhos is not None else (cfg.rho,)
    times = _times(cfg, (0.5, 1.0, 2.0))
    n = cfg.replicas or 100_000
    dt = cfg.dt or 1e-3
    fh, wr = _writer(out / "nonspatial_moments.csv")
    wr.writerow(["rho", "kappa", "T", "quantity", "estimate", "se", "ci_low", "ci_high", "exact"])
    with fh:
        for j, rho in enumerate(rhos):
            p = ModelParams(rho, cfg.kappa)
            ens = simulate_ensemble(cfg.u0, cfg.v0, p, max(times), dt, times, n, rng.substream(j))
            for k, t in enumerate(ens.times):
                uv = estimate_ensemble(ens.u[k] * ens.v[k])
                uu = estimate_ensemble(ens.u[k] ** 2)
                rows = [("uv", uv, None), ("u2", uu, None)]
                if cfg.u0 == 1.0 and cfg.v0 == 1.0:
                    ex_uv = float(mixed_moment_exact(rho, cfg.kappa, t))
                    ex_uu = float(second_moment_exact(rho, cfg.kappa, t))
                    rows = [("uv", uv, ex_uv), ("u2", uu, ex_uu)]
                    z = uv.z_score(ex_uv)
                    rep.check(f"E[uv] rho={rho:g} T={t:g}", z, z <= cfg.tol_z, f"z <= {cfg.tol_z}")
                    dev = abs(uu.mean - ex_uu)
                    tol = max(cfg.tol_z * uu.se, cfg.tol_rel * abs(ex_uu))
                    rep.check(f"E[u^2] rho={rho:g} T={t:g}", dev, dev <= tol,
                              f"|diff| <= max({cfg.tol_z} se, {cfg.tol_rel:g} rel) = {tol:.4g}")
                for name, est, ex in rows:
                    wr.writerow([repr(rho), repr(cfg.kappa), repr(float(t)), name, repr(est.mean),
                                 repr(est.se), repr(est.ci_low), repr(est.ci_high),
                                 "" if ex is None else repr(ex)])
                rep.estimates[f"rho={rho:g},T={t:g}"] = {"uv": uv, "u2": uu}
    rep.files.append("nonspatial_moments.csv")


def _run_lattice_moments(cfg, rep, out, rng):
    lat = _lattice(cfg, 8)
    p = ModelParams(cfg.rho, cfg.kappa)
    T = cfg.t
    n = cfg.replicas or 20_000
    dt = cfg.dt or min(1e-3, lat.dt_max())
    origin = (0,) * lat.d
    run = simulate_lattice(lat, p, InitSpec("homogeneous", cfg.u0, cfg.v0), T, dt,
                           rng=rng.substream(0), n_replicas=n, keep_fields=False, probe_site=origin,
                           scheme=cfg.scheme or "euler")
    su, sv = run.snapshots[-1].u, run.snapshots[-1].v
    direct = {"u2": estimate_ensemble(su ** 2), "uv": estimate_ensemble(su * sv)}
    init = (cfg.u0, cfg.v0)
    dual = {
        "u2": moment_via_duality(MomentSpec((origin, origin), ()), p, T, n, rng.substream(1), lat,
                                 init=init, flip_rule=cfg.flip_rule, estimator=cfg.estimator,
                                 warn=False).estimates[0].estimate,
        "uv": moment_via_duality(MomentSpec((origin,), (origin,)), p, T, n, rng.substream(2), lat,
                                 init=init, flip_rule=cfg.flip_rule, estimator=cfg.estimator,
                                 warn=False).estimates[0].estimate,
    }
    fh, wr = _writer(out / "lattice_moments.csv")
    with fh:
        wr.writerow(["quantity", "route", "estimate", "se", "ci_low", "ci_high"])
        for q in ("u2", "uv"):
            for route, est in (("lattice", direct[q]), ("dual", dual[q])):
                wr.writerow([q, route, repr(est.mean), repr(est.se), repr(est.ci_low),
                             repr(est.ci_high)])
            z = combined_z(direct[q], dual[q])
            rep.check(f"{q}(0) lattice vs dual at T={T:g}", z, z <= cfg.tol_z, f"combined z <= {cfg.tol_z}")
    rep.files.append("lattice_moments.csv")
    rep.estimates.update({"lattice": direct, "dual": dual})


def _run_dual_moments(cfg, rep, out, rng):
    lat = _lattice(cfg, 1)
    p = ModelParams(cfg.rho, cfg.kappa)
    times = _times(cfg, (cfg.t,))
    n = cfg.replicas or 100_000
    origin = (0,) * lat.d
    spec = MomentSpec((origin,) * cfg.n, (origin,) * cfg.m)
    run = moment_via_duality(spec, p, times, n, rng, lat, init=(cfg.u0, cfg.v0),
                             flip_rule=cfg.flip_rule, estimator=cfg.estimator, warn=False)
    rep.files.append(write_moment_table([run], out / "dual_moments.csv").name)
    for e in run.estimates:
        rep.estimates[f"T={e.T:g}"] = {"estimate": e.estimate, "heavy_tail_share": e.heavy_tail_share,
                                       "heavy_tail_flag": e.heavy_tail_flag}
        exact = None
        if lat.n_sites == 1 and cfg.u0 == 1.0 and cfg.v0 == 1.0:
            if (cfg.n, cfg.m) == (1, 1):
                exact = float(mixed_moment_exact(cfg.rho, cfg.kappa, e.T))
            elif (cfg.n, cfg.m) in ((2, 0), (0, 2)):
                exact = float(second_moment_exact(cfg.rho, cfg.kappa, e.T))
        if exact is not None:
            dev = abs(e.value - exact)
            tol = max(cfg.tol_z * e.estimate.se, FLOAT_FLOOR * abs(exact))
            rep.check(f"single-site closed form T={e.T:g}", dev, dev <= tol,
                      f"|diff| <= max({cfg.tol_z} se, {FLOAT_FLOOR:g} rel) = {tol:.3g}")
    if cfg.decay_bounds is not None:
        t = np.array([e.T for e in run.estimates])
        fit = ols_fit(np.log(t), np.log([e.value for e in run.estimates]))
        lo, hi = cfg.decay_bounds
        rep.check("log-log slope", fit.slope, lo <= fit.slope <= hi, f"in [{lo:g}, {hi:g}]")
        rep.estimates["loglog_fit"] = fit.as_dict()
    flags = [e.heavy_tail_flag for e in run.estimates]
    rep.check("heavy-tail flags clear", float(sum(flags)), not any(flags), "no flagged T")


def _run_self_duality(cfg, rep, out, rng):
    lat = _lattice(cfg, 16)
    p = ModelParams(cfg.rho, cfg.kappa)
    n = cfg.replicas or 10_000
    res = self_duality_check(p, lat, cfg.t, n, rng, dt=cfg.dt, scheme=cfg.scheme or "euler")
    zero = self_duality_check(p, lat, 0.0, n, rng)
    fh, wr = _writer(out / "self_duality.csv")
    with fh:
        wr.writerow(["T", "side", "re", "im", "se_re", "se_im"])
        for name, a, b in (("lhs", res.lhs_re, res.lhs_im), ("rhs", res.rhs_re, res.rhs_im)):
            wr.writerow([repr(res.T), name, repr(a.mean), repr(b.mean), repr(a.se), repr(b.se)])
    rep.files.append("self_duality.csv")
    rep.check("real parts agree", res.z_real, res.z_real <= cfg.tol_z, f"combined z <= {cfg.tol_z}")
    rep.check("imaginary parts agree", res.z_imag, res.z_imag <= cfg.tol_z, f"combined z <= {cfg.tol_z}")
    exact0 = math.exp(-2.0 * math.sqrt(1.0 - cfg.rho) * lat.weight)
    d0 = max(abs(zero.lhs_re.mean - exact0), abs(zero.rhs_re.mean - exact0),
             abs(zero.lhs_im.mean), abs(zero.rhs_im.mean))
    rep.check("T = 0 exact value", d0, d0 <= 1e-12, "<= 1e-12")
    rep.estimates["result"] = res.as_dict()


def _run_lyapunov(cfg, rep, out, rng):
    lat = _lattice(cfg, 16)
    rhos = cfg.rhos if cfg.rhos is not None else (cfg.rho,)
    kappas = cfg.kappas if cfg.kappas is not None else (cfg.kappa,) * len(rhos)
    if len(kappas) != len(rhos):
        raise ConfigurationError("rhos and kappas must have the same length")
    times = _times(cfg, tuple(np.linspace(2.0, 20.0, 10)))
    n = cfg.replicas or 10_000
    grid = [ModelParams(r, k) for r, k in zip(rhos, kappas)]
    rows = lyapunov_sweep(cfg.n, grid, times, lat, n, rng, cfg.window, cfg.flip_rule, cfg.estimator)
    rc = critical_rho(cfg.n)
    pairs = cfg.n * (cfg.n - 1) / 2
    fh, wr = _writer(out / "lyapunov.csv")
    with fh:
        wr.writerow(["rho", "kappa", "n", "T", "log_moment", "heavy_tail_flag"])
        for row in rows:
            for e, lm in zip(row.run.estimates, row.log_moments):
                wr.writerow([repr(row.rho), repr(row.kappa), row.n, repr(e.T), repr(float(lm)),
                             int(e.heavy_tail_flag)])
    rep.files.append(write_moment_table([r.run for r in rows], out / "lyapunov_moments.csv").name)
    rep.files.append("lyapunov.csv")
    for row in rows:
        f = row.fit
        tag = f"rho={row.rho:g} kappa={row.kappa:g}"
        rep.estimates[tag] = {"fit": f.as_dict(), "log_moments": row.log_moments, "T": row.times}
        rep.check(f"{tag} heavy-tail flags clear", float(row.heavy_tail), not row.heavy_tail, "none raised")
        if abs(row.rho - rc) < 1e-12:
            vals = np.exp(row.log_moments)
            inc = np.diff(vals)
            rep.check(f"{tag} moment strictly increasing", float(inc.min()), bool(np.all(inc > 0)), "min increment > 0")
            loc = np.diff(row.log_moments) / np.diff(row.times)
            rep.check(f"{tag} local slope decreasing", float(np.diff(loc).max()),
                      bool(np.all(np.diff(loc) < 0)), "max change < 0")
        elif row.rho < rc:
            rep.check(f"{tag} slope CI contains 0", f.slope, f.contains(0.0),
                      f"CI [{f.ci_low:.3g}, {f.ci_high:.3g}] contains 0")
        else:
            bound = row.kappa * pairs * (row.rho - rc)
            ok = 0.0 < f.slope <= bound + cfg.tol_z * f.se
            rep.check(f"{tag} 0 < slope <= bound", f.slope, ok,
                      f"bound {bound:.4g} + {cfg.tol_z} se = {bound + cfg.tol_z * f.se:.4g}")


def _run_interface(cfg, rep, out, rng):
    times = np.asarray(_times(cfg, tuple(speed_grid(32.0, 512.0))))
    h = cfg.h if cfg.mode == "continuum" else 0.5
    side = cfg.side if cfg.side is not None else domain_side(float(times.max()), h)
    lat = LatticeConfig(d=1, side=side, mode="continuum", h=h)
    dt = cfg.dt or lat.dt_max()
    n = cfg.replicas or 50
    res = speed_experiment(lat, ModelParams(cfg.rho, cfg.kappa), times, dt, n, cfg.threshold, rng,
                           scheme=cfg.scheme or "feller")
    rep.files.append(res.write_envelope_csv(out / "envelope.csv").name)
    rep.files.append(res.write_fit_json(out / "interface_fit.json").name)
    rep.estimates.update(res.summary())
    rep.check("running sup monotone", float(res.monotone), res.monotone, "exact")
    rep.check("exclusions <= 20%", res.n_excluded / n, res.valid, "share <= 0.2")
    ex = res.fit.exponent if res.fit is not None else math.nan
    rep.check("growth exponent", ex, 0.4 <= ex <= 0.7, "in [0.4, 0.7]")
    rep.check("containment share", res.containment_share, res.containment_share >= 0.9, ">= 0.9")
    if cfg.svg:
        from .svg import line_plot

        p = line_plot(out / "envelope.svg", [(res.T, res.median, "median M(T)"),
                                             (res.T, res.p90, "90th percentile")],
                      xlabel="T", ylabel="M(T)", logx=True, logy=True, title="front envelope")
        rep.files.append(p.name)


RUNNERS = {
    "critical-curve": _run_critical_curve,
    "exit-dist": _run_exit_dist,
    "nonspatial-moments": _run_nonspatial,
    "lattice-moments": _run_lattice_moments,
    "dual-moments": _run_dual_moments,
    "self-duality": _run_self_duality,
    "lyapunov": _run_lyapunov,
    "interface-speed": _run_interface,
}


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunReport:
    """Dispatch ``cfg`` to its module, write outputs and append to ``report.json``.

    Module errors are caught and recorded in the report (which then fails).
    """
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rep = RunReport(cfg.kind, cfg.as_dict(), cfg.hash, cfg.seed,
                    started=datetime.now(timezone.utc).isoformat(timespec="seconds"))
    t0 = time.perf_counter()
    try:
        RUNNERS[cfg.kind](cfg, rep, out, RngStream(cfg.seed))
    except (SymbranchError, ArithmeticError, ValueError) as exc:
        rep.error = f"{type(exc).__name__}: {exc}"
        rep.estimates["traceback"] = traceback.format_exc(limit=5)
    rep.wall_time = time.perf_counter() - t0
    rep.append_to(out / "report.json")
    return rep
