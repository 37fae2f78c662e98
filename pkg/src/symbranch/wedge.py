"""Exit of rho-correlated planar Brownian motion from the positive quadrant.

Writing ``W1 = B1``, ``W2 = (B2 - rho B1)/sqrt(1 - rho^2)`` turns the problem
into planar Brownian motion in a sector of opening angle
``theta = pi/2 + arctan(rho / sqrt(1 - rho^2))``. After rotating the sector
onto ``{0 <= arg z <= theta}`` the map ``z -> z^(pi/theta)`` sends it to the
upper half-plane, where the exit point is Cauchy distributed around the image
``(z1t, z2t)`` of the start. Exits on the x-axis (``B2 = 0``) correspond to
positive half-plane exit points, exits on the y-axis to negative ones.

With ``c = sqrt(1 - rho^2)``, ``alpha = pi/theta`` and ``s = (r / c)^alpha``:

    P(B1 <= r, B2 = 0) = (1/pi) [arctan((s - z1t)/z2t) + arctan(z1t/z2t)]
    P(B1 = 0, B2 >= r) = (1/pi) [pi/2 - arctan((s + z1t)/z2t)]
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate

from .core import DomainError, NumericalError

Infinite = math.inf

NEAR_CRITICAL = 1e-3


class SlowConvergenceWarning(UserWarning):
    """A moment order sits within NEAR_CRITICAL of the critical order."""


def _check_rho_open(rho):
    if not -1.0 < rho < 1.0:
        raise DomainError(f"rho must lie in (-1, 1), got {rho!r}")


def wedge_angle(rho: float) -> float:
    _check_rho_open(rho)
    return 0.5 * math.pi + math.atan(rho / math.sqrt(1.0 - rho * rho))


def critical_p(rho: float) -> float:
    """Critical moment order p(rho) = pi / (pi/2 + arctan(rho / sqrt(1 - rho^2))).

    Strictly decreasing from +inf (rho -> -1) to 1 (rho -> 1).
    """
    return math.pi / wedge_angle(rho)


def critical_rho(p: float) -> float:
    """Inverse of :func:`critical_p`: rho(p) = -cos(pi / p) for p > 1."""
    if not p > 1.0:
        raise DomainError(f"p must exceed 1, got {p!r}")
    if math.isinf(p):
        return -1.0
    return -math.cos(math.pi / p)


def exit_time_moment_finite(rho: float, p: float) -> bool:
    """Whether E[tau^(p/2)] < inf, i.e. p < p(rho); independent of the start point."""
    if not p > 0:
        raise DomainError("p must be positive")
    return p < critical_p(rho)


@dataclass(frozen=True)
class WedgeGeometry:
    rho: float
    u: float
    v: float
    theta: float
    alpha: float
    z1t: float
    z2t: float

    @property
    def c(self) -> float:
        return math.sqrt(1.0 - self.rho * self.rho)

    @property
    def w_abs(self) -> float:
        return math.hypot(self.z1t, self.z2t)

    def to_halfplane(self, r, axis: str):
        """Image in the half-plane boundary of an exit at distance ``r`` on ``axis``."""
        s = (np.asarray(r, dtype=float) / self.c) ** self.alpha
        return s if axis == "x" else -s


def build_geometry(u: float, v: float, rho: float) -> WedgeGeometry:
    """Wedge angle, conformal exponent and the half-plane image of the start (u, v)."""
    _check_rho_open(rho)
    if not (u > 0 and v > 0):
        raise DomainError(f"start must lie strictly inside the quadrant, got ({u}, {v})")
    c = math.sqrt(1.0 - rho * rho)
    theta = wedge_angle(rho)
    alpha = math.pi / theta
    r0sq = u * u + (v - rho * u) ** 2 / (1.0 - rho * rho)
    phi0 = math.atan((v - rho * u) / (u * c))
    rot = math.atan(rho / c)
    ang = alpha * (phi0 + rot)
    rad = r0sq ** (0.5 * alpha)
    return WedgeGeometry(rho, u, v, theta, alpha, rad * math.cos(ang), rad * math.sin(ang))


def exit_axis_probability(geom: WedgeGeometry, axis: str = "x") -> float:
    """P(exit on the x-axis) = 1/2 + arctan(z1t/z2t)/pi; the y-axis gets the rest."""
    px = 0.5 + math.atan(geom.z1t / geom.z2t) / math.pi
    if axis == "x":
        return px
    if axis == "y":
        return 0.5 - math.atan(geom.z1t / geom.z2t) / math.pi
    raise DomainError(f"axis must be 'x' or 'y', got {axis!r}")


def _axis_sign(axis):
    if axis == "x":
        return -1.0
    if axis == "y":
        return 1.0
    raise DomainError(f"axis must be 'x' or 'y', got {axis!r}")


def exit_cdf(geom: WedgeGeometry, axis: str, r):
    """Sub-distribution function P(exit on ``axis`` at distance <= r from the corner).

    Vectorised in ``r``; ``r = inf`` gives :func:`exit_axis_probability`.
    """
    sign = _axis_sign(axis)
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise DomainError("exit_cdf needs r >= 0")
    s = (r / geom.c) ** geom.alpha
    z1, z2 = geom.z1t, geom.z2t
    with np.errstate(over="ignore"):
        out = (np.arctan((s + sign * z1) / z2) - np.arctan(sign * z1 / z2)) / math.pi
    return out if out.ndim else float(out)


def exit_tail(geom: WedgeGeometry, axis: str, r):
    """P(exit on ``axis`` at distance >= r)."""
    sign = _axis_sign(axis)
    r = np.asarray(r, dtype=float)
    s = (r / geom.c) ** geom.alpha
    out = (0.5 * math.pi - np.arctan((s + sign * geom.z1t) / geom.z2t)) / math.pi
    return out if out.ndim else float(out)


def exit_density(geom: WedgeGeometry, axis: str, r):
    """Density in r of the exit point on ``axis``."""
    sign = _axis_sign(axis)
    r = np.asarray(r, dtype=float)
    a, c, z1, z2 = geom.alpha, geom.c, geom.z1t, geom.z2t
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (r / c) ** a
        ds = a * r ** (a - 1.0) / c ** a
        out = ds / (math.pi * z2 * (1.0 + ((s + sign * z1) / z2) ** 2))
    out = np.where(r > 0, out, 0.0 if a > 1 else np.inf)
    return out if out.ndim else float(out)


def sample_exit(geom: WedgeGeometry, n: int, rng):
    """Exact draws from the exit law: (axis array of 'x'/'y', distance array)."""
    gen = rng.generator if hasattr(rng, "generator") else rng
    w = geom.z1t + geom.z2t * np.tan(math.pi * (gen.random(n) - 0.5))
    r = geom.c * np.abs(w) ** (1.0 / geom.alpha)
    axis = np.where(w > 0, "x", "y")
    return axis, r


def _tail_series(q, sign_z1, z2, wabs, S, tol=1e-15, kmax=400):
    # int_S^inf s^q z2 / (pi ((s + sign_z1)^2 + z2^2)) ds via 1/(1 - 2xt + t^2) = sum U_k(x) t^k
    x = -sign_z1 / wabs
    total = 0.0
    u_prev, u_cur = 0.0, 1.0  # U_{-1}, U_0
    ratio = wabs / S
    for k in range(kmax):
        term = u_cur * wabs ** k * S ** (q - k - 1.0) / (k + 1.0 - q)
        total += term
        if k > 4 and abs(term) < tol * abs(total) and ratio ** k < tol:
            break
        u_prev, u_cur = u_cur, 2.0 * x * u_cur - u_prev
    else:
        raise NumericalError("tail series did not converge")
    return z2 / math.pi * total


def _axis_moment(geom: WedgeGeometry, axis: str, p: float, rel_tol: float):
    q = p / geom.alpha
    sign = -1.0 if axis == "x" else 1.0
    z1, z2 = sign * geom.z1t, geom.z2t
    wabs = geom.w_abs
    S = 4.0 * wabs

    def f(s):
        return s ** q * z2 / (math.pi * ((s + z1) ** 2 + z2 ** 2))

    pts = [max(abs(z1), 1e-300)] if 0.0 < -z1 < S else None
    near, err = integrate.quad(f, 0.0, S, epsabs=0.0, epsrel=rel_tol, limit=500, points=pts)
    tail = _tail_series(q, z1, z2, wabs, S)
    val = near + tail
    if not math.isfinite(val) or err > 10 * rel_tol * abs(val) + 1e-300:
        raise NumericalError(
            f"quadrature did not converge (axis={axis}, p={p}, value={val}, abserr={err})")
    return geom.c ** p * val, geom.c ** p * err


def exit_point_moment(geom: WedgeGeometry, p: float, axis: str | None = None,
                      rel_tol: float = 1e-11):
    """E[|(B1_tau, B2_tau)|^p], or the contribution of one exit axis.

    Returns :data:`Infinite` when ``p >= p(rho)``. Otherwise the density is
    pushed to the half-plane variable ``s = (r/c)^alpha``; the integral is
    done adaptively on ``[0, 4|z|]`` and the remainder by its convergent
    expansion in ``1/s``. With ``axis='x'`` the result is ``E[B1_tau^p]``
    (B1 vanishes on y-axis exits).
    """
    if not p > 0:
        raise DomainError("p must be positive")
    pc = geom.alpha
    if p >= pc:
        return Infinite
    if pc - p < NEAR_CRITICAL:
        warnings.warn(f"p={p} is within {NEAR_CRITICAL} of the critical order {pc}; "
                      "the value is tail dominated", SlowConvergenceWarning, stacklevel=2)
    axes = ("x", "y") if axis is None else (axis,)
    for a in axes:
        _axis_sign(a)
    return float(sum(_axis_moment(geom, a, p, rel_tol)[0] for a in axes))


def critical_curve_table(rhos=None):
    """Rows (rho, p(rho)) over a grid inside (-1, 1)."""
    if rhos is None:
        rhos = np.linspace(-0.99, 0.99, 199)
    return [(float(r), critical_p(float(r))) for r in rhos]


def write_critical_curve(path, rhos=None):
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write("# schema=1\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["rho", "p_of_rho"])
        for r, p in critical_curve_table(rhos):
            wr.writerow([repr(r), repr(p)])
    return path
