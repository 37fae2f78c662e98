"""Reference values computed independently of the package.

* Moment ODEs of the nonspatial pair from Ito's formula, integrated numerically.
* Feynman-Kac expressions for second and mixed lattice moments in d = 1:
  the two dual walkers meet according to their difference walk (rate 2,
  symmetric, on the torus), so the moments are matrix exponentials.
* The quadrant exit law via complex arithmetic (conformal map by ``z**alpha``
  with numpy's principal power) and closed-form exit moments.
"""

import cmath
import math

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm


# -- nonspatial -----------------------------------------------------------------

def ito_moments(rho, kappa, t, u0=1.0, v0=1.0):
    """(E[u v], E[u^2]) at times ``t`` from d/dt E[uv] = rho kappa E[uv], d/dt E[u^2] = kappa E[uv]."""
    t = np.atleast_1d(np.asarray(t, dtype=float))

    def rhs(_, y):
        return [rho * kappa * y[0], kappa * y[0]]

    sol = solve_ivp(rhs, (0.0, float(t.max())), [u0 * v0, u0 * u0], t_eval=t,
                    rtol=1e-12, atol=1e-14)
    return sol.y[0], sol.y[1]


# -- Feynman-Kac on the 1-d torus -------------------------------------------------

def difference_generator(side):
    """Generator of the difference of two independent rate-1 lattice walks in d = 1.

    Each walker jumps at rate 1 to a uniform neighbour, so the difference
    moves by +-1 at total rate 2.
    """
    G = np.zeros((side, side))
    for y in range(side):
        for s in (1, -1):
            G[y, (y + s) % side] += 1.0
        G[y, y] -= 2.0
    return G


def exp_local_time(side, a, t):
    """E_0[exp(a * time at 0 up to t)] for the difference walk."""
    G = difference_generator(side)
    G[0, 0] += a
    return float(expm(t * G)[0].sum())


def mean_local_time(side, t):
    G = difference_generator(side)
    n = side
    B = np.zeros((2 * n, 2 * n))
    B[:n, :n] = G
    B[:n, n:] = np.eye(n)
    return float(expm(t * B)[:n, n:][0, 0])


def lattice_mixed_moment(side, rho, kappa, t):
    """E[u_t(0) v_t(0)] from u0 = v0 = 1 on the d = 1 torus."""
    return exp_local_time(side, kappa * rho, t)


def lattice_second_moment(side, rho, kappa, t):
    """E[u_t(0)^2] from u0 = v0 = 1: 1 + (E[exp(rho kappa L)] - 1) / rho."""
    if rho == 0.0:
        return 1.0 + kappa * mean_local_time(side, t)
    return 1.0 + (exp_local_time(side, kappa * rho, t) - 1.0) / rho


# -- wedge ------------------------------------------------------------------------

def halfplane_image(u, v, rho):
    """Image of the start under the map sending the quadrant to the upper half-plane."""
    c = math.sqrt(1.0 - rho * rho)
    rot = math.asin(rho)
    theta = 0.5 * math.pi + rot
    alpha = math.pi / theta
    z = complex(u, (v - rho * u) / c) * cmath.exp(1j * rot)
    return z ** alpha, alpha, c


def exit_cdf_oracle(u, v, rho, axis, r):
    """Cauchy sub-distribution of the exit distance, through the complex image."""
    w, alpha, c = halfplane_image(u, v, rho)
    s = (np.asarray(r, dtype=float) / c) ** alpha
    x0, y0 = w.real, w.imag
    if axis == "x":
        return (np.arctan((s - x0) / y0) + np.arctan(x0 / y0)) / math.pi
    return (np.arctan((s + x0) / y0) - np.arctan(x0 / y0)) / math.pi


def axis_probability_oracle(u, v, rho):
    w, _, _ = halfplane_image(u, v, rho)
    return 1.0 - cmath.phase(w) / math.pi


def exit_moment_oracle(u, v, rho, p, axis):
    """Closed form of E[B_axis^p; exit on axis] for p < alpha.

    With w = |w| e^{i phi} and q = p / alpha,
    int_0^inf s^q y0 / (pi ((s - x0)^2 + y0^2)) ds = |w|^q sin(q (pi - phi)) / sin(pi q).
    """
    w, alpha, c = halfplane_image(u, v, rho)
    q = p / alpha
    phi = cmath.phase(w)
    ang = math.pi - phi if axis == "x" else phi
    return c ** p * abs(w) ** q * math.sin(q * ang) / math.sin(math.pi * q)
