"""Closed-form reference solutions: hydrostatic steady state and single-seed orbit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from . import cost
from .model import Box


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# steady state sigma(x) = (f*)'(ell - g ln x3)
# ---------------------------------------------------------------------------

@dataclass
class SteadyState:
    ell_star: float
    constants: object

    def density(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return cost.fstar_prime(self.ell_star - self.constants.g * np.log(x[:, 2]),
                                self.constants)


def _steady_mass(ell, box, constants):
    """Integral of (f*)'(ell - g ln x3) over a box domain."""
    cross = (box.hi[0] - box.lo[0]) * (box.hi[1] - box.lo[1])
    g = constants.g
    kink = np.exp(ell / g)

    def integrand(x3):
        return cost.fstar_prime(ell - g * np.log(x3), constants)

    pts = [kink] if box.lo[2] < kink < box.hi[2] else None
    val, _ = quad(integrand, box.lo[2], box.hi[2], points=pts, limit=200)
    return cross * val


def steady_state(domain, constants, tol=1e-12):
    """Normalizing level ell* with unit total mass, found by bracketed root solve.

    The mass is 0 at ell = g ln(delta) and grows without bound, so a root
    exists; the upper bracket is grown geometrically until the mass exceeds 1.
    """
    if not isinstance(domain, Box):
        raise ValidationError("steady state reference runs on box domains")
    if domain.lo[2] <= constants.delta or domain.hi[2] >= 1.0 / constants.delta:
        raise ValidationError("domain must sit inside the geostrophic slab")
    lo = constants.g * np.log(constants.delta)
    hi = max(constants.g * np.log(domain.hi[2]) + 1.0, lo + 1.0)
    while _steady_mass(hi, domain, constants) < 1.0:
        hi = lo + 2.0 * (hi - lo)
    ell = brentq(lambda L: _steady_mass(L, domain, constants) - 1.0, lo, hi, xtol=tol)
    return SteadyState(float(ell), constants)


# ---------------------------------------------------------------------------
# single-seed elliptic orbit (gamma = 2, kappa = 1/2)
# ---------------------------------------------------------------------------

@dataclass
class EllipseParams:
    A: float
    B: float
    omega: float
    period: float
    z_bar: np.ndarray
    vertical_margin: float       # z3 - |X| f^2 max(a^2, b^2) / 3
    oscillation_margin: float    # 1/|X| - max (c - mean c), positive when valid

    @property
    def valid(self):
        return self.vertical_margin > 0 and self.oscillation_margin > 0


def box_cost_integral(domain, z, constants):
    """Closed-form integral of c(., z) over a centered box [-a,a]x[-b,b]x[0,h]."""
    a = domain.hi[0]
    b = domain.hi[1]
    h = domain.hi[2]
    vol = 8.0 * a * b * h / 2.0  # 4abh
    f2 = constants.f_cor**2
    return (vol / z[2]) * (
        0.5 * f2 * (a**2 / 3.0 + z[0] ** 2)
        + 0.5 * f2 * (b**2 / 3.0 + z[1] ** 2)
        + constants.g * h / 2.0
    )


def _require_centered_box(domain):
    if not isinstance(domain, Box):
        raise ValidationError("orbit reference needs a box domain")
    lo, hi = domain.lo, domain.hi
    if not (np.allclose(lo[:2], -hi[:2]) and abs(lo[2]) < 1e-14):
        raise ValidationError("orbit reference needs [-a,a]x[-b,b]x[0,h]")


def ellipse_reference(domain, z_bar, constants, times, check_samples=(32, 256)):
    """Analytic single-seed trajectory, weights, and validity margins.

    Requires gamma = 2, kappa = 1/2 and a centered box.  The seed follows the
    linear system dz1/dt = -f A z2, dz2/dt = f B z1 with
    A = 1 - |X| f^2 b^2 / (3 z3), B = 1 - |X| f^2 a^2 / (3 z3), staying on an
    ellipse of angular frequency omega = f sqrt(A B).
    """
    _require_centered_box(domain)
    if constants.gamma != 2.0 or constants.kappa != 0.5:
        raise ValidationError("orbit reference requires gamma = 2, kappa = 1/2")
    z_bar = np.asarray(z_bar, dtype=float)
    a, b, h = domain.hi
    volume = 4.0 * a * b * h
    f = constants.f_cor
    A = 1.0 - volume * f**2 * b**2 / (3.0 * z_bar[2])
    B = 1.0 - volume * f**2 * a**2 / (3.0 * z_bar[2])
    vertical_margin = z_bar[2] - volume * f**2 * max(a**2, b**2) / 3.0
    if A <= 0 or B <= 0:
        raise ValidationError(
            f"seed too low for a closed orbit (margin {vertical_margin:.3e})"
        )
    omega = f * np.sqrt(A * B)
    period = 2.0 * np.pi / omega

    times = np.asarray(times, dtype=float)
    ca = np.cos(omega * times)
    sa = np.sin(omega * times)
    z1 = z_bar[0] * ca - np.sqrt(A / B) * z_bar[1] * sa
    z2 = z_bar[1] * ca + np.sqrt(B / A) * z_bar[0] * sa
    traj = np.stack([z1, z2, np.full_like(times, z_bar[2])], axis=1)

    # oscillation condition sampled over the box times the orbit
    nx, nt = check_samples
    ax = [np.linspace(lo_k, hi_k, nx) for lo_k, hi_k in zip(domain.lo, domain.hi)]
    X, Y, Z = np.meshgrid(*ax, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    ts = np.linspace(0.0, period, nt, endpoint=False)
    worst = -np.inf
    for t in ts:
        y = np.array(
            [
                z_bar[0] * np.cos(omega * t) - np.sqrt(A / B) * z_bar[1] * np.sin(omega * t),
                z_bar[1] * np.cos(omega * t) + np.sqrt(B / A) * z_bar[0] * np.sin(omega * t),
                z_bar[2],
            ]
        )
        cvals = cost.cost_c(pts, y, constants)
        worst = max(worst, float(cvals.max() - box_cost_integral(domain, y, constants) / volume))
    oscillation_margin = 1.0 / volume - worst

    params = EllipseParams(A, B, float(omega), float(period), z_bar,
                           float(vertical_margin), float(oscillation_margin))
    return traj, params


def ellipse_weight(domain, z, constants):
    """w*(z) = (1 + int_X c(., z))/|X| for the single-seed box configuration."""
    _require_centered_box(domain)
    return (1.0 + box_cost_integral(domain, z, constants)) / domain.volume()


def ellipse_density(domain, z, constants):
    """sigma*(x) = w*(z) - c(x, z) as a callable on (Q, 3) points."""
    w = ellipse_weight(domain, z, constants)

    def density(x):
        return w - cost.cost_c(np.atleast_2d(np.asarray(x, dtype=float)), z, constants)

    return density


def ode_residual(times, params, f_cor):
    """Max residual of the linear orbit ODE along the analytic trajectory.

    Uses the closed-form time derivative, so the residual measures only
    floating-point cancellation (machine level when the parameters are sane).
    """
    times = np.asarray(times, dtype=float)
    A, B, om = params.A, params.B, params.omega
    z1b, z2b = params.z_bar[0], params.z_bar[1]
    ca, sa = np.cos(om * times), np.sin(om * times)
    z1 = z1b * ca - np.sqrt(A / B) * z2b * sa
    z2 = z2b * ca + np.sqrt(B / A) * z1b * sa
    dz1 = -om * z1b * sa - om * np.sqrt(A / B) * z2b * ca
    dz2 = -om * z2b * sa + om * np.sqrt(B / A) * z1b * ca
    r1 = dz1 + f_cor * A * z2
    r2 = dz2 - f_cor * B * z1
    return float(max(np.max(np.abs(r1)), np.max(np.abs(r2))))
