"""Transport cost, entropy conjugate pair, coordinate change, and power lift.

The cost c(x, y) = (1/y3) (f^2/2 (x1-y1)^2 + f^2/2 (x2-y2)^2 + g x3) becomes
affine in Phi coordinates, which turns every c-Laguerre cell into a classical
power-diagram cell after the lift implemented by :func:`power_lift`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    pass


def _check_vertical(y3):
    if np.any(np.asarray(y3) <= 0.0):
        raise DomainError("geostrophic point needs positive vertical component")


# ---------------------------------------------------------------------------
# cost and gradients
# ---------------------------------------------------------------------------

def cost_c(x, y, constants):
    """c(x, y) = (1/y3)(f^2/2 (x1-y1)^2 + f^2/2 (x2-y2)^2 + g x3)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_vertical(y[..., 2])
    f2 = constants.f_cor**2
    quad = 0.5 * f2 * ((x[..., 0] - y[..., 0]) ** 2 + (x[..., 1] - y[..., 1]) ** 2)
    return (quad + constants.g * x[..., 2]) / y[..., 2]


def cost_matrix(x, z, constants):
    """Pairwise costs, x (M, 3) against seeds z (N, 3), result (M, N)."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    _check_vertical(z[:, 2])
    f2 = constants.f_cor**2
    quad = 0.5 * f2 * (
        (x[:, None, 0] - z[None, :, 0]) ** 2 + (x[:, None, 1] - z[None, :, 1]) ** 2
    )
    return (quad + constants.g * x[:, None, 2]) / z[None, :, 2]


def grad_cost(x, y, constants):
    """Both gradients of the cost; the third component of grad_y equals -c/y3."""
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    _check_vertical(y[..., 2])
    f2 = constants.f_cor**2
    y3 = y[..., 2]
    gx = np.stack(
        [
            f2 * (x[..., 0] - y[..., 0]) / y3,
            f2 * (x[..., 1] - y[..., 1]) / y3,
            constants.g / y3,
        ],
        axis=-1,
    )
    c = cost_c(x, y, constants)
    gy = np.stack(
        [
            f2 * (y[..., 0] - x[..., 0]) / y3,
            f2 * (y[..., 1] - x[..., 1]) / y3,
            -c / y3,
        ],
        axis=-1,
    )
    return gx, gy


# ---------------------------------------------------------------------------
# Legendre-Fenchel pair of the internal energy integrand
# ---------------------------------------------------------------------------

def f_internal(s, constants):
    """Internal-energy integrand kappa s^gamma on s >= 0."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise DomainError("internal energy integrand needs s >= 0")
    return constants.kappa * s**constants.gamma


def fstar_derivatives(t, constants):
    """(f*, f*', f*'') of the conjugate of kappa s^gamma; all vanish on t <= 0.

    On t > 0: f*(t) = (1/g') (kg)^(1-g') t^g' with g' the conjugate exponent,
    so f*' = (kg)^(1-g') t^(g'-1) and f*'' = (g'-1)(kg)^(1-g') t^(g'-2).
    """
    t = np.asarray(t, dtype=float)
    gp = constants.gamma_prime
    coef = (constants.kappa * constants.gamma) ** (1.0 - gp)
    pos = t > 0.0
    val = np.zeros_like(t)
    d1 = np.zeros_like(t)
    d2 = np.zeros_like(t)
    tp = t[pos]
    val[pos] = coef / gp * tp**gp
    d1[pos] = coef * tp ** (gp - 1.0)
    d2[pos] = coef * (gp - 1.0) * tp ** (gp - 2.0)
    if t.ndim == 0:
        return float(val), float(d1), float(d2)
    return val, d1, d2


def fstar(t, constants):
    return fstar_derivatives(t, constants)[0]


def fstar_prime(t, constants):
    return fstar_derivatives(t, constants)[1]


def fstar_second(t, constants):
    return fstar_derivatives(t, constants)[2]


# ---------------------------------------------------------------------------
# coordinate change
# ---------------------------------------------------------------------------

def phi_map(p, constants):
    """(f^-2 p1, f^-2 p2, g^-1 (p3 - f^-2 (p1^2 + p2^2)/2)).

    Carries Phi coordinates to physical coordinates: composed with the cost,
    c(phi_map(p), y) is affine in p (see :func:`affine_cost_form`).
    """
    p = np.asarray(p, dtype=float)
    f2 = constants.f_cor**2
    out = np.empty_like(p)
    out[..., 0] = p[..., 0] / f2
    out[..., 1] = p[..., 1] / f2
    out[..., 2] = (p[..., 2] - 0.5 * (p[..., 0] ** 2 + p[..., 1] ** 2) / f2) / constants.g
    return out


def phi_inverse(x, constants):
    """(f^2 x1, f^2 x2, g x3 + f^2 (x1^2 + x2^2)/2); inverse of :func:`phi_map`."""
    x = np.asarray(x, dtype=float)
    f2 = constants.f_cor**2
    out = np.empty_like(x)
    out[..., 0] = f2 * x[..., 0]
    out[..., 1] = f2 * x[..., 1]
    out[..., 2] = constants.g * x[..., 2] + 0.5 * f2 * (x[..., 0] ** 2 + x[..., 1] ** 2)
    return out


# ---------------------------------------------------------------------------
# affine cost form and power lift
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineCostForm:
    """Coefficients with c(phi_map(p), y) = linear . p + offset."""

    linear: tuple
    offset: float

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        return p @ np.asarray(self.linear) + self.offset


def affine_cost_form(y, constants):
    """c(phi_map(p), y) = -(1/y3) p.(y1, y2, -1) + f^2 (y1^2 + y2^2)/(2 y3)."""
    y = np.asarray(y, dtype=float)
    _check_vertical(y[2])
    y1, y2, y3 = y
    linear = (-y1 / y3, -y2 / y3, 1.0 / y3)
    offset = constants.f_cor**2 * (y1**2 + y2**2) / (2.0 * y3)
    return AffineCostForm(linear, float(offset))


def support_form(w_i, z_i, constants):
    """Affine coefficients of s(p) = w_i - c(phi_map(p), z_i).

    s is the argument fed to (f*)' on cell i; {s > 0} is a half-space.
    """
    form = affine_cost_form(z_i, constants)
    linear = -np.asarray(form.linear)
    return linear, float(w_i) - form.offset


@dataclass(frozen=True)
class PowerLift:
    """Lifted seeds y_hat and weights psi_hat of the classical power diagram.

    For u = phi_inverse(x):
        c(x, z_i) - w_i = |u - y_hat_i|^2 - psi_hat_i - |u|^2,
    so comparisons of c - w and power scores agree pointwise.
    """

    y_hat: np.ndarray
    psi_hat: np.ndarray

    def scores(self, u):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        d2 = ((u[:, None, :] - self.y_hat[None, :, :]) ** 2).sum(axis=2)
        return d2 - self.psi_hat[None, :]

    def bisector(self, i, j):
        """(normal, offset) of the half-space where cell i beats cell j."""
        yi, yj = self.y_hat[i], self.y_hat[j]
        n = 2.0 * (yj - yi)
        d = yj @ yj - yi @ yi - self.psi_hat[j] + self.psi_hat[i]
        return n, float(d)


def power_lift(w, z, constants):
    """Lift of Laguerre data to power-diagram data.

    y_hat_i = (z1, z2, -1)/(2 z3); psi_hat_i collects w_i, |y_hat_i|^2 and the
    constant part of the affine cost.
    """
    w = np.asarray(w, dtype=float).ravel()
    z = np.atleast_2d(np.asarray(z, dtype=float))
    _check_vertical(z[:, 2])
    z1, z2, z3 = z[:, 0], z[:, 1], z[:, 2]
    y_hat = np.stack([z1, z2, -np.ones_like(z3)], axis=1) / (2.0 * z3[:, None])
    psi_hat = (
        w
        + (z1 / (2 * z3)) ** 2
        + (z2 / (2 * z3)) ** 2
        + (1.0 / (2 * z3)) ** 2
        - constants.f_cor**2 / (2 * z3) * (z1**2 + z2**2)
    )
    return PowerLift(y_hat, psi_hat)


# ---------------------------------------------------------------------------
# 2D variant (vertical slice: coordinates (x1, x2) with x2 the height)
# ---------------------------------------------------------------------------

def cost_c2d(x, y, constants):
    """(1/y2)(f^2/2 (x1-y1)^2 + g x2)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_vertical(y[..., 1])
    f2 = constants.f_cor**2
    return (0.5 * f2 * (x[..., 0] - y[..., 0]) ** 2 + constants.g * x[..., 1]) / y[..., 1]


def phi2d_map(p, constants):
    """(f^-2 p1, g^-1 (p2 - f^-2 p1^2 / 2)): Phi2d coordinates to physical."""
    p = np.asarray(p, dtype=float)
    f2 = constants.f_cor**2
    out = np.empty_like(p)
    out[..., 0] = p[..., 0] / f2
    out[..., 1] = (p[..., 1] - 0.5 * p[..., 0] ** 2 / f2) / constants.g
    return out


def phi2d_inverse(x, constants):
    """(f^2 x1, g x2 + f^2 x1^2 / 2): physical to Phi2d coordinates."""
    x = np.asarray(x, dtype=float)
    f2 = constants.f_cor**2
    out = np.empty_like(x)
    out[..., 0] = f2 * x[..., 0]
    out[..., 1] = constants.g * x[..., 1] + 0.5 * f2 * x[..., 0] ** 2
    return out


def affine_cost_form_2d(y, constants):
    """c2d(phi2d_map(p), y) = -(1/y2) p.(y1, -1) + f^2 y1^2/(2 y2)."""
    y = np.asarray(y, dtype=float)
    _check_vertical(y[1])
    y1, y2 = y
    linear = (-y1 / y2, 1.0 / y2)
    offset = constants.f_cor**2 * y1**2 / (2.0 * y2)
    return AffineCostForm(linear, float(offset))


@dataclass(frozen=True)
class PowerLift2D:
    y_hat: np.ndarray
    psi_hat: np.ndarray

    def scores(self, u):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        d2 = ((u[:, None, :] - self.y_hat[None, :, :]) ** 2).sum(axis=2)
        return d2 - self.psi_hat[None, :]

    def bisector(self, i, j):
        yi, yj = self.y_hat[i], self.y_hat[j]
        n = 2.0 * (yj - yi)
        d = yj @ yj - yi @ yi - self.psi_hat[j] + self.psi_hat[i]
        return n, float(d)


def power_lift_2d(w, z, constants):
    """2D analogue of :func:`power_lift` with lifted seeds (z1, -1)/(2 z2)."""
    w = np.asarray(w, dtype=float).ravel()
    z = np.atleast_2d(np.asarray(z, dtype=float))
    _check_vertical(z[:, 1])
    z1, z2 = z[:, 0], z[:, 1]
    y_hat = np.stack([z1, -np.ones_like(z2)], axis=1) / (2.0 * z2[:, None])
    psi_hat = (
        w
        + (z1 / (2 * z2)) ** 2
        + (1.0 / (2 * z2)) ** 2
        - constants.f_cor**2 / (2 * z2) * z1**2
    )
    return PowerLift2D(y_hat, psi_hat)
