"""Quantization of continuous measures and exact W1 distances.

Quantization partitions the bounding box of the support into roughly N
equal-volume cells, keeps each nonempty cell's mass at its barycenter, and
then staggers the vertical coordinates so the result is well prepared.  W1
between discrete measures is the exact transportation LP solved with HiGHS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
from scipy.optimize import linprog

from .model import SeedEnsemble

W1_SIZE_CAP = 512
JITTER_SCALE = 1e-7


class MeasureError(ValueError):
    pass


def _grid_dims(bounds_lo, bounds_hi, n):
    """Integer cell counts per axis with product close to n, aspect-aware."""
    sides = np.maximum(bounds_hi - bounds_lo, 1e-30)
    ideal = sides * (n / np.prod(sides)) ** (1.0 / 3.0)
    best, best_err = None, None
    for dx in (int(np.floor(ideal[0])), int(np.ceil(ideal[0]))):
        for dy in (int(np.floor(ideal[1])), int(np.ceil(ideal[1]))):
            for dz in (int(np.floor(ideal[2])), int(np.ceil(ideal[2]))):
                dims = (max(dx, 1), max(dy, 1), max(dz, 1))
                err = abs(np.prod(dims) - n)
                if best_err is None or err < best_err:
                    best, best_err = dims, err
    return best


def _stagger_vertical(z, extent):
    """Perturb third components by distinct multiples of eta = 1e-7 extent."""
    eta = JITTER_SCALE * max(extent, 1e-12)
    n = len(z)
    for attempt in range(60):
        jitter = eta * (np.arange(n) - 0.5 * (n - 1)) * (1 + attempt)
        z3 = z[:, 2] + jitter
        gaps = np.abs(z3[:, None] - z3[None, :])
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() > 1e-9:
            out = z.copy()
            out[:, 2] = z3
            return out
    raise MeasureError("failed to stagger vertical coordinates")


def quantize(source, n, bounds=None, subgrid=4):
    """Discretize a density or sample set into a well-prepared N-seed measure.

    source is either a callable density on (Q, 3) points (bounds required) or
    an (M, 3) array of samples (optionally a tuple (points, weights)).  Cells
    of the bounding-box partition with zero mass are discarded.
    """
    if n < 1:
        raise MeasureError("need n >= 1")
    if callable(source):
        if bounds is None:
            raise MeasureError("density input needs bounds=(lo, hi)")
        lo = np.asarray(bounds[0], dtype=float)
        hi = np.asarray(bounds[1], dtype=float)
        return _quantize_density(source, n, lo, hi, subgrid)
    if isinstance(source, tuple):
        pts, wts = source
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        wts = np.asarray(wts, dtype=float).ravel()
    else:
        pts = np.atleast_2d(np.asarray(source, dtype=float))
        wts = np.full(len(pts), 1.0 / len(pts))
    if wts.sum() <= 0:
        raise MeasureError("input measure has zero total mass")
    wts = wts / wts.sum()
    if len(pts) <= n:
        if len(pts) == 1:
            return SeedEnsemble(pts, np.array([1.0]))
        z = _stagger_vertical(pts, pts[:, 2].max() - pts[:, 2].min())
        return SeedEnsemble(z, wts)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1e-12)
    dims = _grid_dims(lo, hi, n)
    steps = (hi - lo) / np.asarray(dims)
    idx = np.minimum(((pts - lo) / steps).astype(int), np.asarray(dims) - 1)
    flat = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    ncell = int(np.prod(dims))
    mass = np.bincount(flat, weights=wts, minlength=ncell)
    cent = np.stack(
        [np.bincount(flat, weights=wts * pts[:, k], minlength=ncell) for k in range(3)],
        axis=1,
    )
    keep = mass > 0
    mass = mass[keep]
    cent = cent[keep] / mass[:, None]
    z = _stagger_vertical(cent, hi[2] - lo[2])
    return SeedEnsemble(z, mass)


def _quantize_density(density, n, lo, hi, subgrid):
    dims = _grid_dims(lo, hi, n)
    steps = (hi - lo) / np.asarray(dims)
    sub = max(int(subgrid), 1)
    offsets = (np.arange(sub) + 0.5) / sub
    seeds, masses = [], []
    for ix in range(dims[0]):
        for iy in range(dims[1]):
            for iz in range(dims[2]):
                corner = lo + steps * np.array([ix, iy, iz])
                gx, gy, gz = np.meshgrid(
                    corner[0] + offsets * steps[0],
                    corner[1] + offsets * steps[1],
                    corner[2] + offsets * steps[2],
                    indexing="ij",
                )
                pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
                rho = np.asarray(density(pts), dtype=float)
                total = rho.sum()
                if total <= 0:
                    continue
                masses.append(total * np.prod(steps) / len(pts))
                seeds.append((rho @ pts) / total)
    if not masses:
        raise MeasureError("density vanishes on the requested bounds")
    masses = np.asarray(masses)
    masses = masses / masses.sum()
    z = _stagger_vertical(np.asarray(seeds), hi[2] - lo[2])
    return SeedEnsemble(z, masses)


@dataclass
class TransportCoupling:
    """Optimal coupling between two discrete measures and its W1 cost."""

    coupling: sps.coo_matrix
    value: float

    @property
    def nnz(self):
        return self.coupling.nnz

    def row_sums(self):
        return np.asarray(self.coupling.sum(axis=1)).ravel()

    def col_sums(self):
        return np.asarray(self.coupling.sum(axis=0)).ravel()


def w1_distance(mu, nu):
    """Exact W1 between discrete measures (Euclidean ground cost).

    Solves the transportation LP with the HiGHS dual simplex; sizes above 512
    per side are rejected rather than approximated.
    """
    if mu.n > W1_SIZE_CAP or nu.n > W1_SIZE_CAP:
        raise MeasureError(f"W1 solver capped at {W1_SIZE_CAP} seeds per side")
    a, b = mu.m, nu.m
    if abs(a.sum() - b.sum()) > 1e-9:
        raise MeasureError("measures must carry equal total mass")
    D = np.linalg.norm(mu.z[:, None, :] - nu.z[None, :, :], axis=2)
    m, n = mu.n, nu.n
    if m == 1:
        coupling = sps.coo_matrix(b[None, :])
        return float(D[0] @ b), TransportCoupling(coupling, float(D[0] @ b))
    if n == 1:
        coupling = sps.coo_matrix(a[:, None])
        return float(a @ D[:, 0]), TransportCoupling(coupling, float(a @ D[:, 0]))
    rows, cols, vals = [], [], []
    for i in range(m):
        rows.extend([i] * n)
        cols.extend(range(i * n, (i + 1) * n))
        vals.extend([1.0] * n)
    for j in range(n - 1):  # last column constraint is redundant
        rows.extend([m + j] * m)
        cols.extend(range(j, m * n, n))
        vals.extend([1.0] * m)
    A = sps.coo_matrix((vals, (rows, cols)), shape=(m + n - 1, m * n))
    rhs = np.concatenate([a, b[:-1]])
    res = linprog(D.ravel(), A_eq=A.tocsr(), b_eq=rhs, bounds=(0, None), method="highs")
    if not res.success:
        raise MeasureError(f"transportation LP failed: {res.message}")
    plan = res.x.reshape(m, n)
    plan[plan < 1e-15] = 0.0
    coupling = sps.coo_matrix(plan)
    value = float((plan * D).sum())
    return value, TransportCoupling(coupling, value)
