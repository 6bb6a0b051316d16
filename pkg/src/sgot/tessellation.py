"""c-Laguerre tessellations and their cell integrals.

Two backends: the exact backend clips the Phi-space domain polytope by the
bisector half-spaces of the lifted power diagram (plus one positivity
half-space per cell, which removes the kink of (f*)' so that every quadrature
sees a smooth integrand), and a brute-force grid oracle used as referee.
"""

from __future__ import annotations

import numpy as np

from . import cost
from .geometry import ConvexPolytope, integrate_facet, integrate_volume, tetrahedron_rule
from .model import PhiPolytope

BISECTOR_TOL = 1e-10


class BackendError(RuntimeError):
    pass


def assign_point(x, w, ensemble, constants):
    """Index of the cell containing x: argmin_i c(x, z_i) - w_i, lowest index wins ties."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    scores = cost.cost_matrix(np.atleast_2d(x), ensemble.z, constants) - np.asarray(w)[None, :]
    idx = np.argmin(scores, axis=1)
    return int(idx[0]) if single else idx


def recover_physical_variables(x, diagram, constants=None):
    """Geostrophic velocity (v1, v2) and potential temperature at x.

    The transport map sends x to (x1 + v2/f^2, x2 - v1/f^2, theta), so the
    assigned seed determines all three physical fields.
    """
    constants = constants or diagram.constants
    i = assign_point(x, diagram.w, diagram.ensemble, constants)
    z = diagram.ensemble.z[i]
    f2 = constants.f_cor**2
    v2 = f2 * (z[0] - x[0])
    v1 = -f2 * (z[1] - x[1])
    return np.array([v1, v2]), float(z[2])


class LaguerreDiagram:
    """Exact tessellation of a PhiPolytope domain for weights w and seeds z.

    cells[i] is the geometric cell (bisectors only; the cells tile the
    domain).  support_cells[i] additionally intersects {w_i - c(., z_i) >= 0},
    the region where the optimal density can be positive; all mass, moment,
    and Hessian integrals run over support cells.  Empty cells are retained.
    """

    backend = "exact"

    def __init__(self, domain, w, ensemble, constants, quadrature_degree=4,
                 check_prepared=True, threads=1):
        if not isinstance(domain, PhiPolytope):
            raise BackendError("exact backend needs a PhiPolytope domain")
        if check_prepared and not ensemble.well_prepared:
            raise ValueError("ensemble is not well prepared (vertical gaps)")
        self.domain = domain
        self.w = np.asarray(w, dtype=float).copy()
        self.ensemble = ensemble
        self.constants = constants
        self.degree = int(quadrature_degree)
        self.lift = cost.power_lift(self.w, ensemble.z, constants)
        n = ensemble.n
        lin = np.empty((n, 3))
        off = np.empty(n)
        for i in range(n):
            lin[i], off[i] = cost.support_form(self.w[i], ensemble.z[i], constants)
        self._lin = lin
        self._off = off
        base = domain.polytope

        def build(i):
            cell = self._build_cell(i, base)
            support = cell.clip(-lin[i], off[i], tag=("pos",)) if not cell.is_empty else cell
            return cell, support

        if threads > 1 and n > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                built = list(pool.map(build, range(n)))
        else:
            built = [build(i) for i in range(n)]
        self.cells = [c for c, _ in built]
        self.support_cells = [s for _, s in built]
        self._mass_cache = None
        self._quad_cache = {}

    def _build_cell(self, i, base):
        n_seeds = self.ensemble.n
        others = [j for j in range(n_seeds) if j != i]
        if not others:
            return base
        normals = np.empty((len(others), 3))
        offsets = np.empty(len(others))
        for k, j in enumerate(others):
            nrm, d = self.lift.bisector(i, j)
            ln = np.linalg.norm(nrm)
            normals[k] = nrm / ln
            offsets[k] = d / ln
        remaining = np.arange(len(others))
        cell = base
        while len(remaining) and not cell.is_empty:
            V = cell.vertices
            eps = BISECTOR_TOL * (1.0 + np.abs(V).max())
            viol = normals[remaining] @ V.T - offsets[remaining][:, None]
            maxv = viol.max(axis=1)
            live = maxv > eps
            if not live.any():
                break
            pick = np.argmax(maxv)
            k = remaining[pick]
            cell = cell.clip(normals[k], offsets[k], tag=("bis", others[k]))
            remaining = remaining[live]
            remaining = remaining[remaining != k]
        return cell

    # -- per-cell integrands --------------------------------------------------

    def _support_value(self, i, pts):
        return pts @ self._lin[i] + self._off[i]

    def _quad(self, i):
        """Cached volume quadrature (points, weights) of support cell i."""
        cached = self._quad_cache.get(i)
        if cached is not None:
            return cached
        cellp = self.support_cells[i]
        tets = cellp.tetrahedra()
        ref, w = tetrahedron_rule(self.degree)
        origins = tets[:, 0, :]
        edges = tets[:, 1:, :] - tets[:, :1, :]
        dets = np.abs(np.linalg.det(edges))
        pts = (origins[:, None, :] + np.einsum("qi,tij->tqj", ref, edges)).reshape(-1, 3)
        wts = (dets[:, None] * w[None, :]).ravel()
        self._quad_cache[i] = (pts, wts)
        return pts, wts

    def cell_mass(self, i):
        cellp = self.support_cells[i]
        if cellp.is_empty:
            return 0.0
        pts, wts = self._quad(i)
        vals = cost.fstar_prime(self._support_value(i, pts), self.constants)
        return self.constants.det_dphi * float(wts @ vals)

    def cell_masses(self):
        if self._mass_cache is None:
            self._mass_cache = np.array([self.cell_mass(i) for i in range(self.ensemble.n)])
        return self._mass_cache

    def cell_moment(self, i):
        """Integral of x sigma(x) over cell i, in physical coordinates."""
        cellp = self.support_cells[i]
        if cellp.is_empty:
            return np.zeros(3)
        pts, wts = self._quad(i)
        s = cost.fstar_prime(self._support_value(i, pts), self.constants)
        vals = cost.phi_map(pts, self.constants) * s[:, None]
        return self.constants.det_dphi * (wts @ vals)

    def moments(self):
        return np.array([self.cell_moment(i) for i in range(self.ensemble.n)])

    def fstar_cell_integral(self, i):
        cellp = self.support_cells[i]
        if cellp.is_empty:
            return 0.0
        pts, wts = self._quad(i)
        vals = cost.fstar(self._support_value(i, pts), self.constants)
        return self.constants.det_dphi * float(wts @ vals)

    def fsecond_cell_integral(self, i):
        cellp = self.support_cells[i]
        if cellp.is_empty:
            return 0.0
        pts, wts = self._quad(i)
        vals = cost.fstar_second(self._support_value(i, pts), self.constants)
        return self.constants.det_dphi * float(wts @ vals)

    def transport_cost_integral(self, i):
        """Integral of c(x, z_i) sigma(x) over cell i."""
        cellp = self.support_cells[i]
        if cellp.is_empty:
            return 0.0
        pts, wts = self._quad(i)
        s = self._support_value(i, pts)
        vals = (self.w[i] - s) * cost.fstar_prime(s, self.constants)
        return self.constants.det_dphi * float(wts @ vals)

    def internal_energy_integral(self, i):
        """Integral of kappa sigma^gamma over cell i."""
        cellp = self.support_cells[i]
        if cellp.is_empty:
            return 0.0
        pts, wts = self._quad(i)
        s = cost.fstar_prime(self._support_value(i, pts), self.constants)
        vals = self.constants.kappa * s**self.constants.gamma
        return self.constants.det_dphi * float(wts @ vals)

    def gradz_cell_integral(self, i):
        """Integral of grad_y c(x, z_i) sigma(x) over cell i (3-vector)."""
        cellp = self.support_cells[i]
        if cellp.is_empty:
            return np.zeros(3)
        pts, wts = self._quad(i)
        s = cost.fstar_prime(self._support_value(i, pts), self.constants)
        _, gy = cost.grad_cost(cost.phi_map(pts, self.constants), self.ensemble.z[i],
                               self.constants)
        vals = gy * s[:, None]
        return self.constants.det_dphi * (wts @ vals)

    def facet_fstar_integral(self, i, j):
        """Facet term of the Hessian, 0 when cells i and j share no facet.

        Equals det(DPhi)/(2 |yhat_i - yhat_j|) times the Phi-space surface
        integral of (f*)'(w_i - c(., z_i)) over the shared bisector facet;
        the prefactor absorbs the physical gradient gap and area Jacobian.
        """
        if i == j:
            raise ValueError("facet integral needs i != j")
        cellp = self.support_cells[i]
        if cellp.is_empty:
            return 0.0
        k = cellp.facet_index_by_tag(("bis", j))
        if k is None:
            return 0.0
        gap = np.linalg.norm(self.lift.y_hat[i] - self.lift.y_hat[j])
        fn = lambda p: cost.fstar_prime(self._support_value(i, p), self.constants)
        surf = integrate_facet(cellp, k, fn, self.degree)
        return self.constants.det_dphi / (2.0 * gap) * surf

    # -- diagram-level quantities ----------------------------------------------

    def volumes(self):
        """Phi-space volumes of the geometric cells (they tile the domain)."""
        return np.array([c.volume for c in self.cells])

    def neighbor_pairs(self):
        pairs = set()
        for i, c in enumerate(self.cells):
            for t in c.tags:
                if isinstance(t, tuple) and len(t) == 2 and t[0] == "bis":
                    pairs.add((min(i, t[1]), max(i, t[1])))
        return sorted(pairs)

    def dual_value(self):
        total = float(self.ensemble.m @ self.w)
        for i in range(self.ensemble.n):
            total -= self.fstar_cell_integral(i)
        return total

    def grad_w(self):
        return self.ensemble.m - self.cell_masses()

    def hessian_ww(self):
        """Symmetric Hessian of the dual functional in w.

        Requires every support cell to carry positive mass; otherwise the
        second derivatives are not defined and callers must fall back to
        gradient steps.
        """
        masses = self.cell_masses()
        if np.any(masses <= 0.0):
            raise BackendError("Hessian needs positive cell masses")
        n = self.ensemble.n
        H = np.zeros((n, n))
        for i, j in self.neighbor_pairs():
            v = self.facet_fstar_integral(i, j)
            H[i, j] = v
            H[j, i] = v
        for i in range(n):
            H[i, i] = -self.fsecond_cell_integral(i) - H[i].sum() + H[i, i]
        return H

    def gradz(self):
        return np.array([self.gradz_cell_integral(i) for i in range(self.ensemble.n)])

    def energy_terms(self):
        tc = sum(self.transport_cost_integral(i) for i in range(self.ensemble.n))
        fe = sum(self.internal_energy_integral(i) for i in range(self.ensemble.n))
        return float(tc), float(fe)

    def to_json_dict(self):
        cells = []
        for i, c in enumerate(self.cells):
            phys = cost.phi_map(c.vertices, self.constants) if not c.is_empty else np.zeros((0, 3))
            cells.append(
                {
                    "phi_vertices": c.vertices.tolist(),
                    "physical_vertices": phys.tolist(),
                    "facets": [f.tolist() for f in c.facets],
                }
            )
        return {
            "backend": self.backend,
            "w": self.w.tolist(),
            "z": self.ensemble.z.tolist(),
            "masses": self.cell_masses().tolist(),
            "neighbors": [list(p) for p in self.neighbor_pairs()],
            "cells": cells,
        }


# ---------------------------------------------------------------------------
# grid oracle
# ---------------------------------------------------------------------------

class GridOracle:
    """Cell-centered midpoint grid over the physical domain.

    The referee backend: every integral is a plain sum over nodes assigned by
    direct argmin of c(x, z_i) - w_i.  Spacing is the requested node pitch;
    each axis gets round(extent / spacing) cells.
    """

    def __init__(self, domain, constants, spacing):
        lo, hi = domain.physical_bounds(constants)
        counts = [max(1, int(round((hi[k] - lo[k]) / spacing))) for k in range(3)]
        steps = [(hi[k] - lo[k]) / counts[k] for k in range(3)]
        axes = [lo[k] + (np.arange(counts[k]) + 0.5) * steps[k] for k in range(3)]
        # build slab by slab so only interior nodes are retained
        kept = []
        slab_yz = np.stack(
            [g.ravel() for g in np.meshgrid(axes[1], axes[2], indexing="ij")], axis=1
        )
        for x1 in axes[0]:
            slab = np.column_stack([np.full(len(slab_yz), x1), slab_yz])
            inside = domain.contains(slab, constants)
            if inside.any():
                kept.append(slab[inside])
        self.domain = domain
        self.constants = constants
        self.nodes = np.vstack(kept) if kept else np.zeros((0, 3))
        self.node_volume = float(np.prod(steps))
        self.spacing = spacing

    def volume(self):
        return len(self.nodes) * self.node_volume

    def context(self, ensemble, cache_limit=200_000_000):
        return GridContext(self, ensemble, cache_limit=cache_limit)


class GridContext:
    """Grid evaluations for a fixed seed set; the cost matrix is cached."""

    def __init__(self, oracle, ensemble, cache_limit=200_000_000):
        self.oracle = oracle
        self.ensemble = ensemble
        self.constants = oracle.constants
        m, n = len(oracle.nodes), ensemble.n
        self._chunked = m * n * 8 > cache_limit
        self._chunk_rows = max(1, int(cache_limit / max(n * 8, 1)))
        if not self._chunked:
            self._cost = cost.cost_matrix(oracle.nodes, ensemble.z, oracle.constants)
        else:
            self._cost = None

    def _iter_blocks(self):
        nodes = self.oracle.nodes
        if not self._chunked:
            yield 0, len(nodes), self._cost
            return
        for start in range(0, len(nodes), self._chunk_rows):
            stop = min(start + self._chunk_rows, len(nodes))
            yield start, stop, cost.cost_matrix(nodes[start:stop], self.ensemble.z, self.constants)

    def at(self, w):
        return GridDiagram(self, np.asarray(w, dtype=float))


class GridDiagram:
    """Per-weight grid fields: assignment, density, and integral reductions.

    Mass, dual value, and the Hessian diagonal are computed on construction;
    moments, energy terms, and seed-gradient reductions are evaluated lazily
    (solver iterations never touch them).
    """

    backend = "grid"

    def __init__(self, context, w):
        self.context = context
        self.w = w.copy()
        self.ensemble = context.ensemble
        self.constants = context.constants
        n = self.ensemble.n
        vol = context.oracle.node_volume
        cst = self.constants
        idx_all = []
        top_all = []
        for start, stop, cblock in context._iter_blocks():
            scores = self.w[None, :] - cblock
            idx = np.argmax(scores, axis=1)
            top = scores[np.arange(len(idx)), idx]
            idx_all.append(idx)
            top_all.append(top)
        self.assignment = np.concatenate(idx_all)
        self.top_scores = np.concatenate(top_all)
        self.sigma_nodes = cost.fstar_prime(self.top_scores, cst)
        self._masses = np.bincount(self.assignment, weights=self.sigma_nodes,
                                   minlength=n) * vol
        self._fstar_sum = None
        self._fsecond = None
        self._moments = None
        self._gradz = None
        self._energy = None

    def cell_masses(self):
        return self._masses

    def cell_mass(self, i):
        return float(self._masses[i])

    def _moment_reduction(self):
        if self._moments is None:
            n = self.ensemble.n
            vol = self.context.oracle.node_volume
            nodes = self.context.oracle.nodes
            idx = self.assignment
            sigma = self.sigma_nodes
            self._moments = np.stack(
                [
                    np.bincount(idx, weights=sigma * nodes[:, k], minlength=n) * vol
                    for k in range(3)
                ],
                axis=1,
            )
        return self._moments

    def cell_moment(self, i):
        return self._moment_reduction()[i]

    def moments(self):
        return self._moment_reduction()

    def dual_value(self):
        if self._fstar_sum is None:
            vol = self.context.oracle.node_volume
            self._fstar_sum = float(cost.fstar(self.top_scores, self.constants).sum()) * vol
        return float(self.ensemble.m @ self.w) - self._fstar_sum

    def grad_w(self):
        return self.ensemble.m - self._masses

    def hessian_ww(self):
        raise BackendError("grid backend has no facet integrals for the Hessian")

    def fsecond_cell_sums(self):
        """Per-cell sums of (f*)''(w_i - c): the a.e. diagonal of the grid Hessian."""
        if self._fsecond is None:
            vol = self.context.oracle.node_volume
            self._fsecond = np.bincount(
                self.assignment,
                weights=cost.fstar_second(self.top_scores, self.constants),
                minlength=self.ensemble.n,
            ) * vol
        return self._fsecond

    def band_hessian(self):
        """Newton-ready Hessian estimate from nodes near cell interfaces.

        The facet terms of the exact Hessian are recovered by counting nodes
        whose score margin to a rival seed falls inside a band of roughly two
        node layers: the band volume divided by the band width converges to
        the facet integral of sigma / |grad_x c_i - grad_x c_j|.
        """
        ctx = self.context
        n = self.ensemble.n
        z = self.ensemble.z
        cst = self.constants
        center = ctx.oracle.nodes.mean(axis=0)
        gx, _ = cost.grad_cost(center[None, :].repeat(n, axis=0), z, cst)
        dg = np.linalg.norm(gx[:, None, :] - gx[None, :, :], axis=2)
        np.fill_diagonal(dg, 1.0)
        delta = 2.0 * ctx.oracle.spacing * dg
        vol = ctx.oracle.node_volume
        H = np.zeros(n * n)
        for start, stop, cblock in ctx._iter_blocks():
            scores = self.w[None, :] - cblock
            idx = np.argmax(scores, axis=1)
            top = scores[np.arange(len(idx)), idx]
            sigma = cost.fstar_prime(top, cst)
            margins = top[:, None] - scores
            rows, cols = np.nonzero((margins > 0.0) & (margins < delta[idx, :]))
            if len(rows):
                own = idx[rows]
                H += np.bincount(own * n + cols,
                                 weights=sigma[rows] * vol / delta[own, cols],
                                 minlength=n * n)
        H = H.reshape(n, n)
        H = 0.5 * (H + H.T)
        np.fill_diagonal(H, 0.0)
        np.fill_diagonal(H, -(self.fsecond_cell_sums() + H.sum(axis=1)))
        return H

    def gradz(self):
        if self._gradz is None:
            n = self.ensemble.n
            vol = self.context.oracle.node_volume
            nodes = self.context.oracle.nodes
            idx = self.assignment
            sigma = self.sigma_nodes
            z = self.ensemble.z
            f2 = self.constants.f_cor**2
            z3 = z[idx, 2]
            c_sel = self.w[idx] - self.top_scores
            gy1 = f2 * (z[idx, 0] - nodes[:, 0]) / z3
            gy2 = f2 * (z[idx, 1] - nodes[:, 1]) / z3
            gy3 = -c_sel / z3
            self._gradz = np.stack(
                [
                    np.bincount(idx, weights=sigma * gy, minlength=n) * vol
                    for gy in (gy1, gy2, gy3)
                ],
                axis=1,
            )
        return self._gradz

    def energy_terms(self):
        if self._energy is None:
            vol = self.context.oracle.node_volume
            cst = self.constants
            c_sel = self.w[self.assignment] - self.top_scores
            tc = float((c_sel * self.sigma_nodes).sum()) * vol
            fe = float((cst.kappa * self.sigma_nodes**cst.gamma).sum()) * vol
            self._energy = (tc, fe)
        return self._energy


def build_diagram(domain, w, ensemble, constants, backend="auto",
                  quadrature_degree=4, grid_spacing=None, threads=1):
    """Construct the tessellation on the requested backend.

    auto picks exact for PhiPolytope domains and the grid oracle otherwise;
    threads parallelizes per-cell construction of the exact backend.
    """
    if backend == "auto":
        backend = "exact" if isinstance(domain, PhiPolytope) else "grid"
    if backend == "exact":
        return LaguerreDiagram(domain, w, ensemble, constants,
                               quadrature_degree=quadrature_degree, threads=threads)
    if backend == "grid":
        if grid_spacing is None:
            grid_spacing = 1.0 / 50
        oracle = GridOracle(domain, constants, grid_spacing)
        if not ensemble.well_prepared:
            raise ValueError("ensemble is not well prepared (vertical gaps)")
        return oracle.context(ensemble).at(np.asarray(w, dtype=float))
    raise BackendError(f"unknown backend {backend!r}")


def cell_mass(diagram, i):
    return diagram.cell_mass(i)


def cell_masses(diagram):
    return diagram.cell_masses()


def cell_moment(diagram, i):
    return diagram.cell_moment(i)


def facet_fstar_integral(diagram, i, j):
    return diagram.facet_fstar_integral(i, j)
