"""Concave dual functional: evaluation, derivatives, and damped-Newton solves.

G(w, z) = sum_i m_i w_i - sum_i int_{L_i} f*(w_i - c(x, z_i)) dx is concave in
w with a unique maximizer; at the maximizer the cell masses match the target
masses and the optimal source density is (f*)' of the c-transform.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import cost
from .geometry import Polygon
from .model import Box, PhiPolygon2D, PhiPolytope
from .tessellation import BackendError, GridOracle, LaguerreDiagram

ARMIJO = 1e-4
MAX_BACKTRACK = 55


@dataclass
class DualReport:
    w_star: np.ndarray
    G_value: float
    mass_residual: np.ndarray
    iterations: int
    backend: str
    converged: bool
    history: list | None = None  # dual values of accepted iterates

    def to_json_dict(self):
        return {
            "w": self.w_star.tolist(),
            "G": self.G_value,
            "residual": self.mass_residual.tolist(),
            "iters": self.iterations,
            "backend": self.backend,
            "converged": self.converged,
        }


class SolverError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def default_tolerance(constants):
    """1e-10 when gamma = 2 (piecewise-polynomial integrands), 1e-8 otherwise."""
    return 1e-10 if constants.gamma == 2.0 else 1e-8


# ---------------------------------------------------------------------------
# evaluation backends
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _GaussBox:
    """Tensor Gauss rule over a physical box, exact for low-degree polynomials."""

    points: np.ndarray
    weights: np.ndarray

    @classmethod
    def build(cls, lo, hi, n=4):
        return _gauss_box_cached(tuple(lo), tuple(hi), n)

    def integrate(self, vals):
        return self.weights @ vals


@lru_cache(maxsize=64)
def _gauss_box_cached(lo, hi, n):
    x, w = np.polynomial.legendre.leggauss(n)
    axes, wts = [], []
    for k in range(3):
        axes.append(0.5 * (hi[k] - lo[k]) * x + 0.5 * (hi[k] + lo[k]))
        wts.append(0.5 * (hi[k] - lo[k]) * w)
    P = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    W = np.prod(
        np.stack([g.ravel() for g in np.meshgrid(*wts, indexing="ij")], axis=1), axis=1
    )
    return _GaussBox(P, W)


class _BoxSingleSeedEval:
    """Closed-form single-seed path on a physical box, gamma = 2 only.

    Valid while the optimal positivity region covers the whole box, in which
    case (f*)' is linear and every integral is a box polynomial; the solve is
    a single exact Newton step landing on w* = (2 kappa + int c)/|X|.
    """

    backend = "box_exact"

    def __init__(self, domain, ensemble, constants):
        if ensemble.n != 1:
            raise BackendError("box-exact path supports a single seed only")
        if constants.gamma != 2.0:
            raise BackendError("box-exact path needs gamma = 2")
        self.domain = domain
        self.ensemble = ensemble
        self.constants = constants
        self.rule = _GaussBox.build(domain.lo, domain.hi, n=4)
        self.z = ensemble.z[0]
        self.coef = 1.0 / (2.0 * constants.kappa)
        self.volume = domain.volume()
        self.cost_at_nodes = cost.cost_c(self.rule.points, self.z, constants)
        self.cost_integral = float(self.rule.integrate(self.cost_at_nodes))
        self.max_cost = float(np.max(cost.cost_c(domain.corners(), self.z, constants)))

    def optimal_weight(self):
        return (2.0 * self.constants.kappa + self.cost_integral) / self.volume

    def _check(self, w):
        if w[0] < self.max_cost - 1e-12:
            raise BackendError(
                "positivity region does not cover the box; use the grid backend"
            )

    def at(self, w):
        w = np.asarray(w, dtype=float)
        self._check(w)
        return _BoxSingleSeedDiagram(self, w)


class _BoxSingleSeedDiagram:
    backend = "box_exact"

    def __init__(self, ev, w):
        self.ev = ev
        self.w = w.copy()
        self.ensemble = ev.ensemble
        self.constants = ev.constants
        self._sigma = ev.coef * (w[0] - ev.cost_at_nodes)

    def cell_masses(self):
        return np.array([self.ev.rule.integrate(self._sigma)])

    def cell_mass(self, i):
        return float(self.cell_masses()[i])

    def cell_moment(self, i):
        r = self.ev.rule
        return np.array([r.integrate(self._sigma * r.points[:, k]) for k in range(3)])

    def moments(self):
        return self.cell_moment(0)[None, :]

    def dual_value(self):
        r = self.ev.rule
        c = self.constants
        t = self.w[0] - self.ev.cost_at_nodes
        return float(self.ensemble.m[0] * self.w[0] - r.integrate(cost.fstar(t, c)))

    def grad_w(self):
        return self.ensemble.m - self.cell_masses()

    def hessian_ww(self):
        return np.array([[-self.ev.coef * self.ev.volume]])

    def gradz(self):
        r = self.ev.rule
        _, gy = cost.grad_cost(r.points, self.ev.z, self.constants)
        return np.array([[r.integrate(self._sigma * gy[:, k]) for k in range(3)]])

    def energy_terms(self):
        r = self.ev.rule
        tc = float(r.integrate(self._sigma * self.ev.cost_at_nodes))
        fe = float(r.integrate(self.constants.kappa * self._sigma**self.constants.gamma))
        return tc, fe


class _ExactEval:
    backend = "exact"

    def __init__(self, domain, ensemble, constants, degree):
        self.domain = domain
        self.ensemble = ensemble
        self.constants = constants
        self.degree = degree

    def at(self, w):
        return LaguerreDiagram(
            self.domain, w, self.ensemble, self.constants, quadrature_degree=self.degree
        )


class _GridEval:
    backend = "grid"

    def __init__(self, domain, ensemble, constants, spacing):
        cache = getattr(domain, "_oracle_cache", None)
        if cache is None:
            cache = {}
            try:
                domain._oracle_cache = cache
            except AttributeError:
                pass
        key = (id(constants), float(spacing))
        oracle = cache.get(key)
        if oracle is None:
            oracle = GridOracle(domain, constants, spacing)
            cache[key] = oracle
        self.context = oracle.context(ensemble)
        self.ensemble = ensemble
        self.constants = constants

    def at(self, w):
        return self.context.at(w)


def _make_evaluator(ensemble, domain, constants, backend="auto",
                    quadrature_degree=4, grid_spacing=None):
    if backend == "auto":
        if isinstance(domain, PhiPolytope):
            backend = "exact"
        elif isinstance(domain, Box) and ensemble.n == 1 and constants.gamma == 2.0:
            backend = "box_exact"
        else:
            backend = "grid"
    if backend == "exact":
        return _ExactEval(domain, ensemble, constants, quadrature_degree)
    if backend == "box_exact":
        return _BoxSingleSeedEval(domain, ensemble, constants)
    if backend == "grid":
        spacing = grid_spacing if grid_spacing is not None else 1.0 / 50
        return _GridEval(domain, ensemble, constants, spacing)
    raise BackendError(f"unknown backend {backend!r}")


def default_init(ensemble, domain, constants):
    """w_i = c(anchor, z_i) + 1: every positivity region contains the anchor."""
    anchor = domain.anchor_point(constants)
    return np.array([cost.cost_c(anchor, z, constants) + 1.0 for z in ensemble.z])


# ---------------------------------------------------------------------------
# public dual API
# ---------------------------------------------------------------------------

def eval_G(w, ensemble, domain, constants, **opts):
    return _make_evaluator(ensemble, domain, constants, **opts).at(w).dual_value()


def grad_w_G(w, ensemble, domain, constants, **opts):
    return _make_evaluator(ensemble, domain, constants, **opts).at(w).grad_w()


def hessian_ww_G(w, ensemble, domain, constants, **opts):
    return _make_evaluator(ensemble, domain, constants, **opts).at(w).hessian_ww()


def grad_z_G(w, ensemble, domain, constants, **opts):
    return _make_evaluator(ensemble, domain, constants, **opts).at(w).gradz()


def sigma_star_at(x, w_star, ensemble, constants):
    """(f*)'(max_i (w_i - c(x, z_i))): the optimal source density at x."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    scores = np.asarray(w_star)[None, :] - cost.cost_matrix(
        np.atleast_2d(x), ensemble.z, constants
    )
    val = cost.fstar_prime(scores.max(axis=1), constants)
    return float(val[0]) if single else val


@dataclass
class EnergyReport:
    transport_cost: float
    internal_energy: float
    total: float
    dual_value: float
    gap: float


def energy_components(w_star, ensemble, domain, constants, **opts):
    diagram = _make_evaluator(ensemble, domain, constants, **opts).at(w_star)
    tc, fe = diagram.energy_terms()
    g = diagram.dual_value()
    total = tc + fe
    return EnergyReport(tc, fe, total, g, abs(total - g))


# ---------------------------------------------------------------------------
# damped Newton solve of the optimal weights
# ---------------------------------------------------------------------------

def solve_w_star(ensemble, domain, constants, init=None, tol=None, max_iter=100,
                 backend="auto", quadrature_degree=4, grid_spacing=None):
    """Maximize G(., z): weights whose cell masses hit the target masses.

    Phase 1 runs backtracking gradient ascent until every cell carries at
    least half the smallest target mass; phase 2 is damped Newton with an
    Armijo test, the damping also keeping the mass floor.  Grid backends have
    no facet Hessian and use L-BFGS instead.
    """
    report, _ = _solve_impl(ensemble, domain, constants, init=init, tol=tol,
                            max_iter=max_iter, backend=backend,
                            quadrature_degree=quadrature_degree,
                            grid_spacing=grid_spacing)
    return report


def solve_and_diagram(ensemble, domain, constants, init=None, tol=None, max_iter=100,
                      backend="auto", quadrature_degree=4, grid_spacing=None):
    """Solve for w* and return the diagram at the optimum alongside the report."""
    return _solve_impl(ensemble, domain, constants, init=init, tol=tol,
                       max_iter=max_iter, backend=backend,
                       quadrature_degree=quadrature_degree, grid_spacing=grid_spacing)


def _solve_impl(ensemble, domain, constants, init=None, tol=None, max_iter=100,
                backend="auto", quadrature_degree=4, grid_spacing=None):
    if not ensemble.well_prepared:
        raise ValueError("ensemble is not well prepared (vertical gaps)")
    ev = _make_evaluator(ensemble, domain, constants, backend=backend,
                         quadrature_degree=quadrature_degree, grid_spacing=grid_spacing)
    if tol is None:
        tol = default_tolerance(constants)
        if ev.backend == "grid":
            # the midpoint grid resolves mass transfers only in node-volume
            # quanta, so the default tolerance scales with the node volume
            tol = max(tol, 12.0 * ev.context.oracle.node_volume)

    if ev.backend == "box_exact":
        w = np.array([ev.optimal_weight()])
        diagram = ev.at(w)
        residual = diagram.grad_w()
        iters = 0 if init is not None and np.allclose(init, w, atol=tol) else 1
        return DualReport(w, diagram.dual_value(), residual, iters, ev.backend, True), diagram

    if init is None:
        init = default_init(ensemble, domain, constants)
    w = np.asarray(init, dtype=float).copy()

    if ev.backend == "grid":
        return _solve_grid(ev, w, tol, max_iter)
    return _solve_newton(ev, w, tol, max_iter)


def _solve_newton(ev, w, tol, max_iter):
    m = ev.ensemble.m
    floor = 0.5 * m.min()
    diagram = ev.at(w)
    g_val = diagram.dual_value()
    masses = diagram.cell_masses()
    iters = 0
    history = [g_val]

    # phase 1: gradient ascent to positive masses
    while masses.min() < floor:
        if iters >= max_iter:
            raise SolverError(
                "phase-1 iteration cap exceeded",
                DualReport(w, g_val, m - masses, iters, ev.backend, False, history),
            )
        grad = m - masses
        t = 1.0
        for _ in range(MAX_BACKTRACK):
            trial = ev.at(w + t * grad)
            if trial.dual_value() > g_val:
                break
            t *= 0.5
        w = w + t * grad
        diagram = trial
        g_val = trial.dual_value()
        masses = trial.cell_masses()
        history.append(g_val)
        iters += 1

    # phase 2: damped Newton
    while True:
        grad = m - masses
        if np.abs(grad).max() <= tol:
            return DualReport(w, g_val, grad, iters, ev.backend, True, history), diagram
        if iters >= max_iter:
            raise SolverError(
                "Newton iteration cap exceeded",
                DualReport(w, g_val, grad, iters, ev.backend, False, history),
            )
        step = None
        try:
            H = diagram.hessian_ww()
            factor = cho_factor(-H)
            step = cho_solve(factor, grad)
        except (BackendError, np.linalg.LinAlgError, ValueError):
            step = grad
        slope = float(grad @ step)
        if slope <= 0.0:
            step = grad
            slope = float(grad @ grad)
        t = 1.0
        accepted = False
        resid = np.abs(grad).max()
        for _ in range(MAX_BACKTRACK):
            trial = ev.at(w + t * step)
            trial_masses = trial.cell_masses()
            good = (
                trial.dual_value() >= g_val + ARMIJO * t * slope
                or np.abs(m - trial_masses).max() <= 0.5 * resid
            )
            if trial_masses.min() >= floor and good:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            raise SolverError(
                "line search failed",
                DualReport(w, g_val, grad, iters, ev.backend, False, history),
            )
        w = w + t * step
        diagram = trial
        g_val = trial.dual_value()
        masses = trial_masses
        history.append(g_val)
        iters += 1


def _grid_newton_sweep(ev, w, diagram, grad, tol, budget):
    """Damped Newton on the band-estimated Hessian, 2-norm monotone.

    The accepted step length is remembered across iterations (grown fourfold,
    capped at 1) so staircase-limited configurations do not pay a full
    halving cascade every iteration; the sweep also stops once the residual
    stagnates at the node-flip floor.
    """
    m = ev.ensemble.m
    iters = 0
    t_start = 1.0
    window = []
    while iters < budget and np.abs(grad).max() > tol:
        resid = np.linalg.norm(grad)
        window.append(resid)
        if len(window) > 8:
            window.pop(0)
            if window[0] < 1.03 * window[-1]:
                break
        H = diagram.band_hessian()
        lam = 0.0
        if diagram.cell_masses().min() <= 0.0:
            lam = 1e-2 * max(np.abs(np.diag(H)).max(), 1e-12)
        try:
            step = cho_solve(cho_factor(-H + lam * np.eye(len(w))), grad)
        except (np.linalg.LinAlgError, ValueError):
            step = grad / np.maximum(diagram.fsecond_cell_sums(), 1e-12)
        t = t_start
        improved = False
        for _ in range(MAX_BACKTRACK):
            trial = ev.at(w + t * step)
            trial_grad = m - trial.cell_masses()
            if np.linalg.norm(trial_grad) < resid:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        t_start = min(4.0 * t, 1.0)
        w = w + t * step
        diagram = trial
        grad = trial_grad
        iters += 1
    return w, diagram, grad, iters


def _solve_grid(ev, w0, tol, max_iter):
    from scipy.optimize import minimize

    m = ev.ensemble.m
    diagram = ev.at(w0)
    grad = m - diagram.cell_masses()
    w = w0

    # band-Hessian Newton reaches the node-flip floor quickly; L-BFGS only
    # rescues the rare configuration where its Hessian estimate misleads
    w, diagram, grad, iters = _grid_newton_sweep(ev, w, diagram, grad, tol, max_iter)

    if np.abs(grad).max() > tol:
        def fun(wv):
            d = ev.at(wv)
            return -d.dual_value(), -(m - d.cell_masses())

        res = minimize(fun, w, jac=True, method="L-BFGS-B",
                       options={"maxiter": min(8 * max_iter, 600), "gtol": 0.25 * tol,
                                "ftol": 1e-18, "maxcor": 25})
        if -res.fun >= diagram.dual_value():
            w = res.x
            diagram = ev.at(w)
            grad = m - diagram.cell_masses()
        iters += int(res.nit)
        w, diagram, grad, extra = _grid_newton_sweep(ev, w, diagram, grad, tol, max_iter)
        iters += extra

    converged = bool(np.abs(grad).max() <= tol)
    report = DualReport(w, diagram.dual_value(), grad, iters, ev.backend, converged)
    if not converged:
        raise SolverError("grid solve did not reach the mass tolerance", report)
    return report, diagram


# ---------------------------------------------------------------------------
# fixed-source transport dual (uniform sigma), 2D and 3D
# ---------------------------------------------------------------------------

class _TransportCells2D:
    """Power cells of a Phi2d polygon domain, possibly non-convex pieces."""

    def __init__(self, seeds, domain, constants):
        self.seeds = np.asarray(seeds, dtype=float)
        self.domain = domain
        self.constants = constants

    def build(self, w):
        lift = cost.power_lift_2d(w, self.seeds, self.constants)
        n = len(self.seeds)
        cells = []
        base = self.domain.polygon
        for i in range(n):
            poly = base
            others = [j for j in range(n) if j != i]
            normals = np.empty((len(others), 2))
            offsets = np.empty(len(others))
            for k, j in enumerate(others):
                nrm, d = lift.bisector(i, j)
                ln = np.linalg.norm(nrm)
                normals[k] = nrm / ln
                offsets[k] = d / ln
            remaining = np.arange(len(others))
            while len(remaining) and not poly.is_empty:
                V = poly.vertices
                eps = 1e-10 * (1.0 + np.abs(V).max())
                viol = normals[remaining] @ V.T - offsets[remaining][:, None]
                maxv = viol.max(axis=1)
                live = maxv > eps
                if not live.any():
                    break
                k = remaining[np.argmax(maxv)]
                poly = poly.clip(normals[k], offsets[k], tag=("bis", others[k]))
                remaining = remaining[live]
                remaining = remaining[remaining != k]
            cells.append(poly)
        return cells, lift

    def areas(self, cells):
        return np.array([c.area for c in cells])

    def hessian(self, cells, lift, total):
        n = len(cells)
        H = np.zeros((n, n))
        for i in range(n):
            if cells[i].is_empty:
                continue
            for j in range(n):
                if j == i:
                    continue
                length = cells[i].edge_measure(("bis", j))
                if length > 0:
                    gap = np.linalg.norm(lift.y_hat[i] - lift.y_hat[j])
                    H[i, j] = length / (2.0 * gap * total)
        for i in range(n):
            H[i, i] = -(H[i].sum() - H[i, i])
        return H

    def objective(self, w, cells, masses_target, total):
        """Dual transport functional with uniform sigma (normalized Lebesgue)."""
        val = float(masses_target @ w)
        for i, c in enumerate(cells):
            if c.is_empty:
                continue
            form = cost.affine_cost_form_2d(self.seeds[i], self.constants)
            val += c.integrate_affine(np.asarray(form.linear), form.offset - w[i]) / total
        return val


class _TransportCells3D:
    """Power cells of a PhiPolytope domain under uniform sigma."""

    def __init__(self, seeds, domain, constants):
        self.seeds = np.asarray(seeds, dtype=float)
        self.domain = domain
        self.constants = constants

    def build(self, w):
        lift = cost.power_lift(w, self.seeds, self.constants)
        n = len(self.seeds)
        cells = []
        for i in range(n):
            poly = self.domain.polytope
            for j in range(n):
                if j == i or poly.is_empty:
                    continue
                nrm, d = lift.bisector(i, j)
                poly = poly.clip(nrm, d, tag=("bis", j))
            cells.append(poly)
        return cells, lift

    def areas(self, cells):
        return np.array([c.volume for c in cells])

    def hessian(self, cells, lift, total):
        n = len(cells)
        H = np.zeros((n, n))
        for i in range(n):
            if cells[i].is_empty:
                continue
            for j in range(n):
                if j == i:
                    continue
                k = cells[i].facet_index_by_tag(("bis", j))
                if k is None:
                    continue
                area = cells[i].facet_area(k)
                gap = np.linalg.norm(lift.y_hat[i] - lift.y_hat[j])
                H[i, j] = area / (2.0 * gap * total)
        for i in range(n):
            H[i, i] = -(H[i].sum() - H[i, i])
        return H

    def objective(self, w, cells, masses_target, total):
        val = float(masses_target @ w)
        for i, c in enumerate(cells):
            if c.is_empty:
                continue
            form = cost.affine_cost_form(self.seeds[i], self.constants)
            lin = np.asarray(form.linear)
            val += c.volume * (float(lin @ c.centroid) + form.offset - w[i]) / total
        return val


def solve_transport_weights(seeds, masses, domain, constants, tol=1e-10, max_iter=80):
    """Weights equalizing cell measures under uniform sigma (shift gauge w_0 = 0).

    Solves the plain semi-discrete transport dual: sigma is normalized
    Lebesgue measure on the domain, target masses are prescribed, and the
    first weight is pinned to zero since cells depend on differences only.
    """
    seeds = np.asarray(seeds, dtype=float)
    masses = np.asarray(masses, dtype=float)
    n = len(seeds)
    if n == 1:
        return np.zeros(1)
    if isinstance(domain, PhiPolygon2D):
        prob = _TransportCells2D(seeds, domain, constants)
        total = domain.polygon.area
    elif isinstance(domain, PhiPolytope):
        prob = _TransportCells3D(seeds, domain, constants)
        total = domain.polytope.volume
    else:
        raise BackendError("transport weights need a PhiPolygon2D or PhiPolytope domain")

    w = np.zeros(n)
    cells, lift = prob.build(w)
    measures = prob.areas(cells) / total
    obj = prob.objective(w, cells, masses, total)
    iters = 0

    def regauge(w):
        return w - w[0]

    # phase 1: regularized Newton while any cell is empty
    # (empty cells zero out Hessian rows, so plain Newton is unavailable)
    while measures.min() <= 0.0:
        if iters >= max_iter:
            raise SolverError("transport phase-1 cap exceeded", None)
        grad = masses - measures
        H = prob.hessian(cells, lift, total)
        lam = 0.1 * max(np.abs(np.diag(H)).max(), 1e-12)
        step = np.linalg.solve(-H[1:, 1:] + lam * np.eye(n - 1), grad[1:])
        full = np.zeros(n)
        full[1:] = step
        t = 1.0
        for _ in range(MAX_BACKTRACK):
            w_try = regauge(w + t * full)
            cells_try, lift_try = prob.build(w_try)
            obj_try = prob.objective(w_try, cells_try, masses, total)
            if obj_try > obj:
                break
            t *= 0.5
        w, cells, lift = w_try, cells_try, lift_try
        measures = prob.areas(cells) / total
        obj = obj_try
        iters += 1

    # phase 2: damped Newton keeping every cell above half its entry mass
    floor = 0.5 * min(measures.min(), masses.min())
    while True:
        grad = masses - measures
        if np.abs(grad).max() <= tol:
            return w
        if iters >= max_iter:
            raise SolverError("transport Newton cap exceeded", None)
        H = prob.hessian(cells, lift, total)
        try:
            factor = cho_factor(-H[1:, 1:])
            step = np.zeros(n)
            step[1:] = cho_solve(factor, grad[1:])
        except np.linalg.LinAlgError:
            step = grad - grad[0]
        slope = float(grad @ step)
        if slope <= 0:
            step = grad - grad[0]
            slope = float(grad @ step)
        t = 1.0
        accepted = False
        resid = np.abs(grad).max()
        for _ in range(MAX_BACKTRACK):
            w_try = regauge(w + t * step)
            cells_try, lift_try = prob.build(w_try)
            meas_try = prob.areas(cells_try) / total
            obj_try = prob.objective(w_try, cells_try, masses, total)
            # near the optimum the objective increase drowns in rounding, so a
            # clear residual drop is accepted as progress too
            good = obj_try >= obj + ARMIJO * t * slope or np.abs(masses - meas_try).max() <= 0.5 * resid
            if meas_try.min() >= floor and good:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            raise SolverError("transport line search failed", None)
        w, cells, lift = w_try, cells_try, lift_try
        measures = meas_try
        obj = obj_try
        iters += 1


def transport_cells_2d(seeds, w, domain, constants):
    """Clipped 2D cells for export/plotting."""
    prob = _TransportCells2D(seeds, domain, constants)
    cells, _ = prob.build(np.asarray(w, dtype=float))
    return cells
