"""Domain types, physical constants, and run configuration."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import cost
from .geometry import ConvexPolytope, Polygon

log = logging.getLogger(__name__)

MASS_SUM_TOL = 1e-12
VERTICAL_GAP_TOL = 1e-9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhysicalConstants:
    """Model parameters.

    gamma sits in (1, 2] although the compressible theory keeps the open
    interval; gamma = 2 is admitted because the closed-form single-seed
    benchmark requires it.
    """

    f_cor: float = 1.0
    g: float = 1.0
    gamma: float = 2.0
    kappa: float = 0.5
    delta: float = 0.1

    def __post_init__(self):
        if self.f_cor <= 0 or self.g <= 0 or self.kappa <= 0:
            raise ConfigError("f_cor, g, kappa must be positive")
        if not (1.0 < self.gamma <= 2.0):
            raise ConfigError("gamma must lie in (1, 2]")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError("delta must lie in (0, 1)")

    @property
    def gamma_prime(self):
        return self.gamma / (self.gamma - 1.0)

    @property
    def J(self):
        f = self.f_cor
        return np.array([[0.0, -f, 0.0], [f, 0.0, 0.0], [0.0, 0.0, 0.0]])

    @property
    def det_dphi(self):
        return self.f_cor ** (-4) / self.g

    def apply_J(self, v):
        """Row-wise J v for v of shape (..., 3); third component exactly zero."""
        v = np.asarray(v, dtype=float)
        out = np.zeros_like(v)
        out[..., 0] = -self.f_cor * v[..., 1]
        out[..., 1] = self.f_cor * v[..., 0]
        return out


class SeedEnsemble:
    """Discrete measure: N seeds in geostrophic space with a mass simplex.

    Masses are renormalized (with a logged warning) when their sum strays
    from 1 by more than 1e-12.  Seeds must be pairwise distinct; the ensemble
    is well prepared when third components are pairwise separated by more
    than 1e-9.
    """

    def __init__(self, z, m):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        m = np.asarray(m, dtype=float).ravel()
        if z.ndim != 2 or z.shape[1] != 3:
            raise ConfigError("seeds must have shape (N, 3)")
        if len(m) != len(z):
            raise ConfigError("one mass per seed required")
        if not np.all(np.isfinite(z)) or not np.all(np.isfinite(m)):
            raise ConfigError("seeds and masses must be finite")
        if np.any(m <= 0):
            raise ConfigError("masses must be strictly positive")
        total = m.sum()
        if abs(total - 1.0) > MASS_SUM_TOL:
            log.warning("mass sum %.3e off by %.3e; renormalizing", total, total - 1.0)
            m = m / total
        if len(z) > 1:
            d = np.linalg.norm(z[:, None, :] - z[None, :, :], axis=2)
            np.fill_diagonal(d, np.inf)
            if d.min() == 0.0:
                raise ConfigError("seeds must be pairwise distinct")
        z = z.copy()
        m = m.copy()
        z.setflags(write=False)
        m.setflags(write=False)
        self.z = z
        self.m = m

    @property
    def n(self):
        return len(self.m)

    def min_seed_distance(self):
        if self.n < 2:
            return np.inf
        d = np.linalg.norm(self.z[:, None, :] - self.z[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        return float(d.min())

    def min_vertical_gap(self):
        if self.n < 2:
            return np.inf
        z3 = self.z[:, 2]
        gap = np.abs(z3[:, None] - z3[None, :])
        np.fill_diagonal(gap, np.inf)
        return float(gap.min())

    @property
    def well_prepared(self):
        return self.min_vertical_gap() > VERTICAL_GAP_TOL

    def with_seeds(self, z):
        return SeedEnsemble(z, self.m)

    def to_json_dict(self):
        return {"z": self.z.tolist(), "m": self.m.tolist()}


@dataclass(frozen=True)
class EnsembleReport:
    mass_sum_deviation: float
    min_seed_distance: float
    min_vertical_gap: float
    in_geostrophic_domain: bool
    well_prepared: bool


def validate_ensemble(ensemble, constants):
    """Diagnostics: mass defect, seed separations, vertical gaps, domain check."""
    z3 = ensemble.z[:, 2]
    in_domain = bool(np.all((z3 > constants.delta) & (z3 < 1.0 / constants.delta)))
    return EnsembleReport(
        mass_sum_deviation=float(abs(ensemble.m.sum() - 1.0)),
        min_seed_distance=ensemble.min_seed_distance(),
        min_vertical_gap=ensemble.min_vertical_gap(),
        in_geostrophic_domain=in_domain,
        well_prepared=ensemble.well_prepared,
    )


# ---------------------------------------------------------------------------
# fluid domains
# ---------------------------------------------------------------------------

class Box:
    """Axis-aligned box in physical coordinates (grid / single-seed paths)."""

    variant = "box"

    def __init__(self, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ConfigError("box bounds must be 3-vectors")
        if np.any(hi <= lo):
            raise ConfigError("box needs positive side lengths")
        lo.setflags(write=False)
        hi.setflags(write=False)
        self.lo = lo
        self.hi = hi

    def volume(self, constants=None):
        return float(np.prod(self.hi - self.lo))

    def corners(self):
        return np.array(
            [
                [
                    (self.lo[0], self.hi[0])[i >> 2 & 1],
                    (self.lo[1], self.hi[1])[i >> 1 & 1],
                    (self.lo[2], self.hi[2])[i & 1],
                ]
                for i in range(8)
            ]
        )

    def bounding_radius(self, constants=None):
        return float(np.max(np.linalg.norm(self.corners(), axis=1)))

    def physical_bounds(self, constants=None):
        return self.lo.copy(), self.hi.copy()

    def contains(self, x, constants=None, tol=1e-12):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=1)

    def anchor_point(self, constants=None):
        return 0.5 * (self.lo + self.hi)

    def sample(self, rng, n, constants=None):
        return self.lo + rng.random((n, 3)) * (self.hi - self.lo)

    def to_json_dict(self):
        return {"variant": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


class PhiPolytope:
    """Fluid domain given as a convex polytope in Phi coordinates.

    The physical domain is the image of the polytope under phi_map; its
    boundary is curved in physical space by construction.
    """

    variant = "phi_polytope"

    def __init__(self, polytope):
        if polytope.is_empty:
            raise ConfigError("domain polytope must have nonempty interior")
        self.polytope = polytope

    def volume(self, constants):
        return constants.det_dphi * self.polytope.volume

    def physical_bounds(self, constants):
        """Safe axis-aligned physical bounds.

        x1 and x2 are linear in Phi coordinates, so their ranges are exact.
        x3 is concave in Phi coordinates: its minimum over the polytope sits
        at a vertex (exact), its maximum is bounded by the vertex maximum of
        the linear part.
        """
        u = self.polytope.vertices
        f2 = constants.f_cor**2
        lo1, hi1 = u[:, 0].min() / f2, u[:, 0].max() / f2
        lo2, hi2 = u[:, 1].min() / f2, u[:, 1].max() / f2
        x3_vertex = (u[:, 2] - 0.5 * (u[:, 0] ** 2 + u[:, 1] ** 2) / f2) / constants.g
        lo3 = x3_vertex.min()
        hi3 = u[:, 2].max() / constants.g
        return np.array([lo1, lo2, lo3]), np.array([hi1, hi2, hi3])

    def bounding_radius(self, constants):
        lo, hi = self.physical_bounds(constants)
        m = np.maximum(np.abs(lo), np.abs(hi))
        return float(np.linalg.norm(m))

    def contains(self, x, constants, tol=1e-9):
        u = cost.phi_inverse(np.atleast_2d(np.asarray(x, dtype=float)), constants)
        return self.polytope.contains(u, tol=tol)

    def anchor_point(self, constants):
        return cost.phi_map(self.polytope.centroid, constants)

    def sample(self, rng, n, constants):
        """Uniform physical samples by rejection from the bounding box."""
        lo, hi = self.physical_bounds(constants)
        out = np.empty((0, 3))
        while len(out) < n:
            cand = lo + rng.random((4 * n, 3)) * (hi - lo)
            hit = cand[self.contains(cand, constants)]
            out = np.vstack([out, hit])
        return out[:n]

    def to_json_dict(self):
        d = self.polytope.to_json_dict()
        d["variant"] = "phi_polytope"
        return d


class PhiPolygon2D:
    """Convex-or-not polygon in Phi2d coordinates for the 2D cost path."""

    variant = "phi_polygon2d"

    def __init__(self, polygon):
        if polygon.is_empty:
            raise ConfigError("domain polygon must be nonempty")
        self.polygon = polygon

    @classmethod
    def from_physical_rectangle(cls, lo, hi, constants, segments=1024):
        """Polygonalize the Phi2d image of a physical rectangle.

        The top and bottom sides become parabolic arcs; each is sampled with
        segments/2 chords (the only approximation on the 2D exact path).
        """
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        k = max(int(segments) // 2, 1)
        x1 = np.linspace(lo[0], hi[0], k + 1)
        bottom = cost.phi2d_inverse(np.stack([x1, np.full_like(x1, lo[1])], axis=1), constants)
        top = cost.phi2d_inverse(np.stack([x1[::-1], np.full_like(x1, hi[1])], axis=1), constants)
        verts = np.vstack([bottom, top])
        tags = ["bottom"] * k + ["right"] + ["top"] * k + ["left"]
        return cls(Polygon(verts, tags))

    def volume(self, constants):
        return self.polygon.area * constants.f_cor ** (-2) / constants.g

    def to_json_dict(self):
        d = self.polygon.to_json_dict()
        d["variant"] = "phi_polygon2d"
        return d


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimulationConfig:
    tau: float = 1.0
    dt: float = 1e-3
    newton_tol: float | None = None
    newton_max_iter: int = 100
    quadrature_degree: int = 4
    grid_resolution: int = 50
    record_stride: int = 1

    def __post_init__(self):
        if self.tau <= 0 or self.dt <= 0:
            raise ConfigError("tau and dt must be positive")
        if self.newton_tol is not None and self.newton_tol <= 0:
            raise ConfigError("newton_tol must be positive")
        if self.newton_max_iter <= 0 or self.record_stride <= 0:
            raise ConfigError("iteration counts must be positive")
        if self.quadrature_degree < 1 or self.grid_resolution < 1:
            raise ConfigError("quadrature degree and grid resolution must be >= 1")


@dataclass
class RunConfig:
    constants: PhysicalConstants
    domain: object
    sim: SimulationConfig
    ensemble: SeedEnsemble | None = None
    quantize: dict | None = None
    extra: dict = field(default_factory=dict)


def domain_from_dict(d, constants):
    variant = d.get("variant")
    if variant == "box":
        return Box(d["lo"], d["hi"])
    if variant == "phi_polytope":
        if "vertices" in d and "facets" not in d:
            return PhiPolytope(ConvexPolytope.from_point_cloud(np.asarray(d["vertices"])))
        if "vertices" in d:
            verts = np.asarray(d["vertices"], dtype=float)
            return PhiPolytope(ConvexPolytope.from_point_cloud(verts))
        raise ConfigError("phi_polytope domain needs vertices")
    if variant == "phi_polygon2d":
        seg = int(d.get("segments", 1024))
        return PhiPolygon2D.from_physical_rectangle(
            d["physical_lo"], d["physical_hi"], constants, segments=seg
        )
    raise ConfigError(f"unknown domain variant: {variant!r}")


def load_config(source):
    """Build a RunConfig from a JSON file path, JSON string, or dict."""
    if isinstance(source, dict):
        raw = source
    else:
        text = str(source)
        if text.strip().startswith("{"):
            raw = json.loads(text)
        else:
            with open(text) as fh:
                raw = json.load(fh)
    try:
        constants = PhysicalConstants(**raw.get("constants", {}))
        domain = domain_from_dict(raw["domain"], constants)
        sim = SimulationConfig(**raw.get("sim", {}))
        ens_raw = raw.get("ensemble")
        ensemble = None
        quantize = None
        if ens_raw is not None:
            if "quantize" in ens_raw:
                quantize = dict(ens_raw["quantize"])
            else:
                ensemble = SeedEnsemble(ens_raw["z"], ens_raw["m"])
        known = {"constants", "domain", "sim", "ensemble"}
        extra = {k: v for k, v in raw.items() if k not in known}
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return RunConfig(constants=constants, domain=domain, sim=sim, ensemble=ensemble,
                     quantize=quantize, extra=extra)
