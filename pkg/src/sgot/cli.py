"""Command-line interface: config-driven runs with atomic file outputs.

Exit codes: 0 success, 1 configuration/validation error, 2 solver
non-convergence.  All randomized paths are reproducible through --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from . import analytic, dual, dynamics, measures, model
from .dual import SolverError
from .model import ConfigError, PhiPolygon2D, SeedEnsemble


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(path, obj):
    _atomic_write(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _trajectory_csv(record):
    lines = ["t,i,z1,z2,z3,C1,C2,C3,E,newton_iters"]
    for k, t in enumerate(record.times):
        for i in range(record.n_seeds):
            z = record.seeds[k, i]
            c = record.centroids[k, i]
            lines.append(
                f"{t!r},{i},{z[0]!r},{z[1]!r},{z[2]!r},"
                f"{c[0]!r},{c[1]!r},{c[2]!r},{record.energy[k]!r},{record.newton_iters[k]}"
            )
    return "\n".join(lines) + "\n"


def _resolve_ensemble(cfg, rng):
    if cfg.ensemble is not None:
        return cfg.ensemble
    if cfg.quantize is None:
        raise ConfigError("config needs an ensemble or a quantize block")
    q = dict(cfg.quantize)
    n = int(q.pop("n"))
    kind = q.pop("density", "uniform")
    lo = np.asarray(q.pop("lo", getattr(cfg.domain, "lo", None)), dtype=float)
    hi = np.asarray(q.pop("hi", getattr(cfg.domain, "hi", None)), dtype=float)
    if kind == "uniform":
        density = lambda pts: np.ones(len(pts))
    elif kind == "gaussian":
        center = np.asarray(q.pop("center", 0.5 * (lo + hi)), dtype=float)
        width = float(q.pop("width", 0.25 * float(np.min(hi - lo))))
        density = lambda pts: np.exp(-np.sum((pts - center) ** 2, axis=1) / (2 * width**2))
    elif kind == "steady":
        state = analytic.steady_state(cfg.domain, cfg.constants)
        density = state.density
    else:
        raise ConfigError(f"unknown quantize density {kind!r}")
    return measures.quantize(density, n, bounds=(lo, hi))


def cmd_simulate(cfg, args):
    ensemble = _resolve_ensemble(cfg, np.random.default_rng(args.seed))
    record = dynamics.simulate(cfg.sim, ensemble, cfg.domain, cfg.constants,
                               backend=args.backend)
    out = args.out
    csv_path = os.path.join(out, "trajectory.csv" if record.completed else "trajectory.csv.partial")
    _atomic_write(csv_path, _trajectory_csv(record))
    report = {
        "completed": record.completed,
        "failure": record.failure,
        "steps_recorded": int(len(record.times)),
        "bounding_radius": record.bounding_radius,
    }
    if len(record.times) > 1:
        cons = dynamics.conservation_report(record)
        report["max_relative_energy_drift"] = cons.max_relative_energy_drift
        report["max_position_bound_violation"] = cons.max_position_bound_violation
        report["max_velocity_bound_violation"] = cons.max_velocity_bound_violation
        report["max_z3_drift"] = cons.max_z3_drift
    _dump_json(os.path.join(out, "report.json"), report)
    return 0 if record.completed else 2


def cmd_solve_dual(cfg, args):
    ensemble = _resolve_ensemble(cfg, np.random.default_rng(args.seed))
    report = dual.solve_w_star(
        ensemble, cfg.domain, cfg.constants,
        tol=cfg.sim.newton_tol, max_iter=cfg.sim.newton_max_iter,
        backend=args.backend, quadrature_degree=cfg.sim.quadrature_degree,
        grid_spacing=1.0 / cfg.sim.grid_resolution,
    )
    energy = dual.energy_components(
        report.w_star, ensemble, cfg.domain, cfg.constants,
        backend=args.backend, quadrature_degree=cfg.sim.quadrature_degree,
        grid_spacing=1.0 / cfg.sim.grid_resolution,
    )
    payload = report.to_json_dict()
    payload["gap"] = energy.gap
    payload["energy"] = energy.total
    _dump_json(os.path.join(args.out, "dual_report.json"), payload)
    return 0


def cmd_tessellate(cfg, args):
    from .tessellation import build_diagram

    ensemble = _resolve_ensemble(cfg, np.random.default_rng(args.seed))
    report = dual.solve_w_star(
        ensemble, cfg.domain, cfg.constants,
        tol=cfg.sim.newton_tol, max_iter=cfg.sim.newton_max_iter,
        backend=args.backend, quadrature_degree=cfg.sim.quadrature_degree,
        grid_spacing=1.0 / cfg.sim.grid_resolution,
    )
    diagram = build_diagram(cfg.domain, report.w_star, ensemble, cfg.constants,
                            backend="exact", quadrature_degree=cfg.sim.quadrature_degree,
                            threads=args.threads)
    _dump_json(os.path.join(args.out, "diagram.json"), diagram.to_json_dict())
    return 0


def cmd_tessellate_2d(cfg, args):
    rng = np.random.default_rng(args.seed)
    if not isinstance(cfg.domain, PhiPolygon2D):
        raise ConfigError("tessellate-2d needs a phi_polygon2d domain")
    extra = cfg.extra.get("seeds2d", {})
    n = int(extra.get("n", 10))
    lo = np.asarray(extra.get("lo", [0.0, 0.0]), dtype=float)
    hi = np.asarray(extra.get("hi", [1.0, 1.0]), dtype=float)
    seeds = lo + rng.random((n, 2)) * (hi - lo)
    masses = np.full(n, 1.0 / n)
    w = dual.solve_transport_weights(seeds, masses, cfg.domain, cfg.constants,
                                     tol=cfg.sim.newton_tol or 1e-10,
                                     max_iter=cfg.sim.newton_max_iter)
    cells = dual.transport_cells_2d(seeds, w, cfg.domain, cfg.constants)
    total = cfg.domain.polygon.area
    payload = {
        "seeds": seeds.tolist(),
        "weights": w.tolist(),
        "areas": [c.area / total for c in cells],
        "cells": [c.to_json_dict() for c in cells],
    }
    _dump_json(os.path.join(args.out, "diagram2d.json"), payload)
    return 0


def cmd_quantize(cfg, args):
    ensemble = _resolve_ensemble(cfg, np.random.default_rng(args.seed))
    _dump_json(os.path.join(args.out, "ensemble.json"), ensemble.to_json_dict())
    return 0


def cmd_w1(args):
    def load(path):
        with open(path) as fh:
            d = json.load(fh)
        return SeedEnsemble(d["z"], d["m"])

    mu = load(args.mu)
    nu = load(args.nu)
    value, coupling = measures.w1_distance(mu, nu)
    _dump_json(os.path.join(args.out, "w1.json"),
               {"distance": value, "coupling_nnz": coupling.nnz})
    return 0


def cmd_validate_ellipse(cfg, args):
    ensemble = _resolve_ensemble(cfg, np.random.default_rng(args.seed))
    if ensemble.n != 1:
        raise ConfigError("ellipse validation needs a single seed")
    z_bar = ensemble.z[0]
    record = dynamics.simulate(cfg.sim, ensemble, cfg.domain, cfg.constants,
                               backend=args.backend)
    if not record.completed:
        return 2
    traj_ref, params = analytic.ellipse_reference(cfg.domain, z_bar, cfg.constants,
                                                  record.times)
    err = float(np.max(np.linalg.norm(record.seeds[:, 0, :] - traj_ref, axis=1)))
    cons = dynamics.conservation_report(record)
    rows = [
        ("max_trajectory_error", err, 1e-6),
        ("max_relative_energy_drift", cons.max_relative_energy_drift, 1e-9),
        ("max_z3_drift", cons.max_z3_drift, 1e-12),
        ("vertical_margin", params.vertical_margin, 0.0),
        ("oscillation_margin", params.oscillation_margin, 0.0),
    ]
    ok = True
    lines = []
    for name, value, bound in rows:
        passed = value <= bound if name.startswith("max") else value > bound
        ok &= passed
        status = "PASS" if passed else "FAIL"
        lines.append(f"{status}  {name} = {value:.3e} (bound {bound:.1e})")
        print(lines[-1])
    csv = ["t,z1_sim,z2_sim,z1_ref,z2_ref"]
    for k, t in enumerate(record.times):
        csv.append(f"{t!r},{record.seeds[k,0,0]!r},{record.seeds[k,0,1]!r},"
                   f"{traj_ref[k,0]!r},{traj_ref[k,1]!r}")
    _atomic_write(os.path.join(args.out, "ellipse_compare.csv"), "\n".join(csv) + "\n")
    _dump_json(os.path.join(args.out, "ellipse_report.json"),
               {name: value for name, value, _ in rows} | {"pass": bool(ok)})
    return 0 if ok else 2


def cmd_validate_steady(cfg, args):
    state = analytic.steady_state(cfg.domain, cfg.constants)
    mass = analytic._steady_mass(state.ell_star, cfg.domain, cfg.constants)
    rows = [
        ("ell_star", state.ell_star),
        ("total_mass", mass),
        ("mass_defect", abs(mass - 1.0)),
    ]
    ok = abs(mass - 1.0) <= 1e-10
    for name, value in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name} = {value:.12g}")
    _dump_json(os.path.join(args.out, "steady_report.json"),
               dict(rows) | {"pass": bool(ok)})
    return 0 if ok else 2


def build_parser():
    p = argparse.ArgumentParser(
        prog="sgot",
        description="Semi-discrete optimal transport solver for compressible "
                    "semi-geostrophic flow (JSON configs in, JSON/CSV reports out).",
    )
    sub = p.add_subparsers(dest="command", required=True)
    commands = [
        "simulate", "solve-dual", "tessellate", "tessellate-2d",
        "quantize", "validate-ellipse", "validate-steady",
    ]
    for name in commands:
        q = sub.add_parser(name)
        q.add_argument("--config", required=True, help="JSON configuration path")
        q.add_argument("--out", default=".", help="output directory")
        q.add_argument("--seed", type=int, default=0, help="rng seed")
        q.add_argument("--threads", type=int, default=1, help="data-parallel cell work")
        q.add_argument("--backend", choices=["auto", "exact", "grid"], default="auto")
    q = sub.add_parser("w1")
    q.add_argument("mu", help="first ensemble JSON")
    q.add_argument("nu", help="second ensemble JSON")
    q.add_argument("--out", default=".")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "w1":
            return cmd_w1(args)
        cfg = model.load_config(args.config)
        handler = {
            "simulate": cmd_simulate,
            "solve-dual": cmd_solve_dual,
            "tessellate": cmd_tessellate,
            "tessellate-2d": cmd_tessellate_2d,
            "quantize": cmd_quantize,
            "validate-ellipse": cmd_validate_ellipse,
            "validate-steady": cmd_validate_steady,
        }[args.command]
        return handler(cfg, args)
    except (ConfigError, measures.MeasureError, analytic.ValidationError,
            FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
