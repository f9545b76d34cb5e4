"""Batch runner: ``mfsc run <config>`` and ``mfsc list [filter]``.

A config is a flat JSON object naming an experiment kind, grid parameters and
registered coefficient/driver/barrier/problem names with parameter maps.  A run
writes ``report.json``, ``manifest.json`` and CSV tables into the output
directory.  Exit codes: 0 success, 2 a check failed (named in report.json),
1 configuration or runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import control as ctl
from .configs import config_path
from .forward import NonFinite, simulate
from .grid import NonCommensurate, SingularControl, make_grid
from .measures import AtomicMeasure, FourierWeight, QuadratureUnderResolved, measure_norm_sq
from .rbsde import solution_invariants, solve_picard, write_picard_csv, write_solution_csv
from .registry import (BARRIERS, COEFFICIENTS, DRIVERS, PROBLEMS, catalog, lookup,
                       markov_description)
from .stopping import StoppingProblem, snell_check, stopping_report
from .tables import write_csv

__all__ = ["ConfigParse", "UnknownExperiment", "ExperimentConfig", "RunManifest", "run",
           "list_registered", "main"]

EXPERIMENTS = ("norms", "simulate", "rbsde", "stopping", "control-check", "connection")


class ConfigParse(ValueError):
    pass


class UnknownExperiment(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str
    params: dict
    seed: int = 0
    out: Path = Path("mfsc_out")

    @classmethod
    def load(cls, source: str | Path, seed: int | None = None,
             out: str | Path | None = None) -> "ExperimentConfig":
        path = Path(source)
        if not path.exists() and config_path(str(source)).exists():
            path = config_path(str(source))
        try:
            params = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigParse(f"cannot read config {source}: {exc}") from exc
        if not isinstance(params, dict):
            raise ConfigParse("config must be a JSON object")
        return cls.from_dict(params, seed, out)

    @classmethod
    def from_dict(cls, params: dict, seed: int | None = None,
                  out: str | Path | None = None) -> "ExperimentConfig":
        params = dict(params)
        kind = params.get("experiment")
        if kind not in EXPERIMENTS:
            raise UnknownExperiment(f"unknown experiment {kind!r}; known: {', '.join(EXPERIMENTS)}")
        if seed is not None:
            params["seed"] = int(seed)
        cfg = cls(kind=kind, params=params, seed=int(params.get("seed", 0)),
                  out=Path(out or params.get("out", "mfsc_out")))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        p = self.params
        names = [("coefficients", COEFFICIENTS), ("driver", DRIVERS), ("barrier", BARRIERS),
                 ("problem", PROBLEMS)]
        for key, reg in names:
            if key in p and p[key] not in reg:
                raise ConfigParse(f"unknown {key} {p[key]!r}; known: {', '.join(sorted(reg))}")
        if self.kind != "norms":
            try:
                self.grid()
            except NonCommensurate as exc:
                raise ConfigParse(f"NonCommensurate: {exc}") from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigParse(f"bad grid parameters: {exc}") from exc
        required = {"rbsde": ["driver", "barrier"], "stopping": ["driver", "barrier"],
                    "control-check": ["problem"], "connection": ["problem"]}
        for key in required.get(self.kind, []):
            if key not in p:
                raise ConfigParse(f"{self.kind} experiment needs {key!r}")

    def grid(self):
        p = self.params
        return make_grid(float(p["T"]), float(p["dt"]), float(p.get("delta", 0.0)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.params, sort_keys=True).encode()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    versions: dict
    wall_time: float
    files: list = field(default_factory=list)


def _versions() -> dict:
    try:
        own = metadata.version("mfsc")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"mfsc": own, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


# ---------------------------------------------------------------- experiments

class _Run:
    """Shared state of one experiment run: output files and named checks."""

    def __init__(self, cfg: ExperimentConfig, out: Path, threads: int, unsafe_barrier: bool):
        self.cfg, self.out, self.threads, self.unsafe = cfg, out, threads, unsafe_barrier
        self.p = cfg.params
        self.files: list[str] = []
        self.checks: dict[str, bool] = {}

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def ensemble(self, xi=None):
        coeff = lookup(COEFFICIENTS, self.p.get("coefficients", "brownian"), "coefficients")
        spec = coeff.factory(self.p.get("coefficient_params", {}))
        return simulate(spec, xi, self.cfg.grid(), int(self.p.get("n_particles", 1)),
                        self.cfg.seed, self.threads)

    def barrier(self, ens):
        entry = lookup(BARRIERS, self.p["barrier"], "barrier")
        return entry.factory(self.p.get("barrier_params", {}), ens.grid, ens.X, self.unsafe)

    def driver(self):
        return lookup(DRIVERS, self.p["driver"], "driver").factory(self.p.get("driver_params", {}))

    def problem(self):
        return lookup(PROBLEMS, self.p["problem"], "problem").factory(self.p.get("problem_params", {}))


def _norms(run: _Run) -> dict:
    p = run.p
    kind = p.get("weight", "rational")
    weight = FourierWeight.rational() if kind == "rational" else FourierWeight.gaussian()
    rows, ok_self = [], True
    for x0 in p.get("points", [0.0]):
        try:
            val = measure_norm_sq(AtomicMeasure.dirac(float(x0)), weight, self_check=True)
        except QuadratureUnderResolved:
            ok_self = False
            val = measure_norm_sq(AtomicMeasure.dirac(float(x0)), weight)
        rows.append((float(x0), val))
    write_csv(run.path("norms.csv"), ["x0", "norm_sq"], rows)
    run.checks["quadrature_self_check"] = ok_self
    expect = p.get("expect")
    if expect:
        run.checks["norm_matches_expected"] = all(
            abs(v - expect["norm_sq"]) <= expect.get("tol", 1e-3) for _, v in rows)
    return {"weight": kind, "norm_sq": [v for _, v in rows], "points": [x for x, _ in rows]}


def _simulate(run: _Run) -> dict:
    try:
        ens = run.ensemble()
    except NonFinite as exc:
        run.checks["finite_state"] = False
        return {"error": str(exc)}
    run.checks["finite_state"] = True
    ens.write_moments_csv(run.path("moments.csv"))
    if run.p.get("write_paths", False):
        ens.write_paths_csv(run.path("paths.csv"))
    m = ens.moments(2)
    return {"final_mean": m[-1, 0], "final_var": m[-1, 1] - m[-1, 0] ** 2,
            "n_particles": ens.n_particles}


def _solve(run: _Run):
    ens = run.ensemble()
    bar = run.barrier(ens)
    sol = solve_picard(run.driver(), bar, ens, rho=float(run.p.get("rho", 2.0)),
                       max_iter=int(run.p.get("max_iter", 50)))
    return ens, bar, sol


def _write_solution(run: _Run, sol) -> None:
    keep = int(run.p.get("max_csv_particles", 64))
    sub = type(sol)(Y=sol.Y[:keep], Z=sol.Z[:keep], K=sol.K[:keep], dK=sol.dK[:keep],
                    F=sol.F[:keep], dM=sol.dM[:keep], grid=sol.grid)
    write_solution_csv(sub, run.path("solution.csv"))
    sol_norms = type(sol)(Y=sol.Y[:1], Z=sol.Z[:1], K=sol.K[:1], dK=sol.dK[:1], F=sol.F[:1],
                          dM=sol.dM[:1], grid=sol.grid, picard_norms=sol.picard_norms)
    write_picard_csv(sol_norms, run.path("picard.csv"))


def _rbsde(run: _Run) -> dict:
    ens, bar, sol = _solve(run)
    _write_solution(run, sol)
    grid = ens.grid
    inv = solution_invariants(sol, bar, float(run.p.get("tol", 5 * grid.dt)))
    run.checks.update({f"invariant_{k}": v for k, v in inv["checks"].items()})
    y0 = float(sol.Y[:, 0].mean())
    expect = run.p.get("expect")
    if expect:
        run.checks["y0_matches_expected"] = abs(y0 - expect["y0"]) <= expect.get("tol", 5 * grid.dt)
    norms = sol.picard_norms
    ratios = [b / a for a, b in zip(norms, norms[1:]) if a > 0]
    mid = grid.index(grid.T / 2)
    return {"y0": y0, "y_mid": float(sol.Y[:, mid].mean()), "picard_norms": norms,
            "picard_ratios": ratios, "beta": sol.beta,
            "skorokhod_residual": inv["skorokhod_residual"],
            "max_barrier_deficit": inv["max_barrier_deficit"]}


def _stopping(run: _Run) -> dict:
    ens, bar, sol = _solve(run)
    _write_solution(run, sol)
    p = run.p
    markov = None
    if (p.get("coefficients") == "brownian" and p.get("barrier") == "linear_clip"
            and DRIVERS[p["driver"]].factory is DRIVERS["linear_decay"].factory):
        markov = markov_description(p.get("barrier_params", {}), p.get("coefficient_params", {}),
                                    p.get("driver_params", {}))
    prob = StoppingProblem.from_solution(sol, bar, ens, markov)
    rep = stopping_report(prob, sol, bar, n_states=int(p.get("lattice_steps", 2000)),
                          seed=run.cfg.seed)
    snell = snell_check(prob, sol, 0, seed=run.cfg.seed, barrier=bar)
    dt = ens.grid.dt
    run.checks["tau_agreement"] = rep["tau_agreement_rate"] >= 0.99
    if rep["y0_oracle"] is not None:
        mc = snell["value_se"]
        run.checks["y0_matches_lattice"] = (abs(rep["y0"] - rep["y0_oracle"])
                                            <= 0.01 * abs(rep["y0_oracle"]) + 3 * mc)
    run.checks["k_running_max"] = rep["k_formula_gap"] <= 5 * dt
    run.checks["candidates_not_better"] = (snell["candidate_excess"]
                                           <= 3 * snell["candidate_se"] + 1e-12)
    rep["value_se"] = snell["value_se"]
    return rep


def _search(run: _Run, prob):
    grid = run.cfg.grid()
    search = ctl.optimize_threshold(prob, run.p.get("levels", np.linspace(0, 1.5, 16)), grid,
                                    int(run.p.get("n_particles", 4096)), run.cfg.seed,
                                    run.p.get("slopes", [0.0]), run.threads)
    rows = [(s, a, search.J[i, j], search.J_se[i, j])
            for i, s in enumerate(search.slopes) for j, a in enumerate(search.levels)]
    write_csv(run.path("threshold_search.csv"), ["slope", "level", "J", "J_se"], rows)
    policy = ctl.ReflectionPolicy(search.best_level, search.best_slope, grid.T, prob.lam_at(0.0))
    ens = prob.simulate(policy, grid, int(run.p.get("n_particles", 4096)), run.cfg.seed,
                        run.threads)
    return search, ens


def _control_check(run: _Run) -> dict:
    prob = run.problem()
    grid = run.cfg.grid()
    search, ens = _search(run, prob)
    if run.p.get("control", "optimum") == "harvest_all":
        x0 = float(prob.alpha) if not callable(prob.alpha) else float(prob.alpha(0.0))
        ens = prob.simulate(SingularControl([0.0], [x0 / abs(prob.lam_at(0.0))]), grid,
                            ens.n_particles, run.cfg.seed, run.threads)
    adj = ctl.solve_adjoints(prob, ens,
                             mean_field_feedback=bool(run.p.get("mean_field_feedback", False)))
    etas = ctl.canonical_perturbations(ens.xi, grid, float(run.p.get("jump_time", grid.T / 2)))
    table = ctl.derivative_table(prob, ens, adj, etas)
    suff = ctl.check_sufficient(prob, ens, adj, raise_on_fail=False)
    write_csv(run.path("derivatives.csv"),
              ["perturbation", "a", "analytic", "finite_difference", "gap", "tol", "ok"],
              [(r["perturbation"], r["a"], r["analytic"], r["finite_difference"], r["gap"],
                r["tol"], r["ok"]) for r in table])
    write_csv(run.path("singular_density.csv"), ["t", "mean_density"],
              zip(grid.times, suff["density_path"]))
    run.checks.update({"derivative_matches_fd": ctl.derivatives_ok(table),
                       "sign_condition": suff["sign_ok"],
                       "complementarity": suff["complementarity_ok"],
                       "concavity": suff["concave"],
                       "interior_level_optimum": search.level_interior})
    rep = ctl.control_report(suff, suff, table)
    rep.update({"best_level": search.best_level, "best_slope": search.best_slope,
                "best_J": float(search.J[search.best_index]),
                "complementarity_se": suff["complementarity_se"],
                "max_excess_over_slack": suff["max_excess_over_slack"]})
    return rep


def _connection(run: _Run) -> dict:
    prob = run.problem()
    search, ens = _search(run, prob)
    adj = ctl.solve_adjoints(prob, ens)
    conn = ctl.assemble_stopping_connection(prob, ens, adj)
    rep = ctl.verify_connection(conn, ens, float(run.p.get("tol", 5 * ens.grid.dt)))
    sol = conn.solution
    S, _ = conn.barrier.broadcast(sol.Y.shape[0])
    write_csv(run.path("connection.csv"), ["t", "mean_Y", "mean_S", "mean_K"],
              zip(ens.grid.times, sol.Y.mean(axis=0), S.mean(axis=0), sol.K.mean(axis=0)))
    run.checks.update({f"invariant_{k}": v for k, v in rep["invariants"].items()})
    run.checks["tau_matches_first_move"] = rep["tau_agreement_rate"] >= 0.99
    rep.update({"best_level": search.best_level, "best_slope": search.best_slope})
    return rep


DISPATCH = {"norms": _norms, "simulate": _simulate, "rbsde": _rbsde, "stopping": _stopping,
            "control-check": _control_check, "connection": _connection}


def run(config, seed: int | None = None, threads: int = 1, out: str | Path | None = None,
        unsafe_barrier: bool = False) -> int:
    """Run one experiment; returns the exit code."""
    start = time.perf_counter()
    try:
        cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.load(config, seed, out)
    except (ConfigParse, UnknownExperiment) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    out_dir = Path(out) if out is not None else cfg.out
    out_dir.mkdir(parents=True, exist_ok=True)
    r = _Run(cfg, out_dir, threads, unsafe_barrier)
    try:
        results = DISPATCH[cfg.kind](r)
    except Exception as exc:  # noqa: BLE001 - reported as a run error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    failed = sorted(k for k, v in r.checks.items() if not v)
    report = {"experiment": cfg.kind, "results": results, "checks": r.checks,
              "failed_checks": failed, "status": "fail" if failed else "pass"}
    (out_dir / "report.json").write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    r.files.append("report.json")
    manifest = RunManifest(config_hash=cfg.digest(), seed=cfg.seed, versions=_versions(),
                           wall_time=time.perf_counter() - start, files=r.files)
    (out_dir / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2))
    if failed:
        print(f"check failed: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def list_registered(filter_text: str = "") -> list[str]:
    """Lines of the catalog, ``section/name: summary``."""
    lines = []
    for section, entries in catalog(filter_text).items():
        lines.extend(f"{section}/{name}: {summary}" for name, summary in entries)
    return lines


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mfsc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config (path or shipped name)")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--threads", type=int, default=1)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--unsafe-barrier", action="store_true",
                       help="accept barriers that decrease in time (warns)")
    p_list = sub.add_parser("list", help="list registered names and shipped configs")
    p_list.add_argument("filter", nargs="?", default="")
    args = parser.parse_args(argv)
    if args.command == "list":
        for line in list_registered(args.filter):
            print(line)
        return 0
    return run(args.config, args.seed, args.threads, args.out, args.unsafe_barrier)


if __name__ == "__main__":
    sys.exit(main())
