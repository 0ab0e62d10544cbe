"""Command-line entry point: ``eqot validate|solve|frames --config run.json``.

Exit codes: 0 success, 2 configuration error, 3 validation failure,
4 solver failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .costs import (
    LQ,
    MIN_ENERGY,
    ReducedCost,
    RunningCostSpec,
    convexity_certificate,
    cost_model,
    q_structure_residual,
    reduced_quadratic,
    translation_invariance_probe,
)
from .errors import ConfigError, EqotError
from .flow import DEFAULT_TIMES, displacement_interpolate
from .linsys import LTISystem, equilibrium_space, gramian_matrix
from .measures import MeasureSpec
from .transport import SolverParams, barycentric_map, solve_reduced, solve_transport

log = logging.getLogger("eqot")

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_SOLVER = 0, 2, 3, 4

PRESETS = {
    "double_integrator_1d": ([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]]),
    "double_integrator_2d": (
        [[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0]],
        [[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]],
    ),
}
PRESET_LABELS = {"double_integrator_1d": "DI", "double_integrator_2d": "DI", "single_integrator": "SI"}

TRANSLATION_TOL = 1e-8
Q_STRUCTURE_TOL = 1e-10
CONTROLLABILITY_RTOL = 1e-10

SOLVER_DEFAULTS = {
    "backend": "auto",
    "n": 256,
    "seed": 0,
    "mode": "montecarlo",
    "epsilon_final": None,
    "epsilon_rel": 1e-3,
    "epsilon_decay": 0.5,
    "max_iterations": 50000,
    "marginal_tolerance": 1e-7,
    "exact_cap": 2048,
}
OUTPUT_DEFAULTS = {
    "directory": "eqot_out",
    "frame_times": list(DEFAULT_TIMES),
    "grid": [256, 256],
    "bandwidth": 0.0,
    "write_positions": False,
}


def single_integrator(dim):
    return LTISystem(np.zeros((dim, dim)), np.eye(dim))


# -- configuration -------------------------------------------------------------


def _matrix(value, path):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, "expected a numeric matrix (row-major nested arrays)") from None
    if arr.ndim != 2 or not np.all(np.isfinite(arr)):
        raise ConfigError(path, "expected a finite 2-D matrix")
    return arr


def _require(d, key, path):
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    if key not in d:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
    return d[key]


def _merge(defaults, given, path):
    if given is None:
        return dict(defaults)
    if not isinstance(given, dict):
        raise ConfigError(path, "expected an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    out = dict(defaults)
    out.update(given)
    return out


@dataclass
class RunConfig:
    system: dict
    cost: dict
    mu: MeasureSpec
    nu: MeasureSpec
    solver: dict
    output: dict
    lti: LTISystem = field(repr=False, default=None)
    cost_spec: RunningCostSpec = field(repr=False, default=None)
    params: SolverParams = field(repr=False, default=None)

    @property
    def label(self):
        return PRESET_LABELS.get(self.system.get("preset"), "system")

    def to_dict(self):
        """Canonical form: defaults filled in, matrices as nested lists."""
        return {
            "system": copy.deepcopy(self.system),
            "cost": copy.deepcopy(self.cost),
            "measures": {"mu": self.mu.to_dict(), "nu": self.nu.to_dict()},
            "solver": dict(self.solver),
            "output": copy.deepcopy(self.output),
        }

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def parse_config(data):
    """Parse a config mapping (or JSON text) into a :class:`RunConfig`.

    Raises
    ------
    ConfigError
        With the dotted path of the first offending field.
    """
    if isinstance(data, (str, bytes)):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a JSON object")

    sysd = _require(data, "system", "")
    if not isinstance(sysd, dict):
        raise ConfigError("system", "expected an object")
    if "preset" in sysd:
        name = sysd["preset"]
        if name == "single_integrator":
            dim = sysd.get("dim", 2)
            if not isinstance(dim, int) or dim < 1:
                raise ConfigError("system.dim", "expected a positive integer")
            system = {"preset": name, "dim": dim}
            lti = single_integrator(dim)
        elif name in PRESETS:
            system = {"preset": name}
            lti = LTISystem(*PRESETS[name])
        else:
            raise ConfigError("system.preset", f"unknown preset {name!r}")
    else:
        A = _matrix(_require(sysd, "A", "system"), "system.A")
        B = _matrix(_require(sysd, "B", "system"), "system.B")
        try:
            lti = LTISystem(A, B)
        except EqotError as exc:
            raise ConfigError("system", str(exc)) from None
        system = {"A": A.tolist(), "B": B.tolist()}

    costd = data.get("cost", {"kind": MIN_ENERGY})
    if not isinstance(costd, dict):
        raise ConfigError("cost", "expected an object")
    kind = costd.get("kind", MIN_ENERGY)
    if kind not in (MIN_ENERGY, LQ):
        raise ConfigError("cost.kind", f"expected 'min_energy' or 'lq', got {kind!r}")
    cost = {"kind": kind}
    Q = Ru = None
    if kind == LQ:
        Q = _matrix(_require(costd, "Q", "cost"), "cost.Q")
        cost["Q"] = Q.tolist()
    if "Ru" in costd:
        Ru = _matrix(costd["Ru"], "cost.Ru")
        cost["Ru"] = Ru.tolist()
    try:
        cost_spec = RunningCostSpec(kind, Q=Q, Ru=Ru)
        cost_spec.weights(lti.d, lti.m)
    except (EqotError, ValueError) as exc:
        raise ConfigError("cost", str(exc)) from None

    meas = _require(data, "measures", "")
    specs = {}
    for key in ("mu", "nu"):
        md = _require(meas, key, "measures")
        try:
            specs[key] = MeasureSpec.from_dict(md)
        except KeyError as exc:
            raise ConfigError(f"measures.{key}.{exc.args[0]}", "missing required field") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"measures.{key}", str(exc)) from None

    solver = _merge(SOLVER_DEFAULTS, data.get("solver"), "solver")
    if not isinstance(solver["n"], int) or solver["n"] < 1:
        raise ConfigError("solver.n", "expected a positive integer")
    if not isinstance(solver["seed"], int):
        raise ConfigError("solver.seed", "expected an integer")
    if solver["mode"] not in ("montecarlo", "grid"):
        raise ConfigError("solver.mode", "expected 'montecarlo' or 'grid'")
    try:
        params = SolverParams(
            epsilon_final=solver["epsilon_final"],
            epsilon_rel=float(solver["epsilon_rel"]),
            epsilon_decay=float(solver["epsilon_decay"]),
            max_iterations=int(solver["max_iterations"]),
            marginal_tolerance=float(solver["marginal_tolerance"]),
            backend=solver["backend"],
            exact_cap=int(solver["exact_cap"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError("solver", str(exc)) from None

    output = _merge(OUTPUT_DEFAULTS, data.get("output"), "output")
    times = output["frame_times"]
    if not isinstance(times, list) or not all(isinstance(t, (int, float)) and 0 <= t <= 1 for t in times):
        raise ConfigError("output.frame_times", "expected a list of times in [0, 1]")
    output["frame_times"] = sorted(float(t) for t in times)
    grid = output["grid"]
    grid = [grid] if isinstance(grid, int) else grid
    if not isinstance(grid, list) or not all(isinstance(g, int) and g > 0 for g in grid):
        raise ConfigError("output.grid", "expected positive integer resolution(s)")
    output["grid"] = grid
    if not isinstance(output["bandwidth"], (int, float)) or output["bandwidth"] < 0:
        raise ConfigError("output.bandwidth", "expected a nonnegative number")
    output["bandwidth"] = float(output["bandwidth"])

    return RunConfig(
        system=system,
        cost=cost,
        mu=specs["mu"],
        nu=specs["nu"],
        solver=solver,
        output=output,
        lti=lti,
        cost_spec=cost_spec,
        params=params,
    )


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read config: {exc}") from None
    return parse_config(text)


# -- reports and output --------------------------------------------------------


@dataclass
class RunReport:
    command: str
    probes: dict
    passed: bool
    backend: Optional[str] = None
    total_cost: Optional[float] = None
    marginal_residuals: Optional[list] = None
    duality_gap: Optional[float] = None
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def atomic_write(path, write):
    """Write via ``write(fh)`` into a temp file beside ``path``, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path, payload):
    atomic_write(path, lambda fh: fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n"))


def run_probes(cfg):
    """Assumption checks for a config; returns ``(probes, models)``."""
    probes = {}
    models = {}
    lti = cfg.lti

    W = gramian_matrix(lti)
    eig = np.linalg.eigvalsh(W)
    ratio = float(eig[0] / eig[-1]) if eig[-1] > 0 else 0.0
    probes["controllability"] = {"value": ratio, "threshold": CONTROLLABILITY_RTOL, "pass": ratio > CONTROLLABILITY_RTOL}

    try:
        es = equilibrium_space(lti)
        models["es"] = es
        probes["equilibrium_dimension"] = {"value": es.p, "pass": True}
        dims = [cfg.mu.p, cfg.nu.p]
        probes["measure_dimension"] = {"value": dims, "expected": es.p, "pass": dims == [es.p, es.p]}
    except EqotError as exc:
        probes["equilibrium_dimension"] = {"value": 0, "pass": False, "error": str(exc)}
        return probes, models

    qres = q_structure_residual(cfg.cost_spec, es)
    probes["q_structure"] = {"value": qres, "threshold": Q_STRUCTURE_TOL, "pass": qres <= Q_STRUCTURE_TOL}

    try:
        cm = cost_model(lti, cfg.cost_spec)
        models["cm"] = cm
    except EqotError as exc:
        probes["translation_invariance"] = {"value": None, "pass": False, "error": str(exc)}
        probes["convexity_certificate"] = {"value": None, "pass": False, "error": str(exc)}
        return probes, models

    dev = translation_invariance_probe(cm, es, seed=cfg.solver["seed"])
    probes["translation_invariance"] = {"value": dev, "threshold": TRANSLATION_TOL, "pass": dev <= TRANSLATION_TOL}

    try:
        rc = reduced_quadratic(cm, es)
        models["rc"] = rc
        lam = convexity_certificate(rc)
        probes["convexity_certificate"] = {"value": lam, "pass": lam > 0}
    except EqotError as exc:
        probes["convexity_certificate"] = {"value": None, "pass": False, "error": str(exc)}
    return probes, models


def cmd_validate(cfg):
    t0 = time.perf_counter()
    probes, _ = run_probes(cfg)
    ok = all(p["pass"] for p in probes.values())
    return RunReport("validate", probes, ok, wall_time=time.perf_counter() - t0)


def _solve(cfg):
    probes, models = run_probes(cfg)
    ok = all(p["pass"] for p in probes.values())
    if not ok:
        return RunReport("solve", probes, False), None, models
    s = cfg.solver
    res = solve_transport(
        models["cm"], models["es"], cfg.mu, cfg.nu, cfg.params, n=s["n"], seed=s["seed"], mode=s["mode"], rc=models["rc"]
    )
    sol = res.solution
    report = RunReport(
        "solve",
        probes,
        True,
        backend=sol.backend,
        total_cost=float(sol.total_cost),
        marginal_residuals=[float(r) for r in sol.marginal_residuals],
        duality_gap=None if sol.duality_gap is None else float(sol.duality_gap),
        wall_time=res.wall_time,
        extra={"solution": res.summary()},
    )
    return report, res, models


def cmd_solve(cfg, out=None):
    """Validate, solve and write ``summary.json`` and ``map.csv``."""
    out = Path(out or cfg.output["directory"])
    report, res, models = _solve(cfg)
    if res is not None:
        atomic_write(out / "map.csv", lambda fh: _write_map(fh, res))
        _write_json(out / "summary.json", report.to_dict())
    return report, res, models


def _write_map(fh, res):
    from .measures import write_cloud_csv

    write_cloud_csv(fh, res.mu.weights, [res.mu.points, res.map_points], ["src", "dst"])


def cmd_frames(cfg, out=None, compare_euclidean=False, workers=None):
    """Solve, then render displacement-interpolation frames (optionally a Euclidean baseline)."""
    out = Path(out or cfg.output["directory"])
    t0 = time.perf_counter()
    report, res, models = cmd_solve(cfg, out)
    if res is None:
        return report, None
    es, cm = models["es"], models["cm"]
    o = cfg.output
    domain = np.stack([np.minimum(cfg.mu.domain[:, 0], cfg.nu.domain[:, 0]), np.maximum(cfg.mu.domain[:, 1], cfg.nu.domain[:, 1])], axis=1)
    grid = o["grid"] if len(o["grid"]) > 1 else o["grid"][0]

    sets = {}
    sets[cfg.label] = displacement_interpolate(
        cm, es, res.mu.points, res.map_points, res.mu.weights, o["frame_times"], grid, o["bandwidth"], domain, workers
    )
    if compare_euclidean:
        base = single_integrator(es.p)
        cm_si = cost_model(base)
        es_si = equilibrium_space(base)
        rc_si = ReducedCost(np.eye(es.p), "gramian-restriction")
        sol_si = solve_reduced(res.mu, res.nu, rc_si, cfg.params)
        T_si = barycentric_map(sol_si, res.nu, res.mu.weights)
        sets["Euclidean"] = displacement_interpolate(
            cm_si, es_si, res.mu.points, T_si, res.mu.weights, o["frame_times"], grid, o["bandwidth"], domain, workers
        )
        report.extra["euclidean_total_cost"] = float(sol_si.total_cost)
        if sol_si.permutation is not None and res.solution.permutation is not None:
            report.extra["same_permutation"] = bool(np.array_equal(sol_si.permutation, res.solution.permutation))

    index = []
    for label, fs in sets.items():
        index += fs.write(out, label, write_positions=o["write_positions"])
    _write_json(out / "frames.json", {"frames": index, "meta": sets[cfg.label].meta})
    report.command = "frames"
    report.wall_time = time.perf_counter() - t0
    _write_json(out / "summary.json", report.to_dict())
    return report, sets


# -- entry point ---------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="eqot", description="Optimal transport of LTI systems over equilibrium measures")
    p.add_argument("command", choices=["validate", "solve", "frames"])
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--out", default=None, help="output directory (overrides output.directory)")
    p.add_argument("--compare-euclidean", action="store_true", help="also render the single-integrator baseline")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"eqot: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "validate":
            report = cmd_validate(cfg)
        elif args.command == "solve":
            report, _, _ = cmd_solve(cfg, args.out)
        else:
            report, _ = cmd_frames(cfg, args.out, args.compare_euclidean)
    except EqotError as exc:
        print(f"eqot: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK if report.passed else EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
