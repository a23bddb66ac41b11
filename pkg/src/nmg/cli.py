"""Command-line interface: run configurations and emit bundled scenarios.

::

    nmg run CONFIG [--out DIR] [--threads N] [--tolerance RTOL] [--seed S]
    nmg scenarios list
    nmg scenarios emit NAME [--out PATH]

Exit codes: 0 success, 2 configuration error, 3 numerical failure.  The log
level is read from the ``NMG_LOG`` environment variable (default WARNING).
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import ConfigError, NMGError, NumericalError, TaskError
from .master_eq import coefficients, initial_state, propagate_rho
from .spectral_models import truncation_point
from .spectral_solver import SpectralSolver
from .volterra_engine import TimeGrid, discrete_bath_oracle, solve, solve_u, solve_v_diag, solve_v_volterra
from .self_energy import SelfEnergyEvaluator

__all__ = ["main", "run", "run_single", "list_scenarios", "emit_scenario"]

log = logging.getLogger("nmg")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
VALIDATE_TOL = 1e-3


# ----------------------------------------------------------------------------
# scenarios
# ----------------------------------------------------------------------------

def _scenario_dir():
    return resources.files("nmg").joinpath("scenarios")


def list_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in _scenario_dir().iterdir() if p.name.endswith(".json"))


def load_scenario(name: str) -> dict:
    if name.endswith(".json"):
        name = name[:-5]
    path = _scenario_dir().joinpath(name + ".json")
    if not path.is_file():
        raise ConfigError(f"unknown scenario {name!r}; available: {', '.join(list_scenarios())}", "")
    return json.loads(path.read_text())


def emit_scenario(name: str, out=None) -> str:
    text = json.dumps(load_scenario(name), indent=2) + "\n"
    if out is not None:
        Path(out).write_text(text)
    return text


# ----------------------------------------------------------------------------
# CSV output
# ----------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    x = float(x)
    if not math.isfinite(x):
        raise NumericalError(f"non-finite value {x} in output")
    return "%.17g" % x


def write_csv(path: Path, header, rows) -> None:
    """Write ``rows`` with ``%.17g`` floats; refuses non-finite numbers."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(x) for x in row))
    path.write_text("\n".join(lines) + "\n")


def _pairs(N):
    return [(i, j) for i in range(N) for j in range(N)]


def _u_table(times, u):
    N = u.shape[1]
    header = ["t"]
    for i, j in _pairs(N):
        header += [f"re_u_{i}{j}", f"im_u_{i}{j}", f"abs_u_{i}{j}"]
    rows = []
    for k, t in enumerate(times):
        row = [t]
        for i, j in _pairs(N):
            z = u[k, i, j]
            row += [z.real, z.imag, abs(z)]
        rows.append(row)
    return header, rows


def _hermitian_columns(name, N):
    cols = []
    for i, j in _pairs(N):
        cols.append((f"{name}_{i}{j}", i, j, "re"))
        if i != j:
            cols.append((f"im_{name}_{i}{j}", i, j, "im"))
    return cols


def _coeff_table(coeffs):
    N = coeffs.gamma.shape[1]
    spec = [("eps_tilde", coeffs.eps_tilde), ("gamma", coeffs.gamma), ("gamma_tilde", coeffs.gamma_tilde)]
    header = ["t"]
    cols = []
    for name, arr in spec:
        for col, i, j, part in _hermitian_columns(name, N):
            header.append(col)
            cols.append((arr, i, j, part))
    rows = []
    for k, t in enumerate(coeffs.times):
        if coeffs.singular[k]:
            continue
        rows.append([t] + [getattr(arr[k, i, j], "real" if part == "re" else "imag") for arr, i, j, part in cols])
    return header, rows


def _rho_table(traj):
    D = traj.dimension
    header = ["t"] + [f"p_{m}" for m in range(D)]
    for m in range(D - 1):
        header += [f"re_rho_{m}_{m + 1}", f"im_rho_{m}_{m + 1}"]
    header += ["trace", "min_eigenvalue"]
    rows = []
    for k, t in enumerate(traj.times):
        row = [t] + list(traj.populations[k])
        for m in range(D - 1):
            row += [traj.coherences[k, m].real, traj.coherences[k, m].imag]
        row += [traj.trace[k], traj.min_eigenvalue[k]]
        rows.append(row)
    return header, rows


# ----------------------------------------------------------------------------
# tasks
# ----------------------------------------------------------------------------

class _Run:
    """Lazily computed shared state of one resolved configuration."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        num = cfg.numerics
        self.evaluator = SelfEnergyEvaluator(cfg.environment, rtol=num["rtol"], atol=num["atol"])
        self._green = None
        self._coeffs = None
        self._solver = None
        self._traj = None
        self.notes = {}

    @property
    def green(self):
        if self._green is None:
            c = self.cfg
            self._green = solve(c.system, self.evaluator, c.grid, v_method=c.numerics["v_method"])
        return self._green

    @property
    def coeffs(self):
        if self._coeffs is None:
            self._coeffs = coefficients(self.green)
        return self._coeffs

    @property
    def solver(self):
        if self._solver is None:
            self._solver = SpectralSolver(self.cfg.system, self.cfg.environment, evaluator=self.evaluator,
                                          rtol=self.cfg.numerics["spectral_rtol"])
        return self._solver

    def initial_rho(self):
        ini = self.cfg.initial_state
        stats = self.cfg.system.statistics
        alpha = complex(*ini.get("alpha", (0.0, 0.0)))
        return initial_state(stats, ini["kind"], n=ini.get("n", 0), nbar=ini.get("nbar", 0.0),
                             alpha=alpha, n_max=self.cfg.numerics["n_max"])

    def propagate_rho(self):
        if self._traj is None:
            num = self.cfg.numerics
            self._traj = propagate_rho(self.coeffs, self.initial_rho(), self.cfg.system.statistics,
                                       self.cfg.grid, n_max=num["n_max"], method=num["rho_method"],
                                       tail_tol=num["tail_tol"], keep="final")
        return self._traj


def _task_propagate(run: _Run, out: Path):
    files = []
    g = run.green
    write_csv(out / "u.csv", *_u_table(g.times, g.u))
    files.append("u.csv")
    if run.cfg.system.dimension == 1:
        traj = run.propagate_rho()
        write_csv(out / "rho.csv", *_rho_table(traj))
        files.append("rho.csv")
        run.notes["n_max_used"] = traj.n_max
    else:
        run.notes["rho"] = "density-matrix propagation is limited to one-level systems"
    return files


def _task_coeffs(run: _Run, out: Path):
    c = run.coeffs
    write_csv(out / "coeffs.csv", *_coeff_table(c))
    if np.any(c.singular):
        run.notes["undefined_coefficient_times"] = [float(t) for t in c.times[c.singular]]
    return ["coeffs.csv"]


def _modes_table(run: _Run):
    N = run.cfg.system.dimension
    modes = run.solver.find_modes()
    if N == 1:
        header = ["omega_prime", "residue", "log_residue"]
        rows = [[m.omega_prime, m.residue[0, 0].real, m.log_residue] for m in modes]
    else:
        header = ["omega_prime", "weight", "log_residue"]
        cols = _hermitian_columns("residue", N)
        header += [c[0] for c in cols]
        rows = []
        for m in modes:
            row = [m.omega_prime, np.trace(m.residue).real, m.log_residue]
            row += [getattr(m.residue[i, j], "real" if p == "re" else "imag") for _, i, j, p in cols]
            rows.append(row)
    return header, rows


def _task_modes(run: _Run, out: Path):
    write_csv(out / "modes.csv", *_modes_table(run))
    return ["modes.csv"]


def _dos_range(run: _Run):
    num = run.cfg.numerics
    if num["dos_range"] is not None:
        return tuple(num["dos_range"])
    eps = np.linalg.eigvalsh(run.cfg.system.epsilon_s)
    support = run.cfg.environment.support()
    lo = min([eps.min()] + [a for a, _ in support])
    hi = max([eps.max()] + [b for _, b in support if math.isfinite(b)] + [a for a, _ in support])
    for res in run.cfg.environment.reservoirs:
        top = res.model.support()[-1]
        if not math.isfinite(top[1]):
            hi = max(hi, truncation_point(res.model, top[0], 1e-8)[0])
    width = hi - lo if hi > lo else 1.0
    return lo - 0.05 * width, hi + 0.05 * width


def _task_spectrum(run: _Run, out: Path):
    N = run.cfg.system.dimension
    lo, hi = _dos_range(run)
    w = np.linspace(lo, hi, run.cfg.numerics["dos_points"])
    vals, _ = run.solver.dos(w)
    if N == 1:
        header = ["omega", "D_cont"]
        rows = [[x, vals[k, 0, 0].real] for k, x in enumerate(w)]
    else:
        cols = _hermitian_columns("D_cont", N)
        header = ["omega"] + [c[0] for c in cols]
        rows = [[x] + [getattr(vals[k, i, j], "real" if p == "re" else "imag") for _, i, j, p in cols]
                for k, x in enumerate(w)]
    write_csv(out / "dos.csv", header, rows)
    write_csv(out / "modes.csv", *_modes_table(run))
    return ["dos.csv", "modes.csv"]


def _task_validate(run: _Run, out: Path):
    cfg = run.cfg
    num = cfg.numerics
    rows = []

    def add(check, a, b, dev, tol=VALIDATE_TOL):
        rows.append([check, a, b, dev, tol, "PASS" if dev <= tol else "FAIL"])

    t_max = min(cfg.grid.t_end, cfg.grid.t0 + num["validate_t_max"])
    steps = max(1, int(round((t_max - cfg.grid.t0) / cfg.grid.h)))
    sub = TimeGrid(cfg.grid.t0, cfg.grid.t0 + steps * cfg.grid.h, cfg.grid.h)
    g = solve_u(cfg.system, run.evaluator, sub)
    v_fdt, _ = solve_v_diag(cfg.system, run.evaluator, sub, g)
    us = run.solver.u(sub.times - cfg.grid.t0)
    add("u", "volterra", "spectral", float(np.max(np.abs(g.u - us))))
    add("sum_rule", "modes+continuum", "identity",
        float(np.max(np.abs(run.solver.sum_rule() - np.eye(cfg.system.dimension)))))
    _, v_dys, _ = solve_v_volterra(cfg.system, run.evaluator, sub, g)
    add("v", "fluctuation_dissipation", "dyson", float(np.max(np.abs(v_fdt - v_dys))))
    if num["oracle"]:
        stride = max(1, int(round(0.25 / cfg.grid.h)))
        idx = np.arange(0, sub.n_steps + 1, stride)
        uo, vo = discrete_bath_oracle(cfg.system, cfg.environment, num["oracle_modes"],
                                      sub.times[idx] - cfg.grid.t0, seed=num["seed"])
        add("u", "volterra", "discrete_bath", float(np.max(np.abs(g.u[idx] - uo))))
        add("v", "fluctuation_dissipation", "discrete_bath", float(np.max(np.abs(v_fdt[idx] - vo))))
    if cfg.system.dimension == 1:
        traj = run.propagate_rho()
        rho0 = run.initial_rho()
        n0 = float(np.real(np.diagonal(rho0)) @ np.arange(rho0.shape[0]))
        occ = np.abs(run.green.u[:, 0, 0]) ** 2 * n0 + np.real(run.green.v[:, 0, 0])
        add("occupation", "density_matrix", "green_functions", float(np.max(np.abs(traj.occupation - occ))), 1e-6)
        add("trace", "density_matrix", "unity", float(np.max(np.abs(traj.trace - 1.0))), 1e-9)
        add("positivity", "min_eigenvalue", "zero", float(max(0.0, -np.min(traj.min_eigenvalue))), 1e-8)
    write_csv(out / "validate.csv", ["check", "method_a", "method_b", "max_deviation", "tolerance", "status"], rows)
    run.notes["validate_failures"] = sum(r[-1] == "FAIL" for r in rows)
    return ["validate.csv"]


TASK_FUNCS = {
    "propagate": _task_propagate,
    "coeffs": _task_coeffs,
    "modes": _task_modes,
    "spectrum": _task_spectrum,
    "validate": _task_validate,
}
TASK_ORDER = ("propagate", "coeffs", "spectrum", "modes", "validate")


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def run_single(cfg: RunConfig, out: Path) -> dict:
    """Execute every task of one resolved configuration into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg)
    timings, files = {}, []
    for task in TASK_ORDER:
        if task not in cfg.tasks:
            continue
        start = time.perf_counter()
        try:
            files += TASK_FUNCS[task](run, out)
        except NMGError as exc:
            raise TaskError(task, exc) from exc
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise TaskError(task, NumericalError(str(exc))) from exc
        timings[task] = time.perf_counter() - start
        log.info("%s%s: task %s done in %.2f s", cfg.name, f" [{cfg.label}]" if cfg.label else "",
                 task, timings[task])
    manifest = copy.deepcopy(cfg.resolved)
    manifest["_manifest"] = {
        "tool": "nmg",
        "version": __version__,
        "label": cfg.label,
        "input_energy_unit": cfg.energy_unit,
        "reference_energy": cfg.reference_energy,
        "files": sorted(set(files)),
        "notes": run.notes,
        "timings_s": timings,
    }
    (out / "manifest.json").write_text(_dump(manifest))
    return manifest["_manifest"]


def _read_document(config) -> dict:
    if isinstance(config, dict):
        return copy.deepcopy(config)
    text = str(config)
    if not text.lstrip().startswith("{"):
        path = Path(text)
        if not path.is_file():
            raise ConfigError(f"configuration file {text!r} not found", "")
        text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", "") from None
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object", "")
    return doc


def run(config, out=None, *, threads: int = 1, tolerance=None, seed=None) -> dict:
    """Load ``config`` (path, JSON text or dict) and execute it.

    Sweep entries run concurrently in a pool of ``threads`` workers, each
    writing into its own sub-directory ``out/<label>``.  Returns the
    ``_manifest`` block written to ``out/manifest.json``.
    """
    doc = _read_document(config)
    runs = load_config(doc, tolerance=tolerance, seed=seed)
    out = Path(out or doc.get("output") or os.path.join("nmg_out", runs[0].name))
    out.mkdir(parents=True, exist_ok=True)
    if len(runs) == 1 and runs[0].label is None:
        return run_single(runs[0], out)
    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        futures = [pool.submit(run_single, cfg, out / cfg.label) for cfg in runs]
        entries = [f.result() for f in futures]
    top = copy.deepcopy(doc)
    top.pop("_manifest", None)
    top.pop("output", None)
    if tolerance is not None:
        top.setdefault("numerics", {})["rtol"] = float(tolerance)
    if seed is not None:
        top.setdefault("numerics", {})["seed"] = int(seed)
    top["_manifest"] = {"tool": "nmg", "version": __version__,
                        "entries": [cfg.label for cfg in runs],
                        "wall_clock_s": time.perf_counter() - start,
                        "entry_manifests": entries}
    (out / "manifest.json").write_text(_dump(top))
    return top["_manifest"]


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="nmg", description="Exact non-Markovian open-system dynamics")
    p.add_argument("--version", action="version", version=f"nmg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a configuration file")
    r.add_argument("config_path", nargs="?", help="configuration JSON (or use --config)")
    r.add_argument("--config", dest="config_flag", help="configuration JSON")
    r.add_argument("--out", help="output directory (default: nmg_out/<name>)")
    r.add_argument("--threads", type=int, default=1, help="workers for sweep entries")
    r.add_argument("--tolerance", type=float, help="relative quadrature tolerance (numerics.rtol)")
    r.add_argument("--seed", type=int, help="seed for the discrete-bath oracle sampling")
    s = sub.add_parser("scenarios", help="bundled scenario configurations")
    ssub = s.add_subparsers(dest="action", required=True)
    ssub.add_parser("list", help="list bundled scenarios")
    e = ssub.add_parser("emit", help="write a bundled scenario configuration")
    e.add_argument("name")
    e.add_argument("--out", help="file to write (default: stdout)")
    return p


def _setup_logging():
    level = os.environ.get("NMG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    try:
        if args.command == "scenarios":
            if args.action == "list":
                for name in list_scenarios():
                    print(name)
            else:
                text = emit_scenario(args.name, args.out)
                if args.out is None:
                    sys.stdout.write(text)
            return EXIT_OK
        cfg = args.config_flag or args.config_path
        if cfg is None:
            raise ConfigError("no configuration given (positional path or --config)", "")
        if args.config_flag and args.config_path and args.config_flag != args.config_path:
            raise ConfigError("conflicting configuration paths", "")
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1", "")
        run(cfg, args.out, threads=args.threads, tolerance=args.tolerance, seed=args.seed)
        return EXIT_OK
    except ConfigError as exc:
        print(f"nmg: configuration error at {exc.pointer or '/'}: {exc.reason}", file=sys.stderr)
        return EXIT_CONFIG
    except TaskError as exc:
        print(f"nmg: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if isinstance(exc.cause, NumericalError) else EXIT_FAILURE
    except NumericalError as exc:
        print(f"nmg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
