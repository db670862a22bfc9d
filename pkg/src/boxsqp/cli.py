"""Command-line experiment runner.

    boxsqp run --problem parabolic_p3 --refinements 3 --output out/
    boxsqp compare --problem elliptic_p1 --refinements 3 --output out/
    boxsqp run --config experiment.ini --kappa 0.2

Settings come from defaults for the chosen problem, then an optional INI file
(section ``[experiment]``), then command-line flags.  Every run writes a
convergence table, a deterministic iteration history, a timing file and a
JSON summary.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError, SetupError, SolverError
from .measure import BoxBounds, GridFunction, weighted_norm
from .problem import Method, SqpConfig, kkt_residual
from .sqp import SqpRun, convergence_errors, estimate_rate, run_sqplin, run_sqpnln

log = logging.getLogger(__name__)

PROBLEMS = ("elliptic_p1", "parabolic_p3", "synthetic")
SECTION = "experiment"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3

_DEFAULTS = {
    "elliptic_p1": dict(dim=3, refinements=3, kappa=0.1, alpha=0.1, beta=1.0),
    "parabolic_p3": dict(dim=3, refinements=3, kappa=0.3, alpha=0.1, beta=100.0),
    "synthetic": dict(dim=1, refinements=1, kappa=0.1, alpha=-1.0, beta=1.0),
}


@dataclass
class ExperimentConfig:
    problem: str = "elliptic_p1"
    refinements: int | None = None
    dim: int | None = None
    method: str = "sqpnln"
    kappa: float | None = None
    alpha: float | None = None
    beta: float | None = None
    u0: str | None = None  # a number, or a file with one value per control point
    lagrange_start: str = "zero"  # SQPLIN (y0, adjoint0): "zero" or "exact"
    horizon: float = 4.0
    seed: int = 0
    size: int = 16
    epsilon: float = 0.01
    tol: float = 5e-13
    max_outer_iters: int = 30
    qp_tol: float = 1e-12
    qp_max_iters: int = 50
    cg_tol: float = 1e-12
    cg_max_iters: int | None = None
    threads: int = 1
    output: str = "results"

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {', '.join(PROBLEMS)}, got {self.problem!r}")
        for key, value in _DEFAULTS[self.problem].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.method not in {m.value for m in Method}:
            raise ConfigError(f"method must be sqpnln or sqplin, got {self.method!r}")
        if self.lagrange_start not in ("zero", "exact"):
            raise ConfigError("lagrange_start must be 'zero' or 'exact'")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if not self.alpha < self.beta:
            raise ConfigError(f"need alpha < beta, got {self.alpha} and {self.beta}")
        if self.dim not in (1, 2, 3):
            raise ConfigError("dim must be 1, 2 or 3")
        if self.refinements < 1:
            raise ConfigError("refinements must be at least 1")

    def sqp_config(self) -> SqpConfig:
        return SqpConfig(kappa=self.kappa, stop_tol=self.tol, max_outer_iters=self.max_outer_iters,
                         qp_tol=self.qp_tol, qp_max_iters=self.qp_max_iters, cg_tol=self.cg_tol,
                         cg_max_iters=self.cg_max_iters, method=self.method)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _convert(name: str, raw: str):
    kind = _FIELDS[name].type
    if raw.strip().lower() in ("", "none") and "None" in kind:
        return None
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw.strip()


def _line_of(path: Path, key: str) -> int | None:
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if line.split("=", 1)[0].split(":", 1)[0].strip() == key:
            return i
    return None


def read_config(path: str | Path) -> dict:
    """Key/value settings from the ``[experiment]`` section of an INI file."""
    path = Path(path)
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not parser.has_section(SECTION):
        raise ConfigError(f"{path}: missing [{SECTION}] section")
    values = {}
    for key, raw in parser.items(SECTION):
        where = f"{path}:{_line_of(path, key) or '?'}"
        if key not in _FIELDS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError:
            raise ConfigError(f"{where}: invalid value {raw!r} for {key!r}") from None
    return values


def build_config(settings: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig(**settings)
    except SetupError as exc:
        raise ConfigError(str(exc)) from exc


# --- instances --------------------------------------------------------------

def build_problem(cfg: ExperimentConfig):
    if cfg.problem == "elliptic_p1":
        from .elliptic import exponential_tracking_problem
        return exponential_tracking_problem(cfg.dim, cfg.refinements, cfg.alpha, cfg.beta)
    if cfg.problem == "parabolic_p3":
        from .parabolic import cubic_bilinear_problem
        return cubic_bilinear_problem(cfg.dim, cfg.refinements, cfg.horizon, cfg.alpha, cfg.beta)
    from .verification import make_synthetic
    return make_synthetic(cfg.seed, cfg.size, epsilon=cfg.epsilon, kappa=cfg.kappa,
                          bounds=BoxBounds(cfg.alpha, cfg.beta))


def initial_control(cfg: ExperimentConfig, problem) -> GridFunction:
    space = problem.control_space()
    if cfg.u0 is None:
        return space.constant(0.5 * (cfg.alpha + cfg.beta))
    try:
        return space.constant(float(cfg.u0))
    except ValueError:
        pass
    path = Path(cfg.u0)
    try:
        values = np.load(path) if path.suffix == ".npy" else np.loadtxt(path)
    except OSError as exc:
        raise ConfigError(f"u0: cannot read {path} ({exc})") from exc
    values = np.ravel(values)
    if values.size != space.point_count:
        raise ConfigError(f"u0: {path} has {values.size} values, the control has {space.point_count}")
    return space.function(values)


def solve(cfg: ExperimentConfig, method: str | None = None, problem=None) -> SqpRun:
    method = method or cfg.method
    problem = build_problem(cfg) if problem is None else problem
    u0 = initial_control(cfg, problem)
    if not problem.bounds().contains(u0):
        raise ConfigError("u0 violates the bounds")
    sqp = dataclasses.replace(cfg.sqp_config(), method=method)
    if method == Method.SQPNLN.value:
        return run_sqpnln(problem, u0, sqp)
    y0 = phi0 = None
    if cfg.lagrange_start == "exact":
        y0, phi0 = problem.state_and_adjoint(u0)
    return run_sqplin(problem, u0, y0, phi0, sqp)


# --- reports ----------------------------------------------------------------

def fitted_rate(run: SqpRun) -> float | None:
    try:
        return estimate_rate(convergence_errors(run))[0]
    except ValueError:
        return None


def format_table(run: SqpRun) -> str:
    head = f"{'n':>3}  {'J(u_n)':>24}  {'delta_n':>9}  {'#free':>9}  {'#lower':>9}  {'#upper':>9}"
    lines = [head, "-" * len(head)]
    for r in run.records:
        delta = "" if math.isnan(r.stepsize) else f"{r.stepsize:.1e}"
        lines.append(f"{r.n:>3}  {r.objective:>24.16e}  {delta:>9}  {r.count_free:>9}  "
                     f"{r.count_lower:>9}  {r.count_upper:>9}")
    return "\n".join(lines) + "\n"


HISTORY_FIELDS = ("n", "objective", "stepsize", "count_free", "count_lower", "count_upper", "qp_iterations")


def write_history(run: SqpRun, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in run.records:
            w.writerow([r.n, repr(float(r.objective)), "" if math.isnan(r.stepsize) else repr(float(r.stepsize)),
                        r.count_free, r.count_lower, r.count_upper, r.qp_iterations])


def write_timings(run: SqpRun, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("n", "wall_time_seconds"))
        for r in run.records:
            w.writerow((r.n, f"{r.wall_time_seconds:.3f}"))


def summary(run: SqpRun, cfg: ExperimentConfig, problem) -> dict:
    out = {
        "problem": cfg.problem,
        "method": run.method,
        "status": run.status.value,
        "iterations": run.iterations,
        "final_objective": run.records[-1].objective,
        "fitted_rate": fitted_rate(run),
        "control_points": problem.control_space().point_count,
        "message": run.message,
    }
    if run.converged:
        out["kkt_residual"] = kkt_residual(problem, cfg.kappa, run.final_control)
    return out


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_experiment(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    run = solve(cfg, problem=problem)
    (out / "table.txt").write_text(format_table(run), encoding="utf-8")
    write_history(run, out / "history.csv")
    write_timings(run, out / "timings.csv")
    info = summary(run, cfg, problem)
    _dump(info, out / "summary.json")
    print(format_table(run), end="")
    print(f"status: {info['status']}  iterations: {info['iterations']}  rate: {info['fitted_rate']}")
    return EXIT_OK if run.converged else EXIT_NOT_CONVERGED


def compare_methods(cfg: ExperimentConfig) -> dict:
    """Run both methods on separate instances of the same problem."""
    report = {"problem": cfg.problem, "lagrange_start": cfg.lagrange_start, "runs": {}}
    finals = {}
    for method in (Method.SQPNLN.value, Method.SQPLIN.value):
        t0 = time.monotonic()
        try:
            run = solve(cfg, method)
        except SolverError as exc:
            report["runs"][method] = {"status": "error", "converged": False, "message": str(exc)}
            continue
        report["runs"][method] = {
            "status": run.status.value,
            "converged": run.converged,
            "iterations": run.iterations,
            "wall_time_seconds": round(time.monotonic() - t0, 3),
            "final_objective": run.records[-1].objective,
            "message": run.message,
        }
        if run.converged:
            finals[method] = run.final_control
    if len(finals) == 2:
        a, b = finals[Method.SQPNLN.value], finals[Method.SQPLIN.value]
        report["relative_difference"] = weighted_norm(a - b, np.inf) / max(weighted_norm(a, np.inf), 1e-300)
    else:
        report["relative_difference"] = None
    return report


# --- argument handling ------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boxsqp", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("run", "solve one instance with one method"),
                       ("compare", "solve one instance with both methods")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="INI file with an [experiment] section")
        s.add_argument("--problem", choices=PROBLEMS)
        s.add_argument("--refinements", type=int)
        s.add_argument("--dim", type=int, choices=(1, 2, 3))
        s.add_argument("--method", choices=[m.value for m in Method])
        s.add_argument("--kappa", type=float)
        s.add_argument("--alpha", type=float)
        s.add_argument("--beta", type=float)
        s.add_argument("--tol", type=float, help="outer stopping tolerance")
        s.add_argument("--u0", help="constant initial control or a file of values")
        s.add_argument("--lagrange-start", dest="lagrange_start", choices=("zero", "exact"))
        s.add_argument("--seed", type=int)
        s.add_argument("--size", type=int)
        s.add_argument("--epsilon", type=float)
        s.add_argument("--max-outer-iters", dest="max_outer_iters", type=int)
        s.add_argument("--output")
        s.add_argument("--threads", type=int, help="BLAS threads (default 1 for reproducibility)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items()
             if v is not None and k not in ("command", "config", "verbose")}
    try:
        settings = read_config(args.config) if args.config else {}
        settings.update(flags)
        cfg = build_config(settings)
        with threadpool_limits(limits=cfg.threads):
            if args.command == "run":
                return run_experiment(cfg)
            report = compare_methods(cfg)
            out = Path(cfg.output)
            out.mkdir(parents=True, exist_ok=True)
            _dump(report, out / "compare.json")
            print(json.dumps(report, indent=2, sort_keys=True))
            return EXIT_OK
    except (ConfigError, SetupError) as exc:
        print(f"boxsqp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
