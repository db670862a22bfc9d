"""Outer SQP loops, convergence bookkeeping and complementarity diagnostics."""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import SetupError, SolverError
from .measure import GridFunction, classify_active, weighted_norm
from .problem import FullObjective, LagrangeNewtonOracle, ProblemOracle, SqpConfig
from .qp import QpInstance, solve_ssn

log = logging.getLogger(__name__)

_DIVERGENCE_WINDOW = 5


class Status(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    SUBPROBLEM_FAILURE = "subproblem_failure"
    DIVERGED = "diverged"


@dataclass(frozen=True)
class IterationRecord:
    n: int
    objective: float
    stepsize: float  # nan for n = 0
    count_free: int
    count_lower: int
    count_upper: int
    qp_iterations: int = 0
    wall_time_seconds: float = 0.0


@dataclass
class SqpRun:
    records: list[IterationRecord]
    final_control: GridFunction
    status: Status
    method: str = "sqpnln"
    message: str = ""
    controls: list[GridFunction] = field(default_factory=list, repr=False)

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED

    @property
    def iterations(self) -> int:
        return self.records[-1].n

    @property
    def stepsizes(self) -> list[float]:
        return [r.stepsize for r in self.records[1:]]


@dataclass(frozen=True)
class TauBandReport:
    tau: float
    count_tau_plus: int
    count_tau_minus: int
    count_biactive: int
    # points of the tau-bands not sitting on the bound the projection formula predicts
    misplaced_plus: int = 0
    misplaced_minus: int = 0


def stepsize(previous_step: GridFunction, current_control: GridFunction) -> float:
    """||v_{n-1}||_inf / max(1, ||u_n||_inf)."""
    previous_step._check(current_control)
    return weighted_norm(previous_step, np.inf) / max(1.0, weighted_norm(current_control, np.inf))


def stop_test(u_old: GridFunction, u_new: GridFunction, j_old: float, j_new: float, tol: float) -> bool:
    diff = weighted_norm(u_new - u_old, np.inf)
    rel = diff / max(1.0, weighted_norm(u_new, np.inf))
    return max(diff, rel) < tol or j_old == j_new


def _record(n, j, delta, u, bounds, qp_its, t0):
    free, lower, upper = classify_active(u, bounds).counts
    return IterationRecord(n, j, delta, free, lower, upper, qp_its, time.monotonic() - t0)


def _check_start(oracle, u0):
    if not oracle.control_space().same_as(u0.space):
        raise SetupError("initial control lives on a different space")
    if not oracle.bounds().contains(u0):
        raise SetupError("initial control violates the bounds")


def run_sqpnln(oracle: ProblemOracle, u0: GridFunction, cfg: SqpConfig, callback=None) -> SqpRun:
    """Control-reduced SQP: one box-constrained QP per iteration at exact
    state and adjoint of the current control."""
    _check_start(oracle, u0)
    bounds, kappa = oracle.bounds(), cfg.kappa
    J = FullObjective(oracle, kappa)
    t0 = time.monotonic()
    u = u0
    try:
        j = J(u)
    except SolverError as exc:
        msg = f"state solve failed at iterate 0: {exc}"
        rec = IterationRecord(0, np.nan, np.nan, u.space.point_count, 0, 0)
        return SqpRun([rec], u, Status.SUBPROBLEM_FAILURE, "sqpnln", msg, [u])
    records = [_record(0, j, np.nan, u, bounds, 0, t0)]
    controls = [u]
    if callback:
        callback(records[-1])
    status, message = Status.MAX_ITERS, ""
    for n in range(1, cfg.max_outer_iters + 1):
        try:
            qp = QpInstance.from_oracle(oracle, kappa, u)
            res = solve_ssn(qp, None, cfg.qp_tol, cfg.qp_max_iters, cfg.cg_tol, cfg.cg_max_iters)
            u_new = res.control
            j_new = J(u_new)
        except SolverError as exc:
            status, message = Status.SUBPROBLEM_FAILURE, f"iterate {n}: {type(exc).__name__}: {exc}"
            log.warning("sqpnln %s", message)
            break
        records.append(_record(n, j_new, stepsize(res.step, u_new), u_new, bounds, res.ssn_iterations, t0))
        controls.append(u_new)
        if callback:
            callback(records[-1])
        done = stop_test(u, u_new, j, j_new, cfg.stop_tol)
        u, j = u_new, j_new
        if done:
            status = Status.CONVERGED
            break
    return SqpRun(records, u, status, "sqpnln", message, controls)


def run_sqplin(oracle: LagrangeNewtonOracle, u0: GridFunction, y0=None, phi0=None,
               cfg: SqpConfig | None = None, callback=None) -> SqpRun:
    """Lagrange-Newton SQP with state, adjoint and control as independent
    iterates; only linearized PDEs are solved.

    ``y0``/``phi0`` default to zero.  The run is declared diverged when the
    control step grows over five consecutive iterations or iterates stop
    being finite.
    """
    if cfg is None:
        raise SetupError("an SqpConfig is required")
    _check_start(oracle, u0)
    bounds, kappa = oracle.bounds(), cfg.kappa
    zy, zp = oracle.zero_iterate()
    state = zy if y0 is None else y0
    adjoint = zp if phi0 is None else phi0
    t0 = time.monotonic()
    u = u0

    def tikhonov(c):
        return 0.5 * kappa * weighted_norm(c, 2) ** 2

    try:
        lin = oracle.linearize(u, state, adjoint)
        j = lin.model_objective() + tikhonov(u)
    except SolverError as exc:
        rec = IterationRecord(0, np.nan, np.nan, u.space.point_count, 0, 0)
        return SqpRun([rec], u, Status.SUBPROBLEM_FAILURE, "sqplin", str(exc), [u])
    records = [_record(0, j, np.nan, u, bounds, 0, t0)]
    controls = [u]
    if callback:
        callback(records[-1])
    status, message = Status.MAX_ITERS, ""
    steps: list[float] = []
    for n in range(1, cfg.max_outer_iters + 1):
        try:
            qp = QpInstance.from_linearization(lin, kappa, bounds)
            res = solve_ssn(qp, None, cfg.qp_tol, cfg.qp_max_iters, cfg.cg_tol, cfg.cg_max_iters)
        except SolverError as exc:
            status, message = Status.SUBPROBLEM_FAILURE, f"iterate {n}: {type(exc).__name__}: {exc}"
            break
        u_new = res.control
        with np.errstate(all="ignore"):
            state, adjoint = lin.advance(res.step)
        if not (np.all(np.isfinite(state)) and np.all(np.isfinite(adjoint))):
            status, message = Status.DIVERGED, f"iterate {n}: non-finite state or adjoint"
            break
        try:
            with np.errstate(over="raise", invalid="raise"):
                lin = oracle.linearize(u_new, state, adjoint)
                j_new = lin.model_objective() + tikhonov(u_new)
        except (SolverError, FloatingPointError) as exc:
            status, message = Status.DIVERGED, f"iterate {n}: {exc}"
            break
        records.append(_record(n, j_new, stepsize(res.step, u_new), u_new, bounds, res.ssn_iterations, t0))
        controls.append(u_new)
        if callback:
            callback(records[-1])
        done = stop_test(u, u_new, j, j_new, cfg.stop_tol)
        u, j = u_new, j_new
        if done:
            status = Status.CONVERGED
            break
        steps.append(weighted_norm(res.step, np.inf))
        recent = steps[-(_DIVERGENCE_WINDOW + 1):]
        if len(recent) == _DIVERGENCE_WINDOW + 1 and all(b > a for a, b in zip(recent, recent[1:])):
            status, message = Status.DIVERGED, f"control step grew for {_DIVERGENCE_WINDOW} iterations"
            break
    return SqpRun(records, u, status, "sqplin", message, controls)


def convergence_errors(run: SqpRun, exclude_last: int = 2) -> list[float]:
    """``||u_n - u_final||_inf`` with the final iterate as reference.

    The last ``exclude_last`` points (the reference itself and its round-off
    dominated neighbour) are left out of the returned sequence.
    """
    ref = run.final_control
    errs = [weighted_norm(c - ref, np.inf) for c in run.controls]
    return errs[:max(len(errs) - exclude_last, 0)]


def estimate_rate(error_sequence) -> tuple[float, float]:
    """Least-squares fit of ``log e_{n+1} = log C + r log e_n``; returns (r, C)."""
    e = np.asarray(error_sequence, dtype=float)
    if e.size < 3:
        raise ValueError("need at least three errors to estimate a rate")
    if np.any(e <= 0) or np.any(np.diff(e) >= 0):
        raise ValueError("error sequence must be positive and strictly decreasing")
    r, logc = np.polyfit(np.log(e[:-1]), np.log(e[1:]), 1)
    return float(r), float(np.exp(logc))


ROUNDOFF_STEPSIZE = 64 * np.finfo(float).eps


def quadratic_tail_ok(stepsizes, k_max: float = 1e6, count: int = 3,
                      floor: float = ROUNDOFF_STEPSIZE) -> bool:
    """delta_{n+1} <= k_max * delta_n^2 over the last ``count`` stepsizes.

    Stepsizes at or below ``floor`` measure floating-point noise rather than
    the iteration and are skipped; pass ``floor=0`` for the raw test.
    """
    d = [x for x in stepsizes if x > floor][-count:]
    if len(d) < 2:
        return False
    return all(b <= k_max * a * a for a, b in zip(d, d[1:]))


def tau_band_report(oracle: ProblemOracle, kappa: float, u: GridFunction, tau: float | None = None) -> TauBandReport:
    g = (oracle.phi(u) + kappa * u).values
    if tau is None:
        tau = 1e-6 * float(np.max(np.abs(g)))
    if not tau > 0:
        raise ValueError("tau must be positive")
    part = classify_active(u, oracle.bounds())
    at_lower = np.zeros(g.size, bool)
    at_lower[part.lower_active] = True
    at_upper = np.zeros(g.size, bool)
    at_upper[part.upper_active] = True
    plus, minus = g > tau, g < -tau
    biactive = (at_lower | at_upper) & (np.abs(g) <= tau)
    return TauBandReport(
        tau=tau,
        count_tau_plus=int(plus.sum()),
        count_tau_minus=int(minus.sum()),
        count_biactive=int(biactive.sum()),
        misplaced_plus=int((plus & ~at_lower).sum()),
        misplaced_minus=int((minus & ~at_upper).sum()),
    )
