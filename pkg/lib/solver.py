import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import casadi as ca
import numpy as np
from scipy.optimize import Bounds, minimize

from lib.collocation import NlpSolution
from lib.errors import ConfigurationError

logger = logging.getLogger(__name__)

# Global constants for solver defaults
DEFAULT_TOLERANCE = 1e-7
DEFAULT_MAX_ITERATIONS = 3000
ROW_SCALE_LIMITS = (1e-2, 1e2)
ACTIVE_TOL = 1e-6

# IPOPT return_status strings grouped by outcome
IPOPT_OPTIMAL = {"Solve_Succeeded"}
IPOPT_ACCEPTABLE = {"Solved_To_Acceptable_Level", "Feasible_Point_Found"}
IPOPT_LIMIT = {"Maximum_Iterations_Exceeded", "Maximum_CpuTime_Exceeded", "Maximum_WallTime_Exceeded"}
IPOPT_INFEASIBLE = {"Infeasible_Problem_Detected", "Restoration_Failed", "Not_Enough_Degrees_Of_Freedom"}


class SolverStatus(Enum):
    OPTIMAL = "optimal"
    FEASIBLE = "feasible-only"
    ITERATION_LIMIT = "iteration-limit"
    INFEASIBLE = "infeasible"
    ERROR = "error"


@dataclass(frozen=True)
class SolverOptions:
    """
    NLP solver settings.

    Attributes:
        tolerance (float): Feasibility and optimality tolerance on the scaled problem.
        max_iterations (int): Iteration cap.
        scaling (bool): Scale constraint rows by their inverse Jacobian row norms at the start point.
        verbosity (int): 0 is silent; IPOPT print level otherwise.
        hessian (str): "exact" or "limited-memory".
        time_limit (float, optional): CPU-time cap in seconds.
    """
    tolerance: float = DEFAULT_TOLERANCE
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    scaling: bool = True
    verbosity: int = 0
    hessian: str = "exact"
    time_limit: Optional[float] = None

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ConfigurationError(f"solver tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1:
            raise ConfigurationError(f"max_iterations must be at least 1, got {self.max_iterations}")
        if self.hessian not in ("exact", "limited-memory"):
            raise ConfigurationError(f"unknown hessian mode {self.hessian!r}")


def row_scaling(nlp, z):
    """Inverse Jacobian row norms at `z`, clipped to ROW_SCALE_LIMITS; empty rows get 1."""
    if nlp.n_constraints == 0:
        return np.ones(0)
    jac = nlp.jacobian(z).tocsr()
    norms = np.sqrt(np.asarray(jac.multiply(jac).sum(axis=1)).reshape(-1))
    scale = np.ones(nlp.n_constraints)
    nonzero = norms > 0
    scale[nonzero] = np.clip(1.0 / norms[nonzero], *ROW_SCALE_LIMITS)
    return scale


def _finalize(nlp, z, status, lam_g, lam_x, iterations, opts, message):
    z = np.asarray(z, dtype=float).reshape(-1)
    fixed = nlp.lbz == nlp.ubz
    z[fixed] = nlp.lbz[fixed]
    violation = nlp.violation(z)
    if status is SolverStatus.OPTIMAL and violation > opts.tolerance:
        status = SolverStatus.ERROR
        message = f"{message}; optimal return failed the feasibility recheck ({violation:.3e})"
    elif status in (SolverStatus.ITERATION_LIMIT, SolverStatus.ERROR) and violation <= opts.tolerance:
        status = SolverStatus.FEASIBLE
    return NlpSolution(z, nlp.objective_value(z), violation, status, np.asarray(lam_g, dtype=float).reshape(-1),
                       np.asarray(lam_x, dtype=float).reshape(-1), int(iterations), nlp, message)


class SolverBackend(ABC):
    """
    Contract for NLP backends.

    Attributes:
        name (str): Registry name.
        exact_hessian (bool): Uses second derivatives.
        sparse (bool): Exploits sparsity.
    """
    name = ""
    exact_hessian = False
    sparse = False

    @abstractmethod
    def solve(self, nlp, start, opts):
        """Return an NlpSolution; convergence failures are reported through its status."""


class IpoptBackend(SolverBackend):
    """Sparse primal-dual interior point (IPOPT through CasADi) with exact second derivatives."""
    name = "ipopt"
    exact_hessian = True
    sparse = True

    def options(self, opts, scale):
        min_scale = float(scale.min()) if scale.size else 1.0
        options = {
            "ipopt.tol": opts.tolerance,
            "ipopt.constr_viol_tol": opts.tolerance * min_scale,
            "ipopt.max_iter": opts.max_iterations,
            "ipopt.print_level": int(opts.verbosity),
            "ipopt.sb": "yes",
            "ipopt.hessian_approximation": opts.hessian,
            "print_time": bool(opts.verbosity),
            "error_on_fail": False,
        }
        if opts.time_limit:
            options["ipopt.max_cpu_time"] = float(opts.time_limit)
        return options

    def solve(self, nlp, start, opts):
        start = np.clip(nlp.check_start(start), nlp.lbz, nlp.ubz)
        scale = row_scaling(nlp, start) if opts.scaling else np.ones(nlp.n_constraints)
        g = ca.times(nlp.g, ca.DM(scale)) if nlp.n_constraints else nlp.g
        solver = ca.nlpsol("solver", "ipopt", {"x": nlp.z, "f": nlp.f, "g": g}, self.options(opts, scale))
        res = solver(x0=start, lbx=nlp.lbz, ubx=nlp.ubz, lbg=nlp.lbg * scale, ubg=nlp.ubg * scale)
        stats = solver.stats()

        return_status = stats.get("return_status", "")
        if return_status in IPOPT_OPTIMAL:
            status = SolverStatus.OPTIMAL
        elif return_status in IPOPT_ACCEPTABLE:
            status = SolverStatus.FEASIBLE
        elif return_status in IPOPT_LIMIT:
            status = SolverStatus.ITERATION_LIMIT
        elif return_status in IPOPT_INFEASIBLE:
            status = SolverStatus.INFEASIBLE
        else:
            status = SolverStatus.ERROR
        lam_g = np.array(res["lam_g"]).reshape(-1) * scale
        logger.debug("ipopt: %s after %s iterations", return_status, stats.get("iter_count"))
        return _finalize(nlp, np.array(res["x"]), status, lam_g, np.array(res["lam_x"]),
                         stats.get("iter_count", 0), opts, return_status)


class SlsqpBackend(SolverBackend):
    """Dense sequential quadratic programming (scipy SLSQP); for small problems."""
    name = "slsqp"

    def solve(self, nlp, start, opts):
        start = np.clip(nlp.check_start(start), nlp.lbz, nlp.ubz)
        lbg, ubg = nlp.lbg, nlp.ubg
        equality = lbg == ubg
        lower = ~equality & np.isfinite(lbg)
        upper = ~equality & np.isfinite(ubg)

        def jac(z):
            return nlp.jacobian(z).toarray()

        constraints = []
        if equality.any():
            constraints.append({"type": "eq", "fun": lambda z: nlp.constraints(z)[equality] - lbg[equality],
                                "jac": lambda z: jac(z)[equality]})
        if lower.any():
            constraints.append({"type": "ineq", "fun": lambda z: nlp.constraints(z)[lower] - lbg[lower],
                                "jac": lambda z: jac(z)[lower]})
        if upper.any():
            constraints.append({"type": "ineq", "fun": lambda z: ubg[upper] - nlp.constraints(z)[upper],
                                "jac": lambda z: -jac(z)[upper]})

        res = minimize(nlp.objective_value, start, jac=nlp.gradient, method="SLSQP",
                       bounds=Bounds(nlp.lbz, nlp.ubz), constraints=constraints,
                       options={"maxiter": opts.max_iterations, "ftol": opts.tolerance ** 2,
                                "disp": bool(opts.verbosity)})
        if res.status == 0:
            status = SolverStatus.OPTIMAL
        elif res.status == 9:
            status = SolverStatus.ITERATION_LIMIT
        elif res.status == 4:
            status = SolverStatus.INFEASIBLE
        else:
            status = SolverStatus.ERROR
        lam_g, lam_x = least_squares_multipliers(nlp, res.x)
        logger.debug("slsqp: %s after %s iterations", res.message, res.nit)
        return _finalize(nlp, res.x, status, lam_g, lam_x, res.nit, opts, str(res.message))


BACKENDS = {IpoptBackend.name: IpoptBackend, SlsqpBackend.name: SlsqpBackend}


def get_backend(name):
    try:
        return BACKENDS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown solver backend {name!r}, expected one of {sorted(BACKENDS)}") from None


def solve(nlp, start=None, opts=None, backend="ipopt"):
    """
    Solve `nlp` from `start` (default: the transcription start point).

    Raises:
        NlpStructureError: If `start` does not match the NLP.
    """
    opts = opts or SolverOptions()
    backend = get_backend(backend) if isinstance(backend, str) else backend
    return backend.solve(nlp, nlp.start if start is None else start, opts)


def least_squares_multipliers(nlp, z):
    """Multipliers of the active set that best satisfy stationarity, in the least-squares sense."""
    z = np.asarray(z, dtype=float)
    grad = nlp.gradient(z)
    g = nlp.constraints(z)
    active_g = (nlp.lbg == nlp.ubg) | (np.abs(g - nlp.lbg) <= ACTIVE_TOL) | (np.abs(g - nlp.ubg) <= ACTIVE_TOL)
    active_x = (np.abs(z - nlp.lbz) <= ACTIVE_TOL) | (np.abs(z - nlp.ubz) <= ACTIVE_TOL)
    columns = []
    if nlp.n_constraints:
        columns.append(nlp.jacobian(z).toarray()[active_g].T)
    columns.append(np.eye(nlp.n_variables)[:, active_x])
    system = np.hstack(columns)
    lam_g, lam_x = np.zeros(nlp.n_constraints), np.zeros(nlp.n_variables)
    if system.shape[1]:
        solution = np.linalg.lstsq(system, -grad, rcond=None)[0]
        n_g = int(active_g.sum()) if nlp.n_constraints else 0
        lam_g[active_g] = solution[:n_g]
        lam_x[active_x] = solution[n_g:]
    return lam_g, lam_x


def kkt_residual(nlp, sol):
    """Stationarity max-norm of grad f + J^T lam_g + lam_x at the returned point."""
    residual = nlp.gradient(sol.z) + sol.lam_x
    if nlp.n_constraints:
        residual = residual + nlp.jacobian(sol.z).T @ sol.lam_g
    return float(np.max(np.abs(residual))) if residual.size else 0.0
