import logging
from dataclasses import dataclass

import casadi as ca
import numpy as np

from lib.collocation import MeshStructure, collocation_trajectory, estimate_error, refine_mesh, transcribe
from lib.dynamics import (GUESS_RTOL, N_CONTROLS, N_STATES, LONGITUDE_STATE_NAMES, CONTROL_NAMES, Trajectory,
                          longitude_rates, propagate, velocity_direction)
from lib.elements import TWO_PI
from lib.errors import EventNotReachedError, StallError, TransferError
from lib.problem import COLLOCATION_POINTS, INITIAL_SETUP, P_BOUND_FACTORS, OcpDefinition, path_constraint
from lib.solver import SolverOptions, SolverStatus, solve

logger = logging.getLogger(__name__)

# Global constants for the guess generators
REVOLUTION_CAP = 2
GUESS_SAMPLES = 400
TARGET_TOLERANCE = 1e-4
STALL_CYCLES = 5
MAX_CYCLES = 1000
# Loose cap on dt/dL over one sub-problem, as a multiple of the circular period at the p upper bound
TIME_CAP_FACTOR = 100.0

PARTIAL = "partial"
MULTIPLE = "multiple"


@dataclass
class GuessTrajectory(Trajectory):
    """
    A time-domain guess with its provenance ("propagated" or "chained").
    """
    provenance: str = "propagated"

    @classmethod
    def from_trajectory(cls, traj, provenance):
        traj = traj.to_time_domain()
        controls = traj.controls.copy()
        # unit directions wherever the engine is on
        on = controls[:, 0] > 0
        norms = np.linalg.norm(controls[on, 1:], axis=1, keepdims=True)
        controls[on, 1:] = controls[on, 1:] / np.where(norms > 0, norms, 1.0)
        return cls(traj.t, traj.states, controls, "time", provenance)


@dataclass(frozen=True)
class SubProblemResult:
    """One cycle of the chained guess: trajectory over at most 2*pi of L, terminal state and objective."""
    trajectory: Trajectory
    terminal_state: np.ndarray
    terminal_longitude: float
    objective: float
    status: SolverStatus


@dataclass(frozen=True)
class ChainConfig:
    """
    Settings of the chained sub-problem guess.

    Attributes:
        intervals (int): Mesh intervals per sub-problem (1 with points=4 reproduces the coarse setting).
        points (int): Collocation points per interval.
        nlp_tolerance (float): Solver tolerance for the sub-problems.
        mesh_tolerance (float): Refinement target of the sub-problem meshes.
        refinements (int): Refinement passes per sub-problem.
        target_tolerance (float): Termination tolerance on p (relative), e and i.
        stall_cycles (int): Consecutive non-decreasing cycles tolerated before giving up.
        max_cycles (int): Hard cap on the number of sub-problems.
        backend (str): Solver backend name.
    """
    intervals: int = 10
    points: int = 3
    nlp_tolerance: float = 1e-5
    mesh_tolerance: float = 1e-2
    refinements: int = 0
    target_tolerance: float = TARGET_TOLERANCE
    stall_cycles: int = STALL_CYCLES
    max_cycles: int = MAX_CYCLES
    backend: str = "ipopt"


def _time_state(y, lon):
    """Time-layout state (p, f, g, h, k, L, m) from a longitude-layout one."""
    x = np.array(y, dtype=float)
    x[5] = lon
    return x


def propagated_guess(prob, revolution_cap=REVOLUTION_CAP, thrust=None, tolerance=GUESS_RTOL):
    """
    Integrate from the departure orbit at full thrust along the velocity until p = pf.

    Args:
        prob (TransferProblem): The transfer.
        revolution_cap (float): Revolutions allowed before giving up.
        thrust (float, optional): Scaled thrust override; defaults to T_max.
        tolerance (float): Integrator relative tolerance.

    Returns:
        GuessTrajectory

    Raises:
        EventNotReachedError: If p never reaches pf within the cap.
    """
    consts = prob.dynamics_constants
    level = prob.t_max if thrust is None else thrust
    start = prob.initial_state
    lon0 = float(start.mee.L)
    y0 = start.as_vector()
    y0[5] = 0.0
    pf = prob.pf

    def control_law(y, lon):
        return np.concatenate(([level], velocity_direction(_time_state(y, lon), consts.mu)))

    traj = propagate(y0, control_law, (lon0, lon0 + TWO_PI * revolution_cap), consts, tolerance=tolerance,
                     independent="longitude", event=lambda lon, y: y[0] - pf, require_event=True,
                     n_samples=GUESS_SAMPLES)
    guess = GuessTrajectory.from_trajectory(traj, "propagated")
    logger.info("propagated guess for %s: %.4f revolutions, %.4f TU", prob.label, guess.revolutions,
                guess.time[-1] - guess.time[0])
    return guess


def classify_case(prob, intervals=None, points=COLLOCATION_POINTS, opts=None, backend="ipopt"):
    """
    Solve once on the default uniform mesh from the propagated guess and
    classify the transfer as PARTIAL (N <= 1) or MULTIPLE revolutions.

    Any failure classifies as MULTIPLE.
    """
    if intervals is None:
        intervals = INITIAL_SETUP.get(prob.study, {}).get(prob.case, (0.1, 50))[1]
    try:
        guess = propagated_guess(prob)
        nlp = transcribe(prob.with_guess(guess), MeshStructure.uniform(intervals, points), guess)
        sol = solve(nlp, opts=opts or SolverOptions(), backend=backend)
    except TransferError as exc:
        logger.warning("classification of %s failed (%s), assuming %s", prob.label, exc, MULTIPLE)
        return MULTIPLE
    if sol.status not in (SolverStatus.OPTIMAL, SolverStatus.FEASIBLE):
        logger.warning("classification solve of %s ended %s, assuming %s", prob.label, sol.status.value, MULTIPLE)
        return MULTIPLE
    revolutions = collocation_trajectory(sol).revolutions
    return MULTIPLE if revolutions > 1.0 else PARTIAL


def subproblem_objective(state, targets):
    """
    Mean-square relative miss of the one-revolution sub-problem.

    Args:
        state: (p, f, g, h, k, ...) as a numpy vector or a CasADi column.
        targets (tuple): (p_D, e_D, i_D), scaled length and radians.
    """
    p_d, e_d, i_d = targets
    tan2 = np.tan(i_d / 2.0) ** 2
    return (((state[0] - p_d) / (1.0 + p_d)) ** 2
            + ((state[1] ** 2 + state[2] ** 2 - e_d ** 2) / (1.0 + e_d ** 2)) ** 2
            + ((state[3] ** 2 + state[4] ** 2 - tan2) / (1.0 + tan2)) ** 2)


def target_miss(state, targets):
    """(|p - p_D| / p_D, |e - e_D|, |i - i_D|) of a longitude- or time-layout state."""
    p_d, e_d, i_d = targets
    e = np.hypot(state[1], state[2])
    i = 2.0 * np.arctan(np.hypot(state[3], state[4]))
    return np.array([abs(state[0] - p_d) / p_d, abs(e - e_d), abs(i - i_d)])


def _subproblem_ocp(prob, y0, lon0, targets):
    consts = prob.dynamics_constants
    bounds = prob.bounds
    p_lo, p_hi = P_BOUND_FACTORS[0] * min(prob.p0, prob.pf), P_BOUND_FACTORS[1] * max(prob.p0, prob.pf)
    t_cap = TIME_CAP_FACTOR * TWO_PI * p_hi ** 1.5
    y0 = np.asarray(y0, dtype=float)
    return OcpDefinition(
        name=f"{prob.label}-cycle",
        n_states=N_STATES,
        n_controls=N_CONTROLS,
        dynamics=lambda y, u, lon: longitude_rates(y, lon, u, consts.mu, consts.exhaust_velocity),
        state_lower=[p_lo, -1.0, -1.0, -1.0, -1.0, y0[5], bounds.state_lower[6]],
        state_upper=[p_hi, 1.0, 1.0, 1.0, 1.0, y0[5] + t_cap, y0[6]],
        control_lower=bounds.control_lower,
        control_upper=bounds.control_upper,
        t0_bounds=(lon0, lon0),
        tf_bounds=(lon0, lon0 + TWO_PI),
        events=lambda x0, xf, s0, sf: x0 - ca.DM(y0),
        events_lower=np.zeros(N_STATES),
        events_upper=np.zeros(N_STATES),
        objective=lambda x0, xf, s0, sf: subproblem_objective(xf, targets),
        path=lambda y, u: path_constraint(u),
        path_lower=np.zeros(1),
        path_upper=np.zeros(1),
        thrust_index=0,
        thrust_max=prob.t_max,
        direction_indices=(1, 2, 3),
        state_names=LONGITUDE_STATE_NAMES,
        control_names=CONTROL_NAMES,
    )


def _solve_cycle(prob, y0, lon0, targets, config):
    consts = prob.dynamics_constants

    def control_law(y, lon):
        return np.concatenate(([prob.t_max], velocity_direction(_time_state(y, lon), consts.mu)))

    seed = propagate(y0, control_law, (lon0, lon0 + TWO_PI), consts, independent="longitude",
                     n_samples=GUESS_SAMPLES // 4)
    ocp = _subproblem_ocp(prob, y0, lon0, targets)
    opts = SolverOptions(tolerance=config.nlp_tolerance)
    mesh = MeshStructure.uniform(config.intervals, config.points)
    guess = seed
    for attempt in range(config.refinements + 1):
        sol = solve(transcribe(ocp, mesh, guess), opts=opts, backend=config.backend)
        if attempt == config.refinements or sol.status not in (SolverStatus.OPTIMAL, SolverStatus.FEASIBLE):
            break
        errors = estimate_error(sol)
        if errors.max() <= config.mesh_tolerance:
            break
        mesh, guess = refine_mesh(mesh, errors, config.mesh_tolerance), sol

    traj = collocation_trajectory(sol)
    traj = Trajectory(traj.t, traj.states, traj.controls, "longitude")
    return SubProblemResult(traj, traj.states[-1].copy(), float(traj.t[-1]),
                            float(subproblem_objective(traj.states[-1], targets)), sol.status)


def chained_guess(prob, config=None):
    """
    Chain one-revolution sub-problems, each minimizing `subproblem_objective`
    from the terminal state of the previous one, until p, e and i are within
    `config.target_tolerance` of the arrival orbit.

    Returns:
        GuessTrajectory: The concatenated sub-trajectories in the time domain.

    Raises:
        StallError: If the objective fails to decrease for `config.stall_cycles` consecutive cycles.
    """
    config = config or ChainConfig()
    term = prob.terminal_elements
    targets = (term.p, term.e, term.i)

    start = prob.initial_state
    lon = float(start.mee.L)
    y = start.as_vector()
    y[5] = 0.0

    direction = velocity_direction(_time_state(y, lon))
    combined = Trajectory([lon], [y], [np.concatenate(([0.0], direction))], "longitude")
    history = [float(subproblem_objective(y, targets))]
    non_decreasing = 0
    cycle = 0
    while np.any(target_miss(y, targets) > config.target_tolerance):
        if cycle >= config.max_cycles:
            raise StallError(f"{prob.label}: no convergence after {cycle} sub-problems", history)
        result = _solve_cycle(prob, y, lon, targets, config)
        cycle += 1
        combined = combined.concatenate(result.trajectory)
        y, lon = result.terminal_state, result.terminal_longitude

        non_decreasing = non_decreasing + 1 if result.objective >= history[-1] else 0
        history.append(result.objective)
        logger.info("%s cycle %d: J = %.3e, miss = %s, status %s", prob.label, cycle, result.objective,
                    np.array2string(target_miss(y, targets), precision=2), result.status.value)
        if non_decreasing >= config.stall_cycles:
            raise StallError(f"{prob.label}: sub-problem objective stalled for {non_decreasing} cycles", history)

    guess = GuessTrajectory.from_trajectory(combined, "chained")
    logger.info("chained guess for %s: %d cycles, %.4f revolutions", prob.label, cycle, guess.revolutions)
    return guess


def initial_guess(prob, config=None):
    """Propagated guess when it reaches pf within the revolution cap, chained guess otherwise."""
    try:
        return propagated_guess(prob)
    except EventNotReachedError as exc:
        logger.info("%s; falling back to the chained guess", exc)
        return chained_guess(prob, config)
