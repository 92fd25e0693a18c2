"""
Bang-bang structure detection and the regime-typed re-solve loop.

A smooth solve on a uniform mesh is scanned for thrust arcs, the mesh is
partitioned into one domain per arc with the thrust bound-fixed and the
switch times free, and the partitioned problem is re-solved and refined
until the detected structure stops changing.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import pandas as pd

from lib.collocation import (MIN_DOMAIN_WIDTH, Domain, MeshStructure, Regime, collocation_trajectory, domain_edges,
                             estimate_error, refine_mesh, solved_mesh, transcribe)
from lib.errors import ConfigurationError, DomainError, StructureSolveError
from lib.guess import initial_guess
from lib.problem import COLLOCATION_POINTS, INITIAL_SETUP
from lib.report import compute_metrics
from lib.solver import SolverOptions, SolverStatus, solve

logger = logging.getLogger(__name__)

# Global constants for detection
DEFAULT_ETA = 0.1
DEFAULT_INTERVALS = 50
MESH_TOLERANCE = 1e-2
MAX_OUTER_ITERATIONS = 5
MAX_REFINEMENTS = 10
MIN_RUN_POINTS = 2
SINGULAR_MIN_POINTS = 5
MIN_DOMAIN_INTERVALS = 2
# Half-width of an inserted repair domain, as a fraction of the arc it splits
CANDIDATE_FRACTION = 0.05
MONOTONICITY_SLACK = 1e-6
# A domain no wider than this multiple of the width floor counts as collapsed
COLLAPSE_FACTOR = 1.01

ACCEPTED = (SolverStatus.OPTIMAL, SolverStatus.FEASIBLE)


class ArcKind(Enum):
    MAX = "max"
    COAST = "coast"
    SINGULAR = "singular-suspect"

    @property
    def regime(self):
        return {ArcKind.MAX: Regime.MAX, ArcKind.COAST: Regime.COAST}.get(self, Regime.UNCLASSIFIED)

    @property
    def opposite(self):
        return ArcKind.MAX if self is not ArcKind.MAX else ArcKind.COAST

    @classmethod
    def from_regime(cls, regime):
        return {Regime.MAX: cls.MAX, Regime.COAST: cls.COAST}.get(regime, cls.SINGULAR)


@dataclass(frozen=True)
class DetectionConfig:
    """
    Settings of the structure-detection loop.

    Attributes:
        eta (float): Relative jump threshold; T >= (1 - eta) T_max is full thrust, T <= eta T_max is coast.
        intervals (int): Interval count M of the smooth uniform mesh.
        points (int): Collocation points per interval (c_p).
        mesh_tolerance (float): Refinement target of `estimate_error`.
        nlp_tolerance (float): NLP solver tolerance.
        max_outer (int): Cap on partition/re-detect iterations.
        max_refinements (int): Cap on refinement passes per partition.
        singular_min_points (int): Consecutive intermediate points that flag a singular suspect.
        min_width (float): Domain-width floor; domains at the floor are pruned.
        refine_mode (str): "h" or "ph", passed to `refine_mesh`.
        backend (str): Solver backend name.
        time_limit (float, optional): CPU-time cap per NLP solve, in seconds.
    """
    eta: float = DEFAULT_ETA
    intervals: int = DEFAULT_INTERVALS
    points: int = COLLOCATION_POINTS
    mesh_tolerance: float = MESH_TOLERANCE
    nlp_tolerance: float = 1e-7
    max_outer: int = MAX_OUTER_ITERATIONS
    max_refinements: int = MAX_REFINEMENTS
    singular_min_points: int = SINGULAR_MIN_POINTS
    min_width: float = MIN_DOMAIN_WIDTH
    refine_mode: str = "h"
    backend: str = "ipopt"
    time_limit: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ConfigurationError(f"eta must lie in (0, 1), got {self.eta}")
        if self.intervals < 1:
            raise ConfigurationError(f"mesh interval count must be at least 1, got {self.intervals}")
        if self.points < 1:
            raise ConfigurationError(f"collocation points per interval must be at least 1, got {self.points}")
        if not self.mesh_tolerance > 0:
            raise ConfigurationError(f"mesh tolerance must be positive, got {self.mesh_tolerance}")

    @classmethod
    def for_case(cls, study, case, **overrides):
        """Defaults of the initial-setup table for (study, case), with keyword overrides."""
        try:
            eta, intervals = INITIAL_SETUP[str(study).lower()][case]
        except KeyError:
            raise ConfigurationError(f"no initial setup for study {study!r} case {case!r}") from None
        values = {"eta": eta, "intervals": intervals}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @property
    def solver_options(self):
        return SolverOptions(tolerance=self.nlp_tolerance, time_limit=self.time_limit)


@dataclass(frozen=True)
class Arc:
    kind: ArcKind
    start: float
    end: float
    n_points: int = 0

    @property
    def duration(self):
        return self.end - self.start


@dataclass
class ControlStructure:
    """
    Ordered arcs tiling [t0, tf]; adjacent arcs differ in kind.

    Attributes:
        arcs (list[Arc]): Arcs in time order.
    """
    arcs: list = field(default_factory=list)

    @property
    def arc_count(self):
        return len(self.arcs)

    @property
    def switch_count(self):
        return max(len(self.arcs) - 1, 0)

    @property
    def thrust_arcs(self):
        """A_T: number of full-thrust arcs."""
        return sum(1 for arc in self.arcs if arc.kind is ArcKind.MAX)

    @property
    def singular_arcs(self):
        return [arc for arc in self.arcs if arc.kind is ArcKind.SINGULAR]

    @property
    def switch_times(self):
        return [arc.end for arc in self.arcs[:-1]]

    @property
    def kinds(self):
        return [arc.kind for arc in self.arcs]

    def to_records(self):
        return [{"regime": arc.kind.value, "start": float(arc.start), "end": float(arc.end),
                 "points": int(arc.n_points)} for arc in self.arcs]

    def to_mesh(self, intervals, points):
        """
        One domain per arc, `intervals` shared in proportion to arc duration
        (at least MIN_DOMAIN_INTERVALS each), switch times as boundary start values.
        """
        t0, tf = self.arcs[0].start, self.arcs[-1].end
        span = tf - t0
        domains = []
        for arc in self.arcs:
            count = max(MIN_DOMAIN_INTERVALS, int(round(intervals * arc.duration / span)))
            domains.append(Domain.uniform(arc.kind.regime, count, points))
        boundaries = [(t - t0) / span for t in self.switch_times]
        return MeshStructure(domains, boundaries, free_boundaries=True)


def classify_samples(thrust, eta, t_max):
    """Per-sample ArcKind values: max at or above (1 - eta) T_max, coast at or below eta T_max."""
    thrust = np.asarray(thrust, dtype=float)
    return np.where(thrust >= (1.0 - eta) * t_max, ArcKind.MAX.value,
                    np.where(thrust <= eta * t_max, ArcKind.COAST.value, ArcKind.SINGULAR.value))


def _runs(labels):
    """Maximal runs of equal labels as dicts with kind/first/last sample indices."""
    frame = pd.DataFrame({"kind": labels})
    frame["run"] = (frame["kind"] != frame["kind"].shift()).cumsum()
    runs = frame.reset_index().groupby("run").agg(kind=("kind", "first"), first=("index", "min"),
                                                   last=("index", "max"))
    return runs.to_dict("records")


def _merge_equal(runs):
    merged = []
    for run in runs:
        if merged and merged[-1]["kind"] == run["kind"]:
            merged[-1]["last"] = run["last"]
        else:
            merged.append(dict(run))
    return merged


def _absorb_short_runs(runs, singular_min_points):
    """Fold runs that are too short (or endpoint/short singular runs) into their longer neighbour."""
    runs = _merge_equal(runs)

    def too_short(i):
        run = runs[i]
        size = run["last"] - run["first"] + 1
        if size < MIN_RUN_POINTS:
            return True
        if run["kind"] == ArcKind.SINGULAR.value:
            return size < singular_min_points or i in (0, len(runs) - 1)
        return False

    while len(runs) > 1:
        candidates = [i for i in range(len(runs)) if too_short(i)]
        if not candidates:
            break
        i = min(candidates, key=lambda j: runs[j]["last"] - runs[j]["first"])
        neighbours = [j for j in (i - 1, i + 1) if 0 <= j < len(runs)]
        target = max(neighbours, key=lambda j: runs[j]["last"] - runs[j]["first"])
        if target < i:
            runs[target]["last"] = runs[i]["last"]
        else:
            runs[target]["first"] = runs[i]["first"]
        del runs[i]
        runs = _merge_equal(runs)
    return runs


def detect_structure(samples, eta, t_max, singular_min_points=SINGULAR_MIN_POINTS):
    """
    Split a sampled solution into max, coast and singular-suspect arcs.

    Args:
        samples (Trajectory): Solution sampled at its collocation points, time-ordered.
        eta (float): Relative threshold.
        t_max (float): Maximum thrust in the units of the samples.
        singular_min_points (int): Interior intermediate-thrust runs at least this long are singular suspects.

    Returns:
        ControlStructure: Arcs from the first to the last sample time; each switch
        sits midway between the two samples that bracket it.

    Raises:
        DomainError: With fewer than two samples.
    """
    times = np.asarray(samples.time, dtype=float)
    if len(times) < 2:
        raise DomainError("structure detection needs at least two samples")
    runs = _absorb_short_runs(_runs(classify_samples(samples.thrust, eta, t_max)), singular_min_points)

    arcs = []
    for k, run in enumerate(runs):
        start = times[0] if k == 0 else 0.5 * (times[runs[k - 1]["last"]] + times[run["first"]])
        end = times[-1] if k == len(runs) - 1 else 0.5 * (times[run["last"]] + times[runs[k + 1]["first"]])
        arcs.append(Arc(ArcKind(run["kind"]), float(start), float(end), run["last"] - run["first"] + 1))
    return ControlStructure(arcs)


def structure_from_solution(sol, min_width=MIN_DOMAIN_WIDTH):
    """
    Read the arcs of a regime-typed solution off its domains, dropping domains
    at the width floor and joining the neighbours they separated.
    """
    edges = domain_edges(sol)
    domains = sol.mesh.domains
    arcs = [Arc(ArcKind.from_regime(d.regime), edges[i], edges[i + 1], d.n_points) for i, d in enumerate(domains)]
    floor = min_width * COLLAPSE_FACTOR
    kept = [arc for arc in arcs if arc.duration > floor]
    if not kept:
        return ControlStructure([max(arcs, key=lambda a: a.duration)])
    if len(kept) < len(arcs):
        logger.info("pruning %d domain(s) at the width floor", len(arcs) - len(kept))

    # the first kept arc reaches back to t0; every other arc reaches back to the previous kept end
    tiled = []
    for arc in kept:
        start = edges[0] if not tiled else tiled[-1].end
        if tiled and tiled[-1].kind is arc.kind:
            tiled[-1] = replace(tiled[-1], end=arc.end, n_points=tiled[-1].n_points + arc.n_points)
        else:
            tiled.append(replace(arc, start=start))
    tiled[-1] = replace(tiled[-1], end=edges[-1])
    return ControlStructure(tiled)


def insert_candidate(structure, sol):
    """
    Split the arc holding the largest dynamics residual of `sol` and insert an
    opposite-regime domain there. An arc already near the width floor is passed
    over for the longest arc.
    """
    estimates = estimate_error(sol)
    intervals = sol.nlp.intervals(sol.z)
    worst = intervals[int(np.argmax(estimates))]
    t_mid = 0.5 * (worst.times[0] + worst.times[-1])

    arcs = list(structure.arcs)
    k = next((i for i, arc in enumerate(arcs) if arc.start <= t_mid <= arc.end), len(arcs) - 1)
    if arcs[k].duration < 3.0 * MIN_DOMAIN_WIDTH:
        k = max(range(len(arcs)), key=lambda i: arcs[i].duration)
    arc = arcs[k]
    half = max(CANDIDATE_FRACTION * arc.duration, 2.0 * MIN_DOMAIN_WIDTH)
    lo = max(arc.start + MIN_DOMAIN_WIDTH, t_mid - half)
    hi = min(arc.end - MIN_DOMAIN_WIDTH, t_mid + half)
    if hi - lo <= MIN_DOMAIN_WIDTH:
        lo, hi = arc.start + arc.duration / 3.0, arc.start + 2.0 * arc.duration / 3.0
    pieces = [Arc(arc.kind, arc.start, lo), Arc(arc.kind.opposite, lo, hi), Arc(arc.kind, hi, arc.end)]
    candidate = ControlStructure(arcs[:k] + pieces + arcs[k + 1:])
    logger.info("inserted a %s candidate on [%.6g, %.6g]", arc.kind.opposite.value, lo, hi)
    return candidate


def partition_and_solve(prob, structure, prior, config=None):
    """
    Solve `prob` on one regime-typed domain per arc, starting from `prior`.

    Raises:
        StructureSolveError: If the solver does not return a feasible point.
    """
    config = config or DetectionConfig()
    mesh = structure.to_mesh(config.intervals, config.points)
    sol = solve(transcribe(prob, mesh, prior), opts=config.solver_options, backend=config.backend)
    if sol.status not in ACCEPTED:
        raise StructureSolveError(f"regime-typed solve ended {sol.status.value} ({sol.message})", structure, sol)
    return sol


@dataclass
class BbsocResult:
    """
    Outcome of `bbsoc_solve`.

    Attributes:
        solution (NlpSolution): Best feasible solution.
        trajectory (Trajectory): That solution at its collocation points.
        structure (ControlStructure): Structure of the returned solution.
        history (list[dict]): One diagnostics record per solve.
        smooth_solution (NlpSolution): The smooth uniform-mesh solution.
        structured (bool): False when the smooth solution is returned, either because no regime-typed
            solve succeeded or because the best one was worse than the smooth optimum.
        metrics: TransferMetrics for transfer problems, else None.
    """
    solution: object
    trajectory: object
    structure: ControlStructure
    history: list
    smooth_solution: object
    structured: bool = True
    metrics: object = None


def _record(history, iteration, stage, structure, sol):
    entry = {
        "iteration": iteration,
        "stage": stage,
        "arcs": structure.arc_count if structure is not None else None,
        "thrust_arcs": structure.thrust_arcs if structure is not None else None,
        "objective": float(sol.objective),
        "violation": float(sol.violation),
        "status": sol.status.value,
    }
    history.append(entry)
    logger.info("bbsoc %s %d: J = %.9g, violation %.2e, %s", stage, iteration, sol.objective, sol.violation,
                sol.status.value, extra={"diagnostics": {"event": "bbsoc_iteration", **entry}})


def _smooth_solve(prob, guess, config, history, iteration):
    mesh = MeshStructure.uniform(config.intervals, config.points)
    sol = solve(transcribe(prob, mesh, guess), opts=config.solver_options, backend=config.backend)
    _record(history, iteration, "smooth", None, sol)
    return sol


def _refine(prob, sol, structure, config, history, iteration):
    for _ in range(config.max_refinements):
        errors = estimate_error(sol)
        if errors.max() <= config.mesh_tolerance:
            break
        mesh = refine_mesh(solved_mesh(sol), errors, config.mesh_tolerance, mode=config.refine_mode)
        candidate = solve(transcribe(prob, mesh, sol), opts=config.solver_options, backend=config.backend)
        _record(history, iteration, "refine", structure, candidate)
        if candidate.status not in ACCEPTED:
            logger.warning("refinement solve ended %s, keeping the previous mesh", candidate.status.value)
            break
        sol = candidate
    return sol


def collapsed_domains(sol, min_width=MIN_DOMAIN_WIDTH):
    """Indices of the domains of a multi-domain solution that sit at the width floor."""
    widths = np.diff(domain_edges(sol))
    if len(widths) < 2:
        return []
    return [int(i) for i in np.flatnonzero(widths <= min_width * COLLAPSE_FACTOR)]


def solve_with_repair(prob, structure, prior, config=None, history=None, iteration=0):
    """
    `partition_and_solve` with one repair attempt.

    A failed solve is retried once on `insert_candidate` of its own residuals.
    An accepted solve with a domain at the width floor is also retried once on
    a candidate, and the better of the two feasible solutions is kept.

    Returns:
        tuple: (NlpSolution, ControlStructure) of the kept solve.

    Raises:
        StructureSolveError: If the repaired structure fails too.
    """
    config = config or DetectionConfig()
    history = history if history is not None else []
    try:
        sol = partition_and_solve(prob, structure, prior, config)
    except StructureSolveError as exc:
        _record(history, iteration, "partition", structure, exc.solution)
        logger.warning("structure with %d arcs failed (%s); retrying with a repair candidate",
                       structure.arc_count, exc)
        structure = insert_candidate(structure, exc.solution if exc.solution is not None else prior)
        sol = partition_and_solve(prob, structure, prior, config)
        _record(history, iteration, "repair", structure, sol)
        return sol, structure
    _record(history, iteration, "partition", structure, sol)

    collapsed = collapsed_domains(sol, config.min_width)
    if not collapsed:
        return sol, structure
    logger.warning("domain(s) %s collapsed to the width floor; retrying with a repair candidate", collapsed)
    edges = domain_edges(sol)
    solved = ControlStructure([replace(arc, start=float(edges[i]), end=float(edges[i + 1]))
                               for i, arc in enumerate(structure.arcs)])
    candidate = insert_candidate(solved, sol)
    try:
        repaired = partition_and_solve(prob, candidate, sol, config)
    except StructureSolveError as exc:
        _record(history, iteration, "repair", candidate, exc.solution)
        logger.warning("repair candidate failed (%s); keeping the collapsed solution", exc)
        return sol, structure
    _record(history, iteration, "repair", candidate, repaired)
    if repaired.objective < sol.objective:
        return repaired, candidate
    return sol, structure


def bbsoc_solve(prob, config=None, guess=None):
    """
    Detect the bang-bang structure of `prob` and solve it with free switch times.

    Args:
        prob: A TransferProblem (its final time and longitude are capped from
            `guess`) or an OcpDefinition with finite bounds.
        config (DetectionConfig, optional): Loop settings.
        guess: Trajectory or NlpSolution start point; for a TransferProblem the
            default is `lib.guess.initial_guess`.

    Returns:
        BbsocResult

    Raises:
        StructureSolveError: If neither the smooth nor any regime-typed solve is feasible.
    """
    config = config or DetectionConfig()
    if guess is None:
        guess = initial_guess(prob)
    capped = prob.with_guess(guess) if hasattr(prob, "with_guess") else prob
    ocp = capped.to_ocp() if hasattr(capped, "to_ocp") else capped
    history = []

    smooth = _smooth_solve(capped, guess, config, history, 0)
    structure = detect_structure(collocation_trajectory(smooth), config.eta, ocp.thrust_max,
                                 config.singular_min_points)
    if structure.singular_arcs:
        tighter = replace(config, eta=config.eta / 2.0, intervals=2 * config.intervals)
        logger.warning("%d singular-suspect arc(s); re-solving with eta = %g on %d intervals",
                       len(structure.singular_arcs), tighter.eta, tighter.intervals)
        dense = _smooth_solve(capped, smooth, tighter, history, 0)
        if dense.status in ACCEPTED:
            smooth = dense
            structure = detect_structure(collocation_trajectory(dense), tighter.eta, ocp.thrust_max,
                                         config.singular_min_points)
        if structure.singular_arcs:
            logger.warning("%d arc(s) remain singular suspects and stay unclassified", len(structure.singular_arcs))
    logger.info("detected %d arcs (%d thrust) on the smooth mesh", structure.arc_count, structure.thrust_arcs)

    smooth_structure, best, prior = structure, None, smooth
    for iteration in range(1, config.max_outer + 1):
        try:
            sol, structure = solve_with_repair(capped, structure, prior, config, history, iteration)
        except StructureSolveError as exc:
            logger.warning("outer iteration %d failed: %s", iteration, exc)
            break
        sol = _refine(capped, sol, structure, config, history, iteration)
        if best is None or sol.objective < best[0].objective:
            best = (sol, structure)

        redetected = structure_from_solution(sol, config.min_width)
        if redetected.singular_arcs:
            redetected = detect_structure(collocation_trajectory(sol), config.eta, ocp.thrust_max,
                                          config.singular_min_points)
        if redetected.kinds == structure.kinds:
            best = (sol, redetected) if best[0] is sol else best
            break
        logger.info("arc count changed from %d to %d", structure.arc_count, redetected.arc_count)
        structure, prior = redetected, sol

    if best is None:
        if smooth.status not in ACCEPTED:
            raise StructureSolveError(f"{ocp.name}: no feasible solution after {config.max_outer} outer iterations",
                                      structure, smooth, history)
        logger.warning("%s: no regime-typed solve succeeded, returning the smooth solution", ocp.name)
        sol, structure, structured = smooth, smooth_structure, False
    else:
        (sol, structure), structured = best, True
        if smooth.status in ACCEPTED and sol.objective > smooth.objective + MONOTONICITY_SLACK:
            logger.warning("structured objective %.9g exceeds the smooth objective %.9g, returning the smooth "
                           "solution", sol.objective, smooth.objective)
            sol, structure, structured = smooth, smooth_structure, False

    trajectory = collocation_trajectory(sol)
    metrics = None
    if hasattr(capped, "thrust_case"):
        metrics = compute_metrics(trajectory, structure, capped)
    return BbsocResult(sol, trajectory, structure, history, smooth, structured, metrics)
