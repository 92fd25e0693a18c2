"""
Multi-domain Legendre-Gauss-Radau transcription.

A mesh is an ordered list of domains, each split into intervals that carry
their own LGR rule. Within a domain consecutive intervals share their
boundary state column; between domains the states are tied by explicit
linkage constraints. Domain boundary times are decision variables when the
mesh is regime-typed.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property, lru_cache
from typing import Optional

import casadi as ca
import numpy as np
from scipy.interpolate import BarycentricInterpolator, interp1d
from scipy.sparse import coo_matrix
from scipy.special import eval_legendre, roots_jacobi

from lib.dynamics import Trajectory
from lib.errors import ConfigurationError, DomainError, ExtrapolationError, NlpStructureError

logger = logging.getLogger(__name__)

# Global constants for the mesh
MIN_DOMAIN_WIDTH = 1e-4
MAX_ORDER = 10
ERROR_SAMPLES_PER_POINT = 3
MERGE_FACTOR = 1e-2


@dataclass(frozen=True)
class LgrRule:
    """
    Radau rule on [-1, 1) including -1.

    Attributes:
        n (int): Number of collocation points.
        nodes (ndarray): Shape (n,), nodes[0] == -1.
        weights (ndarray): Shape (n,), positive, summing to 2.
        diff_matrix (ndarray): Shape (n, n+1), maps values at nodes plus +1 to derivatives at nodes.
    """
    n: int
    nodes: np.ndarray
    weights: np.ndarray
    diff_matrix: np.ndarray

    @property
    def support(self):
        return np.append(self.nodes, 1.0)


def barycentric_differentiation(points):
    """Square derivative matrix of the Lagrange interpolant through `points`."""
    points = np.asarray(points, dtype=float)
    diff = points[:, None] - points[None, :]
    np.fill_diagonal(diff, 1.0)
    bary = 1.0 / diff.prod(axis=1)
    matrix = (bary[None, :] / bary[:, None]) / diff
    np.fill_diagonal(matrix, 0.0)
    np.fill_diagonal(matrix, -matrix.sum(axis=1))
    return matrix


@lru_cache(maxsize=None)
def lgr_rule(n):
    """
    Build the n-point LGR rule.

    The interior nodes are the roots of the Jacobi polynomial P^(0,1)_{n-1},
    which together with -1 are the roots of P_{n-1} + P_n.

    Raises:
        DomainError: If n < 1.
    """
    if int(n) != n or n < 1:
        raise DomainError(f"LGR order must be a positive integer, got {n}")
    n = int(n)
    if n == 1:
        nodes = np.array([-1.0])
        weights = np.array([2.0])
    else:
        interior, _ = roots_jacobi(n - 1, 0.0, 1.0)
        nodes = np.concatenate(([-1.0], np.sort(interior)))
        weights = np.empty(n)
        weights[0] = 2.0 / n ** 2
        weights[1:] = (1.0 - nodes[1:]) / (n * eval_legendre(n - 1, nodes[1:])) ** 2

    diff_matrix = barycentric_differentiation(np.append(nodes, 1.0))[:n]
    for array in (nodes, weights, diff_matrix):
        array.setflags(write=False)
    return LgrRule(n, nodes, weights, diff_matrix)


class Regime(Enum):
    MAX = "max"
    COAST = "coast"
    UNCLASSIFIED = "unclassified"


@dataclass
class Domain:
    """
    One domain of the mesh.

    Attributes:
        regime (Regime): Thrust regime enforced by bounds.
        fractions (list[float]): Interval widths as fractions of the domain, summing to 1.
        points (list[int]): Collocation points per interval.
    """
    regime: Regime
    fractions: list
    points: list

    def __post_init__(self):
        self.fractions = [float(f) for f in self.fractions]
        self.points = [int(n) for n in self.points]
        if len(self.fractions) != len(self.points) or not self.fractions:
            raise NlpStructureError("domain needs one point count per interval")
        if not np.isclose(sum(self.fractions), 1.0, rtol=0.0, atol=1e-12):
            raise NlpStructureError(f"interval fractions sum to {sum(self.fractions)}, expected 1")

    @classmethod
    def uniform(cls, regime, intervals, points):
        return cls(regime, [1.0 / intervals] * intervals, [points] * intervals)

    @property
    def n_points(self):
        return sum(self.points)

    @property
    def starts(self):
        return np.concatenate(([0.0], np.cumsum(self.fractions)[:-1]))


@dataclass
class MeshStructure:
    """
    Ordered domains and their boundaries.

    Attributes:
        domains (list[Domain]): Domains in time order.
        boundaries (list[float]): Interior domain boundaries as fractions of [t0, tf];
            the start values of the boundary times when they are free.
        free_boundaries (bool): Whether interior boundary times are decision variables.
    """
    domains: list
    boundaries: list = field(default_factory=list)
    free_boundaries: Optional[bool] = None

    def __post_init__(self):
        self.boundaries = [float(b) for b in self.boundaries]
        if len(self.boundaries) != len(self.domains) - 1:
            raise NlpStructureError(f"{len(self.domains)} domains need {len(self.domains) - 1} boundaries")
        if np.any(np.diff([0.0, *self.boundaries, 1.0]) <= 0):
            raise NlpStructureError(f"domain boundaries must increase strictly inside (0, 1): {self.boundaries}")
        if self.free_boundaries is None:
            self.free_boundaries = any(d.regime is not Regime.UNCLASSIFIED for d in self.domains)

    @classmethod
    def uniform(cls, intervals, points, regime=Regime.UNCLASSIFIED):
        """Single domain of equally wide intervals."""
        return cls([Domain.uniform(regime, intervals, points)])

    @property
    def n_domains(self):
        return len(self.domains)

    @property
    def n_intervals(self):
        return sum(len(d.fractions) for d in self.domains)

    @property
    def n_points(self):
        return sum(d.n_points for d in self.domains)

    @property
    def regimes(self):
        return [d.regime for d in self.domains]


@dataclass(frozen=True)
class IntervalData:
    """Numeric content of one mesh interval."""
    domain: int
    regime: Regime
    rule: LgrRule
    times: np.ndarray  # support times, shape (n+1,)
    states: np.ndarray  # shape (n_states, n+1)
    controls: np.ndarray  # shape (n_controls, n)

    @property
    def width(self):
        return float(self.times[-1] - self.times[0])


@dataclass(frozen=True)
class _IntervalSpec:
    domain: int
    column: int
    n: int
    start: float
    width: float


@dataclass
class Layout:
    """Positions of the mesh variables inside the flat decision vector."""
    state_offsets: list
    control_offsets: list
    columns: list
    boundary_slice: slice
    t0_index: int
    tf_index: int
    intervals: list
    n_states: int
    n_controls: int

    def domain_states(self, z, d):
        start, cols = self.state_offsets[d], self.columns[d]
        return np.asarray(z[start:start + self.n_states * (cols + 1)]).reshape(cols + 1, self.n_states).T

    def domain_controls(self, z, d):
        start, cols = self.control_offsets[d], self.columns[d]
        return np.asarray(z[start:start + self.n_controls * cols]).reshape(cols, self.n_controls).T


def _domain_edges(t0, tf, boundary_values, mesh):
    if mesh.free_boundaries:
        return [t0] + [boundary_values[k] for k in range(mesh.n_domains - 1)] + [tf]
    return [t0] + [t0 + b * (tf - t0) for b in mesh.boundaries] + [tf]


@dataclass
class NlpProblem:
    """
    Transcribed NLP: min f(z) s.t. lbg <= g(z) <= ubg, lbz <= z <= ubz.

    `groups` maps constraint group names (defect, path, event, linkage,
    ordering) to their slices of g.
    """
    z: ca.SX
    f: ca.SX
    g: ca.SX
    lbz: np.ndarray
    ubz: np.ndarray
    lbg: np.ndarray
    ubg: np.ndarray
    start: np.ndarray
    groups: dict = field(default_factory=dict)
    ocp: object = None
    mesh: Optional[MeshStructure] = None
    layout: Optional[Layout] = None

    @classmethod
    def from_expressions(cls, z, f, g=None, lbz=None, ubz=None, lbg=None, ubg=None, start=None):
        """Wrap plain CasADi expressions, filling unspecified bounds with +/- inf."""
        g = ca.SX(0, 1) if g is None else ca.vertcat(g)
        nz, ng = z.shape[0], g.shape[0]

        def vector(value, size, fill):
            return np.full(size, fill) if value is None else np.asarray(value, dtype=float).reshape(-1)

        return cls(z, f, g, vector(lbz, nz, -np.inf), vector(ubz, nz, np.inf), vector(lbg, ng, -np.inf),
                   vector(ubg, ng, np.inf), vector(start, nz, 0.0), {"constraints": slice(0, ng)})

    @property
    def n_variables(self):
        return int(self.z.shape[0])

    @property
    def n_constraints(self):
        return int(self.g.shape[0])

    @cached_property
    def objective_function(self):
        return ca.Function("f", [self.z], [self.f])

    @cached_property
    def constraint_function(self):
        return ca.Function("g", [self.z], [self.g])

    @cached_property
    def gradient_function(self):
        return ca.Function("grad_f", [self.z], [ca.gradient(self.f, self.z)])

    @cached_property
    def jacobian_function(self):
        return ca.Function("jac_g", [self.z], [ca.jacobian(self.g, self.z)])

    @property
    def jacobian_sparsity(self):
        """Structural nonzeros of dg/dz as a scipy COO matrix of ones."""
        pattern = self.jacobian_function.sparsity_out(0)
        rows, cols = pattern.get_triplet()
        return coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n_constraints, self.n_variables))

    def objective_value(self, z):
        return float(self.objective_function(z))

    def constraints(self, z):
        return np.array(self.constraint_function(z)).reshape(-1)

    def gradient(self, z):
        return np.array(self.gradient_function(z)).reshape(-1)

    def jacobian(self, z):
        """dg/dz as a scipy CSC matrix."""
        return self.jacobian_function(z).sparse()

    def violation(self, z):
        """Max-norm of constraint and variable bound violations."""
        z = np.asarray(z, dtype=float)
        g = self.constraints(z)
        parts = [np.zeros(1), self.lbg - g, g - self.ubg, self.lbz - z, z - self.ubz]
        return float(max(np.max(np.nan_to_num(p, nan=np.inf, neginf=0.0)) for p in parts if p.size))

    def check_start(self, start):
        start = np.asarray(start, dtype=float).reshape(-1)
        if start.shape != (self.n_variables,):
            raise NlpStructureError(f"start point has {start.size} entries, NLP has {self.n_variables} variables")
        return start

    def intervals(self, z):
        """Decode `z` into per-interval node times, states and controls."""
        if self.layout is None:
            raise NlpStructureError("NLP was not produced by transcribe()")
        z = np.asarray(z, dtype=float)
        lay = self.layout
        edges = _domain_edges(z[lay.t0_index], z[lay.tf_index], z[lay.boundary_slice], self.mesh)
        states = [lay.domain_states(z, d) for d in range(self.mesh.n_domains)]
        controls = [lay.domain_controls(z, d) for d in range(self.mesh.n_domains)]
        result = []
        for spec in lay.intervals:
            rule = lgr_rule(spec.n)
            a, b = edges[spec.domain], edges[spec.domain + 1]
            times = a + (b - a) * (spec.start + spec.width * (rule.support + 1.0) / 2.0)
            cols = slice(spec.column, spec.column + spec.n + 1)
            result.append(IntervalData(spec.domain, self.mesh.domains[spec.domain].regime, rule, times,
                                       states[spec.domain][:, cols],
                                       controls[spec.domain][:, spec.column:spec.column + spec.n]))
        return result

    def time_span(self, z):
        return float(z[self.layout.t0_index]), float(z[self.layout.tf_index])


@dataclass
class NlpSolution:
    """
    Solver output.

    Attributes:
        z (ndarray): Decision vector at termination.
        objective (float): f(z).
        violation (float): Max-norm of constraint/bound violations.
        status: `lib.solver.SolverStatus` value.
        lam_g (ndarray): Constraint multipliers.
        lam_x (ndarray): Bound multipliers.
        iterations (int): Solver iterations.
        nlp (NlpProblem): The problem that was solved.
    """
    z: np.ndarray
    objective: float
    violation: float
    status: object
    lam_g: np.ndarray
    lam_x: np.ndarray
    iterations: int
    nlp: NlpProblem
    message: str = ""

    @property
    def mesh(self):
        return self.nlp.mesh

    @property
    def time_span(self):
        return self.nlp.time_span(self.z)


def domain_edges(sol):
    """Solved domain edge times, t0 first and tf last."""
    lay = sol.nlp.layout
    z = np.asarray(sol.z, dtype=float)
    return np.array(_domain_edges(z[lay.t0_index], z[lay.tf_index], z[lay.boundary_slice], sol.mesh), dtype=float)


def solved_mesh(sol):
    """The solution's mesh with its boundaries moved to the solved switch times."""
    edges = domain_edges(sol)
    fractions = (edges[1:-1] - edges[0]) / (edges[-1] - edges[0])
    return MeshStructure(list(sol.mesh.domains), list(fractions), sol.mesh.free_boundaries)


def _guess_sampler(guess):
    """Return `sample(times) -> (states (N, nx), controls (N, nu))` and the guess time span."""
    if isinstance(guess, NlpSolution):
        t0, tf = guess.time_span

        def sample(times):
            traj = interpolate_solution(guess, np.clip(times, t0, tf))
            return traj.states, traj.controls
        return sample, (t0, tf)

    # samples are taken against the trajectory's own independent variable
    times, index = np.unique(np.asarray(guess.t, dtype=float), return_index=True)
    states, controls = guess.states[index], guess.controls[index]
    if len(times) == 1:
        def sample(query):
            n = len(np.atleast_1d(query))
            return np.repeat(states, n, axis=0), np.repeat(controls, n, axis=0)
        return sample, (times[0], times[0])

    state_interp = interp1d(times, states, axis=0, bounds_error=False, fill_value=(states[0], states[-1]))
    control_interp = interp1d(times, controls, axis=0, bounds_error=False, fill_value=(controls[0], controls[-1]))

    def sample(query):
        return state_interp(query), control_interp(query)
    return sample, (times[0], times[-1])


def _fixed_direction(controls, indices):
    direction = np.asarray(controls, dtype=float)[list(indices)]
    norm = np.linalg.norm(direction)
    if norm < 1e-12:
        direction = np.zeros(len(indices))
        direction[min(1, len(indices) - 1)] = 1.0
        return direction
    return direction / norm


def transcribe(prob, mesh, guess):
    """
    Transcribe an optimal control problem on `mesh` into an NLP.

    Args:
        prob: A TransferProblem (anything with `to_ocp()`) or an OcpDefinition.
        mesh (MeshStructure): Domains, intervals and points.
        guess: A Trajectory or a prior NlpSolution, interpolated onto the nodes as the start point.

    Returns:
        NlpProblem

    Raises:
        NlpStructureError: If the guess does not match the problem dimensions.
        ConfigurationError: If any variable bound is not finite.
    """
    ocp = prob.to_ocp() if hasattr(prob, "to_ocp") else prob
    nx, nu = ocp.n_states, ocp.n_controls
    if isinstance(guess, NlpSolution):
        if guess.nlp.layout is None or guess.nlp.layout.n_states != nx or guess.nlp.layout.n_controls != nu:
            raise NlpStructureError("prior solution does not match the problem dimensions")
    elif guess.states.shape[1] != nx or guess.controls.shape[1] != nu:
        raise NlpStructureError(f"guess has {guess.states.shape[1]} states / {guess.controls.shape[1]} controls, "
                                f"problem has {nx} / {nu}")
    sample, (g0, gf) = _guess_sampler(guess)

    # decision variables
    blocks, z_parts, offsets_x, offsets_u, columns, specs = [], [], [], [], [], []
    offset = 0
    for d, domain in enumerate(mesh.domains):
        cols = domain.n_points
        X = ca.SX.sym(f"X{d}", nx, cols + 1)
        U = ca.SX.sym(f"U{d}", nu, cols)
        offsets_x.append(offset)
        offset += nx * (cols + 1)
        offsets_u.append(offset)
        offset += nu * cols
        columns.append(cols)
        blocks.append((X, U))
        z_parts += [ca.vec(X), ca.vec(U)]
        column = 0
        for start, width, n in zip(domain.starts, domain.fractions, domain.points):
            specs.append(_IntervalSpec(d, column, n, start, width))
            column += n

    n_boundaries = mesh.n_domains - 1 if mesh.free_boundaries else 0
    tb = ca.SX.sym("tb", n_boundaries)
    t0, tf = ca.SX.sym("t0"), ca.SX.sym("tf")
    z = ca.vertcat(*z_parts, tb, t0, tf)
    boundary_slice = slice(offset, offset + n_boundaries)
    layout = Layout(offsets_x, offsets_u, columns, boundary_slice, offset + n_boundaries,
                    offset + n_boundaries + 1, specs, nx, nu)
    edges = _domain_edges(t0, tf, tb, mesh)

    # constraints
    groups, g_parts, lbg, ubg = {}, [], [], []

    def add_group(name, expr, lower, upper):
        expr = ca.vec(expr)
        start = sum(int(p.shape[0]) for p in g_parts)
        size = int(expr.shape[0])
        g_parts.append(expr)
        # scalars broadcast, vectors must already follow the column-major order of expr
        lbg.append(np.broadcast_to(np.asarray(lower, dtype=float), (size,)).copy())
        ubg.append(np.broadcast_to(np.asarray(upper, dtype=float), (size,)).copy())
        groups[name] = slice(start, start + size)

    defects = []
    for spec in specs:
        X, U = blocks[spec.domain]
        rule = lgr_rule(spec.n)
        span = edges[spec.domain + 1] - edges[spec.domain]
        half_width = span * spec.width / 2.0
        Xi = X[:, spec.column:spec.column + spec.n + 1]
        Ui = U[:, spec.column:spec.column + spec.n]
        nodes = edges[spec.domain] + span * ca.DM(spec.start + spec.width * (rule.nodes + 1.0) / 2.0).T
        F = ocp.dynamics(Xi[:, :spec.n], Ui, nodes)
        defects.append(ca.mtimes(Xi, ca.DM(rule.diff_matrix.T)) - half_width * F)
    add_group("defect", ca.horzcat(*defects), 0.0, 0.0)

    # coast domains fix the direction to a unit vector, so their path rows would be constant
    pathed = [d for d, domain in enumerate(mesh.domains)
              if not (domain.regime is Regime.COAST and ocp.thrust_index is not None and ocp.direction_indices)]
    if ocp.path is not None and pathed:
        path = ca.horzcat(*[ocp.path(blocks[d][0][:, :-1], blocks[d][1]) for d in pathed])
        n_path = sum(mesh.domains[d].n_points for d in pathed)
        add_group("path", path, np.tile(ocp.path_lower, n_path), np.tile(ocp.path_upper, n_path))

    x_first, x_last = blocks[0][0][:, 0], blocks[-1][0][:, -1]
    add_group("event", ocp.events(x_first, x_last, t0, tf), ocp.events_lower, ocp.events_upper)

    if mesh.n_domains > 1:
        linkage = ca.horzcat(*[blocks[d][0][:, -1] - blocks[d + 1][0][:, 0] for d in range(mesh.n_domains - 1)])
        add_group("linkage", linkage, 0.0, 0.0)

    if mesh.free_boundaries or ocp.tf_bounds[0] != ocp.tf_bounds[1]:
        widths = ca.vertcat(*[edges[d + 1] - edges[d] for d in range(mesh.n_domains)]) if mesh.free_boundaries \
            else tf - t0
        add_group("ordering", widths, MIN_DOMAIN_WIDTH, np.inf)

    # bounds and start point
    t0_start = float(np.clip(g0, *ocp.t0_bounds))
    tf_start = float(np.clip(gf, *ocp.tf_bounds))
    if tf_start - t0_start < MIN_DOMAIN_WIDTH * mesh.n_domains:
        tf_start = t0_start + max(gf - g0, MIN_DOMAIN_WIDTH * mesh.n_domains)
    start_edges = [t0_start] + [t0_start + b * (tf_start - t0_start) for b in mesh.boundaries] + [tf_start]

    lbz, ubz, z0 = [], [], []
    for d, domain in enumerate(mesh.domains):
        times = []
        for spec in (s for s in specs if s.domain == d):
            a, b = start_edges[d], start_edges[d + 1]
            times.append(a + (b - a) * (spec.start + spec.width * (lgr_rule(spec.n).nodes + 1.0) / 2.0))
        times = np.concatenate(times + [[start_edges[d + 1]]])
        x_start, u_start = sample(times)
        u_start = np.array(u_start[:-1], dtype=float).reshape(-1, nu)

        x_lower = np.tile(ocp.state_lower, (len(times), 1))
        x_upper = np.tile(ocp.state_upper, (len(times), 1))
        u_lower = np.tile(ocp.control_lower, (len(times) - 1, 1))
        u_upper = np.tile(ocp.control_upper, (len(times) - 1, 1))
        if domain.regime is not Regime.UNCLASSIFIED and ocp.thrust_index is not None:
            level = ocp.thrust_max if domain.regime is Regime.MAX else 0.0
            u_lower[:, ocp.thrust_index] = u_upper[:, ocp.thrust_index] = level
            u_start[:, ocp.thrust_index] = level
            if domain.regime is Regime.COAST and ocp.direction_indices:
                fixed = _fixed_direction(u_start[0], ocp.direction_indices)
                for idx, value in zip(ocp.direction_indices, fixed):
                    u_lower[:, idx] = u_upper[:, idx] = u_start[:, idx] = value

        x_start = np.clip(np.asarray(x_start, dtype=float).reshape(-1, nx), x_lower, x_upper)
        u_start = np.clip(u_start, u_lower, u_upper)
        lbz += [x_lower.reshape(-1), u_lower.reshape(-1)]
        ubz += [x_upper.reshape(-1), u_upper.reshape(-1)]
        z0 += [x_start.reshape(-1), u_start.reshape(-1)]

    time_lower = [ocp.t0_bounds[0]] * n_boundaries + [ocp.t0_bounds[0], ocp.tf_bounds[0]]
    time_upper = [ocp.tf_bounds[1]] * n_boundaries + [ocp.t0_bounds[1], ocp.tf_bounds[1]]
    lbz.append(np.array(time_lower, dtype=float))
    ubz.append(np.array(time_upper, dtype=float))
    z0.append(np.array(start_edges[1:-1][:n_boundaries] + [t0_start, tf_start], dtype=float))

    lbz, ubz = np.concatenate(lbz), np.concatenate(ubz)
    if not (np.all(np.isfinite(lbz)) and np.all(np.isfinite(ubz))):
        bad = np.flatnonzero(~(np.isfinite(lbz) & np.isfinite(ubz)))
        raise ConfigurationError(f"{ocp.name}: {len(bad)} decision variables have non-finite bounds "
                                 f"(cap the final time and longitude first)")

    g = ca.vertcat(*g_parts)
    nlp = NlpProblem(z, ocp.objective(x_first, x_last, t0, tf), g, lbz, ubz,
                     np.concatenate(lbg), np.concatenate(ubg), np.clip(np.concatenate(z0), lbz, ubz),
                     groups, ocp, mesh, layout)
    defect_count = groups["defect"].stop - groups["defect"].start
    if defect_count != nx * mesh.n_points:
        raise NlpStructureError(f"expected {nx * mesh.n_points} defect rows, built {defect_count}")
    logger.debug("transcribed %s: %d variables, %d constraints, %d domains, %d intervals",
                 ocp.name, nlp.n_variables, nlp.n_constraints, mesh.n_domains, mesh.n_intervals)
    return nlp


def _locate(intervals, times):
    starts = np.array([iv.times[0] for iv in intervals])
    return np.clip(np.searchsorted(starts, times, side="right") - 1, 0, len(intervals) - 1)


def interpolate_solution(sol, times):
    """
    Evaluate a solved mesh at arbitrary times.

    States use the degree-n interpolant through the nodes and the interval end;
    controls use the degree n-1 interpolant through the nodes.

    Raises:
        ExtrapolationError: For query times outside [t0, tf].
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    t0, tf = sol.time_span
    slack = 1e-12 * max(1.0, abs(tf))
    if np.any(times < t0 - slack) or np.any(times > tf + slack):
        raise ExtrapolationError(f"query outside [{t0}, {tf}]")

    intervals = sol.nlp.intervals(sol.z)
    which = _locate(intervals, times)
    nx, nu = sol.nlp.layout.n_states, sol.nlp.layout.n_controls
    states = np.empty((len(times), nx))
    controls = np.empty((len(times), nu))
    for i in np.unique(which):
        iv = intervals[i]
        mask = which == i
        query = np.clip(times[mask], iv.times[0], iv.times[-1])
        if iv.width > 0:
            states[mask] = BarycentricInterpolator(iv.times, iv.states.T)(query)
        else:
            states[mask] = iv.states[:, 0]
        if nu and iv.rule.n > 1 and iv.width > 0:
            controls[mask] = BarycentricInterpolator(iv.times[:-1], iv.controls.T)(query)
        elif nu:
            controls[mask] = iv.controls[:, 0]
    return Trajectory(times, states, controls)


def collocation_trajectory(sol):
    """Samples at every collocation node plus the final time; the final control repeats the last node."""
    intervals = sol.nlp.intervals(sol.z)
    times = np.concatenate([iv.times[:-1] for iv in intervals] + [intervals[-1].times[-1:]])
    states = np.hstack([iv.states[:, :-1] for iv in intervals] + [intervals[-1].states[:, -1:]]).T
    controls = np.hstack([iv.controls for iv in intervals] + [intervals[-1].controls[:, -1:]]).T
    return Trajectory(times, states, controls)


def estimate_error(sol, mesh=None, prob=None):
    """
    Per-interval relative dynamics residual on a dense sample grid.

    For every interval the state interpolant is differentiated at
    ERROR_SAMPLES_PER_POINT * n interior points and compared with the
    right-hand side evaluated there; the residual of each state is divided by
    1 + max|rhs| over the interval and the max over states and samples is returned.

    Returns:
        ndarray: One nonnegative estimate per interval, in mesh order.
    """
    ocp = (prob.to_ocp() if hasattr(prob, "to_ocp") else prob) if prob is not None else sol.nlp.ocp
    intervals = sol.nlp.intervals(sol.z)
    if mesh is not None and len(intervals) != mesh.n_intervals:
        raise NlpStructureError("mesh does not match the solution")
    estimates = np.zeros(len(intervals))
    for i, iv in enumerate(intervals):
        if iv.width <= 0:
            continue
        n = iv.rule.n
        tau = np.linspace(-1.0, 1.0, ERROR_SAMPLES_PER_POINT * n + 2)[1:-1]
        support = iv.rule.support
        coeffs = np.polynomial.chebyshev.chebfit(support, iv.states.T, n)
        x = np.polynomial.chebyshev.chebval(tau, coeffs)
        dx = np.polynomial.chebyshev.chebval(tau, np.polynomial.chebyshev.chebder(coeffs)) * 2.0 / iv.width
        if ocp.n_controls and n > 1:
            u_coeffs = np.polynomial.chebyshev.chebfit(iv.rule.nodes, iv.controls.T, n - 1)
            u = np.polynomial.chebyshev.chebval(tau, u_coeffs)
        else:
            u = np.repeat(iv.controls[:, :1], len(tau), axis=1)
        rhs = ocp.evaluate_dynamics(np.atleast_2d(x), u, iv.times[0] + (tau + 1.0) * iv.width / 2.0)
        scale = 1.0 + np.max(np.abs(rhs), axis=1, keepdims=True)
        estimates[i] = float(np.max(np.abs(dx - rhs) / scale))
    return estimates


def refine_mesh(mesh, estimates, tolerance, mode="h", max_order=MAX_ORDER, merge=False):
    """
    Refine the intervals whose estimate exceeds `tolerance`.

    Args:
        mesh (MeshStructure): Current mesh.
        estimates (array-like): One estimate per interval, from `estimate_error`.
        tolerance (float): Accuracy target.
        mode (str): "h" splits offending intervals in two; "ph" first raises their
            order (up to `max_order`) and splits once the order is exhausted.
        merge (bool): Merge neighbouring intervals of a domain whose estimates are
            both below tolerance / 100.

    Returns:
        MeshStructure: New mesh; domain boundaries are unchanged.
    """
    estimates = np.asarray(estimates, dtype=float)
    if len(estimates) != mesh.n_intervals:
        raise NlpStructureError(f"{len(estimates)} estimates for {mesh.n_intervals} intervals")
    if mode not in ("h", "ph"):
        raise ConfigurationError(f"unknown refinement mode {mode!r}")

    domains, k = [], 0
    for domain in mesh.domains:
        fractions, points = [], []
        previous_small = False
        for frac, n in zip(domain.fractions, domain.points):
            error = estimates[k]
            k += 1
            if error > tolerance:
                previous_small = False
                if mode == "ph" and n < max_order:
                    # order increase scaled to the size of the miss
                    boost = int(np.ceil(np.log10(max(error / tolerance, 10.0))))
                    fractions.append(frac)
                    points.append(min(max_order, n + boost))
                else:
                    fractions += [frac / 2.0, frac / 2.0]
                    points += [n, n]
                continue
            small = merge and error < tolerance * MERGE_FACTOR
            if small and previous_small:
                fractions[-1] += frac
                points[-1] = max(points[-1], n)
                previous_small = False
                continue
            fractions.append(frac)
            points.append(n)
            previous_small = small
        domains.append(replace(domain, fractions=fractions, points=points))
    return MeshStructure(domains, list(mesh.boundaries), mesh.free_boundaries)
