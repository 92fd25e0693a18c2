import json
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Optional

import casadi as ca
import numpy as np

from lib.dynamics import (CONTROL_NAMES, N_CONTROLS, N_STATES, STATE_NAMES, ControlInput,
                          DynamicsConstants, SpacecraftState, equinoctial_rates)
from lib.elements import TWO_PI, ClassicalElements, PhysicalConstants, coe_to_mee, make_scales
from lib.errors import ConfigurationError

logger = logging.getLogger(__name__)

# Global constants for the study tables: orbits in km/deg, None marks a free or undefined angle
LEO = {"a_km": 7003.0, "e": 0.0, "i_deg": 28.5, "raan_deg": 0.0, "argp_deg": None, "ta_deg": None}
TERMINAL_ORBITS = {
    "meo": {"a_km": 26560.0, "e": 0.0, "i_deg": 54.7, "raan_deg": None, "argp_deg": None, "ta_deg": None},
    "heo": {"a_km": 26578.0, "e": 0.73646, "i_deg": 63.435, "raan_deg": None, "argp_deg": None, "ta_deg": None},
    "geo": {"a_km": 42287.0, "e": 0.0, "i_deg": 0.0, "raan_deg": None, "argp_deg": None, "ta_deg": None},
}
STUDIES = tuple(TERMINAL_ORBITS)
CASES = tuple(range(1, 8))

# Maximum thrust acceleration (m/s^2) and maximum thrust (N) per case
THRUST_CASES = {1: (10.0, 10000.0), 2: (5.0, 5000.0), 3: (1.0, 1000.0), 4: (0.5, 500.0),
                5: (0.1, 100.0), 6: (0.05, 50.0), 7: (0.01, 10.0)}

# Detection threshold eta and initial mesh interval count M per case
INITIAL_SETUP = {
    "meo": {1: (0.1, 130), 2: (0.1, 100), 3: (0.1, 10), 4: (0.01, 60), 5: (0.01, 50), 6: (0.01, 40), 7: (0.1, 50)},
    "heo": {1: (0.01, 170), 2: (0.001, 70), 3: (0.01, 90), 4: (0.01, 50), 5: (0.01, 30), 6: (0.001, 140), 7: (0.1, 60)},
    "geo": {1: (0.1, 90), 2: (0.1, 190), 3: (0.01, 10), 4: (0.01, 50), 5: (0.01, 40), 6: (0.001, 150), 7: (0.1, 110)},
}
COLLOCATION_POINTS = 3

# Published performance: final mass (kg), thrust time (h), revolutions, thrust arcs, delta-v (m/s)
PUBLISHED_RESULTS = {
    ("meo", 1): (674.9651, 0.0880, 0.5196, 2, 3854.9),
    ("meo", 2): (674.7867, 0.1744, 0.5352, 2, 3857.5),
    ("meo", 3): (668.2949, 0.8941, 0.7398, 2, 3952.3),
    ("meo", 4): (653.0154, 1.8816, 0.8768, 2, 4179.1),
    ("meo", 5): (624.2352, 10.2132, 4.9579, 4, 4621.2),
    ("meo", 6): (607.2275, 21.2975, 9.1414, 6, 4892.1),
    ("meo", 7): (606.9697, 106.4970, 32.8742, 9, 4896.2),
    ("heo", 1): (716.2925, 0.0766, 0.5202, 2, 3272.2),
    ("heo", 2): (715.7138, 0.1525, 0.5387, 2, 3280.1),
    ("heo", 3): (699.2824, 0.8140, 0.8359, 2, 3507.8),
    ("heo", 4): (663.1665, 1.8242, 0.9240, 2, 4027.9),
    ("heo", 5): (657.2695, 9.2494, 4.9570, 6, 4115.6),
    ("heo", 6): (645.0881, 19.1564, 9.0376, 9, 4298.9),
    ("heo", 7): (576.7825, 114.7384, 39.0413, 17, 5396.5),
    ("geo", 1): (656.7935, 0.0925, 0.5195, 2, 4122.6),
    ("geo", 2): (656.3850, 0.1857, 0.5408, 2, 4128.7),
    ("geo", 3): (646.4416, 0.9614, 0.7694, 2, 4278.4),
    ("geo", 4): (626.2787, 2.0140, 0.9380, 2, 4589.1),
    ("geo", 5): (619.0090, 10.3158, 4.8044, 5, 4703.6),
    ("geo", 6): (583.7997, 22.5498, 8.0286, 6, 5277.9),
    ("geo", 7): (579.8979, 114.0104, 110.0091, 8, 5343.7),
}

# Prior-work delta-v (m/s), tabulated for the odd cases only
REFERENCE_DELTA_V = {
    ("meo", 1): 3863.0, ("meo", 3): 3970.0, ("meo", 5): 4731.0, ("meo", 7): 5122.0,
    ("heo", 1): 3271.0, ("heo", 3): 3555.0, ("heo", 5): 5271.0, ("heo", 7): 6109.0,
    ("geo", 1): 4127.0, ("geo", 3): 4308.0, ("geo", 5): 5167.0, ("geo", 7): 5698.0,
}

# Global constants for the bounds
MIN_MASS_FRACTION = 0.01
P_BOUND_FACTORS = (0.5, 2.0)
TF_CAP_FACTOR = 3.0
EXTRA_REVOLUTIONS = 2.0
ANGLE_FIELDS = ("raan", "argp", "ta")


@dataclass(frozen=True)
class OrbitSpec:
    """
    Classical elements with per-field free flags.

    Attributes:
        elements (ClassicalElements): SI elements; free angles hold 0.
        free (frozenset): Element names ("raan", "argp", "ta") not fixed by the transfer.
    """
    elements: ClassicalElements
    free: frozenset = frozenset()

    @classmethod
    def from_table(cls, a_km, e, i_deg, raan_deg=None, argp_deg=None, ta_deg=None):
        angles = {"raan": raan_deg, "argp": argp_deg, "ta": ta_deg}
        free = frozenset(name for name, value in angles.items() if value is None)
        values = {name: (value or 0.0) for name, value in angles.items()}
        return cls(ClassicalElements.from_table(a_km, e, i_deg, values["raan"], values["argp"], values["ta"]), free)

    def to_table(self):
        el = self.elements
        row = {"a_km": el.a / 1e3, "e": el.e, "i_deg": float(np.degrees(el.i))}
        for name in ANGLE_FIELDS:
            row[f"{name}_deg"] = None if name in self.free else float(np.degrees(getattr(el, name)))
        return row


@dataclass(frozen=True)
class ThrustCase:
    s0: float  # m/s^2
    t_max: float  # N


@dataclass(frozen=True)
class VariableBounds:
    """Scaled lower/upper bounds on states (p, f, g, h, k, L, m), controls (T, u_r, u_t, u_n) and the final time."""
    state_lower: tuple
    state_upper: tuple
    control_lower: tuple
    control_upper: tuple
    tf_lower: float = 0.0
    tf_upper: float = np.inf


@dataclass
class OcpDefinition:
    """
    A single-phase optimal control problem in the form consumed by `lib.collocation`.

    `dynamics(x, u, s)`, `path(x, u)`, `events(x0, xf, t0, tf)` and
    `objective(x0, xf, t0, tf)` must accept CasADi matrices: x has shape
    (n_states, N), u has shape (n_controls, N) and s (the independent
    variable at the same nodes) has shape (1, N).
    """
    name: str
    n_states: int
    n_controls: int
    dynamics: Callable
    state_lower: np.ndarray
    state_upper: np.ndarray
    control_lower: np.ndarray
    control_upper: np.ndarray
    t0_bounds: tuple
    tf_bounds: tuple
    events: Callable
    events_lower: np.ndarray
    events_upper: np.ndarray
    objective: Callable
    path: Optional[Callable] = None
    path_lower: np.ndarray = field(default_factory=lambda: np.zeros(0))
    path_upper: np.ndarray = field(default_factory=lambda: np.zeros(0))
    thrust_index: Optional[int] = None
    thrust_max: float = 0.0
    direction_indices: tuple = ()
    state_names: tuple = ()
    control_names: tuple = ()

    def __post_init__(self):
        for name in ("state_lower", "state_upper", "control_lower", "control_upper",
                     "events_lower", "events_upper", "path_lower", "path_upper"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        if self.state_lower.shape != (self.n_states,) or self.control_lower.shape != (self.n_controls,):
            raise ConfigurationError(f"{self.name}: bound vectors do not match the state/control sizes")

    @cached_property
    def dynamics_function(self):
        """CasADi function (x, u, s) -> dx/ds for one column; use `.map(N)` for many."""
        x = ca.SX.sym("x", self.n_states)
        u = ca.SX.sym("u", self.n_controls)
        s = ca.SX.sym("s")
        return ca.Function("dynamics", [x, u, s], [self.dynamics(x, u, s)])

    def evaluate_dynamics(self, x, u, s=None):
        """Numeric rates for states (n_states, N), controls (n_controls, N) and nodes s (N,)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.asarray(u, dtype=float).reshape(self.n_controls, x.shape[1])
        s = np.zeros((1, x.shape[1])) if s is None else np.asarray(s, dtype=float).reshape(1, x.shape[1])
        return np.array(self.dynamics_function.map(x.shape[1])(x, u, s)).reshape(self.n_states, x.shape[1])


@dataclass(frozen=True)
class TransferProblem:
    """
    One minimum-fuel transfer instance, scaled.

    Attributes:
        study (str): "meo", "heo", "geo" or "custom".
        case (int): Thrust case number (0 for custom transfers).
        constants (PhysicalConstants): SI constants.
        initial_orbit (OrbitSpec): Departure orbit.
        terminal_orbit (OrbitSpec): Arrival orbit.
        thrust_case (ThrustCase): s0 and T_max.
        bounds (VariableBounds): Scaled variable bounds.
    """
    study: str
    case: int
    constants: PhysicalConstants
    initial_orbit: OrbitSpec
    terminal_orbit: OrbitSpec
    thrust_case: ThrustCase
    bounds: VariableBounds

    @property
    def scales(self):
        return make_scales(self.constants)

    @property
    def label(self):
        return f"{self.study}-{self.case}"

    @property
    def t_max(self):
        """Scaled maximum thrust."""
        return self.thrust_case.t_max / self.scales.fu

    @property
    def dynamics_constants(self):
        return DynamicsConstants(mu=1.0, exhaust_velocity=self.scales.exhaust_velocity(self.constants))

    @property
    def initial_elements(self):
        return self.initial_orbit.elements.scaled(self.scales)

    @property
    def terminal_elements(self):
        return self.terminal_orbit.elements.scaled(self.scales)

    @property
    def p0(self):
        return self.initial_elements.p

    @property
    def pf(self):
        return self.terminal_elements.p

    @property
    def initial_state(self):
        """Scaled departure state with unit mass."""
        return SpacecraftState(coe_to_mee(self.initial_elements), 1.0)

    def with_guess(self, guess):
        """
        Cap the free final time at TF_CAP_FACTOR times the guess duration and
        the true longitude at L0 + 2*pi*(N_guess + 2).
        """
        guess = guess.to_time_domain()
        duration = float(guess.time[-1] - guess.time[0])
        lon0 = float(self.initial_state.mee.L)
        lon_max = lon0 + TWO_PI * (max(guess.revolutions, 0.0) + EXTRA_REVOLUTIONS)
        upper = list(self.bounds.state_upper)
        upper[5] = lon_max
        bounds = replace(self.bounds, state_upper=tuple(upper), tf_upper=TF_CAP_FACTOR * duration)
        return replace(self, bounds=bounds)

    def to_ocp(self):
        b = self.bounds
        consts = self.dynamics_constants
        return OcpDefinition(
            name=self.label,
            n_states=N_STATES,
            n_controls=N_CONTROLS,
            dynamics=lambda x, u, s: equinoctial_rates(x, u, consts.mu, consts.exhaust_velocity),
            state_lower=b.state_lower, state_upper=b.state_upper,
            control_lower=b.control_lower, control_upper=b.control_upper,
            t0_bounds=(0.0, 0.0), tf_bounds=(b.tf_lower, b.tf_upper),
            events=lambda x0, xf, t0, tf: nlp_event_residuals(x0, xf, self),
            events_lower=np.zeros(nlp_event_count(self)), events_upper=np.zeros(nlp_event_count(self)),
            objective=lambda x0, xf, t0, tf: -xf[6],
            path=lambda x, u: path_constraint(u),
            path_lower=np.zeros(1), path_upper=np.zeros(1),
            thrust_index=0, thrust_max=self.t_max, direction_indices=(1, 2, 3),
            state_names=STATE_NAMES, control_names=CONTROL_NAMES,
        )


def default_bounds(p0, pf, t_max):
    lo, hi = P_BOUND_FACTORS
    return VariableBounds(
        state_lower=(lo * min(p0, pf), -1.0, -1.0, -1.0, -1.0, 0.0, MIN_MASS_FRACTION),
        state_upper=(hi * max(p0, pf), 1.0, 1.0, 1.0, 1.0, np.inf, 1.0),
        control_lower=(0.0, -1.0, -1.0, -1.0),
        control_upper=(t_max, 1.0, 1.0, 1.0),
    )


def make_transfer(initial, terminal, s0, constants=None, study="custom", case=0):
    """
    Build a transfer between two arbitrary orbit specs with T_max = s0 * m0.

    Args:
        initial (OrbitSpec): Departure orbit.
        terminal (OrbitSpec): Arrival orbit.
        s0 (float): Maximum thrust acceleration at m0 (m/s^2).
        constants (PhysicalConstants, optional): Defaults to the study constants.

    Returns:
        TransferProblem
    """
    constants = constants or PhysicalConstants()
    if not s0 > 0:
        raise ConfigurationError(f"thrust acceleration must be positive, got {s0}")
    thrust_case = ThrustCase(s0=s0, t_max=s0 * constants.m0)
    scales = make_scales(constants)
    p0 = initial.elements.scaled(scales).p
    pf = terminal.elements.scaled(scales).p
    bounds = default_bounds(p0, pf, thrust_case.t_max / scales.fu)
    # longitude starts at the departure value
    lower = list(bounds.state_lower)
    lower[5] = coe_to_mee(initial.elements).L
    bounds = replace(bounds, state_lower=tuple(lower))
    return TransferProblem(study, case, constants, initial, terminal, thrust_case, bounds)


def build_problem(study, case):
    """
    Build one of the 21 tabulated transfers.

    Args:
        study (str): "meo", "heo" or "geo" (case-insensitive).
        case (int): Thrust case 1..7.

    Raises:
        ConfigurationError: For an unknown study or case.
    """
    key = str(study).lower()
    if key not in TERMINAL_ORBITS:
        raise ConfigurationError(f"unknown study {study!r}, expected one of {STUDIES}")
    if case not in THRUST_CASES:
        raise ConfigurationError(f"unknown case {case!r}, expected one of {CASES}")
    s0, _ = THRUST_CASES[case]
    return make_transfer(OrbitSpec.from_table(**LEO), OrbitSpec.from_table(**TERMINAL_ORBITS[key]), s0,
                         study=key, case=case)


def _control_vector(ctrl):
    return ctrl.as_vector() if isinstance(ctrl, ControlInput) else ctrl


def _state_vector(state):
    return state.as_vector() if isinstance(state, SpacecraftState) else state


def path_constraint(ctrl):
    """Unit-direction residual u_r^2 + u_t^2 + u_n^2 - 1."""
    u = _control_vector(ctrl)
    if isinstance(u, (ca.SX, ca.MX)):
        return ca.sum1(u[1:4, :] ** 2) - 1
    return np.sum(np.asarray(u, dtype=float)[1:4] ** 2, axis=0) - 1


def _vector(rows, symbolic):
    return ca.vertcat(*rows) if symbolic else np.array([float(r) for r in rows])


def event_residuals(x0, xf, prob):
    """
    Boundary relations between the endpoint states and the orbit pair.

    Rows: p(t0) - p0, f^2+g^2 - e0^2, h^2+k^2 - tan^2(i0/2), the departure node
    relation k cos(raan0) - h sin(raan0) (present while raan0 is fixed), then
    p(tf) - pf, f^2+g^2 - ef^2, h^2+k^2 - tan^2(if/2).
    """
    x0, xf = _state_vector(x0), _state_vector(xf)
    symbolic = isinstance(x0, (ca.SX, ca.MX)) or isinstance(xf, (ca.SX, ca.MX))
    init, term = prob.initial_elements, prob.terminal_elements
    rows = [
        x0[0] - init.p,
        x0[1] ** 2 + x0[2] ** 2 - init.e ** 2,
        x0[3] ** 2 + x0[4] ** 2 - np.tan(init.i / 2.0) ** 2,
    ]
    if "raan" not in prob.initial_orbit.free:
        rows.append(x0[4] * np.cos(init.raan) - x0[3] * np.sin(init.raan))
    rows += [
        xf[0] - term.p,
        xf[1] ** 2 + xf[2] ** 2 - term.e ** 2,
        xf[3] ** 2 + xf[4] ** 2 - np.tan(term.i / 2.0) ** 2,
    ]
    return _vector(rows, symbolic)


def _orbit_rows(x, el, free_raan):
    rows = [x[0] - el.p]
    # zero targets in their regular componentwise form
    rows += [x[1], x[2]] if el.e == 0.0 else [x[1] ** 2 + x[2] ** 2 - el.e ** 2]
    if el.i == 0.0:
        rows += [x[3], x[4]]
    else:
        rows.append(x[3] ** 2 + x[4] ** 2 - np.tan(el.i / 2.0) ** 2)
        if not free_raan:
            rows.append(x[4] * np.cos(el.raan) - x[3] * np.sin(el.raan))
    return rows


def nlp_event_residuals(x0, xf, prob):
    """
    Event rows as transcribed into the NLP: `event_residuals` with zero-eccentricity and
    zero-inclination targets split into f = g = 0 / h = k = 0, plus m(t0) = 1.
    """
    x0, xf = _state_vector(x0), _state_vector(xf)
    symbolic = isinstance(x0, (ca.SX, ca.MX)) or isinstance(xf, (ca.SX, ca.MX))
    rows = _orbit_rows(x0, prob.initial_elements, "raan" in prob.initial_orbit.free)
    rows += _orbit_rows(xf, prob.terminal_elements, "raan" in prob.terminal_orbit.free)
    rows.append(x0[6] - 1.0)
    return _vector(rows, symbolic)


def nlp_event_count(prob):
    return len(nlp_event_residuals(np.ones(N_STATES), np.ones(N_STATES), prob))


def objective(xf):
    """Mayer cost -m(tf) in scaled units."""
    return -_state_vector(xf)[6]


def problem_to_config(prob):
    """Human-readable config: orbits in km/deg, thrust in N."""
    c = prob.constants
    return {
        "study": prob.study,
        "case": prob.case,
        "constants": {"earth_radius": c.earth_radius, "mu_earth": c.mu_earth, "g0": c.g0, "m0": c.m0, "isp": c.isp},
        "initial_orbit": prob.initial_orbit.to_table(),
        "terminal_orbit": prob.terminal_orbit.to_table(),
        "thrust": {"s0": prob.thrust_case.s0, "t_max_N": prob.thrust_case.t_max},
    }


def problem_from_config(config):
    try:
        constants = PhysicalConstants(**config.get("constants", {}))
        initial = OrbitSpec.from_table(**config["initial_orbit"])
        terminal = OrbitSpec.from_table(**config["terminal_orbit"])
        thrust = config["thrust"]
        s0 = thrust["s0"] if "s0" in thrust else thrust["t_max_N"] / constants.m0
    except (AttributeError, KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed problem config: {exc}") from exc
    return make_transfer(initial, terminal, s0, constants, config.get("study", "custom"), config.get("case", 0))


def save_problem(prob, file_path):
    with open(file_path, "w") as file:
        file.write(json.dumps(problem_to_config(prob), indent=4))


def load_problem(file_path):
    try:
        with open(file_path, "r") as file:
            config = json.load(file)
    except OSError as exc:
        raise ConfigurationError(f"cannot read problem config {file_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{file_path} is not valid JSON: {exc}") from exc
    return problem_from_config(config)
