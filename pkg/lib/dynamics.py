import logging
from dataclasses import dataclass

import casadi as ca
import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from lib.elements import TWO_PI, EquinoctialElements
from lib.errors import DomainError, EventNotReachedError, PropagationError

logger = logging.getLogger(__name__)

# Global constants for state/control layout
STATE_NAMES = ("p", "f", "g", "h", "k", "L", "m")
LONGITUDE_STATE_NAMES = ("p", "f", "g", "h", "k", "t", "m")
CONTROL_NAMES = ("T", "u_r", "u_t", "u_n")
N_STATES = len(STATE_NAMES)
N_CONTROLS = len(CONTROL_NAMES)

# Global constants for the integrator
INTEGRATOR = "DOP853"
ORACLE_RTOL = 1e-10
GUESS_RTOL = 1e-8
EVENT_TOLERANCE = 1e-12


@dataclass(frozen=True)
class DynamicsConstants:
    """Scaled constants entering the equations of motion."""
    mu: float = 1.0
    exhaust_velocity: float = 1.0


@dataclass(frozen=True)
class SpacecraftState:
    mee: EquinoctialElements
    mass: float

    @classmethod
    def from_vector(cls, x):
        return cls(EquinoctialElements(*(float(v) for v in x[:6])), float(x[6]))

    def as_vector(self):
        return np.append(self.mee.as_array(), self.mass)


@dataclass(frozen=True)
class ControlInput:
    """Thrust magnitude and RTN unit direction (u_r, u_t, u_n)."""
    thrust: float
    direction: tuple = (0.0, 1.0, 0.0)

    def as_vector(self):
        return np.array([self.thrust, *self.direction], dtype=float)


@dataclass(frozen=True)
class Perturbation:
    radial: float
    transverse: float
    normal: float

    def as_array(self):
        return np.array([self.radial, self.transverse, self.normal])


def _is_symbolic(*args):
    return any(isinstance(a, (ca.SX, ca.MX)) for a in args)


def _rows(x, n, symbolic):
    if symbolic:
        return [x[i, :] for i in range(n)]
    return [x[i] for i in range(n)]


def _stack(rows, symbolic):
    if symbolic:
        return ca.vertcat(*rows)
    return np.stack(np.broadcast_arrays(*rows))


def equinoctial_rates(x, u, mu, exhaust_velocity):
    """
    Time derivatives of (p, f, g, h, k, L, m) under two-body gravity plus thrust.

    Works on numpy arrays (real or complex) shaped (7,) / (7, N) and on CasADi
    SX/MX matrices shaped (7, N), with controls (T, u_r, u_t, u_n) laid out the
    same way. The normal-thrust term of dg/dt carries f/w.

    Args:
        x: States.
        u: Controls.
        mu (float): Gravitational parameter.
        exhaust_velocity (float): g0 * Isp in the units of x and u.

    Returns:
        Rates with the shape of `x`.
    """
    symbolic = _is_symbolic(x, u)
    lib = ca if symbolic else np
    p, f, g, h, k, L, m = _rows(x, N_STATES, symbolic)
    thrust, u_r, u_t, u_n = _rows(u, N_CONTROLS, symbolic)

    cos_l, sin_l = lib.cos(L), lib.sin(L)
    w = 1 + f * cos_l + g * sin_l
    s2 = 1 + h * h + k * k
    sqp = lib.sqrt(p / mu)
    hk_term = h * sin_l - k * cos_l

    accel = thrust / m
    d_r, d_t, d_n = accel * u_r, accel * u_t, accel * u_n

    rates = [
        sqp * 2 * p / w * d_t,
        sqp * (sin_l * d_r + ((w + 1) * cos_l + f) / w * d_t - g / w * hk_term * d_n),
        sqp * (-cos_l * d_r + ((w + 1) * sin_l + g) / w * d_t + f / w * hk_term * d_n),
        sqp * s2 * cos_l / (2 * w) * d_n,
        sqp * s2 * sin_l / (2 * w) * d_n,
        lib.sqrt(mu * p) * (w / p) ** 2 + sqp * hk_term / w * d_n,
        -thrust / exhaust_velocity + 0 * m,
    ]
    return _stack(rates, symbolic)


def longitude_rates(y, L, u, mu, exhaust_velocity):
    """
    Derivatives of (p, f, g, h, k, t, m) with respect to true longitude.

    Every component is the time rate scaled by dt/dL = 1/(dL/dt).
    """
    symbolic = _is_symbolic(y, u)
    p, f, g, h, k, t, m = _rows(y, N_STATES, symbolic)
    x = _stack([p, f, g, h, k, L + 0 * p, m], symbolic)
    rates = equinoctial_rates(x, u, mu, exhaust_velocity)
    dp, df, dg, dh, dk, dl, dm = _rows(rates, N_STATES, symbolic)
    dt_dl = 1 / dl
    return _stack([dp * dt_dl, df * dt_dl, dg * dt_dl, dh * dt_dl, dk * dt_dl, dt_dl, dm * dt_dl], symbolic)


def velocity_direction(x, mu=1.0):
    """
    RTN unit vector of the inertial velocity of state(s) `x`.

    v_r = sqrt(mu/p) (f sin L - g cos L), v_t = sqrt(mu/p) w, v_n = 0.
    """
    p, f, g, L = x[0], x[1], x[2], x[5]
    scale = np.sqrt(mu / p)
    v_r = scale * (f * np.sin(L) - g * np.cos(L))
    v_t = scale * (1.0 + f * np.cos(L) + g * np.sin(L))
    speed = np.hypot(v_r, v_t)
    return np.stack(np.broadcast_arrays(v_r / speed, v_t / speed, np.zeros_like(v_r)))


def rtn_frame(r, v):
    """Rows are the inertial components of the radial, transverse and normal unit vectors."""
    def unit(a):
        return a / np.sqrt(np.sum(a * a))

    i_r = unit(r)
    i_n = unit(np.cross(r, v))
    i_t = np.cross(i_n, i_r)
    return np.stack([i_r, i_t, i_n])


def _check_state(state):
    if not state.mass > 0:
        raise DomainError(f"mass must be positive, got {state.mass}")
    if not state.mee.p > 0:
        raise DomainError(f"semi-parameter must be positive, got {state.mee.p}")
    if not state.mee.w > 0:
        raise DomainError(f"w = {state.mee.w} <= 0")


def perturbation(state, ctrl):
    """
    Non-two-body acceleration (T/m) * u in RTN components.

    Raises:
        DomainError: If the mass is not positive.
    """
    if not state.mass > 0:
        raise DomainError(f"mass must be positive, got {state.mass}")
    accel = ctrl.thrust / state.mass
    return Perturbation(*(accel * c for c in ctrl.direction))


def rhs_time(state, ctrl, consts):
    """
    d(p, f, g, h, k, L, m)/dt for one state.

    Raises:
        DomainError: For p <= 0, w <= 0 or mass <= 0.
    """
    _check_state(state)
    return np.asarray(equinoctial_rates(state.as_vector(), ctrl.as_vector(), consts.mu, consts.exhaust_velocity))


def rhs_longitude(state, ctrl, consts, t=0.0):
    """
    d(p, f, g, h, k, t, m)/dL for one state; `t` is carried along but does not enter the rates.

    Raises:
        DomainError: If dL/dt <= 0 (the longitude parameterization is invalid) or the state is invalid.
    """
    rates = rhs_time(state, ctrl, consts)
    if not rates[5] > 0:
        raise DomainError(f"dL/dt = {rates[5]} <= 0, longitude cannot parameterize the motion")
    y = state.as_vector()
    y[5] = t
    return np.asarray(longitude_rates(y, state.mee.L, ctrl.as_vector(), consts.mu, consts.exhaust_velocity))


@dataclass
class Trajectory:
    """
    Sampled trajectory.

    Attributes:
        t (ndarray): Independent variable samples, time or true longitude.
        states (ndarray): Shape (N, 7); (p, f, g, h, k, L, m) for time-domain
            trajectories and (p, f, g, h, k, t, m) for longitude-domain ones.
        controls (ndarray): Shape (N, 4); (T, u_r, u_t, u_n).
        independent (str): "time" or "longitude".
    """
    t: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    independent: str = "time"

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        if not (len(self.t) == len(self.states) == len(self.controls)):
            raise ValueError("trajectory columns have different lengths")

    def __len__(self):
        return len(self.t)

    @property
    def time(self):
        return self.t if self.independent == "time" else self.states[:, 5]

    @property
    def longitude(self):
        return self.states[:, 5] if self.independent == "time" else self.t

    @property
    def mass(self):
        return self.states[:, 6]

    @property
    def thrust(self):
        return self.controls[:, 0]

    @property
    def direction(self):
        return self.controls[:, 1:]

    @property
    def revolutions(self):
        lon = self.longitude
        return float((lon[-1] - lon[0]) / TWO_PI)

    def to_time_domain(self):
        """Same samples, re-expressed with time as the independent variable."""
        if self.independent == "time":
            return self
        states = self.states.copy()
        states[:, 5] = self.t
        return Trajectory(self.states[:, 5].copy(), states, self.controls.copy(), "time")

    def concatenate(self, other):
        """Append `other`, dropping its first sample when it repeats our last one."""
        if other.independent != self.independent:
            raise ValueError("cannot join trajectories with different independent variables")
        start = 1 if len(self) and np.isclose(other.t[0], self.t[-1], rtol=0.0, atol=1e-12) else 0
        return Trajectory(np.concatenate([self.t, other.t[start:]]),
                          np.vstack([self.states, other.states[start:]]),
                          np.vstack([self.controls, other.controls[start:]]),
                          self.independent)


def _refine_event(event, sol):
    """Zero of `event` on the dense output around the integrator's stop, polished with brentq."""
    s_hit = float(sol.t_events[0][0])

    def g(s):
        return float(event(s, sol.sol(s)))

    if abs(g(s_hit)) <= EVENT_TOLERANCE:
        return s_hit
    lo = float(sol.t[-2]) if len(sol.t) > 1 else float(sol.t[0])
    hi = s_hit if np.sign(g(lo)) != np.sign(g(s_hit)) else s_hit + (s_hit - lo)
    if np.sign(g(lo)) == np.sign(g(hi)):
        logger.debug("event root not bracketed on the last step, keeping the integrator estimate")
        return s_hit
    return brentq(g, lo, hi, xtol=EVENT_TOLERANCE * 1e-2, rtol=4.0 * np.finfo(float).eps)


def propagate(state0, control_law, span, consts, tolerance=GUESS_RTOL, independent="time",
              event=None, require_event=False, n_samples=None):
    """
    Integrate the equations of motion with an adaptive 8(5,3) Runge-Kutta scheme.

    Args:
        state0 (array-like): Initial 7-vector in the layout of `independent`.
        control_law (callable): `control_law(y, s)` returning (T, u_r, u_t, u_n).
        span (tuple): (s0, s1) of the independent variable.
        consts (DynamicsConstants): Scaled constants.
        tolerance (float): Relative tolerance; absolute tolerance is 1e-2 of it.
        independent (str): "time" or "longitude".
        event (callable, optional): Scalar `event(s, y)`; integration stops at its first zero, which is
            refined on the dense output.
        require_event (bool): Raise if `event` never fires.
        n_samples (int, optional): Resample the dense output on a uniform grid of this size.

    Returns:
        Trajectory: Samples at the integrator steps (or the uniform grid) up to the stop.

    Raises:
        PropagationError: On step-size underflow or a non-finite state.
        EventNotReachedError: If `require_event` and the event is not bracketed.
    """
    if independent == "time":
        def fun(s, y):
            return equinoctial_rates(y, np.asarray(control_law(y, s)), consts.mu, consts.exhaust_velocity)
    elif independent == "longitude":
        def fun(s, y):
            return longitude_rates(y, s, np.asarray(control_law(y, s)), consts.mu, consts.exhaust_velocity)
    else:
        raise ValueError(f"unknown independent variable {independent!r}")

    events = None
    if event is not None:
        def stop(s, y):
            return event(s, y)
        stop.terminal = True
        events = [stop]

    sol = solve_ivp(fun, span, np.asarray(state0, dtype=float), method=INTEGRATOR,
                    rtol=tolerance, atol=tolerance * 1e-2, events=events, dense_output=True)
    if sol.status == -1:
        raise PropagationError(f"integration failed at {independent} = {sol.t[-1]}: {sol.message}")
    if not np.all(np.isfinite(sol.y)):
        raise PropagationError("integration produced non-finite states")

    s_end = sol.t[-1]
    if sol.status == 1:
        s_end = _refine_event(event, sol)
    if n_samples:
        s = np.linspace(span[0], s_end, n_samples)
        y = sol.sol(s).T
    else:
        s, y = sol.t.copy(), sol.y.T.copy()
        s[-1], y[-1] = s_end, sol.sol(s_end)

    controls = np.array([control_law(yi, si) for si, yi in zip(s, y)], dtype=float)
    trajectory = Trajectory(s, y, controls, independent)

    if event is not None and require_event and sol.status != 1:
        raise EventNotReachedError(f"event not reached within {independent} span {tuple(span)}", trajectory)

    logger.debug("propagated %s over [%g, %g] in %d steps", independent, span[0], s_end, len(sol.t))
    return trajectory
