import logging
from dataclasses import dataclass, astuple

import numpy as np

from lib.errors import DegenerateGeometryError, DomainError

logger = logging.getLogger(__name__)

# Global constants for the physical model (SI units)
EARTH_RADIUS = 6.378145e6  # m
MU_EARTH = 3.986004418e14  # m^3/s^2
G0 = 9.80665  # m/s^2, the 9.80665e5 printed in some tables is an exponent typo
INITIAL_MASS = 1000.0  # kg
ISP = 1000.0  # s

TWO_PI = 2.0 * np.pi

# Elements below this magnitude are treated as exactly circular / equatorial
DEGENERATE_TOL = 1e-14


@dataclass(frozen=True)
class PhysicalConstants:
    """
    Physical constants of one transfer study.

    Attributes:
        earth_radius (float): Reference radius, used as the distance unit (m).
        mu_earth (float): Gravitational parameter (m^3/s^2).
        g0 (float): Standard gravity for the specific-impulse definition (m/s^2).
        m0 (float): Initial spacecraft mass (kg).
        isp (float): Specific impulse (s).
    """
    earth_radius: float = EARTH_RADIUS
    mu_earth: float = MU_EARTH
    g0: float = G0
    m0: float = INITIAL_MASS
    isp: float = ISP

    def __post_init__(self):
        for name, value in zip(("earth_radius", "mu_earth", "g0", "m0", "isp"), astuple(self)):
            if not np.isfinite(value) or value <= 0:
                raise DomainError(f"{name} must be strictly positive, got {value}")

    @property
    def exhaust_velocity(self):
        """Effective exhaust velocity g0 * Isp in m/s."""
        return self.g0 * self.isp


@dataclass(frozen=True)
class ScaleSet:
    """
    Canonical units: distance, speed, time, acceleration, mass and force.

    The scaled gravitational parameter is exactly one by construction.
    """
    du: float
    vu: float
    tu: float
    au: float
    mu_unit: float
    fu: float

    @property
    def mu(self):
        return 1.0

    def exhaust_velocity(self, constants):
        """Scaled exhaust velocity g0 * Isp / VU."""
        return constants.exhaust_velocity / self.vu


@dataclass(frozen=True)
class ClassicalElements:
    """Classical orbital elements (a, e, i, raan, argp, ta); lengths in m or DU, angles in rad."""
    a: float
    e: float
    i: float
    raan: float = 0.0
    argp: float = 0.0
    ta: float = 0.0

    @classmethod
    def from_table(cls, a_km, e, i_deg, raan_deg=0.0, argp_deg=0.0, ta_deg=0.0):
        """Build elements from the km/deg form used by the study tables and config files."""
        return cls(a_km * 1e3, e, np.radians(i_deg), np.radians(raan_deg), np.radians(argp_deg), np.radians(ta_deg))

    @property
    def p(self):
        return self.a * (1.0 - self.e ** 2)

    def scaled(self, scales):
        return ClassicalElements(self.a / scales.du, self.e, self.i, self.raan, self.argp, self.ta)


@dataclass(frozen=True)
class EquinoctialElements:
    """
    Modified equinoctial elements.

    `L` is the unwrapped true longitude: it is never reduced mod 2*pi here.
    """
    p: float
    f: float
    g: float
    h: float
    k: float
    L: float

    @property
    def w(self):
        return 1.0 + self.f * np.cos(self.L) + self.g * np.sin(self.L)

    @property
    def eccentricity(self):
        return float(np.hypot(self.f, self.g))

    @property
    def inclination(self):
        return float(2.0 * np.arctan(np.hypot(self.h, self.k)))

    def as_array(self):
        return np.array([self.p, self.f, self.g, self.h, self.k, self.L])


def make_scales(constants):
    """
    Canonical scaling with the Earth radius as the distance unit and the
    initial mass as the mass unit.

    Args:
        constants (PhysicalConstants): The study constants.

    Returns:
        ScaleSet: vu = sqrt(mu/du), tu = du/vu, au = vu/tu, fu = mu_unit*au.
    """
    du = constants.earth_radius
    vu = np.sqrt(constants.mu_earth / du)
    tu = du / vu
    au = vu / tu
    return ScaleSet(du=du, vu=vu, tu=tu, au=au, mu_unit=constants.m0, fu=constants.m0 * au)


def coe_to_mee(coe):
    """
    Convert classical elements to modified equinoctial elements.

    Args:
        coe (ClassicalElements): Elements with a > 0, 0 <= e < 1 and 0 <= i < pi.

    Returns:
        EquinoctialElements: L = raan + argp + ta, not wrapped.

    Raises:
        DomainError: For non-elliptic orbits or i = pi, where tan(i/2) is singular.
    """
    if not coe.a > 0:
        raise DomainError(f"semi-major axis must be positive, got {coe.a}")
    if not 0.0 <= coe.e < 1.0:
        raise DomainError(f"eccentricity must lie in [0, 1), got {coe.e}")
    if not 0.0 <= coe.i <= np.pi:
        raise DomainError(f"inclination must lie in [0, pi], got {coe.i}")
    if np.isclose(coe.i, np.pi, rtol=0.0, atol=1e-12):
        raise DomainError("retrograde equatorial orbit (i = pi) has no equinoctial representation")

    lon_peri = coe.argp + coe.raan
    tan_half = np.tan(coe.i / 2.0)
    return EquinoctialElements(
        p=coe.a * (1.0 - coe.e ** 2),
        f=coe.e * np.cos(lon_peri),
        g=coe.e * np.sin(lon_peri),
        h=tan_half * np.cos(coe.raan),
        k=tan_half * np.sin(coe.raan),
        L=coe.raan + coe.argp + coe.ta,
    )


def classical_from_equinoctial(p, f, g, h, k, L):
    """
    Array kernel behind `mee_to_coe`: works elementwise on sample columns.

    Undefined angles are reported as 0: raan when h = k = 0, argp when e = 0.
    All angles are wrapped to [0, 2*pi).
    """
    p, f, g, h, k, L = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (p, f, g, h, k, L)))
    e = np.hypot(f, g)
    a = p / (1.0 - e ** 2)
    tan_half = np.hypot(h, k)
    i = 2.0 * np.arctan(tan_half)

    raan = np.where(tan_half > DEGENERATE_TOL, np.arctan2(k, h), 0.0)
    lon_peri = np.where(e > DEGENERATE_TOL, np.arctan2(g, f), raan)
    argp = np.mod(lon_peri - raan, TWO_PI)
    ta = np.mod(L - lon_peri, TWO_PI)
    return a, e, i, np.mod(raan, TWO_PI), argp, ta


def mee_to_coe(mee):
    """
    Convert modified equinoctial elements back to classical elements.

    Raises:
        DomainError: If p <= 0 or the orbit is not closed (e >= 1).
    """
    if not mee.p > 0:
        raise DomainError(f"semi-parameter must be positive, got {mee.p}")
    if not mee.eccentricity < 1.0:
        raise DomainError(f"orbit is not closed (e = {mee.eccentricity})")
    return ClassicalElements(*(float(x) for x in classical_from_equinoctial(*mee.as_array())))


def rv_from_equinoctial(p, f, g, h, k, L, mu=1.0):
    """
    Inertial position and velocity from equinoctial elements.

    Broadcasts over array inputs and keeps complex inputs complex.

    Returns:
        tuple: (r, v), each of shape (3, ...) for array inputs.
    """
    cos_l, sin_l = np.cos(L), np.sin(L)
    alpha2 = h * h - k * k
    s2 = 1.0 + h * h + k * k
    hk2 = 2.0 * h * k
    w = 1.0 + f * cos_l + g * sin_l
    r = p / w

    position = (r / s2) * np.stack(np.broadcast_arrays(
        cos_l + alpha2 * cos_l + hk2 * sin_l,
        sin_l - alpha2 * sin_l + hk2 * cos_l,
        2.0 * (h * sin_l - k * cos_l),
    ))
    velocity = (-np.sqrt(mu / p) / s2) * np.stack(np.broadcast_arrays(
        sin_l + alpha2 * sin_l - hk2 * cos_l + g - f * hk2 + alpha2 * g,
        -cos_l + alpha2 * cos_l + hk2 * sin_l - f + g * hk2 + alpha2 * f,
        -2.0 * (h * cos_l + k * sin_l + f * h + g * k),
    ))
    return position, velocity


def mee_to_cartesian(mee, mu=1.0):
    """
    Position and velocity 3-vectors of an equinoctial state.

    Args:
        mee (EquinoctialElements): The state, p > 0.
        mu (float): Gravitational parameter in the units of `mee` (1 when scaled).

    Raises:
        DomainError: If p <= 0.
        DegenerateGeometryError: If w = 1 + f cos L + g sin L <= 0.
    """
    if not mee.p > 0:
        raise DomainError(f"semi-parameter must be positive, got {mee.p}")
    if not mee.w > 0:
        raise DegenerateGeometryError(f"w = {mee.w} <= 0 at L = {mee.L}")
    r, v = rv_from_equinoctial(*mee.as_array(), mu=mu)
    return np.asarray(r, dtype=float), np.asarray(v, dtype=float)
