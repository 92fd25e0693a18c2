"""
Metrics, table comparison and trajectory import/export.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from pandas import DataFrame, read_csv

from lib.dynamics import CONTROL_NAMES, STATE_NAMES, Trajectory
from lib.elements import G0, ISP, classical_from_equinoctial, rv_from_equinoctial
from lib.errors import ConfigurationError, DomainError
from lib.problem import PUBLISHED_RESULTS, REFERENCE_DELTA_V

logger = logging.getLogger(__name__)

# Global constants for exports
SECONDS_PER_HOUR = 3600.0
SCHEMA = "transfer-trajectory"
SCHEMA_VERSION = 1
FRAMES = ("mee", "coe", "cartesian")
FORMATS = ("csv", "json")
FLOAT_FORMAT = "%.17g"
FRAME_COLUMNS = {
    "mee": STATE_NAMES,
    "coe": ("a", "e", "i", "raan", "argp", "ta", "m"),
    "cartesian": ("x", "y", "z", "vx", "vy", "vz", "m"),
}
SUMMARY_COLUMNS = ("Study", "Case", "s0", "m(tf)", "t_T", "N", "A_T", "ΔV", "Ref ΔV")


@dataclass(frozen=True)
class TransferMetrics:
    """
    Table row of one transfer.

    Attributes:
        final_mass (float): kg.
        thrust_time (float): Hours spent at full thrust.
        revolutions (float): (L(tf) - L(t0)) / 2 pi.
        thrust_arcs (int): Number of full-thrust arcs.
        delta_v (float): m/s, from the rocket equation.
        reference_delta_v (float, optional): Prior-work value for the same case, m/s.
    """
    final_mass: float
    thrust_time: float
    revolutions: float
    thrust_arcs: int
    delta_v: float
    reference_delta_v: Optional[float] = None


def tsiolkovsky_dv(m0, mf, g0=G0, isp=ISP):
    """
    Ideal velocity change g0 * Isp * ln(m0 / mf).

    Raises:
        DomainError: If mf <= 0 or mf > m0.
    """
    if not mf > 0:
        raise DomainError(f"final mass must be positive, got {mf}")
    if mf > m0:
        raise DomainError(f"final mass {mf} exceeds initial mass {m0}")
    return float(g0 * isp * np.log(m0 / mf))


def compute_metrics(traj, structure, prob):
    """
    Metrics of a converged transfer.

    Args:
        traj (Trajectory): Final trajectory, scaled, time or longitude domain.
        structure (ControlStructure): Arcs of the final solution, scaled times.
        prob (TransferProblem): The transfer.

    Returns:
        TransferMetrics
    """
    scales, constants = prob.scales, prob.constants
    final_mass = float(traj.mass[-1]) * scales.mu_unit
    burn = sum(arc.duration for arc in structure.arcs if arc.kind.value == "max")
    return TransferMetrics(
        final_mass=final_mass,
        thrust_time=float(burn) * scales.tu / SECONDS_PER_HOUR,
        revolutions=traj.revolutions,
        thrust_arcs=structure.thrust_arcs,
        delta_v=tsiolkovsky_dv(constants.m0, min(final_mass, constants.m0), constants.g0, constants.isp),
        reference_delta_v=REFERENCE_DELTA_V.get((prob.study, prob.case)),
    )


def mass_flow_residual(metrics, prob):
    """Relative gap between t_T * T_max / (g0 Isp) and the propellant actually spent."""
    constants = prob.constants
    burned = metrics.thrust_time * SECONDS_PER_HOUR * prob.thrust_case.t_max / constants.exhaust_velocity
    spent = constants.m0 - metrics.final_mass
    if spent <= 0:
        return abs(burned) / constants.m0
    return abs(burned - spent) / spent


def compare_with_published(metrics, study, case):
    """
    Signed differences (ours - published) for every table column.

    Raises:
        ConfigurationError: If (study, case) is not a tabulated transfer.
    """
    key = (str(study).lower(), case)
    if key not in PUBLISHED_RESULTS:
        raise ConfigurationError(f"no published results for {study!r} case {case!r}")
    mass, hours, revolutions, arcs, delta_v = PUBLISHED_RESULTS[key]
    return {
        "final_mass": metrics.final_mass - mass,
        "thrust_time": metrics.thrust_time - hours,
        "revolutions": metrics.revolutions - revolutions,
        "thrust_arcs": metrics.thrust_arcs - arcs,
        "delta_v": metrics.delta_v - delta_v,
        "reference_delta_v": REFERENCE_DELTA_V.get(key),
    }


def summary_row(study, case, s0, metrics):
    return {
        "Study": str(study).upper(),
        "Case": case,
        "s0": s0,
        "m(tf)": metrics.final_mass,
        "t_T": metrics.thrust_time,
        "N": metrics.revolutions,
        "A_T": metrics.thrust_arcs,
        "ΔV": metrics.delta_v,
        "Ref ΔV": metrics.reference_delta_v,
    }


def metrics_frame(rows):
    """Table of summary rows in the column order of SUMMARY_COLUMNS."""
    return DataFrame(list(rows), columns=list(SUMMARY_COLUMNS))


def metrics_to_dict(metrics):
    return asdict(metrics)


def _frame_values(traj, frame, scales):
    traj = traj.to_time_domain()
    states = traj.states
    p, f, g, h, k, lon, m = states.T
    du = scales.du if scales else 1.0
    vu = scales.vu if scales else 1.0
    mass_unit = scales.mu_unit if scales else 1.0

    if frame == "mee":
        columns = [p * du, f, g, h, k, lon]
    elif frame == "coe":
        a, e, i, raan, argp, ta = classical_from_equinoctial(p, f, g, h, k, lon)
        columns = [a * du, e, i, raan, argp, ta]
    else:
        r, v = rv_from_equinoctial(p, f, g, h, k, lon)
        columns = [*(np.real(r) * du), *(np.real(v) * vu)]
    columns.append(m * mass_unit)
    values = dict(zip(FRAME_COLUMNS[frame], columns))

    controls = traj.controls
    thrust = controls[:, 0] * (scales.fu if scales else 1.0)
    table = {"t": traj.time * (scales.tu if scales else 1.0), **values, CONTROL_NAMES[0]: thrust}
    for j, name in enumerate(CONTROL_NAMES[1:], start=1):
        table[name] = controls[:, j]
    return DataFrame(table)


def export_trajectory(traj, file_path, format=None, frame="mee", scales=None):
    """
    Write a trajectory as CSV or JSON.

    Columns: t, the seven states of `frame`, then T, u_r, u_t, u_n. With a
    ScaleSet the values are SI (s, m, m/s, kg, N, rad); otherwise canonical.
    CSV files end with a `units` column holding "si" or "canonical".

    Args:
        traj (Trajectory): Samples to write.
        file_path (str): Destination; its extension picks the format when `format` is None.
        format (str, optional): "csv" or "json".
        frame (str): "mee", "coe" or "cartesian".
        scales (ScaleSet, optional): Unit scaling for SI output.

    Returns:
        DataFrame: The table that was written.
    """
    format = format or os.path.splitext(file_path)[1].lstrip(".").lower() or "csv"
    if format not in FORMATS:
        raise ConfigurationError(f"unknown export format {format!r}, expected one of {FORMATS}")
    if frame not in FRAMES:
        raise ConfigurationError(f"unknown frame {frame!r}, expected one of {FRAMES}")

    df = _frame_values(traj, frame, scales)
    if format == "csv":
        df = df.assign(units="si" if scales else "canonical")
        df.to_csv(file_path, index=False, float_format=FLOAT_FORMAT)
    else:
        document = {
            "schema": SCHEMA,
            "version": SCHEMA_VERSION,
            "frame": frame,
            "units": "si" if scales else "canonical",
            "columns": list(df.columns),
            "samples": df.to_dict(orient="records"),
        }
        with open(file_path, "w") as file:
            file.write(json.dumps(document, indent=4))
    logger.debug("wrote %d samples to %s", len(df), file_path)
    return df


def load_trajectory(file_path, scales=None):
    """
    Read an mee-frame export back into a scaled time-domain Trajectory.

    Both formats carry their units. A CSV without a `units` column is taken as SI
    when `scales` is given.

    Raises:
        ConfigurationError: For an unknown extension, another frame or missing columns.
    """
    extension = os.path.splitext(file_path)[1].lower()
    if extension == ".csv":
        df = read_csv(file_path)
        si = df["units"].iloc[0] == "si" if "units" in df.columns and len(df) else scales is not None
    elif extension == ".json":
        with open(file_path, "r") as file:
            document = json.load(file)
        if document.get("schema") != SCHEMA or document.get("frame") != "mee":
            raise ConfigurationError(f"{file_path} is not an mee-frame trajectory export")
        df = DataFrame(document["samples"], columns=document.get("columns"))
        si = document.get("units") == "si"
    else:
        raise ConfigurationError(f"cannot read trajectories from {extension or 'extension-less'} files")
    if si and scales is None:
        raise ConfigurationError(f"{file_path} is in SI units; a ScaleSet is needed to read it")

    required = ("t", *STATE_NAMES, *CONTROL_NAMES)
    missing = [name for name in required if name not in df.columns]
    if missing:
        raise ConfigurationError(f"{file_path} lacks columns {missing}")

    t = df["t"].to_numpy(dtype=float)
    states = df[list(STATE_NAMES)].to_numpy(dtype=float)
    controls = df[list(CONTROL_NAMES)].to_numpy(dtype=float)
    if si:
        t = t / scales.tu
        states[:, 0] /= scales.du
        states[:, 6] /= scales.mu_unit
        controls[:, 0] /= scales.fu
    return Trajectory(t, states, controls, "time")
