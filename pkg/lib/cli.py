"""
Command-line driver: single transfers, custom transfers and whole study suites.
"""
import argparse
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

from lib.bbsoc import DetectionConfig, bbsoc_solve
from lib.errors import ConfigurationError, TransferError
from lib.guess import ChainConfig, initial_guess
from lib.problem import CASES, COLLOCATION_POINTS, REFERENCE_DELTA_V, STUDIES, THRUST_CASES, build_problem, \
    load_problem, save_problem
from lib.report import FORMATS, FRAMES, export_trajectory, load_trajectory, metrics_frame, metrics_to_dict, \
    summary_row
from lib.solver import SolverStatus

logger = logging.getLogger(__name__)

# Global constants for the command line
OUTPUT_DIR_ENV = "TRANSFER_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "runs"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
DIAGNOSTICS_FILE = "diagnostics.jsonl"
SUMMARY_FILE = "summary.csv"
SUITE_FILE = "suite.csv"
FAILURE_FILE = "failure.json"

EXIT_CONVERGED = 0
EXIT_FEASIBLE = 2
EXIT_INFEASIBLE = 3
EXIT_CONFIGURATION = 4


@dataclass(frozen=True)
class RunSpec:
    """
    One run of the driver.

    Attributes:
        study (str): "meo", "heo" or "geo".
        case (int): Thrust case 1..7.
        eta (float, optional): Detection threshold; defaults to the initial-setup table.
        intervals (int, optional): Smooth-mesh interval count M; defaults to the initial-setup table.
        points (int): Collocation points per interval.
        nlp_tolerance (float): NLP solver tolerance.
        mesh_tolerance (float): Mesh refinement tolerance.
        warm_start (str, optional): Trajectory export used as the guess instead of the generators.
        out (str, optional): Base output directory; defaults to $TRANSFER_OUTPUT_DIR or ./runs.
        format (str): Trajectory export format, "csv" or "json".
        frame (str): Trajectory export frame.
        backend (str): Solver backend name.
        time_limit (float, optional): CPU-time cap per NLP solve, seconds.
        problem (str, optional): Problem config file for a custom transfer; replaces study/case.
    """
    study: str = "meo"
    case: int = 1
    eta: Optional[float] = None
    intervals: Optional[int] = None
    points: int = COLLOCATION_POINTS
    nlp_tolerance: float = 1e-7
    mesh_tolerance: float = 1e-2
    warm_start: Optional[str] = None
    out: Optional[str] = None
    format: str = "csv"
    frame: str = "mee"
    backend: str = "ipopt"
    time_limit: Optional[float] = None
    problem: Optional[str] = None

    def __post_init__(self):
        if self.problem is None:
            if str(self.study).lower() not in STUDIES:
                raise ConfigurationError(f"unknown study {self.study!r}, expected one of {STUDIES}")
            if self.case not in CASES:
                raise ConfigurationError(f"unknown case {self.case!r}, expected one of {CASES}")
        if self.format not in FORMATS:
            raise ConfigurationError(f"unknown format {self.format!r}, expected one of {FORMATS}")
        if self.frame not in FRAMES:
            raise ConfigurationError(f"unknown frame {self.frame!r}, expected one of {FRAMES}")

    @property
    def label(self):
        if self.problem is not None:
            return os.path.splitext(os.path.basename(self.problem))[0]
        return f"{str(self.study).lower()}-{self.case}"

    @property
    def base_directory(self):
        return self.out or os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR)

    @property
    def run_directory(self):
        return os.path.join(self.base_directory, self.label)

    def build_problem(self):
        return load_problem(self.problem) if self.problem is not None else build_problem(self.study, self.case)

    def detection_config(self):
        overrides = {"eta": self.eta, "intervals": self.intervals, "points": self.points,
                     "nlp_tolerance": self.nlp_tolerance, "mesh_tolerance": self.mesh_tolerance,
                     "backend": self.backend, "time_limit": self.time_limit}
        if self.problem is not None:
            return DetectionConfig(**{k: v for k, v in overrides.items() if v is not None})
        return DetectionConfig.for_case(self.study, self.case, **overrides)


class JsonLineFormatter(logging.Formatter):
    """One JSON object per record; `extra={"diagnostics": {...}}` is merged in."""

    def format(self, record):
        payload = {
            "time": self.formatTime(record),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        payload.update(getattr(record, "diagnostics", {}))
        return json.dumps(payload, default=str)


def configure_logging(verbosity=0):
    """Human-readable stderr logging: WARNING, INFO with -v, DEBUG with -vv."""
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(min(level, logging.INFO))
    handler.setLevel(level)


def build_parser():
    parser = argparse.ArgumentParser(description="Minimum-fuel low-thrust transfers by multi-domain LGR "
                                                 "collocation with bang-bang structure detection.")
    parser.add_argument("--study", choices=STUDIES, type=str.lower, help="terminal orbit set")
    parser.add_argument("--case", type=int, choices=CASES, help="thrust case")
    parser.add_argument("--problem", help="problem config file for a custom transfer")
    parser.add_argument("--eta", type=float, help="detection threshold (default: initial-setup table)")
    parser.add_argument("--mesh-intervals", dest="intervals", type=int, help="smooth-mesh interval count M")
    parser.add_argument("--points", type=int, help="collocation points per interval")
    parser.add_argument("--nlp-tol", dest="nlp_tolerance", type=float, help="NLP solver tolerance (1e-7)")
    parser.add_argument("--mesh-tol", dest="mesh_tolerance", type=float, help="mesh refinement tolerance (1e-2)")
    parser.add_argument("--warm-start", dest="warm_start", help="trajectory export used as the initial guess")
    parser.add_argument("--out", help=f"base output directory (default: ${OUTPUT_DIR_ENV} or ./{DEFAULT_OUTPUT_DIR})")
    parser.add_argument("--format", choices=FORMATS, help="trajectory export format")
    parser.add_argument("--frame", choices=FRAMES, help="trajectory export frame")
    parser.add_argument("--backend", help="NLP backend (ipopt or slsqp)")
    parser.add_argument("--time-limit", dest="time_limit", type=float, help="CPU seconds per NLP solve")
    parser.add_argument("--config", help="JSON file of run options; explicit flags take precedence")
    parser.add_argument("--suite", action="store_true",
                        help="run every selected (study, case) pair and write suite.csv")
    parser.add_argument("--workers", type=int, default=1, help="parallel workers for --suite")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    return parser


def read_config(file_path):
    """Run options from a JSON file, keyed by RunSpec field names."""
    try:
        with open(file_path, "r") as file:
            config = json.load(file)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read run config {file_path}: {exc}") from exc
    known = {f.name for f in fields(RunSpec)}
    unknown = sorted(set(config) - known)
    if unknown:
        raise ConfigurationError(f"unknown run options in {file_path}: {unknown}")
    return config


def resolve_spec(args):
    """Defaults, then the --config file, then explicit flags."""
    values = asdict(RunSpec())
    if args.config:
        values.update(read_config(args.config))
    flags = {f.name: getattr(args, f.name, None) for f in fields(RunSpec)}
    values.update({k: v for k, v in flags.items() if v is not None})
    return RunSpec(**values)


def _write_failure(run_dir, spec, exc, code):
    report = exc.diagnostics() if hasattr(exc, "diagnostics") else {"error": type(exc).__name__,
                                                                      "message": str(exc)}
    report.update({"run": spec.label, "exit_code": code})
    with open(os.path.join(run_dir, FAILURE_FILE), "w") as file:
        file.write(json.dumps(report, indent=4, default=str))


def _failed_row(spec, prob=None):
    if spec.problem is not None:
        # custom transfers are named after their problem file
        return {"Study": spec.label.upper(), "Case": prob.case if prob is not None else None,
                "s0": prob.thrust_case.s0 if prob is not None else None, "Ref ΔV": None}
    return {"Study": str(spec.study).upper(), "Case": spec.case, "s0": THRUST_CASES.get(spec.case, (None,))[0],
            "Ref ΔV": REFERENCE_DELTA_V.get((str(spec.study).lower(), spec.case))}


def execute(spec):
    """
    Run one transfer and write its artifacts into `spec.run_directory`.

    Returns:
        tuple: (exit code, summary row dict)
    """
    run_dir = spec.run_directory
    os.makedirs(run_dir, exist_ok=True)
    diagnostics = logging.FileHandler(os.path.join(run_dir, DIAGNOSTICS_FILE), mode="w")
    diagnostics.setFormatter(JsonLineFormatter())
    diagnostics.setLevel(logging.INFO)
    root = logging.getLogger()
    root.addHandler(diagnostics)
    if root.level > logging.INFO or root.level == logging.NOTSET:
        root.setLevel(logging.INFO)
    prob = None
    try:
        prob = spec.build_problem()
        config = spec.detection_config()
        logger.info("%s: eta = %g, M = %d, c_p = %d, backend %s", spec.label, config.eta, config.intervals,
                    config.points, config.backend, extra={"diagnostics": {"event": "run_start", **asdict(spec)}})
        save_problem(prob, os.path.join(run_dir, "problem.json"))
        extension = f".{spec.format}"

        if spec.warm_start:
            guess = load_trajectory(spec.warm_start, prob.scales)
            logger.info("%s: warm start from %s", spec.label, spec.warm_start)
        else:
            guess = initial_guess(prob, ChainConfig(backend=spec.backend))
            export_trajectory(guess, os.path.join(run_dir, "guess" + extension), spec.format, spec.frame,
                              prob.scales)

        result = bbsoc_solve(prob, config, guess)
        export_trajectory(result.trajectory, os.path.join(run_dir, "trajectory" + extension), spec.format,
                          spec.frame, prob.scales)
        study = prob.study if spec.problem is None else spec.label
        row = summary_row(study, prob.case, prob.thrust_case.s0, result.metrics)
        metrics_frame([row]).to_csv(os.path.join(run_dir, SUMMARY_FILE), index=False)
        with open(os.path.join(run_dir, "structure.json"), "w") as file:
            file.write(json.dumps({"arcs": result.structure.to_records(), "metrics": metrics_to_dict(result.metrics),
                                   "history": result.history}, indent=4))

        converged = result.structured and result.solution.status is SolverStatus.OPTIMAL
        code = EXIT_CONVERGED if converged else EXIT_FEASIBLE
        logger.info("%s: dV = %.1f m/s, A_T = %d, status %s", spec.label, result.metrics.delta_v,
                    result.metrics.thrust_arcs, result.solution.status.value,
                    extra={"diagnostics": {"event": "run_end", "exit_code": code}})
        return code, row
    except ConfigurationError as exc:
        logger.error("%s: %s", spec.label, exc)
        _write_failure(run_dir, spec, exc, EXIT_CONFIGURATION)
        return EXIT_CONFIGURATION, _failed_row(spec, prob)
    except TransferError as exc:
        logger.error("%s: %s", spec.label, exc)
        _write_failure(run_dir, spec, exc, EXIT_INFEASIBLE)
        return EXIT_INFEASIBLE, _failed_row(spec, prob)
    finally:
        root.removeHandler(diagnostics)
        diagnostics.close()


def _suite_cell(spec):
    try:
        return execute(spec)
    except Exception as exc:
        logger.error("%s: unexpected failure: %s", spec.label, exc)
        return EXIT_INFEASIBLE, _failed_row(spec)


def run(spec):
    """Run one transfer; returns the process exit code."""
    return execute(spec)[0]


def run_suite(studies, cases, base=None, workers=1):
    """
    Run every (study, case) pair and write the combined table to `suite.csv`.

    Cells that fail keep their row with empty metrics; the suite continues.

    Returns:
        DataFrame: One row per pair plus an "Exit" column.
    """
    base = base or RunSpec()
    specs = [replace(base, study=study, case=case) for study in studies for case in cases]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_suite_cell, specs))
    else:
        outcomes = [_suite_cell(spec) for spec in specs]

    frame = metrics_frame([row for _, row in outcomes])
    frame["Exit"] = [code for code, _ in outcomes]
    os.makedirs(base.base_directory, exist_ok=True)
    frame.to_csv(os.path.join(base.base_directory, SUITE_FILE), index=False)
    failed = [spec.label for spec, (code, _) in zip(specs, outcomes) if code not in (EXIT_CONVERGED, EXIT_FEASIBLE)]
    if failed:
        logger.warning("suite cells without a solution: %s", ", ".join(failed))
    return frame


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        spec = resolve_spec(args)
    except ConfigurationError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIGURATION

    if args.suite:
        studies = [args.study] if args.study else list(STUDIES)
        cases = [args.case] if args.case else list(CASES)
        frame = run_suite(studies, cases, spec, args.workers)
        print(frame.to_string(index=False))
        return EXIT_CONVERGED if (frame["Exit"] == EXIT_CONVERGED).all() else int(frame["Exit"].max())
    return run(spec)
