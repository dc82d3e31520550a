"""Single trials, (omega1, omega2) sweeps, steady-state detection and CSV output."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import platform
import time
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from . import __version__
from .attitude import quat_to_euler, quat_to_matrix
from .config import RPM, SimConfig, dump_config, load_config
from .frames import DegenerateKinkError, DegenerateTransportError
from .hydro import MobilitySolveError
from .stepper import Simulator, StepFailure

log = logging.getLogger(__name__)

SERIES_COLUMNS = ("t_s", "F1x_N", "F1y_N", "F1z_N", "F2x_N", "F2y_N", "F2z_N",
                  "psi_deg", "theta_deg", "phi_deg", "qw", "qx", "qy", "qz",
                  "wx_rad_s", "wy_rad_s", "wz_rad_s")
MAP_COLUMNS = ("omega1_rpm", "omega2_rpm", "psi_ss_deg", "theta_ss_deg", "abs_psi_ss_deg",
               "abs_theta_ss_deg", "converged", "spin_flag", "yaw_unwrapped_deg")

# |psi| reported for trials whose yaw never settles
SPIN_ABS_PSI = 180.0

STEP_ERRORS = (StepFailure, MobilitySolveError, DegenerateKinkError,
                DegenerateTransportError, np.linalg.LinAlgError, FloatingPointError)


@dataclass
class SteadyState:
    psi: float
    theta: float
    converged: bool
    spin: bool
    psi_amplitude: float
    theta_amplitude: float
    psi_drift: float
    theta_drift: float


@dataclass
class TrialRecord:
    omega1_rpm: float
    omega2_rpm: float
    series: np.ndarray                    # rows in SERIES_COLUMNS order
    steady: SteadyState | None
    completed: bool
    yaw_unwrapped_final: float            # deg
    failure: str | None = None
    wall_time: float = 0.0
    steps: int = 0
    config_text: str = ""

    @property
    def converged(self) -> bool:
        return self.completed and self.steady is not None and self.steady.converged

    @property
    def spin(self) -> bool:
        return self.steady is not None and self.steady.spin

    @property
    def steady_state(self):
        """(psi_ss, theta_ss) in degrees when converged, else None."""
        return (self.steady.psi, self.steady.theta) if self.converged else None

    def map_row(self) -> dict:
        s = self.steady
        psi = s.psi if s is not None else math.nan
        theta = s.theta if s is not None else math.nan
        abs_psi = SPIN_ABS_PSI if self.spin else abs(psi)
        return {"omega1_rpm": self.omega1_rpm, "omega2_rpm": self.omega2_rpm,
                "psi_ss_deg": psi, "theta_ss_deg": theta,
                "abs_psi_ss_deg": abs_psi, "abs_theta_ss_deg": abs(theta),
                "converged": int(self.converged), "spin_flag": int(self.spin),
                "yaw_unwrapped_deg": self.yaw_unwrapped_final}


@dataclass
class SweepResult:
    omega1_values: np.ndarray
    omega2_values: np.ndarray
    records: list = field(default_factory=list)   # row-major over (omega1, omega2)

    def record(self, w1, w2) -> TrialRecord:
        for r in self.records:
            if r.omega1_rpm == w1 and r.omega2_rpm == w2:
                return r
        raise KeyError((w1, w2))

    def grid(self, key: str) -> np.ndarray:
        vals = np.array([r.map_row()[key] for r in self.records], dtype=float)
        return vals.reshape(len(self.omega1_values), len(self.omega2_values))


# --- steady state -----------------------------------------------------------

def unwrap_deg(angles) -> np.ndarray:
    return np.degrees(np.unwrap(np.radians(np.asarray(angles, dtype=float))))


def detect_steady_state(t, psi_deg, theta_deg, window: float = 20.0, tol: float = 0.5,
                        unwrapped: bool = False) -> SteadyState:
    """Trailing-window steady state of yaw and pitch.

    The yaw is unwrapped first (unless ``unwrapped``). Convergence requires the
    means of the last two windows to differ by less than ``tol`` for both angles
    and the fitted yaw rate over the last window to stay below ``tol / window``.
    """
    t = np.asarray(t, dtype=float)
    psi = np.asarray(psi_deg, dtype=float)
    psi = psi if unwrapped else unwrap_deg(psi)
    theta = np.asarray(theta_deg, dtype=float)
    if len(t) < 4 or t[-1] - t[0] < 2.0 * window - 1e-9:
        raise ValueError(f"series spans {t[-1] - t[0] if len(t) else 0:.3g} s; "
                         f"need at least {2 * window:.3g} s")
    end = t[-1]
    last = t >= end - window
    prev = (t >= end - 2.0 * window) & ~last
    drift_psi = abs(psi[last].mean() - psi[prev].mean())
    drift_theta = abs(theta[last].mean() - theta[prev].mean())
    slope = np.polyfit(t[last] - end, psi[last], 1)[0]
    spin = abs(slope) > tol / window
    psi_ss = float(psi[last].mean())
    # report yaw in (-180, 180]
    psi_ss = -((-psi_ss + 180.0) % 360.0 - 180.0)
    return SteadyState(psi=psi_ss, theta=float(theta[last].mean()),
                       converged=bool(drift_psi < tol and drift_theta < tol and not spin),
                       spin=bool(spin),
                       psi_amplitude=float(np.ptp(psi[last]) / 2.0),
                       theta_amplitude=float(np.ptp(theta[last]) / 2.0),
                       psi_drift=float(drift_psi), theta_drift=float(drift_theta))


# --- single trial -------------------------------------------------------------

def _sample(state) -> list:
    Rb = quat_to_matrix(state.attitude.q)
    yaw, pitch, roll, _ = quat_to_euler(state.attitude.q)
    F1 = Rb.T @ state.F1
    F2 = Rb.T @ state.F2
    return [state.t, *F1, *F2, math.degrees(yaw), math.degrees(pitch), math.degrees(roll),
            *state.attitude.q, *state.attitude.omega]


def advance_step(sim: Simulator, state, dt):
    """One step, retried once as two half steps."""
    try:
        return sim.step(state, dt)
    except STEP_ERRORS as exc:
        log.info("step at t=%.4f failed (%s); retrying with dt/2", state.t, exc)
    half = sim.step(state, 0.5 * dt)
    return sim.step(half, 0.5 * dt)


def run_single(cfg: SimConfig, progress=None) -> TrialRecord:
    """Simulate one trial for ``cfg.duration`` and summarize its attitude."""
    start = time.perf_counter()
    sim = Simulator(cfg)
    dt = cfg.solver.time_step
    n_steps = int(round(cfg.duration / dt))
    stride = max(1, int(round(cfg.solver.sample_stride / dt)))
    state = sim.initial
    rows = [_sample(state)]
    failure = None
    k = 0
    for k in range(1, n_steps + 1):
        try:
            state = advance_step(sim, state, dt)
        except STEP_ERRORS as exc:
            failure = f"t={state.t:.4f}: {exc}"
            log.warning("trial (%g, %g) rpm aborted at %s", cfg.omega1 / RPM, cfg.omega2 / RPM, failure)
            k -= 1
            break
        if k % stride == 0:
            rows.append(_sample(state))
        if progress is not None:
            progress(k, n_steps)
    series = np.array(rows)
    yaw_u = unwrap_deg(series[:, 7])
    steady = None
    try:
        steady = detect_steady_state(series[:, 0], yaw_u, series[:, 8],
                                     cfg.solver.steady_window, cfg.solver.steady_tol_deg,
                                     unwrapped=True)
    except ValueError as exc:
        log.info("no steady-state estimate: %s", exc)
    return TrialRecord(omega1_rpm=_rpm(cfg.omega1), omega2_rpm=_rpm(cfg.omega2), series=series,
                       steady=steady, completed=failure is None,
                       yaw_unwrapped_final=float(yaw_u[-1]), failure=failure,
                       wall_time=time.perf_counter() - start, steps=k,
                       config_text=dump_config(cfg))


def _rpm(omega: float) -> float:
    # round-trip rpm -> rad/s -> rpm without float noise
    return float(round(omega / RPM, 9))


# --- sweeps ---------------------------------------------------------------------

def parse_range(text: str) -> np.ndarray:
    """Values of ``start:stop:step`` (inclusive) or a single number, in rpm."""
    parts = [p.strip() for p in str(text).split(":")]
    if len(parts) == 1:
        return np.array([float(parts[0])])
    if len(parts) != 3:
        raise ValueError(f"range {text!r}: expected start:stop:step")
    a, b, s = map(float, parts)
    if s == 0 or (b - a) * s < 0:
        raise ValueError(f"range {text!r}: step must be nonzero and point from start to stop")
    n = int(math.floor((b - a) / s + 1e-9))
    return np.round(a + s * np.arange(n + 1), 9)


def _trial_worker(args) -> TrialRecord:
    text, w1, w2 = args
    cfg = load_config(text).with_values(omega1=w1 * RPM, omega2=w2 * RPM)
    return run_single(cfg)


def run_sweep(cfg: SimConfig, omega1_values, omega2_values, workers: int | None = None,
              out_dir=None) -> SweepResult:
    """One independent trial per (omega1, omega2) grid point, in row-major order."""
    w1s = np.atleast_1d(np.asarray(omega1_values, dtype=float))
    w2s = np.atleast_1d(np.asarray(omega2_values, dtype=float))
    text = dump_config(cfg)
    jobs = [(text, float(a), float(b)) for a in w1s for b in w2s]
    workers = workers or os.cpu_count() or 1
    result = SweepResult(w1s, w2s)
    start = time.perf_counter()
    if workers == 1 or len(jobs) == 1:
        records = map(_trial_worker, jobs)
        pool = None
    else:
        pool = Pool(min(workers, len(jobs)))
        records = pool.imap(_trial_worker, jobs)
    try:
        for rec in records:
            result.records.append(rec)
            if out_dir is not None:
                write_trial(rec, Path(out_dir))
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    if out_dir is not None:
        out = Path(out_dir)
        write_map_csv(result, out / "map.csv")
        write_metadata(out / "map.meta.json", cfg, time.perf_counter() - start,
                       extra={"omega1_rpm": w1s.tolist(), "omega2_rpm": w2s.tolist(),
                              "trials": len(jobs),
                              "failures": {f"{r.omega1_rpm:g},{r.omega2_rpm:g}": r.failure
                                           for r in result.records if r.failure}})
    return result


# --- output -------------------------------------------------------------------

def config_hash(cfg_or_text) -> str:
    text = cfg_or_text if isinstance(cfg_or_text, str) else dump_config(cfg_or_text)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def write_series_csv(record: TrialRecord, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SERIES_COLUMNS)
        for row in record.series:
            w.writerow([repr(float(v)) for v in row])


def read_series_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != SERIES_COLUMNS:
        raise ValueError(f"{path}: unexpected header")
    return np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(SERIES_COLUMNS))


def write_map_csv(result: SweepResult, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, MAP_COLUMNS)
        w.writeheader()
        for rec in result.records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.map_row().items()})


def read_map_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k in ("converged", "spin_flag") else float(v)) for k, v in r.items()})
    return out


def write_metadata(path, cfg_or_text, wall_time: float, extra=None) -> None:
    text = cfg_or_text if isinstance(cfg_or_text, str) else dump_config(cfg_or_text)
    meta = {
        "tool": "biflagella",
        "version": __version__,
        "config_hash": config_hash(text),
        "config": dict(line.split(" = ", 1) for line in text.strip().splitlines()),
        "wall_time_s": wall_time,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "solver_decisions": {
            "integrator": "implicit Euler (rod) staggered with RK4 (base attitude)",
            "hydrodynamics": "explicit, start-of-step velocities",
            "units": "SI inside the config; rpm and degrees in CSV files",
            "series_force_frame": "body",
        },
    }
    if extra:
        meta.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def trial_stem(record: TrialRecord) -> str:
    return f"trial_w1_{record.omega1_rpm:g}_w2_{record.omega2_rpm:g}"


def write_trial(record: TrialRecord, out_dir) -> None:
    out_dir = Path(out_dir)
    stem = trial_stem(record)
    write_series_csv(record, out_dir / f"{stem}.csv")
    s = record.steady
    write_metadata(out_dir / f"{stem}.meta.json", record.config_text, record.wall_time, extra={
        "omega1_rpm": record.omega1_rpm, "omega2_rpm": record.omega2_rpm,
        "completed": record.completed, "failure": record.failure, "steps": record.steps,
        "converged": record.converged, "spin": record.spin,
        "steady_state": None if s is None else {
            "psi_deg": s.psi, "theta_deg": s.theta, "psi_amplitude_deg": s.psi_amplitude,
            "theta_amplitude_deg": s.theta_amplitude, "psi_drift_deg": s.psi_drift,
            "theta_drift_deg": s.theta_drift},
        "yaw_unwrapped_final_deg": record.yaw_unwrapped_final,
    })
