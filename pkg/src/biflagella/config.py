"""Simulation parameters, unit handling and derived quantities.

All values are stored in SI units (m, kg, s, rad). The text format is one
``key = value [unit]`` per line with ``#`` comments; unit suffixes are only
understood at this boundary.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

RPM = 2.0 * math.pi / 60.0
GRAVITY = 9.81
RE_WARN_THRESHOLD = 0.1


class ConfigError(ValueError):
    """Raised for unknown keys, malformed values and violated bounds."""


@dataclass(frozen=True)
class HelixParams:
    helix_radius: float = 8.89e-3
    helix_pitch: float = 76e-3
    axial_length: float = 196.2e-3
    cross_section_radius: float = 6e-3
    handedness: str = "right"

    @property
    def turns(self) -> float:
        return self.axial_length / self.helix_pitch

    @property
    def contour_length(self) -> float:
        """Arc length of the helix centreline."""
        return self.turns * math.hypot(2.0 * math.pi * self.helix_radius, self.helix_pitch)


@dataclass(frozen=True)
class MaterialParams:
    youngs_modulus: float = 1.255e6
    poisson_ratio: float = 0.5
    density: float = 1450.0

    @property
    def shear_modulus(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))


@dataclass(frozen=True)
class BaseParams:
    mass: float = 0.094
    base_radius: float = 13.5e-3
    base_height: float = 37.5e-3
    motor_separation: float = 45e-3
    mass_center_shift: float = 2e-3
    # None means a solid uniform cylinder about its centroid
    inertia: tuple | None = None
    drag_coeffs: tuple = (1.0, 1.0, 1.0)

    def inertia_matrix(self) -> np.ndarray:
        if self.inertia is None:
            m, rh, h = self.mass, self.base_radius, self.base_height
            jt = m * (3.0 * rh**2 + h**2) / 12.0
            return np.diag([jt, jt, 0.5 * m * rh**2])
        vals = np.asarray(self.inertia, dtype=float)
        if vals.size == 3:
            return np.diag(vals)
        return vals.reshape(3, 3).copy()


@dataclass(frozen=True)
class FluidParams:
    viscosity: float = 1.0
    fluid_density: float = 1260.0


@dataclass(frozen=True)
class SolverParams:
    segment_length: float = 5e-3
    time_step: float = 1e-3
    newton_tol: float = 1e-6
    newton_max_iters: int = 30
    contact_stiffness: float = 1e3
    contact_tolerance: float = 1e-5
    # None means "use the cross-section radius"
    rss_regularization: float | None = None
    contact_enabled: bool = True
    rod_gravity: bool = False
    torque_model: str = "reaction"
    attitude_frozen: bool = False
    sample_stride: float = 10e-3
    steady_window: float = 20.0
    steady_tol_deg: float = 0.5


@dataclass(frozen=True)
class SimConfig:
    helix: HelixParams = field(default_factory=HelixParams)
    material: MaterialParams = field(default_factory=MaterialParams)
    base: BaseParams = field(default_factory=BaseParams)
    fluid: FluidParams = field(default_factory=FluidParams)
    solver: SolverParams = field(default_factory=SolverParams)
    omega1: float = 0.0
    omega2: float = 0.0
    duration: float = 120.0
    phase1: float = 0.0
    phase2: float = 0.0
    max_speed: float = 90.0 * RPM
    gravity: float = GRAVITY

    @property
    def epsilon(self) -> float:
        eps = self.solver.rss_regularization
        return self.helix.cross_section_radius if eps is None else eps

    def with_values(self, **kv) -> "SimConfig":
        """Return a copy with flat keys replaced (values already in SI)."""
        return _build(_flatten(self) | kv)


# --- flat key table -------------------------------------------------------

_GROUPS = {
    "helix": HelixParams,
    "material": MaterialParams,
    "base": BaseParams,
    "fluid": FluidParams,
    "solver": SolverParams,
}
_TOP_KEYS = ("omega1", "omega2", "duration", "phase1", "phase2", "max_speed", "gravity")

KEY_GROUP: dict[str, str | None] = {k: None for k in _TOP_KEYS}
for _g, _cls in _GROUPS.items():
    for _f in dataclasses.fields(_cls):
        KEY_GROUP[_f.name] = _g

# physical dimension of each key, used to check unit suffixes
_DIM = {
    "helix_radius": "length", "helix_pitch": "length", "axial_length": "length",
    "cross_section_radius": "length", "handedness": "word",
    "youngs_modulus": "pressure", "poisson_ratio": "none", "density": "density",
    "mass": "mass", "base_radius": "length", "base_height": "length",
    "motor_separation": "length", "mass_center_shift": "length",
    "inertia": "inertia", "drag_coeffs": "none",
    "viscosity": "viscosity", "fluid_density": "density",
    "segment_length": "length", "time_step": "time", "newton_tol": "force",
    "newton_max_iters": "count", "contact_stiffness": "none",
    "contact_tolerance": "length", "rss_regularization": "length",
    "contact_enabled": "flag", "rod_gravity": "flag", "torque_model": "word",
    "attitude_frozen": "flag", "sample_stride": "time", "steady_window": "time",
    "steady_tol_deg": "none",
    "omega1": "speed", "omega2": "speed", "max_speed": "speed", "duration": "time",
    "phase1": "angle", "phase2": "angle", "gravity": "accel",
}

_UNITS = {
    "m": ("length", 1.0), "mm": ("length", 1e-3), "cm": ("length", 1e-2),
    "s": ("time", 1.0), "ms": ("time", 1e-3),
    "kg": ("mass", 1.0), "g": ("mass", 1e-3),
    "pa": ("pressure", 1.0), "mpa": ("pressure", 1e6),
    "pa*s": ("viscosity", 1.0), "pa.s": ("viscosity", 1.0), "cp": ("viscosity", 1e-3),
    "kg/m^3": ("density", 1.0), "kg/m3": ("density", 1.0), "g/ml": ("density", 1e3),
    "rad/s": ("speed", 1.0), "rpm": ("speed", RPM),
    "rad": ("angle", 1.0), "deg": ("angle", math.pi / 180.0),
    "n": ("force", 1.0), "m/s^2": ("accel", 1.0), "kg*m^2": ("inertia", 1.0),
}

_CHOICES = {"handedness": ("right", "left"), "torque_model": ("resultant", "reaction", "per_node")}


def _parse_scalar(key: str, token: str, unit: str | None) -> float:
    try:
        val = float(token)
    except ValueError:
        raise ConfigError(f"{key}: non-numeric value {token!r}") from None
    if unit is not None:
        u = unit.lower()
        if u not in _UNITS:
            raise ConfigError(f"{key}: unknown unit {unit!r}")
        dim, scale = _UNITS[u]
        if dim != _DIM[key]:
            raise ConfigError(f"{key}: unit {unit!r} is a {dim}, expected {_DIM[key]}")
        val *= scale
    return val


def _parse_value(key: str, raw: str):
    dim = _DIM[key]
    tokens = raw.split()
    if not tokens:
        raise ConfigError(f"{key}: missing value")
    if dim == "word":
        if len(tokens) != 1 or tokens[0] not in _CHOICES[key]:
            raise ConfigError(f"{key}: expected one of {_CHOICES[key]}, got {raw!r}")
        return tokens[0]
    if dim == "flag":
        word = tokens[0].lower()
        if len(tokens) != 1 or word not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return word in ("true", "1", "yes", "on")
    if key == "rss_regularization" and tokens[0].lower() in ("none", "auto"):
        return None
    if key == "inertia" and tokens[0].lower() in ("none", "auto"):
        return None
    if key in ("inertia", "drag_coeffs"):
        unit = None
        if _looks_like_unit(tokens[-1]):
            unit = tokens.pop()
        vals = tuple(_parse_scalar(key, t, unit) for t in tokens)
        allowed = (3, 9) if key == "inertia" else (3,)
        if len(vals) not in allowed:
            raise ConfigError(f"{key}: expected {' or '.join(map(str, allowed))} numbers")
        return vals
    if len(tokens) > 2:
        raise ConfigError(f"{key}: too many tokens in {raw!r}")
    unit = tokens[1] if len(tokens) == 2 else None
    val = _parse_scalar(key, tokens[0], unit)
    if dim == "count":
        if val != int(val):
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
        return int(val)
    return val


def _looks_like_unit(tok: str) -> bool:
    try:
        float(tok)
        return False
    except ValueError:
        return True


def _flatten(cfg: SimConfig) -> dict:
    out = {k: getattr(cfg, k) for k in _TOP_KEYS}
    for g in _GROUPS:
        out.update(dataclasses.asdict(getattr(cfg, g)))
    return out


def _build(flat: dict) -> SimConfig:
    unknown = set(flat) - set(KEY_GROUP)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}")
    groups = {g: {} for g in _GROUPS}
    top = {}
    for k, v in flat.items():
        g = KEY_GROUP[k]
        if g is None:
            top[k] = v
        else:
            groups[g][k] = v
    for k in ("inertia", "drag_coeffs"):
        if groups["base"].get(k) is not None:
            groups["base"][k] = tuple(float(x) for x in groups["base"][k])
    cfg = SimConfig(**{g: _GROUPS[g](**kw) for g, kw in groups.items()}, **top)
    validate(cfg)
    return cfg


def _require(cond: bool, key: str, bound: str):
    if not cond:
        raise ConfigError(f"{key}: violates bound {bound}")


def validate(cfg: SimConfig) -> None:
    h, mat, b, f, s = cfg.helix, cfg.material, cfg.base, cfg.fluid, cfg.solver
    _require(h.helix_radius >= 0, "helix_radius", ">= 0")
    _require(h.helix_pitch > 0, "helix_pitch", "> 0")
    _require(h.axial_length > 0, "axial_length", "> 0")
    _require(h.cross_section_radius > 0, "cross_section_radius", "> 0")
    _require(h.cross_section_radius < h.helix_pitch, "cross_section_radius", "< helix_pitch")
    _require(h.handedness in _CHOICES["handedness"], "handedness", "right|left")
    _require(mat.youngs_modulus > 0, "youngs_modulus", "> 0")
    _require(0 <= mat.poisson_ratio <= 0.5, "poisson_ratio", "in [0, 0.5]")
    _require(mat.density > 0, "density", "> 0")
    for key in ("mass", "base_radius", "base_height", "motor_separation", "mass_center_shift"):
        _require(getattr(b, key) > 0, key, "> 0")
    J = b.inertia_matrix()
    _require(np.allclose(J, J.T, rtol=0, atol=1e-15 * np.abs(J).max()), "inertia", "symmetric")
    _require(bool(np.all(np.linalg.eigvalsh(0.5 * (J + J.T)) > 0)), "inertia", "positive-definite")
    _require(len(b.drag_coeffs) == 3 and all(c >= 0 for c in b.drag_coeffs), "drag_coeffs", ">= 0")
    _require(f.viscosity > 0, "viscosity", "> 0")
    _require(f.fluid_density > 0, "fluid_density", "> 0")
    _require(s.segment_length > 0, "segment_length", "> 0")
    _require(s.segment_length < h.contour_length, "segment_length", "< contour length")
    _require(s.time_step > 0, "time_step", "> 0")
    _require(s.newton_tol > 0, "newton_tol", "> 0")
    _require(s.newton_max_iters >= 1, "newton_max_iters", ">= 1")
    _require(s.contact_stiffness > 0, "contact_stiffness", "> 0")
    _require(s.contact_tolerance > 0, "contact_tolerance", "> 0")
    _require(s.rss_regularization is None or s.rss_regularization > 0, "rss_regularization", "> 0")
    _require(s.torque_model in _CHOICES["torque_model"], "torque_model", "resultant|per_node")
    _require(s.sample_stride > 0, "sample_stride", "> 0")
    _require(s.steady_window > 0, "steady_window", "> 0")
    _require(s.steady_tol_deg > 0, "steady_tol_deg", "> 0")
    _require(cfg.duration >= 0, "duration", ">= 0")
    _require(cfg.max_speed > 0, "max_speed", "> 0")
    # small slack so that "90 rpm" passes after the unit conversion
    lim = cfg.max_speed * (1 + 1e-12)
    _require(abs(cfg.omega1) <= lim, "omega1", f"|omega1| <= {cfg.max_speed:.6g} rad/s")
    _require(abs(cfg.omega2) <= lim, "omega2", f"|omega2| <= {cfg.max_speed:.6g} rad/s")


def parse_assignments(lines) -> dict:
    """Parse ``key = value [unit]`` lines into a flat dict of SI values."""
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in KEY_GROUP:
            raise ConfigError(f"unknown key {key!r} (line {lineno})")
        out[key] = _parse_value(key, raw)
    return out


def load_config(text: str = "", overrides=None) -> SimConfig:
    """Build a validated config from document text plus ``key=value`` overrides."""
    flat = _flatten(SimConfig())
    flat.update(parse_assignments(text.splitlines()))
    if overrides:
        flat.update(parse_assignments(overrides))
    return _build(flat)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return " ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: SimConfig) -> str:
    """Serialize in SI units; ``load_config(dump_config(c)) == c`` exactly."""
    lines = []
    for k, v in _flatten(cfg).items():
        lines.append(f"{k} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


# desk-scale acceptance preset
DESK_PRESET = {"segment_length": 10e-3, "time_step": 2e-3, "duration": 60.0}


def derived_stiffnesses(material: MaterialParams, r: float):
    """Return (EA, EI, GJ) for a solid circular section of radius ``r``."""
    if r <= 0:
        raise ConfigError("cross_section_radius: violates bound > 0")
    area = math.pi * r**2
    EA = material.youngs_modulus * area
    EI = material.youngs_modulus * math.pi * r**4 / 4.0
    GJ = material.shear_modulus * math.pi * r**4 / 2.0
    return EA, EI, GJ


def reynolds_number(rho_f: float, omega: float, R: float, r: float, mu: float,
                    warn: bool = True) -> float:
    re = rho_f * abs(omega) * R * r / mu
    if warn and re >= RE_WARN_THRESHOLD:
        warnings.warn(f"Reynolds number {re:.3g} is not small (>= {RE_WARN_THRESHOLD})",
                      RuntimeWarning, stacklevel=2)
    return re


def dimensionless_groups(cfg: SimConfig, omega: float | None = None):
    """(omega*mu*l^4/EI, d/l, pitch/L, R/L) with L the contour length.

    ``omega`` defaults to the larger of the two motor speeds.
    """
    if omega is None:
        omega = max(abs(cfg.omega1), abs(cfg.omega2))
    h = cfg.helix
    _, EI, _ = derived_stiffnesses(cfg.material, h.cross_section_radius)
    L = h.contour_length
    return (abs(omega) * cfg.fluid.viscosity * h.axial_length**4 / EI,
            cfg.base.motor_separation / h.axial_length,
            h.helix_pitch / L,
            h.helix_radius / L)
