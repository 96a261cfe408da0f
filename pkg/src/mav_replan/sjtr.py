"""Joint replanning of the degraded target orbit and the ascent trajectory.

One penalty-relaxed convex subproblem per outer iteration decides the
thrust directions of both powered phases, the coast and burn end times,
and a 5-vector of slacks on the linearized insertion constraints.  The
slack penalties are ordered so the optimizer gives up the orbit plane
before it gives up altitude, which is what makes a single formulation
cover the whole downgrade ladder.

Everything internal runs in the nondimensional units of the dynamics
context; the public containers speak SI.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .conic import NONNEG, SOC, ConeBlock, ConicProgram, SolverSettings, solve
from .env import (
    ConfigError,
    FaultScenario,
    MarsEnvironment,
    OrbitElements,
    State,
    VehicleConfig,
    default_environment,
    default_vehicle,
    elements_from_state,
    propagate_reference,
    remaining_burn_time,
    time_to_apoapsis,
)
from .mcpi import (
    DynamicsContext,
    PhaseTrajectory,
    PicardMatrices,
    PropagationError,
    cgl_nodes,
    constant_guess_phase,
    make_context,
    node_accel_jacobians,
    picard_fixed_point,
    picard_matrices,
    _phase_thrust_nd,
)

ORBIT_TYPES = ("A", "B", "C", "D")


@dataclass(frozen=True)
class TargetOrbit:
    """Nominal circular target plus the minimum safe semi-major axis."""

    elements: OrbitElements
    a_safe: float

    def __post_init__(self):
        if self.elements.e != 0.0:
            raise ConfigError("target orbit must be circular")
        if not self.a_safe < self.elements.a:
            raise ConfigError(
                f"safe axis {self.a_safe} must lie below the target axis {self.elements.a}")

    @property
    def h_unit(self) -> np.ndarray:
        i, raan = self.elements.i, self.elements.raan
        return np.array([
            math.sin(raan) * math.sin(i),
            -math.cos(raan) * math.sin(i),
            math.cos(i),
        ])


def default_target(env: Optional[MarsEnvironment] = None) -> TargetOrbit:
    env = env or default_environment()
    elements = OrbitElements(a=env.radius + 300e3, e=0.0,
                             i=math.radians(29.5), raan=math.radians(253.2))
    return TargetOrbit(elements=elements, a_safe=env.radius + 250e3)


@dataclass(frozen=True)
class DecisionVector:
    """Current iterate: node thrust directions, phase end times, slacks."""

    u1: np.ndarray
    u3: np.ndarray
    t2f: float
    t3f: float
    slack: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u1", np.asarray(self.u1, dtype=float))
        object.__setattr__(self, "u3", np.asarray(self.u3, dtype=float))
        object.__setattr__(self, "slack", np.asarray(self.slack, dtype=float))
        if self.u1.ndim != 2 or self.u1.shape[1] != 3 or self.u1.shape != self.u3.shape:
            raise ConfigError("control arrays must both be (nodes, 3)")
        if self.slack.shape != (5,):
            raise ConfigError("slack must be a 5-vector")
        if np.any(self.slack < -1e-9):
            raise ConfigError("slack must be nonnegative")
        if not self.t2f < self.t3f:
            raise ConfigError(f"times out of order: t2f={self.t2f}, t3f={self.t3f}")


@dataclass(frozen=True)
class SJTRConfig:
    """Penalties, trust radii, and convergence thresholds for the solve.

    penalty orders the five insertion constraints; the large gap between
    the first three weights and the last two is what buys altitude with
    plane error.  trust_radius covers (u1, u3, t2f, t3f); times are in
    seconds.  eps_state is per-component on trajectory nodes in SI.
    slack_zero_tolerances overrides the nondimensional classification
    thresholds; None derives them from 1 km / 1 m/s / 0.05 deg.
    """

    penalty: tuple = (1e7, 1e7, 1e7, 6e5, 6e5)
    trust_radius: tuple = (0.5, 0.5, 6.0, 6.0)
    eps_state: tuple = (1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 0.1)
    eps_u1: float = 1e-3
    eps_u3: float = 1e-3
    eps_t2f: float = 0.1
    eps_t3f: float = 0.1
    max_outer_iterations: int = 60
    # after the trust region first collapses to its floor, re-open it this
    # many times and descend again: the collapse can park the iterate on
    # the wall of a shallow trough, and one more pass rolls it down
    trust_resets: int = 1
    slack_zero_tolerances: Optional[tuple] = None
    nodes: int = 100
    # the fixed point must be reproducible well below the penalty scale,
    # or iterate-to-iterate noise in phi reads as predicted reduction
    picard_tol: float = 1e-13
    picard_max_iter: int = 200
    time_step: float = 2e-6
    ordering_margin: float = 1.0
    # the penalty weights leave the subproblem duals ill-conditioned, so
    # the solver runs with a relaxed dual tolerance and a tight gap; the
    # outer loop only consumes the primal point
    solver: SolverSettings = field(default_factory=lambda: SolverSettings(
        feastol=1e-6, abstol=1e-9, reltol=1e-9, refine_steps=3))

    def __post_init__(self):
        object.__setattr__(self, "penalty", np.asarray(self.penalty, dtype=float))
        object.__setattr__(self, "trust_radius", np.asarray(self.trust_radius, dtype=float))
        object.__setattr__(self, "eps_state", np.asarray(self.eps_state, dtype=float))
        if self.penalty.shape != (5,) or np.any(self.penalty <= 0):
            raise ConfigError("penalty must be 5 positive weights")
        if self.trust_radius.shape != (4,) or np.any(self.trust_radius <= 0):
            raise ConfigError("trust_radius must be 4 positive radii")
        if self.eps_state.shape != (7,) or np.any(self.eps_state <= 0):
            raise ConfigError("eps_state must be 7 positive thresholds")
        for name in ("eps_u1", "eps_u3", "eps_t2f", "eps_t3f", "picard_tol", "time_step"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.trust_resets < 0:
            raise ConfigError("trust_resets must be >= 0")
        if self.slack_zero_tolerances is not None:
            tols = np.asarray(self.slack_zero_tolerances, dtype=float)
            if tols.shape != (5,) or np.any(tols <= 0):
                raise ConfigError("slack_zero_tolerances must be 5 positive values")
            object.__setattr__(self, "slack_zero_tolerances", tols)


def zero_tolerances(target: TargetOrbit, ctx: DynamicsContext,
                    altitude_m: float = 1000.0, speed_ms: float = 1.0,
                    plane_deg: float = 0.05) -> np.ndarray:
    """Nondimensional thresholds under which a slack reads as zero.

    The radial-rate and plane entries scale with the target radius and
    circular speed so all five compare like-for-like physical errors.
    """
    sc = ctx.scales
    a_nd = target.elements.a / sc.length
    v_nd = math.sqrt(1.0 / a_nd)
    sin_plane = math.sin(math.radians(plane_deg))
    return np.array([
        altitude_m / sc.length,
        speed_ms / sc.speed,
        a_nd * speed_ms / sc.speed,
        a_nd * sin_plane,
        v_nd * sin_plane,
    ])


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    objective: float
    slack: np.ndarray
    trust: np.ndarray
    status: str
    merit: float
    predicted_reduction: float
    actual_reduction: float

    def format_line(self) -> str:
        slack = " ".join(f"{v:.3e}" for v in self.slack)
        trust = " ".join(f"{v:.4g}" for v in self.trust)
        return (f"iter={self.iteration} status={self.status} obj={self.objective:.6e} "
                f"merit={self.merit:.6e} pred={self.predicted_reduction:.3e} "
                f"actual={self.actual_reduction:.3e} slack=[{slack}] trust=[{trust}]")


@dataclass(frozen=True)
class ReplanResult:
    trajectory: tuple
    achieved: Optional[OrbitElements]
    orbit_type: str
    final_mass: float
    delta_h: float
    delta_i: float
    delta_raan: float
    iterations: int
    solve_time: float
    converged: bool
    decision: DecisionVector
    slack_readings: np.ndarray
    iteration_log: tuple


@dataclass(frozen=True)
class TerminalJacobians:
    """Sensitivity of the five insertion constraints to the decision."""

    d_u1: np.ndarray
    d_u3: np.ndarray
    d_t2f: np.ndarray
    d_t3f: np.ndarray


def terminal_constraints(final_state: State, target: TargetOrbit,
                         ctx: DynamicsContext) -> np.ndarray:
    """Five-vector (radius, speed, radial rate, position-plane,
    velocity-plane), all nondimensional, zero exactly on the target."""
    sc = ctx.scales
    r = final_state.r / sc.length
    v = final_state.v / sc.speed
    a_nd = target.elements.a / sc.length
    h_unit = target.h_unit
    return np.array([
        np.linalg.norm(r) - a_nd,
        np.linalg.norm(v) - math.sqrt(1.0 / a_nd),
        float(r @ v),
        float(r @ h_unit),
        float(v @ h_unit),
    ])


def constraint_state_gradients(r_nd: np.ndarray, v_nd: np.ndarray,
                               target: TargetOrbit) -> np.ndarray:
    """(5, 6) gradient of the terminal constraints in (r, v), nondim."""
    rn = np.linalg.norm(r_nd)
    vn = np.linalg.norm(v_nd)
    h_unit = target.h_unit
    grad = np.zeros((5, 6))
    grad[0, 0:3] = r_nd / rn
    grad[1, 3:6] = v_nd / vn
    grad[2, 0:3] = v_nd
    grad[2, 3:6] = r_nd
    grad[3, 0:3] = h_unit
    grad[4, 3:6] = h_unit
    return grad


# --- Sensitivities through the converged Picard map ---


def _phase_jacobian_pieces(ctx: DynamicsContext, pm: PicardMatrices,
                           phase: PhaseTrajectory, thrust: float):
    """Transition matrix and control influence of one converged phase.

    At a Picard fixed point the node states solve X = P(X, u, x0), so the
    sensitivities come from (I - dP/dX) solves; both powered and coast
    phases share the machinery.  Returns (A, C) with A = d(final)/d(start)
    (6 x 6) and C = d(final)/d(controls) (6 x 3(N+1)), C None for coasts.
    """
    sc = ctx.scales
    npts = phase.node_count
    if phase.tf == phase.t0:
        zero = None if phase.controls is None else np.zeros((6, 3 * npts))
        return np.eye(6), zero

    tau = pm.grid.nodes
    half = 0.5 * (phase.tf - phase.t0) / sc.time
    r_nd = phase.r / sc.length
    v_nd = phase.v / sc.speed
    m_nd = phase.m / sc.mass
    d_ar, d_av = node_accel_jacobians(ctx, r_nd, v_nd, m_nd)

    def weave(weights, blocks):
        return np.einsum("ji,iab->jaib", weights, blocks).reshape(3 * npts, 3 * npts)

    m_rr = half * half * weave(pm.ryry, d_ar)
    m_rv = half * half * weave(pm.ryry, d_av)
    m_vr = half * weave(pm.ry, d_ar)
    m_vv = half * weave(pm.ry, d_av)
    k_mat = np.eye(6 * npts)
    k_mat[:3 * npts, :3 * npts] -= m_rr
    k_mat[:3 * npts, 3 * npts:] -= m_rv
    k_mat[3 * npts:, :3 * npts] -= m_vr
    k_mat[3 * npts:, 3 * npts:] -= m_vv

    selector = np.zeros((6 * npts, 6))
    selector[3 * (npts - 1):3 * npts, 0:3] = np.eye(3)
    selector[3 * npts + 3 * (npts - 1):, 3:6] = np.eye(3)
    lu = scipy.linalg.lu_factor(k_mat, check_finite=False)
    w_adj = scipy.linalg.lu_solve(lu, selector, trans=1, check_finite=False)
    w_r = w_adj[:3 * npts].T.reshape(6, npts, 3)
    w_v = w_adj[3 * npts:].T.reshape(6, npts, 3)

    a_mat = np.zeros((6, 6))
    a_mat[:, 0:3] = w_r.sum(axis=1)
    a_mat[:, 3:6] = (np.einsum("gja,j->ga", w_r, half * (tau + 1.0))
                     + w_v.sum(axis=1))

    influence = None
    if phase.controls is not None:
        b_node = _phase_thrust_nd(ctx, thrust) / m_nd
        cols = (half * half * np.einsum("gja,ji->gia", w_r, pm.ryry)
                + half * np.einsum("gja,ji->gia", w_v, pm.ry))
        cols = cols * b_node[None, :, None]
        influence = cols.reshape(6, 3 * npts)
    return a_mat, influence


def _refit_phase(phase: PhaseTrajectory, start: State, t0: float, tf: float,
                 controls, thrust: float, isp: float, env, vehicle, pm,
                 tol: float) -> PhaseTrajectory:
    """Re-converge one phase after nudging its start state or times."""
    shift_r = start.r - phase.r[0]
    shift_v = start.v - phase.v[0]
    guess = PhaseTrajectory(phase.phase_id, t0, tf,
                            r=phase.r + shift_r[None, :],
                            v=phase.v + shift_v[None, :],
                            m=np.full(phase.node_count, start.m),
                            controls=phase.controls)
    out, info = picard_fixed_point(guess, controls, t0, tf, thrust, isp,
                                   env, vehicle, tol=tol, max_iter=300,
                                   matrices=pm)
    if not info.converged:
        raise PropagationError(
            f"phase {phase.phase_id} refit stalled at delta {info.final_delta:.2e}")
    return out


def terminal_jacobians(phases, target: TargetOrbit, env: MarsEnvironment,
                       vehicle: VehicleConfig, pm: PicardMatrices,
                       thrust1: float, time_step: float = 2e-6,
                       picard_tol: float = 1e-12) -> TerminalJacobians:
    """Constraint sensitivities at a Picard-converged 3-phase iterate.

    Control directions are differentiated analytically through the
    converged fixed-point map; the two time variables use central
    differences that re-run the affected phases.  time_step is
    nondimensional.
    """
    ph1, ph2, ph3 = phases
    ctx = make_context(env, vehicle)
    sc = ctx.scales
    final = ph3.final_state()
    if np.linalg.norm(final.r) < 0.5 * sc.length:
        raise ValueError("degenerate final state, position fell below half the planet radius")

    grad_x = constraint_state_gradients(final.r / sc.length, final.v / sc.speed, target)
    a3, c3 = _phase_jacobian_pieces(ctx, pm, ph3, vehicle.stage2.thrust)
    a2, _ = _phase_jacobian_pieces(ctx, pm, ph2, 0.0)
    a1, c1 = _phase_jacobian_pieces(ctx, pm, ph1, thrust1)

    d_u3 = grad_x @ c3
    chain = grad_x @ a3 @ a2
    d_u1 = chain @ (c1 if c1 is not None else np.zeros((6, 3 * ph1.node_count)))

    # central differences over the phase end times; the coast end shifts
    # both downstream phases, the burn end only the last one
    h_nd = time_step
    h_si = h_nd * sc.time
    isp2 = vehicle.stage2.isp

    def phi_at(t2f: float, t3f: float) -> np.ndarray:
        coast_start = State(r=ph1.r[-1], v=ph1.v[-1], m=float(ph2.m[0]))
        coast = _refit_phase(ph2, coast_start, ph2.t0, t2f, None, 0.0, 0.0,
                             env, vehicle, pm, picard_tol)
        start3 = State(r=coast.r[-1], v=coast.v[-1], m=float(coast.m[0]))
        burn = _refit_phase(ph3, start3, t2f, t3f, ph3.controls,
                            vehicle.stage2.thrust, isp2, env, vehicle, pm, picard_tol)
        return terminal_constraints(burn.final_state(), target, ctx)

    t2f, t3f = ph2.tf, ph3.tf
    d_t2f = (phi_at(t2f + h_si, t3f) - phi_at(t2f - h_si, t3f)) / (2.0 * h_nd)
    start3 = State(r=ph2.r[-1], v=ph2.v[-1], m=float(ph3.m[0]))
    phi_plus = terminal_constraints(_refit_phase(
        ph3, start3, t2f, t3f + h_si, ph3.controls, vehicle.stage2.thrust,
        isp2, env, vehicle, pm, picard_tol).final_state(), target, ctx)
    phi_minus = terminal_constraints(_refit_phase(
        ph3, start3, t2f, t3f - h_si, ph3.controls, vehicle.stage2.thrust,
        isp2, env, vehicle, pm, picard_tol).final_state(), target, ctx)
    d_t3f = (phi_plus - phi_minus) / (2.0 * h_nd)

    if not all(np.all(np.isfinite(m)) for m in (d_u1, d_u3, d_t2f, d_t3f)):
        raise ValueError("non-finite constraint sensitivity")
    return TerminalJacobians(d_u1=d_u1, d_u3=d_u3, d_t2f=d_t2f, d_t3f=d_t3f)


# --- Subproblem assembly ---


def assemble_subproblem(decision: DecisionVector, phi: np.ndarray,
                        jac: TerminalJacobians, trust: np.ndarray,
                        t1f: float, burn_cap: float, ctx: DynamicsContext,
                        config: SJTRConfig) -> ConicProgram:
    """Penalty-relaxed convex step around the current iterate.

    Decision layout: ascending controls, orbiting controls (node-major),
    the two end times, then the five slacks.  Times are nondimensional
    inside the program.  burn_cap caps the final burn duration, which is
    exactly the stage-2 propellant floor expressed in time.
    """
    npts = decision.u1.shape[0]
    nu = 3 * npts
    n = 2 * nu + 2 + 5
    it2, it3 = 2 * nu, 2 * nu + 1
    ts = ctx.scales.time

    z_traj = np.concatenate([
        decision.u1.ravel(), decision.u3.ravel(),
        [decision.t2f / ts, decision.t3f / ts],
    ])
    jphi = np.hstack([jac.d_u1, jac.d_u3, jac.d_t2f[:, None], jac.d_t3f[:, None]])
    anchor = jphi @ z_traj - phi

    c = np.zeros(n)
    c[it2] = -1.0
    c[it3] = 1.0
    c[2 * nu + 2:] = config.penalty

    blocks = []
    # |linearized constraints| <= slack
    slack_cols = -np.eye(5)
    g_pm = np.block([[jphi, slack_cols], [-jphi, slack_cols]])
    h_pm = np.concatenate([anchor, -anchor])
    blocks.append(ConeBlock(NONNEG, sp.csr_matrix(g_pm), h_pm))

    # trust region around the iterate, one radius per variable family
    radius = np.concatenate([
        np.full(nu, trust[0]), np.full(nu, trust[1]),
        [trust[2] / ts, trust[3] / ts],
    ])
    ident = sp.eye(2 * nu + 2, n, format="csr")
    blocks.append(ConeBlock(NONNEG, sp.vstack([ident, -ident]),
                            np.concatenate([z_traj + radius, radius - z_traj])))

    # phase ordering, burn-duration cap, slack signs
    margin_nd = config.ordering_margin / ts
    rows = sp.csr_matrix(
        (np.array([-1.0, 1.0, -1.0, -1.0, 1.0]),
         (np.array([0, 1, 1, 2, 2]), np.array([it2, it2, it3, it2, it3]))),
        shape=(3, n))
    shifts = np.array([-(t1f / ts + margin_nd), -margin_nd, burn_cap / ts])
    blocks.append(ConeBlock(NONNEG, rows, shifts))
    slack_eye = sp.csr_matrix(
        (np.full(5, -1.0), (np.arange(5), np.arange(2 * nu + 2, n))), shape=(5, n))
    blocks.append(ConeBlock(NONNEG, slack_eye, np.zeros(5)))

    # unit thrust-direction ball at every node of both powered phases
    for base in range(0, 2 * nu, 3):
        g_blk = sp.csr_matrix(
            (np.full(3, -1.0),
             (np.array([1, 2, 3]), np.arange(base, base + 3))), shape=(4, n))
        blocks.append(ConeBlock(SOC, g_blk, np.array([1.0, 0.0, 0.0, 0.0])))

    return ConicProgram(c, tuple(blocks))


# --- Initial guess ---


def insertion_endpoint(fault: FaultScenario, target: TargetOrbit,
                       env: MarsEnvironment) -> tuple[np.ndarray, np.ndarray]:
    """Target-orbit state above the fault position: project the position
    onto the target plane, insert at that argument of latitude."""
    h_unit = target.h_unit
    r_fail = fault.state_at_fail.r
    in_plane = r_fail - float(r_fail @ h_unit) * h_unit
    norm = np.linalg.norm(in_plane)
    if norm < 1.0:
        # fault position along the plane normal; any in-plane direction works
        seed = np.array([1.0, 0.0, 0.0])
        in_plane = seed - float(seed @ h_unit) * h_unit
        norm = np.linalg.norm(in_plane)
    r_hat = in_plane / norm
    a = target.elements.a
    speed = math.sqrt(env.mu / a)
    return a * r_hat, speed * np.cross(h_unit, r_hat)


def initial_guess(fault: FaultScenario, target: TargetOrbit,
                  env: MarsEnvironment, vehicle: VehicleConfig,
                  nodes: int, times: Optional[tuple] = None,
                  ordering_margin: float = 1.0) -> DecisionVector:
    """Starting iterate: linear velocity interpolation toward the
    insertion point steers both phases; coast and burn times default to
    a fraction of the apoapsis coast plus a full stage-2 burn."""
    burn1, _ = remaining_burn_time(fault, vehicle.stage1, env)
    t1f = fault.t_fail + burn1
    grid = cgl_nodes(nodes)
    pm = picard_matrices(grid)
    thrust1 = fault.eta * vehicle.stage1.thrust

    # rough ascent endpoint for the coast-time heuristic
    state1 = fault.state_at_fail
    if burn1 > 0:
        v_hat = state1.v / max(np.linalg.norm(state1.v), 1.0)
        guess = constant_guess_phase(1, state1, fault.t_fail, t1f, grid,
                                     controls=np.tile(v_hat, (nodes + 1, 1)))
        rough, info = picard_fixed_point(
            guess, guess.controls, fault.t_fail, t1f, thrust1,
            vehicle.stage1.isp, env, vehicle, tol=1e-8, max_iter=200, matrices=pm)
        state1 = rough.final_state()

    if times is None:
        cap = vehicle.stage2.burn_time(env.g0)
        try:
            # an efficient circular insertion straddles apoapsis, with a
            # little more of the burn spent before it than after
            coast = time_to_apoapsis(state1.r, state1.v, env.mu) - 0.65 * cap
        except ValueError:
            coast = 0.0
        t2f = t1f + max(20.0, coast)
        t3f = t2f + cap
    else:
        t2f, t3f = times
        t2f = max(t2f, t1f + ordering_margin)
        t3f = max(t3f, t2f + ordering_margin)

    r_end, v_end = insertion_endpoint(fault, target, env)
    span = t3f - fault.t_fail

    def steer(t_nodes):
        frac = (t_nodes - fault.t_fail) / span
        v_lin = fault.state_at_fail.v[None, :] + frac[:, None] * (
            v_end - fault.state_at_fail.v)[None, :]
        return v_lin / np.linalg.norm(v_lin, axis=1)[:, None]

    tau = grid.nodes
    t1_nodes = fault.t_fail + 0.5 * (tau + 1.0) * (t1f - fault.t_fail)
    t3_nodes = t2f + 0.5 * (tau + 1.0) * (t3f - t2f)
    return DecisionVector(u1=steer(t1_nodes), u3=steer(t3_nodes),
                          t2f=t2f, t3f=t3f, slack=np.zeros(5))


def converge_phases(fault: FaultScenario, decision: DecisionVector, t1f: float,
                    env: MarsEnvironment, vehicle: VehicleConfig,
                    pm: PicardMatrices, tol: float, max_iter: int,
                    warm=None):
    """Picard-converge the three phases at the decision's controls/times.

    Stage separation happens at t1f: the coast starts at the separation
    stack mass no matter how much stage-1 propellant went unburned.
    Returns (phases, all_converged).
    """
    thrust1 = fault.eta * vehicle.stage1.thrust
    ok = True

    def run(phase_id, prev_guess, start, t0, tf, controls, thrust, isp):
        nonlocal ok
        if prev_guess is not None and prev_guess.node_count == pm.grid.n + 1:
            shift_r = start.r - prev_guess.r[0]
            shift_v = start.v - prev_guess.v[0]
            guess = PhaseTrajectory(phase_id, t0, tf,
                                    r=prev_guess.r + shift_r[None, :],
                                    v=prev_guess.v + shift_v[None, :],
                                    m=np.full(prev_guess.node_count, start.m),
                                    controls=controls)
        else:
            guess = constant_guess_phase(phase_id, start, t0, tf, pm.grid,
                                         controls=controls)
        out, info = picard_fixed_point(guess, controls, t0, tf, thrust, isp,
                                       env, vehicle, tol=tol,
                                       max_iter=max_iter, matrices=pm)
        ok = ok and info.converged
        return out

    w1, w2, w3 = warm if warm is not None else (None, None, None)
    ph1 = run(1, w1, fault.state_at_fail, fault.t_fail, t1f, decision.u1,
              thrust1, vehicle.stage1.isp)
    sep = State(r=ph1.r[-1], v=ph1.v[-1], m=vehicle.separation_mass)
    ph2 = run(2, w2, sep, t1f, decision.t2f, None, 0.0, 0.0)
    start3 = State(r=ph2.r[-1], v=ph2.v[-1], m=vehicle.separation_mass)
    ph3 = run(3, w3, start3, decision.t2f, decision.t3f, decision.u3,
              vehicle.stage2.thrust, vehicle.stage2.isp)
    return (ph1, ph2, ph3), ok


# --- Nonlinear replay of a converged plan ---


def control_interpolant(phase: PhaseTrajectory):
    """First-order hold between node commands; None for coast phases.

    Linear interpolation keeps the reconstruction inside the thrust ball
    by convexity. The spectral interpolant does not: when the optimum
    rides the ball boundary it overshoots between nodes, and projecting
    it back amounts to flying systematically less thrust than the plan
    claims.
    """
    if phase.controls is None:
        return None
    n = phase.node_count - 1
    tau_nodes = -np.cos(np.arange(n + 1) * np.pi / n)
    ctrl = phase.controls

    def u_fn(t: float) -> np.ndarray:
        tau = -1.0 + 2.0 * (t - phase.t0) / (phase.tf - phase.t0)
        tau = min(1.0, max(-1.0, tau))
        k = int(np.clip(np.searchsorted(tau_nodes, tau), 1, n))
        w = (tau - tau_nodes[k - 1]) / (tau_nodes[k] - tau_nodes[k - 1])
        val = (1.0 - w) * ctrl[k - 1] + w * ctrl[k]
        norm = np.linalg.norm(val)
        # node commands can sit a solver tolerance above the ball
        return val / norm if norm > 1.0 else val

    return u_fn


def nonlinear_replay(phases, env: MarsEnvironment, vehicle: VehicleConfig,
                     fault: FaultScenario, rtol: float = 1e-11) -> State:
    """Independent high-order re-propagation of the planned trajectory.

    Achieved orbit elements are always read off this replay, not the
    collocation solution.
    """
    ph1, ph2, ph3 = phases
    state = fault.state_at_fail
    thrust1 = fault.eta * vehicle.stage1.thrust
    if ph1.tf > ph1.t0:
        sol = propagate_reference(state, ph1.t0, ph1.tf, control_interpolant(ph1),
                                  thrust1, vehicle.stage1.isp, env, vehicle, rtol=rtol)
        state = State.from_vector(sol.y[:, -1])
    state = State(r=state.r, v=state.v, m=vehicle.separation_mass)
    sol = propagate_reference(state, ph2.t0, ph2.tf, None, 0.0, 0.0,
                              env, vehicle, rtol=rtol)
    state = State.from_vector(sol.y[:, -1])
    sol = propagate_reference(state, ph3.t0, ph3.tf, control_interpolant(ph3),
                              vehicle.stage2.thrust, vehicle.stage2.isp,
                              env, vehicle, rtol=rtol)
    return State.from_vector(sol.y[:, -1])


# --- Classification and trust management ---


def classify_orbit_type(phi: np.ndarray, achieved: Optional[OrbitElements],
                        target: TargetOrbit, tolerances: np.ndarray,
                        converged: bool) -> str:
    """Map re-propagated constraint readings to the four outcome classes.

    Order matters: failure to converge or to clear the safe axis is
    terminal, then full insertion, then shape-only, then the catch-all
    safe-but-off-target orbit.
    """
    if not converged or achieved is None:
        return "D"
    if achieved.a < target.a_safe:
        return "D"
    mag = np.abs(phi)
    if np.all(mag < tolerances):
        return "A"
    if np.all(mag[0:3] < tolerances[0:3]):
        return "B"
    return "C"


def adaptive_trust_update(step_quality: float, radius: np.ndarray,
                          initial: np.ndarray) -> np.ndarray:
    """Shrink on poor linear-model agreement, grow on strong agreement."""
    if step_quality < 0.1:
        out = radius * 0.5
    elif step_quality > 0.7:
        out = np.minimum(radius * 1.5, 4.0 * initial)
    else:
        out = radius.copy()
    return np.maximum(out, 1e-3 * initial)


# --- The outer loop ---


def _merit(decision: DecisionVector, phi: np.ndarray, config: SJTRConfig,
           ts: float) -> float:
    return (decision.t3f - decision.t2f) / ts + float(config.penalty @ np.abs(phi))


def _iterate_close(prev_phases, phases, prev_dec: DecisionVector,
                   dec: DecisionVector, config: SJTRConfig) -> bool:
    eps = config.eps_state
    for old, new in zip(prev_phases, phases):
        if (np.any(np.abs(new.r - old.r) > eps[0:3][None, :])
                or np.any(np.abs(new.v - old.v) > eps[3:6][None, :])
                or np.any(np.abs(new.m - old.m) > eps[6])):
            return False
    if np.max(np.abs(dec.u1 - prev_dec.u1)) > config.eps_u1:
        return False
    if np.max(np.abs(dec.u3 - prev_dec.u3)) > config.eps_u3:
        return False
    if abs(dec.t2f - prev_dec.t2f) > config.eps_t2f:
        return False
    return abs(dec.t3f - prev_dec.t3f) <= config.eps_t3f


def sjtr_solve(fault: FaultScenario, target: Optional[TargetOrbit] = None,
               config: Optional[SJTRConfig] = None,
               guess_times: Optional[tuple] = None,
               env: Optional[MarsEnvironment] = None,
               vehicle: Optional[VehicleConfig] = None) -> ReplanResult:
    """Replan the remaining ascent after a stage-1 thrust-drop fault.

    guess_times optionally seeds (t2f, t3f) in seconds, which is how the
    learned warm start plugs in; everything else about the initial
    iterate is constructed here.
    """
    env = env or default_environment()
    vehicle = vehicle or default_vehicle()
    target = target or default_target(env)
    config = config or SJTRConfig()

    t_start = time.perf_counter()
    ctx = make_context(env, vehicle)
    ts = ctx.scales.time
    pm = picard_matrices(cgl_nodes(config.nodes))
    burn1, _ = remaining_burn_time(fault, vehicle.stage1, env)
    t1f = fault.t_fail + burn1
    thrust1 = fault.eta * vehicle.stage1.thrust
    burn_cap = vehicle.stage2.burn_time(env.g0)
    tolerances = (config.slack_zero_tolerances
                  if config.slack_zero_tolerances is not None
                  else zero_tolerances(target, ctx))

    decision = initial_guess(fault, target, env, vehicle, config.nodes,
                             times=guess_times,
                             ordering_margin=config.ordering_margin)
    phases, picard_ok = converge_phases(fault, decision, t1f, env, vehicle,
                                        pm, config.picard_tol,
                                        config.picard_max_iter)
    phi = terminal_constraints(phases[2].final_state(), target, ctx)
    trust = config.trust_radius.copy()
    trust_floor = 1e-3 * config.trust_radius
    log = []
    converged = False
    failure_streak = 0
    iteration = 0
    resets_left = config.trust_resets
    jac = None  # valid for the current iterate; dropped whenever it moves

    for iteration in range(1, config.max_outer_iterations + 1):
        merit_now = _merit(decision, phi, config, ts)
        try:
            if jac is None:
                jac = terminal_jacobians(phases, target, env, vehicle, pm,
                                         thrust1, time_step=config.time_step,
                                         picard_tol=min(config.picard_tol, 1e-13))
            program = assemble_subproblem(decision, phi, jac, trust, t1f,
                                          burn_cap, ctx, config)
            sol = solve(program, config.solver)
        except (PropagationError, ValueError):
            sol = None

        usable = (sol is not None
                  and (sol.status == "optimal"
                       or (sol.status == "iteration-limit"
                           and max(sol.kkt_residuals.values()) < 1e-6)))
        if not usable:
            status = sol.status if sol is not None else "propagation-failure"
            failure_streak += 1
            log.append(IterationRecord(iteration, math.nan, decision.slack.copy(),
                                       trust.copy(), status, merit_now,
                                       math.nan, math.nan))
            if failure_streak >= 2:
                break
            trust = np.maximum(trust * 0.5, trust_floor)
            continue
        failure_streak = 0

        npts = config.nodes + 1
        nu = 3 * npts
        z = sol.primal
        new_decision = DecisionVector(
            u1=z[:nu].reshape(npts, 3), u3=z[nu:2 * nu].reshape(npts, 3),
            t2f=float(z[2 * nu] * ts), t3f=float(z[2 * nu + 1] * ts),
            slack=np.maximum(z[2 * nu + 2:], 0.0))

        new_phases, new_picard_ok = converge_phases(
            fault, new_decision, t1f, env, vehicle, pm, config.picard_tol,
            config.picard_max_iter, warm=phases)
        new_phi = terminal_constraints(new_phases[2].final_state(), target, ctx)

        predicted = merit_now - sol.objective_value
        actual = merit_now - _merit(new_decision, new_phi, config, ts)
        # a worsening step is rejected and always shrinks the region.
        # improving steps are scored by the classical ratio only while the
        # terminal error is above the zero tolerances; once both endpoints
        # of the step are inside them, the predicted reduction is dominated
        # by curvature the penalty reinjects every step, and the raw ratio
        # would read a productive feasible descent as model failure and pin
        # the trust region at its floor
        accepted = actual > 0.0
        if not accepted:
            quality = 0.0
        elif (np.all(np.abs(phi) < tolerances)
              and np.all(np.abs(new_phi) < tolerances)):
            quality = 1.0
        else:
            quality = actual / predicted if predicted > 1e-14 else 1.0
        log.append(IterationRecord(
            iteration, sol.objective_value, new_decision.slack.copy(),
            trust.copy(), sol.status if accepted else sol.status + "/rejected",
            merit_now, predicted, actual))
        trust = adaptive_trust_update(quality, trust, config.trust_radius)

        if accepted:
            done = new_picard_ok and _iterate_close(phases, new_phases,
                                                    decision, new_decision,
                                                    config)
            decision, phases, phi = new_decision, new_phases, new_phi
            picard_ok = new_picard_ok
            jac = None
            if done:
                converged = True
                break
        elif picard_ok and np.all(trust <= trust_floor * (1.0 + 1e-9)):
            # no improving step exists inside the smallest resolvable
            # neighborhood, so the iterate is stationary at the working
            # resolution; successive iterates are literally unchanged
            if resets_left > 0:
                resets_left -= 1
                trust = 0.25 * config.trust_radius
                continue
            converged = True
            break

    # honest replay: the reported orbit comes from dense integration of
    # the planned controls, never from the collocation states
    achieved = None
    phi_replay = phi
    try:
        final = nonlinear_replay(phases, env, vehicle, fault)
        phi_replay = terminal_constraints(final, target, ctx)
        achieved = elements_from_state(final.r, final.v, env)
    except (ValueError, RuntimeError):
        achieved = None

    orbit_type = classify_orbit_type(phi_replay, achieved, target, tolerances,
                                     converged)
    if achieved is not None:
        delta_h = (achieved.a - target.elements.a) / 1000.0
        delta_i = math.degrees(achieved.i - target.elements.i)
        gap = (achieved.raan - target.elements.raan + math.pi) % (2 * math.pi) - math.pi
        delta_raan = math.degrees(gap)
    else:
        delta_h = delta_i = delta_raan = math.nan

    return ReplanResult(
        trajectory=phases,
        achieved=achieved,
        orbit_type=orbit_type,
        final_mass=float(phases[2].m[-1]),
        delta_h=delta_h,
        delta_i=delta_i,
        delta_raan=delta_raan,
        iterations=iteration,
        solve_time=time.perf_counter() - t_start,
        converged=converged,
        decision=decision,
        slack_readings=phi_replay,
        iteration_log=tuple(log),
    )
