"""Stepwise replanning baseline.

Three single-purpose solves share one SCP core: reach the target orbit
exactly when fuel allows (max final mass), otherwise hold the target
altitude and minimize the plane offset, otherwise fly the highest
circular orbit that remains.  The pipeline composes them in downgrade
(best case first) or upgrade (worst case first) order and carries each
step's solution into the next as a warm start.

Unlike the joint method, every step here states its terminal rows as
hard constraints: the slack on each row is capped at the larger of its
zero tolerance and the current violation, so the caps tighten to the
tolerances exactly as the iterates approach feasibility, and the
subproblem is never infeasible at the current iterate.  The relaxation
weight is a single uniform constant rather than the joint method's
graded penalty vector; it only has to dominate the O(1) objective
gradients, and keeping it moderate leaves the objective resolvable
inside the conic solver's normalized tolerances.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .conic import NONNEG, SOC, ConeBlock, ConicProgram, solve
from .env import (
    ConfigError,
    FaultScenario,
    MarsEnvironment,
    State,
    VehicleConfig,
    default_environment,
    default_vehicle,
    elements_from_state,
    remaining_burn_time,
)
from .mcpi import DynamicsContext, PropagationError, cgl_nodes, make_context, picard_matrices
from .sjtr import (
    DecisionVector,
    IterationRecord,
    ReplanResult,
    SJTRConfig,
    TargetOrbit,
    _iterate_close,
    _phase_jacobian_pieces,
    _refit_phase,
    adaptive_trust_update,
    classify_orbit_type,
    constraint_state_gradients,
    converge_phases,
    default_target,
    initial_guess,
    nonlinear_replay,
    terminal_constraints,
    zero_tolerances,
)

__all__ = [
    "GeneralReplanConfig",
    "StepOutcome",
    "final_state_sensitivity",
    "plane_deviation",
    "plane_deviation_gradients",
    "solve_p2",
    "solve_p3",
    "solve_p4",
    "run_pipeline",
    "pipeline_runtime",
    "pipeline_orbit_type",
]


@dataclass(frozen=True)
class GeneralReplanConfig:
    """Weights and shared SCP settings for the stepwise solves.

    lambda_i and lambda_raan weight the plane-offset objective of the
    fixed-altitude step.  relax_weight is the uniform hard-row
    relaxation constant described in the module docstring; the penalty
    vector inside scp is not used by the stepwise solves.
    """

    lambda_i: float = 1.0
    lambda_raan: float = 1.0
    pipeline: str = "downgrade"
    relax_weight: float = 1e4
    scp: SJTRConfig = field(default_factory=SJTRConfig)

    def __post_init__(self):
        if self.lambda_i <= 0 or self.lambda_raan <= 0:
            raise ConfigError("plane weights must be positive")
        if self.relax_weight <= 0:
            raise ConfigError("relax_weight must be positive")
        if self.pipeline not in ("downgrade", "upgrade"):
            raise ConfigError(f"pipeline must be downgrade or upgrade, got {self.pipeline!r}")


@dataclass(frozen=True)
class StepOutcome:
    step_id: str
    status: str
    result: Optional[ReplanResult]
    runtime: float

    def __post_init__(self):
        if self.status not in ("feasible", "infeasible"):
            raise ConfigError(f"unknown step status {self.status!r}")
        if (self.result is None) != (self.status == "infeasible"):
            raise ConfigError("result must be present exactly when the step is feasible")

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


# --- Final-state sensitivity ---


@dataclass(frozen=True)
class FinalStateSensitivity:
    """d(final r, v)/d(decision), nondimensional, 6 rows."""

    d_u1: np.ndarray
    d_u3: np.ndarray
    d_t2f: np.ndarray
    d_t3f: np.ndarray


def final_state_sensitivity(phases, env: MarsEnvironment, vehicle: VehicleConfig,
                            pm, thrust1: float, time_step: float = 2e-6,
                            picard_tol: float = 1e-12) -> FinalStateSensitivity:
    """Endpoint sensitivities at a Picard-converged 3-phase iterate.

    Same machinery as the joint method's constraint jacobians, but kept
    at the state level so each step can compose its own terminal rows
    (insertion residuals, plane elements, free-radius circularity) with
    a single set of transition matrices.
    """
    ph1, ph2, ph3 = phases
    ctx = make_context(env, vehicle)
    sc = ctx.scales
    final = ph3.final_state()
    if np.linalg.norm(final.r) < 0.5 * sc.length:
        raise ValueError("degenerate final state, position fell below half the planet radius")

    a3, c3 = _phase_jacobian_pieces(ctx, pm, ph3, vehicle.stage2.thrust)
    a2, _ = _phase_jacobian_pieces(ctx, pm, ph2, 0.0)
    a1, c1 = _phase_jacobian_pieces(ctx, pm, ph1, thrust1)
    chain = a3 @ a2
    d_u3 = c3
    d_u1 = chain @ (c1 if c1 is not None else np.zeros((6, 3 * ph1.node_count)))

    sc_len, sc_spd = sc.length, sc.speed

    def endpoint_nd(burn) -> np.ndarray:
        fs = burn.final_state()
        return np.concatenate([fs.r / sc_len, fs.v / sc_spd])

    h_nd = time_step
    h_si = h_nd * sc.time
    isp2 = vehicle.stage2.isp
    t2f, t3f = ph2.tf, ph3.tf

    def through_coast(t2: float) -> np.ndarray:
        coast_start = State(r=ph1.r[-1], v=ph1.v[-1], m=float(ph2.m[0]))
        coast = _refit_phase(ph2, coast_start, ph2.t0, t2, None, 0.0, 0.0,
                             env, vehicle, pm, picard_tol)
        start3 = State(r=coast.r[-1], v=coast.v[-1], m=float(coast.m[0]))
        return endpoint_nd(_refit_phase(ph3, start3, t2, t3f, ph3.controls,
                                        vehicle.stage2.thrust, isp2,
                                        env, vehicle, pm, picard_tol))

    d_t2f = (through_coast(t2f + h_si) - through_coast(t2f - h_si)) / (2.0 * h_nd)

    start3 = State(r=ph2.r[-1], v=ph2.v[-1], m=float(ph3.m[0]))

    def through_burn(t3: float) -> np.ndarray:
        return endpoint_nd(_refit_phase(ph3, start3, t2f, t3, ph3.controls,
                                        vehicle.stage2.thrust, isp2,
                                        env, vehicle, pm, picard_tol))

    d_t3f = (through_burn(t3f + h_si) - through_burn(t3f - h_si)) / (2.0 * h_nd)

    if not all(np.all(np.isfinite(m)) for m in (d_u1, d_u3, d_t2f, d_t3f)):
        raise ValueError("non-finite endpoint sensitivity")
    return FinalStateSensitivity(d_u1=d_u1, d_u3=d_u3, d_t2f=d_t2f, d_t3f=d_t3f)


# --- Terminal rows of the three steps ---


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def plane_deviation(final: State, target: TargetOrbit) -> np.ndarray:
    """Signed (inclination, node) offsets from the target plane, radians.

    Angle quantities only, so the dimensional state can be used as is;
    the node offset is wrapped to (-pi, pi].
    """
    h = np.cross(final.r, final.v)
    n = np.linalg.norm(h)
    inc = math.acos(max(-1.0, min(1.0, h[2] / n)))
    raan = math.atan2(h[0], -h[1])
    di = inc - target.elements.i
    draan = (raan - target.elements.raan + math.pi) % (2.0 * math.pi) - math.pi
    return np.array([di, draan])


def plane_deviation_gradients(r_nd: np.ndarray, v_nd: np.ndarray) -> np.ndarray:
    """(2, 6) gradients of inclination and node in the final state.

    Both angles are functions of the angular momentum direction alone;
    the chain rule runs through h = r x v.  Singular on equatorial
    orbits, which sit far outside the ascent corridor.
    """
    h = np.cross(r_nd, v_nd)
    n = np.linalg.norm(h)
    hz = h[2] / n
    sin_i = math.sqrt(max(1.0 - hz * hz, 1e-12))
    di_dh = (hz * h / n - np.array([0.0, 0.0, 1.0])) / (n * sin_i)
    draan_dh = np.array([-h[1], h[0], 0.0]) / (h[0] * h[0] + h[1] * h[1])
    dh_dr = -_skew(v_nd)
    dh_dv = _skew(r_nd)
    out = np.zeros((2, 6))
    out[0, 0:3] = di_dh @ dh_dr
    out[0, 3:6] = di_dh @ dh_dv
    out[1, 0:3] = draan_dh @ dh_dr
    out[1, 3:6] = draan_dh @ dh_dv
    return out


def _insertion_rows(target: TargetOrbit, k: int):
    """First k of the five insertion residuals, shared with the joint method."""

    def values(final: State, ctx: DynamicsContext) -> np.ndarray:
        return terminal_constraints(final, target, ctx)[:k]

    def grads(r_nd: np.ndarray, v_nd: np.ndarray) -> np.ndarray:
        return constraint_state_gradients(r_nd, v_nd, target)[:k]

    return values, grads


def _circularity_rows():
    """Circular-orbit residuals at whatever radius the endpoint reaches."""

    def values(final: State, ctx: DynamicsContext) -> np.ndarray:
        sc = ctx.scales
        r = final.r / sc.length
        v = final.v / sc.speed
        rn = np.linalg.norm(r)
        return np.array([np.linalg.norm(v) - rn ** -0.5, float(r @ v)])

    def grads(r_nd: np.ndarray, v_nd: np.ndarray) -> np.ndarray:
        rn = np.linalg.norm(r_nd)
        g = np.zeros((2, 6))
        g[0, 0:3] = 0.5 * rn ** -2.5 * r_nd
        g[0, 3:6] = v_nd / np.linalg.norm(v_nd)
        g[1, 0:3] = v_nd
        g[1, 3:6] = r_nd
        return g

    return values, grads


# --- The shared step solver ---


def _assemble_step(decision: DecisionVector, resid: np.ndarray,
                   jrows: np.ndarray, caps: np.ndarray, relax: np.ndarray,
                   pd: Optional[np.ndarray], prows: Optional[np.ndarray],
                   lam: Optional[np.ndarray], arow: Optional[np.ndarray],
                   alt_weight: float, time_weight: float, trust: np.ndarray,
                   t1f: float, burn_cap: float, ctx: DynamicsContext,
                   config: SJTRConfig) -> ConicProgram:
    """One hard-row convex step around the current iterate.

    Layout: ascending controls, orbiting controls, the two end times
    (nondimensional), the hard-row slacks, then any objective slacks
    for absolute-value terms.
    """
    npts = decision.u1.shape[0]
    nu = 3 * npts
    k = resid.shape[0]
    j = 0 if pd is None else pd.shape[0]
    nz = 2 * nu + 2
    n = nz + k + j
    it2, it3 = 2 * nu, 2 * nu + 1
    ts = ctx.scales.time

    z_traj = np.concatenate([
        decision.u1.ravel(), decision.u3.ravel(),
        [decision.t2f / ts, decision.t3f / ts],
    ])

    c = np.zeros(n)
    c[it2] -= time_weight
    c[it3] += time_weight
    c[nz:nz + k] = relax
    if j:
        c[nz + k:] = lam
    if alt_weight > 0.0:
        c[:nz] -= alt_weight * arow

    blocks = []
    # |linearized residual| <= slack, slack in [0, cap]
    b_hard = resid - jrows @ z_traj
    g_pm = np.zeros((2 * k, n))
    g_pm[:k, :nz] = jrows
    g_pm[k:, :nz] = -jrows
    g_pm[:k, nz:nz + k] = -np.eye(k)
    g_pm[k:, nz:nz + k] = -np.eye(k)
    blocks.append(ConeBlock(NONNEG, sp.csr_matrix(g_pm),
                            np.concatenate([-b_hard, b_hard])))
    sign = np.concatenate([-np.eye(k), np.eye(k)])
    g_bounds = np.zeros((2 * k, n))
    g_bounds[:, nz:nz + k] = sign
    blocks.append(ConeBlock(NONNEG, sp.csr_matrix(g_bounds),
                            np.concatenate([np.zeros(k), caps])))

    # absolute-value objective terms ride on their own slacks
    if j:
        b_obj = pd - prows @ z_traj
        g_obj = np.zeros((2 * j, n))
        g_obj[:j, :nz] = prows
        g_obj[j:, :nz] = -prows
        g_obj[:j, nz + k:] = -np.eye(j)
        g_obj[j:, nz + k:] = -np.eye(j)
        blocks.append(ConeBlock(NONNEG, sp.csr_matrix(g_obj),
                                np.concatenate([-b_obj, b_obj])))

    radius = np.concatenate([
        np.full(nu, trust[0]), np.full(nu, trust[1]),
        [trust[2] / ts, trust[3] / ts],
    ])
    ident = sp.eye(nz, n, format="csr")
    blocks.append(ConeBlock(NONNEG, sp.vstack([ident, -ident]),
                            np.concatenate([z_traj + radius, radius - z_traj])))

    margin_nd = config.ordering_margin / ts
    rows = sp.csr_matrix(
        (np.array([-1.0, 1.0, -1.0, -1.0, 1.0]),
         (np.array([0, 1, 1, 2, 2]), np.array([it2, it2, it3, it2, it3]))),
        shape=(3, n))
    shifts = np.array([-(t1f / ts + margin_nd), -margin_nd, burn_cap / ts])
    blocks.append(ConeBlock(NONNEG, rows, shifts))

    for base in range(0, 2 * nu, 3):
        g_blk = sp.csr_matrix(
            (np.full(3, -1.0),
             (np.array([1, 2, 3]), np.arange(base, base + 3))), shape=(4, n))
        blocks.append(ConeBlock(SOC, g_blk, np.array([1.0, 0.0, 0.0, 0.0])))

    return ConicProgram(c, tuple(blocks))


def _pad5(values: np.ndarray) -> np.ndarray:
    out = np.zeros(5)
    out[:values.shape[0]] = np.maximum(values, 0.0)
    return out


def _clip_warm(warm: ReplanResult, t1f: float, burn_cap: float,
               margin: float) -> DecisionVector:
    # a previous step may have burned past this step's propellant cap
    dec = warm.decision
    t2f = max(dec.t2f, t1f + margin)
    t3f = min(dec.t3f, t2f + burn_cap)
    t3f = max(t3f, t2f + margin)
    return DecisionVector(u1=dec.u1, u3=dec.u3, t2f=t2f, t3f=t3f,
                          slack=np.zeros(5))


def _solve_step(step_id: str, fault: FaultScenario, target: TargetOrbit,
                config: GeneralReplanConfig, env: MarsEnvironment,
                vehicle: VehicleConfig, residual_fn, grad_fn,
                tols: np.ndarray, time_weight: float, burn_cap: float,
                plane_weights: Optional[np.ndarray] = None,
                alt_weight: float = 0.0,
                warm: Optional[ReplanResult] = None) -> StepOutcome:
    """Trust-region SCP over one step's hard rows and objective.

    A step is feasible when some Picard-converged iterate brings every
    hard residual inside its zero tolerance; among those the one with
    the best objective is kept and re-verified by dense replay.  No
    such iterate by the time the loop stops means the step's constraint
    set is out of reach from this fault state.
    """
    t_start = time.perf_counter()
    scp = config.scp
    ctx = make_context(env, vehicle)
    ts = ctx.scales.time
    pm = picard_matrices(cgl_nodes(scp.nodes))
    burn1, _ = remaining_burn_time(fault, vehicle.stage1, env)
    t1f = fault.t_fail + burn1
    thrust1 = fault.eta * vehicle.stage1.thrust
    k = tols.shape[0]
    relax = np.full(k, config.relax_weight)
    lam = plane_weights
    tols5 = zero_tolerances(target, ctx)

    if warm is not None:
        decision = _clip_warm(warm, t1f, burn_cap, scp.ordering_margin)
    else:
        decision = initial_guess(fault, target, env, vehicle, scp.nodes,
                                 ordering_margin=scp.ordering_margin)
    phases, picard_ok = converge_phases(fault, decision, t1f, env, vehicle,
                                        pm, scp.picard_tol, scp.picard_max_iter)

    def readings(phs):
        fs = phs[2].final_state()
        resid = residual_fn(fs, ctx)
        pd = plane_deviation(fs, target)
        a_nd = np.linalg.norm(fs.r) / ctx.scales.length
        return resid, pd, a_nd

    def merit_of(dec, resid, pd, a_nd):
        val = time_weight * (dec.t3f - dec.t2f) / ts
        val += float(relax @ np.abs(resid))
        if lam is not None:
            val += float(lam @ np.abs(pd))
        return val - alt_weight * a_nd

    def objective_of(dec, pd, a_nd):
        # the part a feasible iterate is ranked by: merit minus relaxation
        val = time_weight * (dec.t3f - dec.t2f) / ts
        if lam is not None:
            val += float(lam @ np.abs(pd))
        return val - alt_weight * a_nd

    resid, pd, a_nd = readings(phases)
    trust = scp.trust_radius.copy()
    trust_floor = 1e-3 * scp.trust_radius
    log = []
    converged = False
    failure_streak = 0
    iteration = 0
    resets_left = scp.trust_resets
    best = None
    sens = None
    stall = 0

    for iteration in range(1, scp.max_outer_iterations + 1):
        merit_now = merit_of(decision, resid, pd, a_nd)
        try:
            if sens is None:
                sens = final_state_sensitivity(phases, env, vehicle, pm,
                                               thrust1, time_step=scp.time_step,
                                               picard_tol=min(scp.picard_tol, 1e-13))
            smat = np.hstack([sens.d_u1, sens.d_u3,
                              sens.d_t2f[:, None], sens.d_t3f[:, None]])
            fs = phases[2].final_state()
            r_nd = fs.r / ctx.scales.length
            v_nd = fs.v / ctx.scales.speed
            jrows = grad_fn(r_nd, v_nd) @ smat
            prows = (plane_deviation_gradients(r_nd, v_nd) @ smat
                     if lam is not None else None)
            arow = None
            if alt_weight > 0.0:
                g_alt = np.concatenate([r_nd / np.linalg.norm(r_nd), np.zeros(3)])
                arow = g_alt @ smat
            caps = np.maximum(tols, np.abs(resid))
            program = _assemble_step(decision, resid, jrows, caps, relax,
                                     pd if lam is not None else None, prows,
                                     lam, arow, alt_weight, time_weight,
                                     trust, t1f, burn_cap, ctx, scp)
            sol = solve(program, scp.solver)
        except (PropagationError, ValueError):
            sol = None

        usable = (sol is not None
                  and (sol.status == "optimal"
                       or (sol.status == "iteration-limit"
                           and max(sol.kkt_residuals.values()) < 1e-6)))
        if not usable:
            status = sol.status if sol is not None else "propagation-failure"
            failure_streak += 1
            log.append(IterationRecord(iteration, math.nan, _pad5(np.abs(resid)),
                                       trust.copy(), status, merit_now,
                                       math.nan, math.nan))
            if failure_streak >= 2:
                break
            trust = np.maximum(trust * 0.5, trust_floor)
            continue
        failure_streak = 0

        npts = scp.nodes + 1
        nu = 3 * npts
        nz = 2 * nu + 2
        z = sol.primal
        new_decision = DecisionVector(
            u1=z[:nu].reshape(npts, 3), u3=z[nu:2 * nu].reshape(npts, 3),
            t2f=float(z[2 * nu] * ts), t3f=float(z[2 * nu + 1] * ts),
            slack=_pad5(z[nz:nz + k]))

        new_phases, new_picard_ok = converge_phases(
            fault, new_decision, t1f, env, vehicle, pm, scp.picard_tol,
            scp.picard_max_iter, warm=phases)
        new_resid, new_pd, new_a = readings(new_phases)

        it2, it3 = 2 * nu, 2 * nu + 1
        model = time_weight * float(z[it3] - z[it2])
        model += float(relax @ z[nz:nz + k])
        if lam is not None:
            model += float(lam @ z[nz + k:nz + k + 2])
        if alt_weight > 0.0:
            z0_traj = np.concatenate([
                decision.u1.ravel(), decision.u3.ravel(),
                [decision.t2f / ts, decision.t3f / ts],
            ])
            model -= alt_weight * (a_nd + float(arow @ (z[:nz] - z0_traj)))
        predicted = merit_now - model
        actual = merit_now - merit_of(new_decision, new_resid, new_pd, new_a)

        # raw ratio throughout, unlike the joint method: the hard caps pin
        # the model slacks near zero, so the penalty never inflates the
        # predicted reduction, and rewarding feasible chatter with trust
        # growth just feeds an accept/reject limit cycle on the flat
        # objective
        accepted = actual > 0.0
        if not accepted:
            quality = 0.0
        else:
            quality = actual / predicted if predicted > 1e-14 else 1.0
        log.append(IterationRecord(
            iteration, model, new_decision.slack.copy(), trust.copy(),
            sol.status if accepted else sol.status + "/rejected",
            merit_now, predicted, actual))
        trust = adaptive_trust_update(quality, trust, scp.trust_radius)

        if accepted:
            done = new_picard_ok and _iterate_close(phases, new_phases,
                                                    decision, new_decision, scp)
            decision, phases = new_decision, new_phases
            resid, pd, a_nd = new_resid, new_pd, new_a
            picard_ok = new_picard_ok
            sens = None
            if picard_ok and np.all(np.abs(resid) < tols):
                score = objective_of(decision, pd, a_nd)
                if best is None or score < best[0]:
                    best = (score, decision, phases, resid)
            # trust halves every reject, so the achievable gain per
            # accepted step shrinks with it; three token gains in a row
            # mean the iterate is parked
            stall = stall + 1 if actual < 3e-5 else 0
            if done or stall >= 3:
                converged = True
                break
        elif picard_ok and np.all(trust <= trust_floor * (1.0 + 1e-9)):
            if resets_left > 0:
                resets_left -= 1
                trust = 0.25 * scp.trust_radius
                continue
            converged = True
            break

    # feasibility is decided on the collocation grid: the step is feasible
    # iff some converged iterate put every hard row inside its tolerance.
    # The dense replay is for reporting only; gating on it would flag
    # coarse-grid discretization error as mission infeasibility
    feasible = best is not None
    if feasible:
        decision, phases = best[1], best[2]

    try:
        final = nonlinear_replay(phases, env, vehicle, fault)
        achieved = elements_from_state(final.r, final.v, env)
        phi_replay = terminal_constraints(final, target, ctx)
    except (ValueError, RuntimeError):
        achieved = None
        phi_replay = np.full(5, np.nan)

    orbit_type = classify_orbit_type(phi_replay, achieved, target, tols5,
                                     feasible)
    if achieved is not None:
        delta_h = (achieved.a - target.elements.a) / 1000.0
        delta_i = math.degrees(achieved.i - target.elements.i)
        gap = (achieved.raan - target.elements.raan + math.pi) % (2 * math.pi) - math.pi
        delta_raan = math.degrees(gap)
    else:
        delta_h = delta_i = delta_raan = math.nan

    runtime = time.perf_counter() - t_start
    result = ReplanResult(
        trajectory=phases,
        achieved=achieved,
        orbit_type=orbit_type,
        final_mass=float(phases[2].m[-1]),
        delta_h=delta_h,
        delta_i=delta_i,
        delta_raan=delta_raan,
        iterations=iteration,
        solve_time=runtime,
        converged=converged,
        decision=decision,
        slack_readings=phi_replay,
        iteration_log=tuple(log),
    )
    if feasible:
        return StepOutcome(step_id, "feasible", result, runtime)
    return StepOutcome(step_id, "infeasible", None, runtime)


# --- The three steps ---


def solve_p4(fault: FaultScenario, target: Optional[TargetOrbit] = None,
             config: Optional[GeneralReplanConfig] = None,
             env: Optional[MarsEnvironment] = None,
             vehicle: Optional[VehicleConfig] = None,
             warm: Optional[ReplanResult] = None) -> StepOutcome:
    """Max final mass with every insertion row hard and no fuel cap.

    Constant thrust makes mass an affine function of burn time, so the
    objective is the burn duration.  The propellant floor is on purpose
    not imposed: the solution's mass is the measurement that decides
    whether the target orbit is affordable.  Burn time stays capped
    where the stack would become unphysically light.
    """
    env = env or default_environment()
    vehicle = vehicle or default_vehicle()
    target = target or default_target(env)
    config = config or GeneralReplanConfig()
    ctx = make_context(env, vehicle)
    tols = zero_tolerances(target, ctx)
    values, grads = _insertion_rows(target, 5)
    cap = (vehicle.separation_mass - 10.0) / vehicle.stage2.mass_flow(env.g0)
    return _solve_step("P4", fault, target, config, env, vehicle,
                       values, grads, tols, time_weight=1.0, burn_cap=cap,
                       warm=warm)


def solve_p3(fault: FaultScenario, target: Optional[TargetOrbit] = None,
             config: Optional[GeneralReplanConfig] = None,
             env: Optional[MarsEnvironment] = None,
             vehicle: Optional[VehicleConfig] = None,
             warm: Optional[ReplanResult] = None) -> StepOutcome:
    """Min weighted plane offset at the target altitude, fuel capped.

    Hard rows are the three shape residuals (radius, speed, radial
    rate); the plane enters only through the objective, linearized at
    the element level through the endpoint sensitivities.  Infeasible
    is an expected outcome: it means the target altitude itself is out
    of reach on the remaining propellant.
    """
    env = env or default_environment()
    vehicle = vehicle or default_vehicle()
    target = target or default_target(env)
    config = config or GeneralReplanConfig()
    ctx = make_context(env, vehicle)
    tols = zero_tolerances(target, ctx)[:3]
    values, grads = _insertion_rows(target, 3)
    lam = np.array([config.lambda_i, config.lambda_raan])
    return _solve_step("P3", fault, target, config, env, vehicle,
                       values, grads, tols, time_weight=0.0,
                       burn_cap=vehicle.stage2.burn_time(env.g0),
                       plane_weights=lam, warm=warm)


def solve_p2(fault: FaultScenario, target: Optional[TargetOrbit] = None,
             config: Optional[GeneralReplanConfig] = None,
             env: Optional[MarsEnvironment] = None,
             vehicle: Optional[VehicleConfig] = None,
             warm: Optional[ReplanResult] = None) -> StepOutcome:
    """Highest circular orbit on the remaining propellant.

    Circularity holds at whatever radius the endpoint reaches, the
    plane is free, and the objective pushes the final radius up.
    """
    env = env or default_environment()
    vehicle = vehicle or default_vehicle()
    target = target or default_target(env)
    config = config or GeneralReplanConfig()
    ctx = make_context(env, vehicle)
    tols5 = zero_tolerances(target, ctx)
    tols = np.array([tols5[1], tols5[2]])
    values, grads = _circularity_rows()
    return _solve_step("P2", fault, target, config, env, vehicle,
                       values, grads, tols, time_weight=0.0,
                       burn_cap=vehicle.stage2.burn_time(env.g0),
                       alt_weight=1.0, warm=warm)


# --- Pipelines ---


def pipeline_orbit_type(outcome: StepOutcome) -> str:
    return outcome.result.orbit_type if outcome.result is not None else "D"


def pipeline_runtime(trace) -> tuple:
    """Decision wall-clock and the excluded-step flag.

    Infeasible steps must still be attempted but their runtime says
    nothing about the decision itself, so it is left out and flagged,
    the way the comparison tables mark such totals with a '+'.
    """
    spent = sum(o.runtime for o in trace if o.feasible)
    return spent, any(not o.feasible for o in trace)


def run_pipeline(fault: FaultScenario, target: Optional[TargetOrbit] = None,
                 config: Optional[GeneralReplanConfig] = None,
                 env: Optional[MarsEnvironment] = None,
                 vehicle: Optional[VehicleConfig] = None):
    """Chain the steps and return (deciding outcome, full step trace).

    Downgrade tries the best case first: exact insertion, then plane
    backoff at the target altitude, then the highest circular orbit.
    Upgrade runs the same ladder from the bottom.  Each step warm
    starts from the last feasible one.
    """
    env = env or default_environment()
    vehicle = vehicle or default_vehicle()
    target = target or default_target(env)
    config = config or GeneralReplanConfig()
    floor = vehicle.stage2.dry_mass + vehicle.payload_mass

    if config.pipeline == "downgrade":
        o4 = solve_p4(fault, target, config, env, vehicle)
        trace = [o4]
        if o4.feasible and o4.result.final_mass >= floor:
            return o4, trace
        warm = o4.result if o4.feasible else None
        o3 = solve_p3(fault, target, config, env, vehicle, warm=warm)
        trace.append(o3)
        if o3.feasible:
            return o3, trace
        o2 = solve_p2(fault, target, config, env, vehicle, warm=warm)
        trace.append(o2)
        return o2, trace

    # upgrade: worst case first, climb while the next rung holds
    o2 = solve_p2(fault, target, config, env, vehicle)
    trace = [o2]
    if not o2.feasible or o2.result.achieved is None:
        return o2, trace
    ctx = make_context(env, vehicle)
    alt_tol = zero_tolerances(target, ctx)[0] * ctx.scales.length
    if o2.result.achieved.a < target.elements.a - alt_tol:
        return o2, trace
    o3 = solve_p3(fault, target, config, env, vehicle, warm=o2.result)
    trace.append(o3)
    if not o3.feasible:
        return o2, trace
    if o3.result.orbit_type != "A":
        return o3, trace
    o4 = solve_p4(fault, target, config, env, vehicle, warm=o3.result)
    trace.append(o4)
    if o4.feasible and o4.result.final_mass >= floor:
        return o4, trace
    return o3, trace
