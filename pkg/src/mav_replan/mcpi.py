"""Chebyshev-Gauss-Lobatto collocation, Picard integration matrices, and
fixed-point propagation of phase trajectories.

The integration matrices make each pass an explicit map: new node states are
linear in the force samples of the previous iterate, so states become
explicit functions of the controls and phase times. Internals run
nondimensional (planet radius, sqrt(radius^3/mu), takeoff mass); the public
trajectory type speaks SI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import MarsEnvironment, Scales, State, VehicleConfig


class PropagationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ChebyshevGrid:
    """Degree n with n+1 Gauss-Lobatto abscissae tau_j = -cos(j*pi/n)."""
    n: int
    nodes: np.ndarray


def cgl_nodes(n: int, min_degree: int = 4) -> ChebyshevGrid:
    """Gauss-Lobatto grid of degree n. Degrees below min_degree are rejected;
    tests may relax min_degree to probe tiny grids."""
    if n < min_degree:
        raise ValueError(f"grid degree must be >= {min_degree}, got {n}")
    j = np.arange(n + 1)
    nodes = -np.cos(j * np.pi / n)
    nodes[0] = -1.0
    nodes[-1] = 1.0
    if n % 2 == 0:
        nodes[n // 2] = 0.0
    return ChebyshevGrid(n=n, nodes=nodes)


@dataclass(frozen=True)
class PicardMatrices:
    """Integration operators on node samples.

    y_mat projects samples onto Chebyshev coefficients (degree n-1 fit;
    the aliased top row is dropped), r_mat evaluates the spectral
    antiderivative that vanishes at tau=-1. ry and ryry are the cached
    single and double integration operators r_mat@y_mat and
    (r_mat@y_mat)^2 used in every Picard pass.
    """
    grid: ChebyshevGrid
    r_mat: np.ndarray
    y_mat: np.ndarray
    ry: np.ndarray
    ryry: np.ndarray


def picard_matrices(grid: ChebyshevGrid) -> PicardMatrices:
    n = grid.n
    j = np.arange(n + 1)
    i = np.arange(n + 1)
    # T_i(tau_j) with tau_j = cos(pi - j*pi/n); exact angles avoid arccos noise
    angles = np.pi - j * np.pi / n
    vand = np.cos(np.outer(angles, i))          # vand[j, i] = T_i(tau_j)

    z = np.ones(n + 1)
    z[0] = z[-1] = 0.5
    c = np.full(n + 1, n / 2.0)
    c[0] = float(n)
    y_mat = (vand.T * z) / c[:, None]
    y_mat[n, :] = 0.0                            # degree n-1 fit

    # antiderivative on coefficients: b1 = a0 - a2/2, b_i = (a_{i-1}-a_{i+1})/(2i),
    # b0 fixed by vanishing at tau=-1
    s_mat = np.zeros((n + 1, n + 1))
    s_mat[1, 0] = 1.0
    if n >= 2:
        s_mat[1, 2] = -0.5
    for k in range(2, n + 1):
        s_mat[k, k - 1] = 1.0 / (2 * k)
        if k + 1 <= n:
            s_mat[k, k + 1] = -1.0 / (2 * k)
    signs = (-1.0) ** (np.arange(1, n + 1) + 1)
    s_mat[0, :] = signs @ s_mat[1:, :]

    r_mat = vand @ s_mat
    ry = r_mat @ y_mat
    ryry = ry @ ry
    return PicardMatrices(grid=grid, r_mat=r_mat, y_mat=y_mat, ry=ry, ryry=ryry)


@dataclass(frozen=True)
class PhaseTrajectory:
    """Node states of one flight phase in SI units.

    phase_id: 1 ascending, 2 coasting, 3 orbiting. controls is None for the
    coasting phase. tf == t0 marks a degenerate (zero-length) arc, which
    appears when the faulted stage has no propellant left to burn.
    """
    phase_id: int
    t0: float
    tf: float
    r: np.ndarray
    v: np.ndarray
    m: np.ndarray
    controls: np.ndarray | None

    def __post_init__(self):
        if self.tf < self.t0:
            raise ValueError(f"phase times reversed: [{self.t0}, {self.tf}]")
        npts = self.r.shape[0]
        if self.r.shape != (npts, 3) or self.v.shape != (npts, 3) or self.m.shape != (npts,):
            raise ValueError("node array shapes inconsistent")
        if self.controls is not None and self.controls.shape != (npts, 3):
            raise ValueError("controls shape inconsistent with nodes")
        if np.any(self.m <= 0):
            raise ValueError("nonpositive mass at a node")

    @property
    def node_count(self) -> int:
        return self.r.shape[0]

    def node_times(self) -> np.ndarray:
        n = self.node_count - 1
        tau = -np.cos(np.arange(n + 1) * np.pi / n)
        return 0.5 * (self.tf + self.t0) + 0.5 * (self.tf - self.t0) * tau

    @property
    def states(self) -> list[State]:
        return [State(r=self.r[k], v=self.v[k], m=float(self.m[k]))
                for k in range(self.node_count)]

    def final_state(self) -> State:
        return State(r=self.r[-1], v=self.v[-1], m=float(self.m[-1]))


# --- Nondimensional dynamics context ---

@dataclass(frozen=True)
class DynamicsContext:
    """Precomputed nondimensional constants shared by propagation and
    sensitivity code."""
    scales: Scales
    omega: np.ndarray        # planet spin, nondim
    rho0: float              # SI surface density; units folded into drag_k
    h0: float                # scale height, nondim
    ceiling: float           # atmosphere ceiling altitude, nondim
    drag_k: float            # Cd*S*length/(2*mass): a = -drag_k*rho*|w|*w/m


def make_context(env: MarsEnvironment, vehicle: VehicleConfig) -> DynamicsContext:
    scales = Scales.from_env(env, vehicle.takeoff_mass)
    return DynamicsContext(
        scales=scales,
        omega=env.omega * scales.time,
        rho0=env.rho0,
        h0=env.h0 / scales.length,
        ceiling=env.atmosphere_ceiling / scales.length,
        drag_k=vehicle.drag_coefficient * vehicle.reference_area
               * scales.length / (2.0 * scales.mass),
    )


def node_accelerations(ctx: DynamicsContext, r: np.ndarray, v: np.ndarray,
                       m: np.ndarray, u: np.ndarray | None,
                       thrust_nd: float) -> np.ndarray:
    """Force matrix: acceleration rows at every node, nondimensional."""
    rnorm = np.linalg.norm(r, axis=1)
    acc = -r / rnorm[:, None] ** 3

    alt = rnorm - 1.0
    if ctx.rho0 > 0.0 and ctx.drag_k > 0.0 and np.any(alt < ctx.ceiling):
        rho = ctx.rho0 * np.exp(-np.clip(alt, 0.0, None) / ctx.h0)
        rho = np.where(alt >= ctx.ceiling, 0.0, rho)
        w = v - np.cross(np.broadcast_to(ctx.omega, r.shape), r)
        wn = np.linalg.norm(w, axis=1)
        acc = acc - (ctx.drag_k * rho * wn / m)[:, None] * w

    if thrust_nd != 0.0:
        if u is None:
            raise ValueError("powered phase requires controls")
        acc = acc + (thrust_nd / m)[:, None] * u
    return acc


def node_accel_jacobians(ctx: DynamicsContext, r: np.ndarray, v: np.ndarray,
                         m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-node d(accel)/dr and d(accel)/dv, both (n+1, 3, 3) nondim.

    The thrust term has no state dependence at fixed phase times (mass is an
    explicit function of time), so only gravity and drag contribute.
    """
    npts = r.shape[0]
    rnorm = np.linalg.norm(r, axis=1)
    inv3 = rnorm ** -3
    inv5 = rnorm ** -5
    eye = np.eye(3)
    d_ar = (-inv3[:, None, None] * eye
            + 3.0 * inv5[:, None, None] * np.einsum("na,nb->nab", r, r))
    d_av = np.zeros((npts, 3, 3))

    alt = rnorm - 1.0
    if ctx.rho0 > 0.0 and ctx.drag_k > 0.0 and np.any(alt < ctx.ceiling):
        inside = alt < ctx.ceiling
        rho = ctx.rho0 * np.exp(-np.clip(alt, 0.0, None) / ctx.h0)
        rho = np.where(inside, rho, 0.0)
        drho = np.where(inside & (alt > 0.0), -rho / ctx.h0, 0.0)
        w = v - np.cross(np.broadcast_to(ctx.omega, r.shape), r)
        wn = np.linalg.norm(w, axis=1)
        ok = wn > 1e-12
        wn_safe = np.where(ok, wn, 1.0)
        k_m = ctx.drag_k / m
        # d/dw of (|w| w) = |w| I + w w^T/|w|
        sw = (wn_safe[:, None, None] * eye
              + np.einsum("na,nb->nab", w, w) / wn_safe[:, None, None])
        sw[~ok] = 0.0
        d_av -= (k_m * rho)[:, None, None] * sw
        omega_cross = np.array([[0.0, -ctx.omega[2], ctx.omega[1]],
                                [ctx.omega[2], 0.0, -ctx.omega[0]],
                                [-ctx.omega[1], ctx.omega[0], 0.0]])
        rhat = r / rnorm[:, None]
        grad_rho = drho[:, None] * rhat
        d_ar -= ((k_m * np.where(ok, wn, 0.0))[:, None, None]
                 * np.einsum("na,nb->nab", w, grad_rho))
        d_ar -= (k_m * rho)[:, None, None] * (sw @ (-omega_cross))
    return d_ar, d_av


def mass_profile_nd(m0: float, flow_nd: float, dt_nd: float,
                    tau: np.ndarray) -> np.ndarray:
    """Affine mass history: flow is control-independent per phase."""
    return m0 - flow_nd * dt_nd * 0.5 * (tau + 1.0)


def picard_pass_nd(pm: PicardMatrices, ctx: DynamicsContext, r0, v0,
                   r_prev, v_prev, m_nodes, u, thrust_nd: float,
                   dt_nd: float) -> tuple[np.ndarray, np.ndarray]:
    """One explicit Picard update of (position, velocity) node arrays."""
    tau = pm.grid.nodes
    g = node_accelerations(ctx, r_prev, v_prev, m_nodes, u, thrust_nd)
    if not np.all(np.isfinite(g)):
        bad = int(np.argwhere(~np.isfinite(g).all(axis=1))[0, 0])
        raise PropagationError(f"non-finite acceleration at node {bad}")
    half = 0.5 * dt_nd
    v_new = v0[None, :] + half * (pm.ry @ g)
    r_new = (r0[None, :] + half * (tau + 1.0)[:, None] * v0[None, :]
             + half * half * (pm.ryry @ g))
    return r_new, v_new


@dataclass(frozen=True)
class FixedPointResult:
    converged: bool
    iterations: int
    final_delta: float


def _phase_thrust_nd(ctx: DynamicsContext, thrust: float) -> float:
    return thrust / (ctx.scales.mass * ctx.scales.accel)


def _phase_flow_nd(ctx: DynamicsContext, thrust: float, isp: float, g0: float) -> float:
    if thrust == 0.0:
        return 0.0
    return thrust / (isp * g0) * ctx.scales.time / ctx.scales.mass


def propagate_phase(prev: PhaseTrajectory, controls, t0: float, tf: float,
                    thrust: float, isp: float, env: MarsEnvironment,
                    vehicle: VehicleConfig,
                    matrices: PicardMatrices | None = None) -> PhaseTrajectory:
    """One Picard pass: forces are sampled on prev's node states with the
    given controls; the initial state is prev's first node."""
    if matrices is None:
        matrices = picard_matrices(cgl_nodes(prev.node_count - 1))
    if matrices.grid.n != prev.node_count - 1:
        raise ValueError("matrix grid does not match trajectory node count")
    ctx = make_context(env, vehicle)
    sc = ctx.scales
    tau = matrices.grid.nodes
    dt_nd = (tf - t0) / sc.time

    u = None if controls is None else np.asarray(controls, dtype=float)
    thrust_nd = _phase_thrust_nd(ctx, thrust)
    flow_nd = _phase_flow_nd(ctx, thrust, isp, env.g0)
    m0_nd = prev.m[0] / sc.mass
    m_nodes = mass_profile_nd(m0_nd, flow_nd, dt_nd, tau)
    if np.any(m_nodes <= 0):
        raise PropagationError("phase duration burns the stack below zero mass")

    if dt_nd == 0.0:
        r_new = np.repeat(prev.r[0][None, :] / sc.length, len(tau), axis=0)
        v_new = np.repeat(prev.v[0][None, :] / sc.speed, len(tau), axis=0)
    else:
        r_new, v_new = picard_pass_nd(
            matrices, ctx, prev.r[0] / sc.length, prev.v[0] / sc.speed,
            prev.r / sc.length, prev.v / sc.speed, m_nodes, u,
            thrust_nd, dt_nd)
    return PhaseTrajectory(phase_id=prev.phase_id, t0=t0, tf=tf,
                           r=r_new * sc.length, v=v_new * sc.speed,
                           m=m_nodes * sc.mass, controls=u)


def picard_fixed_point(guess: PhaseTrajectory, controls, t0: float, tf: float,
                       thrust: float, isp: float, env: MarsEnvironment,
                       vehicle: VehicleConfig, tol: float = 1e-6,
                       max_iter: int = 50,
                       matrices: PicardMatrices | None = None,
                       ) -> tuple[PhaseTrajectory, FixedPointResult]:
    """Iterate propagate_phase to its fixed point.

    tol is measured on nondimensional position/velocity node deltas.
    Non-convergence is reported in the result flag, never raised.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be positive")
    ctx = make_context(env, vehicle)
    sc = ctx.scales
    traj = guess
    delta = math.inf
    for it in range(1, max_iter + 1):
        new = propagate_phase(traj, controls, t0, tf, thrust, isp, env,
                              vehicle, matrices=matrices)
        delta = max(np.max(np.abs(new.r - traj.r)) / sc.length,
                    np.max(np.abs(new.v - traj.v)) / sc.speed)
        traj = new
        if delta < tol:
            return traj, FixedPointResult(True, it, float(delta))
    return traj, FixedPointResult(False, max_iter, float(delta))


def constant_guess_phase(phase_id: int, state0: State, t0: float, tf: float,
                         grid: ChebyshevGrid,
                         controls=None) -> PhaseTrajectory:
    """Trajectory guess holding the initial state at every node."""
    npts = grid.n + 1
    u = None if controls is None else np.asarray(controls, dtype=float)
    return PhaseTrajectory(
        phase_id=phase_id, t0=t0, tf=tf,
        r=np.repeat(state0.r[None, :], npts, axis=0),
        v=np.repeat(state0.v[None, :], npts, axis=0),
        m=np.full(npts, state0.m), controls=u)


def iterate_scalar_ode(fun, x0, t0: float, tf: float, pm: PicardMatrices,
                       tol: float = 1e-12, max_iter: int = 100):
    """Picard fixed point for a generic ODE x' = fun(t, x), x(t0) = x0.

    x may be scalar or vector valued (fun returns matching shape per node
    row). Used for self-checks of the integration operators.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    tau = pm.grid.nodes
    t = 0.5 * (tf + t0) + 0.5 * (tf - t0) * tau
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    x = np.repeat(x0[None, :], len(tau), axis=0)
    half = 0.5 * (tf - t0)
    for it in range(1, max_iter + 1):
        g = np.stack([np.atleast_1d(fun(t[k], x[k])) for k in range(len(tau))])
        x_new = x0[None, :] + half * (pm.ry @ g)
        delta = float(np.max(np.abs(x_new - x)))
        x = x_new
        if delta < tol:
            return x, it, True
    return x, max_iter, False
