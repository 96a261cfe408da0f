import dataclasses
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from mav_replan import env as env_mod, mcpi, sjtr
from mav_replan.cases import load_case
from mav_replan.conic import solve
from mav_replan.env import ConfigError, State


@pytest.fixture(scope="module")
def mars():
    return env_mod.default_environment()


@pytest.fixture(scope="module")
def vehicle():
    return env_mod.default_vehicle()


@pytest.fixture(scope="module")
def ctx(mars, vehicle):
    return mcpi.make_context(mars, vehicle)


@pytest.fixture(scope="module")
def target(mars):
    return sjtr.default_target(mars)


@pytest.fixture(scope="module")
def tols(target, ctx):
    return sjtr.zero_tolerances(target, ctx)


def on_plane_basis(target):
    h = target.h_unit
    n = np.array([math.cos(target.elements.raan), math.sin(target.elements.raan), 0.0])
    return n, np.cross(h, n)


class TestTerminalConstraints:
    def test_on_orbit_zero(self, target, ctx, mars):
        n, m = on_plane_basis(target)
        a = target.elements.a
        w = math.sqrt(mars.mu / a)
        u = math.radians(40.0)
        state = State(r=a * (n * math.cos(u) + m * math.sin(u)),
                      v=w * (-n * math.sin(u) + m * math.cos(u)),
                      m=80.0)
        phi = sjtr.terminal_constraints(state, target, ctx)
        assert np.max(np.abs(phi)) < 1e-9

    def test_offset_circular(self, target, ctx, mars):
        # circular at a*+10 km in the target plane; radius and speed
        # offsets recomputed from two-body closed forms
        n, m = on_plane_basis(target)
        a = target.elements.a + 10e3
        w = math.sqrt(mars.mu / a)
        u = math.radians(-25.0)
        state = State(r=a * (n * math.cos(u) + m * math.sin(u)),
                      v=w * (-n * math.sin(u) + m * math.cos(u)),
                      m=80.0)
        phi = sjtr.terminal_constraints(state, target, ctx)
        assert phi[0] == pytest.approx(0.0029444760157706137, rel=1e-12)
        assert phi[1] == pytest.approx(-0.001294060017308249, rel=1e-10)
        assert np.max(np.abs(phi[2:])) < 1e-9

    def test_equatorial_dot_products(self, target, ctx, mars):
        # pinned equatorial state: the plane components reduce to hand
        # dot products against the target normal
        a = target.elements.a
        w = math.sqrt(mars.mu / a)
        state = State(r=np.array([a, 0.0, 0.0]), v=np.array([0.0, w, 0.0]), m=80.0)
        phi = sjtr.terminal_constraints(state, target, ctx)
        assert phi[3] == pytest.approx(-0.5130480445891427, rel=1e-12)
        assert phi[4] == pytest.approx(0.13642793078514942, rel=1e-12)

    def test_zero_tolerance_values(self, target, ctx, tols):
        sc = ctx.scales
        a_nd = target.elements.a / sc.length
        sin_p = math.sin(math.radians(0.05))
        expect = [1000.0 / sc.length, 1.0 / sc.speed, a_nd / sc.speed,
                  a_nd * sin_p, math.sqrt(1.0 / a_nd) * sin_p]
        assert np.allclose(tols, expect, rtol=1e-12)


class TestStateGradients:
    def test_radius_gradient_is_unit_position(self, target):
        r = np.array([1.05, -0.2, 0.31])
        v = np.array([0.1, 0.9, -0.3])
        grad = sjtr.constraint_state_gradients(r, v, target)
        assert np.allclose(grad[0, 0:3], r / np.linalg.norm(r), rtol=1e-14)
        assert np.all(grad[0, 3:6] == 0.0)

    @given(data=st.data())
    @settings(max_examples=25, deadline=None)
    def test_matches_finite_differences(self, data, target, ctx):
        draw = lambda: np.array([data.draw(st.floats(-1.2, 1.2)) for _ in range(3)])
        r = draw() + np.array([1.1, 0, 0])
        v = draw()
        # unit-vector gradients are singular at zero radius or zero speed
        assume(np.linalg.norm(r) > 0.5)
        assume(np.linalg.norm(v) > 0.1)
        state = State(r=r * ctx.scales.length, v=v * ctx.scales.speed, m=80.0)
        grad = sjtr.constraint_state_gradients(r, v, target)
        h = 1e-7
        for j in range(6):
            dz = np.zeros(6)
            dz[j] = h
            sp = State(r=(r + dz[0:3]) * ctx.scales.length,
                       v=(v + dz[3:6]) * ctx.scales.speed, m=80.0)
            sm = State(r=(r - dz[0:3]) * ctx.scales.length,
                       v=(v - dz[3:6]) * ctx.scales.speed, m=80.0)
            fd = (sjtr.terminal_constraints(sp, target, ctx)
                  - sjtr.terminal_constraints(sm, target, ctx)) / (2 * h)
            assert np.allclose(grad[:, j], fd, atol=5e-6)


@pytest.fixture(scope="module")
def iterate20(mars, vehicle, target):
    """Picard-converged three-phase iterate on a coarse grid."""
    fault = load_case(1)
    nodes = 20
    decision = sjtr.initial_guess(fault, target, mars, vehicle, nodes)
    pm = mcpi.picard_matrices(mcpi.cgl_nodes(nodes))
    burn1, _ = env_mod.remaining_burn_time(fault, vehicle.stage1, mars)
    t1f = fault.t_fail + burn1
    phases, ok = sjtr.converge_phases(fault, decision, t1f, mars, vehicle,
                                      pm, 1e-13, 300)
    assert ok
    return fault, decision, pm, t1f, phases


class TestTerminalJacobians:
    def test_controls_match_finite_differences(self, iterate20, mars, vehicle,
                                               target, ctx):
        fault, decision, pm, t1f, phases = iterate20
        thrust1 = fault.eta * vehicle.stage1.thrust
        jac = sjtr.terminal_jacobians(phases, target, mars, vehicle, pm,
                                      thrust1)
        h = 1e-6
        for attr, blk in (("u1", jac.d_u1), ("u3", jac.d_u3)):
            base = getattr(decision, attr)
            cols = base.size
            scale = np.max(np.abs(blk))
            for j in range(cols):
                up, dn = base.copy().ravel(), base.copy().ravel()
                up[j] += h
                dn[j] -= h
                phis = []
                for pert in (up, dn):
                    d = dataclasses.replace(decision,
                                            **{attr: pert.reshape(-1, 3)})
                    ph, ok = sjtr.converge_phases(fault, d, t1f, mars,
                                                  vehicle, pm, 1e-13, 300)
                    assert ok
                    phis.append(sjtr.terminal_constraints(
                        ph[2].final_state(), target, ctx))
                fd = (phis[0] - phis[1]) / (2 * h)
                denom = max(np.linalg.norm(fd), 1e-3 * scale)
                assert np.linalg.norm(blk[:, j] - fd) / denom < 1e-4

    def test_times_match_finite_differences(self, iterate20, mars, vehicle,
                                            target, ctx):
        fault, decision, pm, t1f, phases = iterate20
        thrust1 = fault.eta * vehicle.stage1.thrust
        jac = sjtr.terminal_jacobians(phases, target, mars, vehicle, pm,
                                      thrust1)
        h_nd = 1e-6
        h = h_nd * ctx.scales.time
        for name, col in (("t2f", jac.d_t2f), ("t3f", jac.d_t3f)):
            phis = []
            for sgn in (+1.0, -1.0):
                d = dataclasses.replace(decision,
                                        **{name: getattr(decision, name) + sgn * h})
                ph, ok = sjtr.converge_phases(fault, d, t1f, mars, vehicle,
                                              pm, 1e-13, 300)
                assert ok
                phis.append(sjtr.terminal_constraints(ph[2].final_state(),
                                                      target, ctx))
            fd = (phis[0] - phis[1]) / (2 * h_nd)
            assert np.linalg.norm(col - fd) / np.linalg.norm(fd) < 1e-4

    def test_dead_first_stage_has_no_control_influence(
            self, iterate20, mars, vehicle, target):
        # total thrust loss: the stage-1 control columns must vanish exactly
        fault, decision, pm, t1f, _ = iterate20
        dead = dataclasses.replace(fault, eta=0.0)
        phases, ok = sjtr.converge_phases(dead, decision, t1f, mars, vehicle,
                                          pm, 1e-13, 300)
        assert ok
        jac = sjtr.terminal_jacobians(phases, target, mars, vehicle, pm, 0.0)
        assert np.all(jac.d_u1 == 0.0)
        assert np.any(jac.d_u3 != 0.0)

    def test_degenerate_final_state_rejected(self, iterate20, mars, vehicle,
                                             target):
        fault, _, pm, _, phases = iterate20
        npts = phases[2].node_count
        sunk = mcpi.PhaseTrajectory(
            3, phases[2].t0, phases[2].tf,
            r=np.full((npts, 3), mars.radius / 4.0) * np.array([1.0, 0, 0]),
            v=phases[2].v, m=phases[2].m, controls=phases[2].controls)
        with pytest.raises(ValueError, match="degenerate"):
            sjtr.terminal_jacobians((phases[0], phases[1], sunk), target,
                                    mars, vehicle, pm,
                                    fault.eta * vehicle.stage1.thrust)


class TestSubproblem:
    def test_documented_penalty_and_trust(self):
        cfg = sjtr.SJTRConfig()
        assert tuple(cfg.penalty) == (1e7, 1e7, 1e7, 6e5, 6e5)
        assert tuple(cfg.trust_radius) == (0.5, 0.5, 6.0, 6.0)

    def _tiny_iterate(self, nodes=7):
        rng = np.random.default_rng(5)
        u = rng.normal(size=(nodes, 3)) * 0.3
        return sjtr.DecisionVector(u1=u, u3=u[::-1].copy(), t2f=200.0,
                                   t3f=400.0, slack=np.zeros(5))

    def test_cost_vector_structure(self, ctx):
        dec = self._tiny_iterate()
        npts = dec.u1.shape[0]
        jac = sjtr.TerminalJacobians(
            d_u1=np.zeros((5, 3 * npts)), d_u3=np.zeros((5, 3 * npts)),
            d_t2f=np.zeros(5), d_t3f=np.zeros(5))
        cfg = sjtr.SJTRConfig(nodes=npts - 1)
        prog = sjtr.assemble_subproblem(dec, np.zeros(5), jac,
                                        np.asarray(cfg.trust_radius), 100.0,
                                        1e9, ctx, cfg)
        nu = 3 * npts
        assert np.all(prog.objective[:2 * nu] == 0.0)
        assert prog.objective[2 * nu] == -1.0 and prog.objective[2 * nu + 1] == 1.0
        assert np.all(prog.objective[2 * nu + 2:] == cfg.penalty)

    def test_every_node_gets_a_thrust_ball(self, ctx):
        from mav_replan.conic import SOC
        dec = self._tiny_iterate()
        npts = dec.u1.shape[0]
        jac = sjtr.TerminalJacobians(
            d_u1=np.zeros((5, 3 * npts)), d_u3=np.zeros((5, 3 * npts)),
            d_t2f=np.zeros(5), d_t3f=np.zeros(5))
        cfg = sjtr.SJTRConfig(nodes=npts - 1)
        prog = sjtr.assemble_subproblem(dec, np.zeros(5), jac,
                                        np.asarray(cfg.trust_radius), 100.0,
                                        1e9, ctx, cfg)
        socs = [b for b in prog.blocks if b.kind == SOC]
        assert len(socs) == 2 * npts

    def test_reduces_to_time_minimization(self, ctx):
        # zero linearization and zero residual leave nothing for the
        # slacks to buy; the optimum rails both time trust radii.  Unit
        # penalties here: the production weights drown the time signal in
        # the cost normalization, and this test wants the rails tight.
        dec = self._tiny_iterate()
        npts = dec.u1.shape[0]
        jac = sjtr.TerminalJacobians(
            d_u1=np.zeros((5, 3 * npts)), d_u3=np.zeros((5, 3 * npts)),
            d_t2f=np.zeros(5), d_t3f=np.zeros(5))
        cfg = sjtr.SJTRConfig(nodes=npts - 1, penalty=(2.0,) * 5)
        trust = np.asarray(cfg.trust_radius)
        prog = sjtr.assemble_subproblem(dec, np.zeros(5), jac, trust, 100.0,
                                        1e9, ctx, cfg)
        sol = solve(prog, settings=cfg.solver)
        assert sol.status == "optimal"
        ts = ctx.scales.time
        it2, it3 = 6 * npts, 6 * npts + 1
        # interior-point slacks never reach exact zero, and the penalty
        # magnifies them in objective_value; read the railed times directly
        assert sol.primal[it2] == pytest.approx((dec.t2f + trust[2]) / ts, abs=1e-6)
        assert sol.primal[it3] == pytest.approx((dec.t3f - trust[3]) / ts, abs=1e-6)
        assert np.max(sol.primal[-5:]) < 1e-8


class TestAdaptiveTrust:
    def test_poor_ratio_halves(self):
        initial = np.array([0.5, 0.5, 6.0, 6.0])
        out = sjtr.adaptive_trust_update(0.05, initial.copy(), initial)
        assert np.allclose(out, initial * 0.5)

    def test_strong_ratio_at_cap_unchanged(self):
        initial = np.array([0.5, 0.5, 6.0, 6.0])
        out = sjtr.adaptive_trust_update(0.9, 4.0 * initial, initial)
        assert np.allclose(out, 4.0 * initial)

    def test_dead_band_unchanged(self):
        initial = np.array([0.5, 0.5, 6.0, 6.0])
        radius = np.array([0.2, 0.2, 3.0, 3.0])
        out = sjtr.adaptive_trust_update(0.5, radius, initial)
        assert np.allclose(out, radius)

    def test_floor(self):
        initial = np.array([0.5, 0.5, 6.0, 6.0])
        out = sjtr.adaptive_trust_update(0.0, 1e-5 * initial, initial)
        assert np.allclose(out, 1e-3 * initial)

    @given(quality=st.floats(-2.0, 2.0), scale=st.floats(1e-5, 10.0))
    @settings(max_examples=60, deadline=None)
    def test_bounds_always_hold(self, quality, scale):
        initial = np.array([0.5, 0.5, 6.0, 6.0])
        out = sjtr.adaptive_trust_update(quality, scale * initial, initial)
        assert np.all(out >= 1e-3 * initial - 1e-15)
        assert np.all(out <= np.maximum(scale * initial, 4.0 * initial) + 1e-12)


class TestClassification:
    @pytest.fixture
    def achieved(self, target):
        return dataclasses.replace(target.elements)

    def test_all_zero_is_full_insertion(self, achieved, target, tols):
        assert sjtr.classify_orbit_type(np.zeros(5), achieved, target,
                                        tols, True) == "A"

    def test_plane_only_deviation(self, achieved, target, tols, ctx):
        # half a degree of inclination error with the shape held
        phi = np.zeros(5)
        phi[3] = (target.elements.a / ctx.scales.length) * math.sin(math.radians(0.498))
        assert sjtr.classify_orbit_type(phi, achieved, target, tols, True) == "B"

    def test_altitude_deviation_above_safe_axis(self, achieved, target, tols, ctx):
        phi = np.zeros(5)
        phi[0] = -25e3 / ctx.scales.length
        assert sjtr.classify_orbit_type(phi, achieved, target, tols, True) == "C"

    def test_below_safe_axis(self, target, tols):
        low = dataclasses.replace(target.elements, a=target.elements.a - 75.87e3)
        assert sjtr.classify_orbit_type(np.zeros(5), low, target, tols, True) == "D"

    def test_unconverged_or_lost(self, achieved, target, tols):
        assert sjtr.classify_orbit_type(np.zeros(5), achieved, target,
                                        tols, False) == "D"
        assert sjtr.classify_orbit_type(np.zeros(5), None, target,
                                        tols, True) == "D"

    @given(data=st.data())
    @settings(max_examples=60, deadline=None)
    def test_full_insertion_iff_within_tolerances(self, data, target, tols):
        achieved = dataclasses.replace(target.elements)
        phi = np.array([data.draw(st.floats(-3.0, 3.0)) * t for t in tols])
        cls = sjtr.classify_orbit_type(phi, achieved, target, tols, True)
        if np.all(np.abs(phi) < tols):
            assert cls == "A"
        else:
            assert cls in "BC"


class TestControlInterpolant:
    def _phase(self, ctrl, t0=0.0, tf=10.0):
        npts = len(ctrl)
        return mcpi.PhaseTrajectory(1, t0, tf, r=np.zeros((npts, 3)),
                                    v=np.zeros((npts, 3)), m=np.ones(npts),
                                    controls=np.asarray(ctrl, dtype=float))

    def test_coast_has_none(self):
        ph = mcpi.PhaseTrajectory(2, 0.0, 1.0, r=np.zeros((3, 3)),
                                  v=np.zeros((3, 3)), m=np.ones(3),
                                  controls=None)
        assert sjtr.control_interpolant(ph) is None

    def test_exact_at_nodes(self):
        rng = np.random.default_rng(11)
        ctrl = rng.normal(size=(9, 3))
        ctrl /= np.maximum(np.linalg.norm(ctrl, axis=1), 1.0)[:, None]
        ph = self._phase(ctrl)
        fn = sjtr.control_interpolant(ph)
        tau = -np.cos(np.arange(9) * np.pi / 8)
        for k, t in enumerate(ph.t0 + (tau + 1.0) * 0.5 * (ph.tf - ph.t0)):
            assert np.allclose(fn(t), ctrl[k], atol=1e-12)

    @given(data=st.data())
    @settings(max_examples=40, deadline=None)
    def test_never_leaves_thrust_ball(self, data):
        npts = data.draw(st.integers(3, 12))
        raw = np.array([[data.draw(st.floats(-1.0, 1.0)) for _ in range(3)]
                        for _ in range(npts)])
        ctrl = raw / np.maximum(np.linalg.norm(raw, axis=1), 1.0)[:, None]
        ph = self._phase(ctrl)
        fn = sjtr.control_interpolant(ph)
        t = data.draw(st.floats(0.0, 10.0))
        assert np.linalg.norm(fn(t)) <= 1.0 + 1e-12


class TestInitialGuess:
    def test_shape_and_ordering(self, mars, vehicle, target):
        fault = load_case(2)
        dec = sjtr.initial_guess(fault, target, mars, vehicle, 30)
        burn1, _ = env_mod.remaining_burn_time(fault, vehicle.stage1, mars)
        assert fault.t_fail + burn1 < dec.t2f < dec.t3f
        cap = vehicle.stage2.burn_time(mars.g0)
        assert dec.t3f - dec.t2f == pytest.approx(cap, rel=1e-12)
        norms = np.linalg.norm(np.vstack([dec.u1, dec.u3]), axis=1)
        assert np.all(norms <= 1.0 + 1e-12)


class TestConfigValidation:
    def test_bad_penalty_shape(self):
        with pytest.raises(ConfigError):
            sjtr.SJTRConfig(penalty=(1.0, 2.0))

    def test_negative_reset_budget(self):
        with pytest.raises(ConfigError):
            sjtr.SJTRConfig(trust_resets=-1)

    def test_decision_rejects_negative_slack(self):
        with pytest.raises(ConfigError):
            sjtr.DecisionVector(u1=np.zeros((4, 3)), u3=np.zeros((4, 3)),
                                t2f=10.0, t3f=20.0,
                                slack=np.array([0, 0, -1.0, 0, 0]))

    def test_decision_rejects_unordered_times(self):
        with pytest.raises(ConfigError):
            sjtr.DecisionVector(u1=np.zeros((4, 3)), u3=np.zeros((4, 3)),
                                t2f=30.0, t3f=20.0, slack=np.zeros(5))


class TestOuterLoop:
    def test_deterministic_replan(self, mars):
        cfg = sjtr.SJTRConfig(nodes=24, max_outer_iterations=10)
        fault = load_case(3)
        a = sjtr.sjtr_solve(fault, config=cfg, env=mars)
        b = sjtr.sjtr_solve(fault, config=cfg, env=mars)
        assert a.iterations == b.iterations
        assert a.orbit_type == b.orbit_type
        assert a.final_mass == b.final_mass
        merits_a = [r.merit for r in a.iteration_log]
        merits_b = [r.merit for r in b.iteration_log]
        assert merits_a == merits_b

    def test_unfaulted_vehicle_reaches_target(self, mars):
        base = load_case(1)
        fault = env_mod.FaultScenario(t_fail=base.t_fail, eta=1.0,
                                      state_at_fail=base.state_at_fail)
        res = sjtr.sjtr_solve(fault, config=sjtr.SJTRConfig(nodes=40), env=mars)
        assert res.converged
        assert res.orbit_type == "A"
        floor = (env_mod.default_vehicle().stage2.dry_mass
                 + env_mod.default_vehicle().payload_mass)
        assert res.final_mass > floor
