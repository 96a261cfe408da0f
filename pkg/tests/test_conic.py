"""Cone solver tests.

The heavy battery builds random SOCPs backwards from a known KKT point
(pick the optimum and strictly complementary multipliers, then derive
the problem data), so the reference objective is exact rather than
another solver's output.
"""

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings as hyp_settings, strategies as st
from scipy.optimize import linprog

from mav_replan.conic import (
    NONNEG,
    SOC,
    ConeBlock,
    ConicProgram,
    SolverSettings,
    _Layout,
    load_program,
    solve,
)


def nonneg(rows, shift):
    return ConeBlock(NONNEG, sp.csr_matrix(np.atleast_2d(np.asarray(rows, dtype=float))), shift)


def soc(rows, shift):
    return ConeBlock(SOC, sp.csr_matrix(np.atleast_2d(np.asarray(rows, dtype=float))), shift)


def ball_projection_program(point):
    """min ||u - point|| over the unit ball, via an epigraph variable."""
    d = len(point)
    # variables (u, t)
    c = np.zeros(d + 1)
    c[d] = 1.0
    g_epi = np.zeros((d + 1, d + 1))
    g_epi[0, d] = -1.0
    g_epi[1:, :d] = -np.eye(d)
    h_epi = np.concatenate([[0.0], -np.asarray(point, dtype=float)])
    g_ball = np.zeros((d + 1, d + 1))
    g_ball[1:, :d] = -np.eye(d)
    h_ball = np.zeros(d + 1)
    h_ball[0] = 1.0
    return ConicProgram(c, (soc(g_epi, h_epi), soc(g_ball, h_ball)))


def random_socp(rng, with_eq=False):
    """Construct a bounded SOCP with a known optimal objective.

    Choose the solution and strictly complementary cone multipliers
    first, then back out h, b, c so the KKT conditions hold exactly.
    Keeps the stacked cone dimension above the variable count so the
    scaled normal equations stay full rank.
    """
    n = int(rng.integers(2, 31))
    soc_dims = [int(rng.integers(2, 7)) for _ in range(rng.integers(0, 4))]
    ell = max(int(rng.integers(2, 9)), n + 2 - sum(soc_dims))
    x_star = rng.standard_normal(n)

    blocks = []
    s_parts = []
    z_parts = []
    active = rng.random(ell) < 0.5
    active[int(rng.integers(0, ell))] = True
    s_orth = np.where(active, 0.0, rng.uniform(0.2, 2.0, ell))
    z_orth = np.where(active, rng.uniform(0.2, 2.0, ell), 0.0)
    g_orth = rng.standard_normal((ell, n))
    blocks.append((NONNEG, g_orth, s_orth))
    s_parts.append(s_orth)
    z_parts.append(z_orth)
    for d in soc_dims:
        g_blk = rng.standard_normal((d, n))
        mode = rng.choice(["boundary", "primal", "dual"], p=[0.5, 0.25, 0.25])
        v = rng.standard_normal(d - 1)
        v_norm = np.linalg.norm(v)
        if mode == "boundary":
            s_blk = np.concatenate([[v_norm], v]) * rng.uniform(0.3, 1.5)
            z_blk = np.concatenate([[v_norm], -v]) * rng.uniform(0.3, 1.5)
        elif mode == "primal":
            s_blk = np.concatenate([[v_norm * 1.5 + 0.3], v])
            z_blk = np.zeros(d)
        else:
            s_blk = np.zeros(d)
            z_blk = np.concatenate([[v_norm * 1.4 + 0.2], v])
        blocks.append((SOC, g_blk, s_blk))
        s_parts.append(s_blk)
        z_parts.append(z_blk)

    cone_blocks = tuple(
        ConeBlock(kind, sp.csr_matrix(g_blk), g_blk @ x_star + s_blk)
        for kind, g_blk, s_blk in blocks
    )
    z_star = np.concatenate(z_parts)
    g_all = sp.vstack([blk.coeffs for blk in cone_blocks], format="csr")
    c = -(g_all.T @ z_star)
    eq = (None, None)
    if with_eq and n > 2:
        p = int(rng.integers(1, n // 2 + 1))
        a_mat = rng.standard_normal((p, n))
        y_star = rng.standard_normal(p)
        c = c - a_mat.T @ y_star
        eq = (sp.csr_matrix(a_mat), a_mat @ x_star)
    program = ConicProgram(c, cone_blocks, eq[0], eq[1])
    return program, float(c @ x_star)


class TestValidation:
    def test_shift_length_mismatch(self):
        with pytest.raises(ValueError, match="rows mismatch"):
            ConeBlock(NONNEG, sp.csr_matrix(np.eye(2)), np.zeros(3))

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="cone kind"):
            ConeBlock("orthant", sp.csr_matrix(np.eye(2)), np.zeros(2))

    def test_soc_needs_dimension_two(self):
        with pytest.raises(ValueError, match="dimension >= 2"):
            soc([[1.0]], [0.0])

    def test_untouched_variable_rejected(self):
        with pytest.raises(ValueError, match="variables \\[1\\]"):
            ConicProgram(np.array([1.0, 0.0]), (nonneg([[-1.0, 0.0]], [0.0]),))

    def test_equality_needs_both_parts(self):
        with pytest.raises(ValueError, match="together"):
            ConicProgram(
                np.ones(2),
                (nonneg(-np.eye(2), np.zeros(2)),),
                eq_coeffs=sp.csr_matrix(np.ones((1, 2))),
            )

    def test_needs_a_cone_block(self):
        with pytest.raises(ValueError, match="at least one cone block"):
            ConicProgram(np.ones(2), ())

    def test_dump_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        program, ref = random_socp(rng, with_eq=True)
        path = tmp_path / "program.txt"
        program.dump(path)
        rebuilt = load_program(path)
        assert rebuilt.num_vars == program.num_vars
        g1, h1, _ = program.stacked()
        g2, h2, _ = rebuilt.stacked()
        np.testing.assert_array_equal(h1, h2)
        assert (g1 != g2).nnz == 0
        sol = solve(rebuilt)
        assert sol.status == "optimal"
        assert abs(sol.objective_value - ref) < 1e-6 * (1 + abs(ref))


class TestAnalyticCases:
    def test_scalar_lower_bound(self):
        # min x subject to x >= 3
        program = ConicProgram(np.array([1.0]), (nonneg([[-1.0]], [-3.0]),))
        sol = solve(program)
        assert sol.status == "optimal"
        assert abs(sol.primal[0] - 3.0) < 1e-6
        assert abs(sol.objective_value - 3.0) < 1e-6

    def test_linear_over_unit_ball(self):
        g_blk = np.zeros((4, 3))
        g_blk[1:, :] = -np.eye(3)
        program = ConicProgram(
            np.array([1.0, 0.0, 0.0]),
            (soc(g_blk, [1.0, 0.0, 0.0, 0.0]),),
        )
        sol = solve(program)
        assert sol.status == "optimal"
        np.testing.assert_allclose(sol.primal, [-1.0, 0.0, 0.0], atol=1e-6)
        assert abs(sol.objective_value + 1.0) < 1e-7

    def test_projection_onto_ball(self):
        sol = solve(ball_projection_program([2.0, 0.0, 0.0]))
        assert sol.status == "optimal"
        np.testing.assert_allclose(sol.primal[:3], [1.0, 0.0, 0.0], atol=1e-5)
        assert abs(sol.objective_value - 1.0) < 1e-6

    def test_absolute_value_epigraph(self):
        # min t with t >= |x - 3|: optimum sits at a nonsmooth point
        program = ConicProgram(
            np.array([0.0, 1.0]),
            (soc([[0.0, -1.0], [-1.0, 0.0]], [0.0, -3.0]),),
        )
        sol = solve(program)
        assert sol.status == "optimal"
        assert sol.objective_value < 1e-6
        assert abs(sol.primal[0] - 3.0) < 1e-4

    def test_equality_constrained(self):
        program = ConicProgram(
            np.array([1.0, 2.0]),
            (nonneg(-np.eye(2), np.zeros(2)),),
            eq_coeffs=sp.csr_matrix(np.array([[1.0, 1.0]])),
            eq_shift=np.array([1.0]),
        )
        sol = solve(program)
        assert sol.status == "optimal"
        np.testing.assert_allclose(sol.primal, [1.0, 0.0], atol=1e-7)
        assert abs(sol.objective_value - 1.0) < 1e-7

    def test_empty_interval_infeasible(self):
        # x >= 1 together with x <= 0
        program = ConicProgram(
            np.array([1.0]),
            (nonneg([[-1.0], [1.0]], [-1.0, 0.0]),),
        )
        assert solve(program).status == "infeasible"

    def test_unbounded_ray(self):
        program = ConicProgram(np.array([-1.0]), (nonneg([[-1.0]], [0.0]),))
        sol = solve(program)
        assert sol.status == "unbounded"
        assert sol.primal is not None and sol.primal[0] > 0

    def test_inconsistent_equalities(self):
        program = ConicProgram(
            np.array([1.0, 1.0]),
            (nonneg(-np.eye(2), np.full(2, 10.0)),),
            eq_coeffs=sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]])),
            eq_shift=np.array([1.0, 2.0]),
        )
        assert solve(program).status == "infeasible"

    def test_unbounded_cone_direction(self):
        # min -t with ||(x1, x2)|| <= t
        g_blk = np.array([[0.0, 0.0, -1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        program = ConicProgram(np.array([0.0, 0.0, -1.0]), (soc(g_blk, np.zeros(3)),))
        assert solve(program).status == "unbounded"

    def test_iteration_cap_reported(self):
        program = ball_projection_program([2.0, -1.0, 0.5])
        sol = solve(program, SolverSettings(max_iter=1))
        assert sol.status == "iteration-limit"
        assert set(sol.kkt_residuals) == {"primal", "dual", "gap"}


class TestProjectionBattery:
    def test_matches_closed_form(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            point = rng.uniform(-2.0, 2.0, 3)
            sol = solve(ball_projection_program(point))
            assert sol.status == "optimal"
            ref = max(0.0, float(np.linalg.norm(point)) - 1.0)
            assert abs(sol.objective_value - ref) < 1e-6
            if ref > 1e-3:
                np.testing.assert_allclose(
                    sol.primal[:3], point / np.linalg.norm(point), atol=1e-5)

    def test_matches_radial_grid(self):
        # independent check at fixed resolution along the optimal ray
        rng = np.random.default_rng(12)
        radii = np.arange(0.0, 1.0 + 1e-3, 1e-3)
        for _ in range(20):
            point = rng.uniform(-2.0, 2.0, 3)
            norm = np.linalg.norm(point)
            grid_obj = float(np.min(np.abs(norm - radii)))
            sol = solve(ball_projection_program(point))
            assert abs(sol.objective_value - grid_obj) < 1.5e-3

    def test_matches_planar_grid(self):
        point = np.array([1.3, -0.9])
        step = 2e-3
        xs = np.arange(-1.0, 1.0 + step, step)
        gx, gy = np.meshgrid(xs, xs)
        inside = gx ** 2 + gy ** 2 <= 1.0
        dist = np.hypot(gx - point[0], gy - point[1])
        grid_obj = float(np.min(np.where(inside, dist, np.inf)))
        sol = solve(ball_projection_program(point))
        assert abs(sol.objective_value - grid_obj) < 5e-3


class TestConstructedOptima:
    def test_inequality_battery(self):
        rng = np.random.default_rng(21)
        for _ in range(15):
            program, ref = random_socp(rng)
            sol = solve(program)
            assert sol.status == "optimal"
            assert abs(sol.objective_value - ref) < 1e-5 * (1 + abs(ref))
            assert max(sol.kkt_residuals.values()) < 1e-7

    def test_equality_battery(self):
        rng = np.random.default_rng(22)
        for _ in range(10):
            program, ref = random_socp(rng, with_eq=True)
            sol = solve(program)
            assert sol.status == "optimal"
            assert abs(sol.objective_value - ref) < 1e-5 * (1 + abs(ref))
            assert max(sol.kkt_residuals.values()) < 1e-7

    def test_primal_feasible_at_reported_optimum(self):
        rng = np.random.default_rng(23)
        program, _ = random_socp(rng, with_eq=True)
        sol = solve(program)
        g_mat, h, layout = program.stacked()
        slack = h - g_mat @ sol.primal
        assert layout.min_margin(slack) > -1e-7
        gap = program.eq_coeffs @ sol.primal - program.eq_shift
        assert np.max(np.abs(gap)) < 1e-6


class TestLinprogCrossCheck:
    def test_random_boxed_lps(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            n = int(rng.integers(2, 13))
            k = int(rng.integers(1, 6))
            g_box = np.vstack([np.eye(n), -np.eye(n)])
            h_box = np.ones(2 * n)
            g_extra = rng.standard_normal((k, n))
            h_extra = rng.uniform(0.3, 1.2, k)
            g_all = np.vstack([g_box, g_extra])
            h_all = np.concatenate([h_box, h_extra])
            c = rng.standard_normal(n)
            program = ConicProgram(c, (nonneg(g_all, h_all),))
            sol = solve(program)
            ref = linprog(c, A_ub=g_all, b_ub=h_all, bounds=(None, None), method="highs")
            assert sol.status == "optimal" and ref.success
            assert abs(sol.objective_value - ref.fun) < 1e-6 * (1 + abs(ref.fun))


class TestRobustness:
    def test_objective_scaling_keeps_argmin(self):
        # needs instances whose argmin is unique, else the comparison says nothing
        program = ball_projection_program([1.7, -0.6, 0.4])
        base = solve(program).primal
        scaled_program = ConicProgram(
            program.objective * 1e3, program.blocks, program.eq_coeffs, program.eq_shift)
        scaled = solve(scaled_program).primal
        assert np.max(np.abs(base - scaled)) < 1e-6 * (1 + np.max(np.abs(base)))

    def test_objective_scaling_keeps_vertex(self):
        rng = np.random.default_rng(44)
        n = 8
        c = rng.uniform(0.5, 2.0, n) * rng.choice([-1.0, 1.0], n)
        box = nonneg(np.vstack([np.eye(n), -np.eye(n)]), np.ones(2 * n))
        base = solve(ConicProgram(c, (box,))).primal
        scaled = solve(ConicProgram(c * 1e3, (box,))).primal
        np.testing.assert_allclose(base, -np.sign(c), atol=1e-7)
        assert np.max(np.abs(base - scaled)) < 1e-6

    def test_deterministic_resolve(self):
        rng = np.random.default_rng(42)
        program, _ = random_socp(rng, with_eq=True)
        first = solve(program)
        second = solve(program)
        assert first.primal.tobytes() == second.primal.tobytes()
        assert first.dual.tobytes() == second.dual.tobytes()
        assert first.iterations == second.iterations

    def test_tighter_tolerances_still_converge(self):
        sol = solve(ball_projection_program([1.5, 0.3, -0.2]),
                    SolverSettings(feastol=1e-10, abstol=1e-10, reltol=1e-10))
        assert sol.status == "optimal"
        assert max(sol.kkt_residuals.values()) < 1e-9


def _mixed_layout():
    blocks = (
        nonneg(-np.eye(3), np.zeros(3)),
        soc(np.zeros((3, 3)), [1.0, 0.0, 0.0]),
        soc(np.zeros((4, 3)), [1.0, 0.0, 0.0, 0.0]),
    )
    return _Layout(blocks)


def _interior(layout, raw):
    """Map raw numbers into a strictly interior cone point."""
    u = np.array(raw, dtype=float)
    out = u.copy()
    out[layout.orth] = 0.1 + np.abs(u[layout.orth])
    for _, idx in layout.groups:
        tail = u[idx[:, 1:]]
        out[idx[:, 0]] = np.linalg.norm(tail, axis=1) + 0.1 + np.abs(u[idx[:, 0]])
    return out


class TestConeAlgebra:
    @given(st.lists(st.floats(-3, 3), min_size=20, max_size=20))
    @hyp_settings(max_examples=25, deadline=None)
    def test_jordan_solve_inverts_product(self, raw):
        layout = _mixed_layout()
        lam = _interior(layout, raw[:10])
        v = np.array(raw[10:], dtype=float)
        recovered = layout.jordan_solve(lam, layout.jordan(lam, v))
        np.testing.assert_allclose(recovered, v, atol=1e-9)

    @given(st.lists(st.floats(-3, 3), min_size=20, max_size=20))
    @hyp_settings(max_examples=25, deadline=None)
    def test_scaling_maps_both_points_to_lambda(self, raw):
        layout = _mixed_layout()
        s = _interior(layout, raw[:10])
        z = _interior(layout, raw[10:])
        scaling = layout.scaling(s, z)
        np.testing.assert_allclose(scaling.w_mat @ z, scaling.wi_mat @ s, atol=1e-10)
        np.testing.assert_allclose(scaling.lam, scaling.w_mat @ z, atol=1e-12)

    @given(st.lists(st.floats(-2, 2), min_size=20, max_size=20))
    @hyp_settings(max_examples=25, deadline=None)
    def test_max_step_lands_on_boundary(self, raw):
        layout = _mixed_layout()
        u = _interior(layout, raw[:10])
        du = np.array(raw[10:], dtype=float)
        alpha = layout.max_step(u, du)
        assert alpha > 0
        if np.isfinite(alpha):
            assert abs(layout.min_margin(u + alpha * du)) < 1e-6
            assert layout.min_margin(u + 0.95 * alpha * du) > 0
