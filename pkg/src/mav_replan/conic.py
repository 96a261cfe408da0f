"""Cone programs and an embedded primal-dual interior-point solver.

Problems are stated in the standard form

    minimize    c'x
    subject to  A x = b
                G x + s = h,    s in K

where K is a Cartesian product of nonnegative-orthant segments and
second-order (Lorentz) cones, assembled from an ordered list of
:class:`ConeBlock` rows.  The solver embeds the problem in the
homogeneous self-dual model and runs a Mehrotra predictor-corrector
iteration with Nesterov-Todd scaling, so primal infeasibility and
unboundedness are detected by certificate rather than by divergence.

Small problems go through a dense Cholesky of the scaled normal
equations.  Larger ones whose rows are almost all local (a handful of
nonzeros each) plus a few dense coupling rows are solved by factoring
the local part sparse and folding the coupling rows in through a
low-rank update; the trajectory subproblems this package produces have
exactly that shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg

NONNEG = "nonneg"
SOC = "soc"

_STATUS_OPTIMAL = "optimal"
_STATUS_INFEASIBLE = "infeasible"
_STATUS_UNBOUNDED = "unbounded"
_STATUS_ITERLIMIT = "iteration-limit"
_STATUS_NUMERICAL = "numerical-failure"


class _FactorError(Exception):
    """Internal: factorization broke down beyond repair."""


def _as_csr(mat) -> sp.csr_matrix:
    out = sp.csr_matrix(mat, dtype=float)
    out.eliminate_zeros()
    return out


@dataclass(frozen=True)
class ConeBlock:
    """One cone membership: ``h - C x`` lies in the block's cone.

    kind "nonneg" means every component of the affine expression is
    nonnegative; "soc" means the expression (d >= 2 components, first one
    the radius) lies in the second-order cone.
    """

    kind: str
    coeffs: sp.csr_matrix
    shift: np.ndarray

    def __post_init__(self):
        if self.kind not in (NONNEG, SOC):
            raise ValueError(f"unknown cone kind {self.kind!r}")
        object.__setattr__(self, "coeffs", _as_csr(self.coeffs))
        object.__setattr__(self, "shift", np.asarray(self.shift, dtype=float).ravel())
        if self.coeffs.shape[0] != self.shift.shape[0]:
            raise ValueError(
                f"cone block rows mismatch: {self.coeffs.shape[0]} coefficient rows, "
                f"{self.shift.shape[0]} shift entries"
            )
        if self.kind == SOC and self.dim < 2:
            raise ValueError("second-order cone blocks need dimension >= 2")
        if self.dim == 0:
            raise ValueError("empty cone block")
        if not np.all(np.isfinite(self.shift)):
            raise ValueError("non-finite cone shift")

    @property
    def dim(self) -> int:
        return self.shift.shape[0]


@dataclass(frozen=True)
class ConicProgram:
    """Linear objective over the intersection of equalities and cone rows."""

    objective: np.ndarray
    blocks: tuple
    eq_coeffs: Optional[sp.csr_matrix] = None
    eq_shift: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "objective", np.asarray(self.objective, dtype=float).ravel())
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not np.all(np.isfinite(self.objective)):
            raise ValueError("non-finite objective vector")
        if not self.blocks:
            raise ValueError("a cone program needs at least one cone block")
        n = self.num_vars
        for i, blk in enumerate(self.blocks):
            if not isinstance(blk, ConeBlock):
                raise ValueError(f"block {i} is not a ConeBlock")
            if blk.coeffs.shape[1] != n:
                raise ValueError(
                    f"block {i} has {blk.coeffs.shape[1]} columns, expected {n}"
                )
        if (self.eq_coeffs is None) != (self.eq_shift is None):
            raise ValueError("equality coefficients and shift must come together")
        if self.eq_coeffs is not None:
            object.__setattr__(self, "eq_coeffs", _as_csr(self.eq_coeffs))
            object.__setattr__(self, "eq_shift", np.asarray(self.eq_shift, dtype=float).ravel())
            if self.eq_coeffs.shape != (self.eq_shift.shape[0], n):
                raise ValueError("equality system dimensions inconsistent")
            if not np.all(np.isfinite(self.eq_shift)):
                raise ValueError("non-finite equality shift")
        # every variable must be touched by the objective or some constraint,
        # otherwise the model almost certainly dropped a term
        touched = self.objective != 0.0
        for blk in self.blocks:
            touched = touched | (abs(blk.coeffs).sum(axis=0).A1 > 0)
        if self.eq_coeffs is not None:
            touched = touched | (abs(self.eq_coeffs).sum(axis=0).A1 > 0)
        if not np.all(touched):
            free = np.flatnonzero(~touched)
            raise ValueError(f"variables {free.tolist()} appear in no constraint or objective")

    @property
    def num_vars(self) -> int:
        return self.objective.shape[0]

    @property
    def cone_dim(self) -> int:
        return sum(blk.dim for blk in self.blocks)

    def stacked(self):
        """Concatenate the cone rows into (G, h) plus an index layout."""
        g_mat = sp.vstack([blk.coeffs for blk in self.blocks], format="csr")
        h = np.concatenate([blk.shift for blk in self.blocks])
        return g_mat, h, _Layout(self.blocks)

    def dump(self, path) -> None:
        """Write the program as plain-text triplets for offline inspection.

        Line format, in order: ``dims n p m``, one ``cone kind dim`` line per
        block, then ``c i v``, ``A i j v``, ``b i v``, ``G i j v``, ``h i v``
        entries (zero entries omitted, indices 0-based, G/h rows in stacked
        block order).
        """
        g_mat, h, _ = self.stacked()
        p = 0 if self.eq_coeffs is None else self.eq_coeffs.shape[0]
        lines = [f"dims {self.num_vars} {p} {self.cone_dim}"]
        for blk in self.blocks:
            lines.append(f"cone {blk.kind} {blk.dim}")
        for i in np.flatnonzero(self.objective):
            lines.append(f"c {i} {float(self.objective[i])!r}")
        if self.eq_coeffs is not None:
            eq = self.eq_coeffs.tocoo()
            for i, j, v in zip(eq.row, eq.col, eq.data):
                lines.append(f"A {i} {j} {float(v)!r}")
            for i in np.flatnonzero(self.eq_shift):
                lines.append(f"b {i} {float(self.eq_shift[i])!r}")
        gco = g_mat.tocoo()
        for i, j, v in zip(gco.row, gco.col, gco.data):
            lines.append(f"G {i} {j} {float(v)!r}")
        for i in np.flatnonzero(h):
            lines.append(f"h {i} {float(h[i])!r}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def load_program(path) -> ConicProgram:
    """Rebuild a program written by :meth:`ConicProgram.dump`."""
    kinds = []
    entries = {"c": [], "A": [], "b": [], "G": [], "h": []}
    n = p = m = 0
    with open(path) as fh:
        for raw in fh:
            parts = raw.split()
            if not parts:
                continue
            if parts[0] == "dims":
                n, p, m = (int(v) for v in parts[1:4])
            elif parts[0] == "cone":
                kinds.append((parts[1], int(parts[2])))
            else:
                entries[parts[0]].append(tuple(float(v) for v in parts[1:]))

    def dense(key, size):
        vec = np.zeros(size)
        for item in entries[key]:
            vec[int(item[0])] = item[-1]
        return vec

    def sparse(key, rows):
        trips = entries[key]
        if trips:
            i, j, v = zip(*trips)
        else:
            i = j = v = ()
        return sp.csr_matrix((v, (np.array(i, dtype=int), np.array(j, dtype=int))), shape=(rows, n))

    g_mat = sparse("G", m)
    h = dense("h", m)
    blocks = []
    row = 0
    for kind, dim in kinds:
        blocks.append(ConeBlock(kind, g_mat[row:row + dim], h[row:row + dim]))
        row += dim
    eq = (sparse("A", p), dense("b", p)) if p else (None, None)
    return ConicProgram(dense("c", n), tuple(blocks), eq[0], eq[1])


@dataclass(frozen=True)
class SolverSettings:
    feastol: float = 1e-8
    abstol: float = 1e-8
    reltol: float = 1e-8
    max_iter: int = 100
    step_fraction: float = 0.99
    refine_steps: int = 1
    verbose: bool = False


@dataclass(frozen=True)
class ConicSolution:
    status: str
    primal: Optional[np.ndarray]
    dual: Optional[np.ndarray]
    eq_dual: Optional[np.ndarray]
    objective_value: Optional[float]
    kkt_residuals: dict
    iterations: int

    @property
    def optimal(self) -> bool:
        return self.status == _STATUS_OPTIMAL


class _Layout:
    """Index bookkeeping for a concatenated cone vector.

    Orthant coordinates are gathered into one fancy-index array and SOC
    blocks are grouped by dimension, so every Jordan-algebra operation
    runs vectorized over (num_blocks, dim) views instead of per-block
    Python loops.
    """

    def __init__(self, blocks):
        orth = []
        socs = {}
        offset = 0
        self.dim = 0
        for blk in blocks:
            if blk.kind == NONNEG:
                orth.extend(range(offset, offset + blk.dim))
            else:
                socs.setdefault(blk.dim, []).append(offset)
            offset += blk.dim
        self.dim = offset
        self.orth = np.array(orth, dtype=int)
        self.groups = []
        for d in sorted(socs):
            starts = np.array(socs[d], dtype=int)
            idx = starts[:, None] + np.arange(d)[None, :]
            self.groups.append((d, idx))
        self.degree = self.orth.size + sum(idx.shape[0] for _, idx in self.groups)
        self._w_pattern()

    def _w_pattern(self):
        # fixed sparsity of the scaling matrix: diagonal on the orthant,
        # dense d x d blocks on each cone
        rows = [self.orth]
        cols = [self.orth]
        for d, idx in self.groups:
            k = idx.shape[0]
            r = np.repeat(idx, d, axis=1).ravel()
            c = np.tile(idx, (1, d)).ravel()
            rows.append(r)
            cols.append(c)
        self._w_rows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        self._w_cols = np.concatenate(cols) if cols else np.zeros(0, dtype=int)

    def identity(self) -> np.ndarray:
        e = np.zeros(self.dim)
        e[self.orth] = 1.0
        for _, idx in self.groups:
            e[idx[:, 0]] = 1.0
        return e

    def jordan(self, u, v) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.orth] = u[self.orth] * v[self.orth]
        for _, idx in self.groups:
            ub, vb = u[idx], v[idx]
            out[idx[:, 0]] = np.sum(ub * vb, axis=1)
            out[idx[:, 1:]] = ub[:, :1] * vb[:, 1:] + vb[:, :1] * ub[:, 1:]
        return out

    def jordan_solve(self, lmb, v) -> np.ndarray:
        """Solve lmb o u = v for u; lmb must be cone-interior."""
        out = np.zeros(self.dim)
        out[self.orth] = v[self.orth] / lmb[self.orth]
        for _, idx in self.groups:
            lb, vb = lmb[idx], v[idx]
            det = lb[:, 0] ** 2 - np.sum(lb[:, 1:] ** 2, axis=1)
            u0 = (lb[:, 0] * vb[:, 0] - np.sum(lb[:, 1:] * vb[:, 1:], axis=1)) / det
            out[idx[:, 0]] = u0
            out[idx[:, 1:]] = (vb[:, 1:] - u0[:, None] * lb[:, 1:]) / lb[:, :1]
        return out

    def max_step(self, u, du) -> float:
        """Largest alpha with u + alpha*du still in the cone (inf if any)."""
        alpha = np.inf
        uo, do = u[self.orth], du[self.orth]
        neg = do < 0
        if np.any(neg):
            alpha = min(alpha, float(np.min(-uo[neg] / do[neg])))
        for _, idx in self.groups:
            ub, db = u[idx], du[idx]
            a = db[:, 0] ** 2 - np.sum(db[:, 1:] ** 2, axis=1)
            b = ub[:, 0] * db[:, 0] - np.sum(ub[:, 1:] * db[:, 1:], axis=1)
            c = np.maximum(ub[:, 0] ** 2 - np.sum(ub[:, 1:] ** 2, axis=1), 0.0)
            cand = np.full((idx.shape[0], 2), np.inf)
            lin = np.abs(a) < 1e-14
            with np.errstate(divide="ignore", invalid="ignore"):
                lin_root = np.where(lin & (b < 0), -c / (2 * b), np.inf)
                disc = b * b - a * c
                ok = (~lin) & (disc >= 0)
                sq = np.sqrt(np.where(ok, disc, 0.0))
                cand[:, 0] = np.where(ok, (-b - sq) / np.where(ok, a, 1.0), np.inf)
                cand[:, 1] = np.where(ok, (-b + sq) / np.where(ok, a, 1.0), np.inf)
            cand = np.concatenate([cand, lin_root[:, None]], axis=1)
            # boundary hit must keep the radius coordinate nonnegative
            with np.errstate(invalid="ignore"):
                radius = ub[:, :1] + np.where(np.isfinite(cand), cand, 0.0) * db[:, :1]
                feas = np.isfinite(cand) & (cand > 1e-14) & (radius >= -1e-10 * (1 + np.abs(ub[:, :1])))
            cand = np.where(feas, cand, np.inf)
            blk = float(np.min(cand)) if cand.size else np.inf
            alpha = min(alpha, blk)
        return alpha

    def min_margin(self, u) -> float:
        """Distance to the cone boundary, negative outside."""
        margin = np.inf
        if self.orth.size:
            margin = float(np.min(u[self.orth]))
        for _, idx in self.groups:
            ub = u[idx]
            margin = min(margin, float(np.min(ub[:, 0] - np.linalg.norm(ub[:, 1:], axis=1))))
        return margin

    def scaling(self, s, z):
        """Nesterov-Todd scaling at (s, z); None if either leaves the cone."""
        wvals = [np.zeros(0)]
        if self.orth.size:
            so, zo = s[self.orth], z[self.orth]
            if np.any(so <= 0) or np.any(zo <= 0):
                return None
            wvals = [np.sqrt(so / zo)]
        data_w = [wvals[0]]
        data_wi = [1.0 / wvals[0] if wvals[0].size else wvals[0]]
        for d, idx in self.groups:
            sb, zb = s[idx], z[idx]
            snu2 = sb[:, 0] ** 2 - np.sum(sb[:, 1:] ** 2, axis=1)
            znu2 = zb[:, 0] ** 2 - np.sum(zb[:, 1:] ** 2, axis=1)
            if np.any(snu2 <= 0) or np.any(znu2 <= 0) or np.any(sb[:, 0] <= 0) or np.any(zb[:, 0] <= 0):
                return None
            snu, znu = np.sqrt(snu2), np.sqrt(znu2)
            sbar = sb / snu[:, None]
            zbar = zb / znu[:, None]
            gam = np.sqrt((1.0 + np.sum(sbar * zbar, axis=1)) / 2.0)
            wbar = (sbar + np.concatenate([zbar[:, :1], -zbar[:, 1:]], axis=1)) / (2 * gam[:, None])
            eta = np.sqrt(snu / znu)
            w0 = wbar[:, 0]
            w1 = wbar[:, 1:]
            outer = w1[:, :, None] * w1[:, None, :] / (1.0 + w0)[:, None, None]
            body = np.eye(d - 1)[None, :, :] + outer
            blk = np.empty((idx.shape[0], d, d))
            blk[:, 0, 0] = w0
            blk[:, 0, 1:] = w1
            blk[:, 1:, 0] = w1
            blk[:, 1:, 1:] = body
            inv = blk.copy()
            inv[:, 0, 1:] *= -1.0
            inv[:, 1:, 0] *= -1.0
            data_w.append((eta[:, None, None] * blk).ravel())
            data_wi.append((inv / eta[:, None, None]).ravel())
        shape = (self.dim, self.dim)
        w_mat = sp.csr_matrix((np.concatenate(data_w), (self._w_rows, self._w_cols)), shape=shape)
        wi_mat = sp.csr_matrix((np.concatenate(data_wi), (self._w_rows, self._w_cols)), shape=shape)
        lam = w_mat @ z
        # a scaled point whose Jordan head underflows cannot be divided by
        if not np.all(np.isfinite(lam)) or self.min_margin(lam) <= 0.0:
            return None
        return _Scaling(w_mat, wi_mat, lam)


@dataclass
class _Scaling:
    w_mat: sp.csr_matrix
    wi_mat: sp.csr_matrix
    lam: np.ndarray


class _Newton:
    """Factorization of the NT-scaled KKT system for one iteration.

    Eliminates the cone block through the normal equations
    H = G'W^-2 G, then (if equalities are present) a dense Schur
    complement over the equality multipliers.  H is factored dense for
    small problems; when the scaled rows split into many local rows and
    a few dense coupling rows, the local part is factored sparse and
    the coupling rows enter through a Woodbury correction.
    """

    # structured path cutoffs: problem size where the dense Cholesky
    # starts to hurt, per-row nonzero count separating local rows from
    # coupling rows, and a cap on how many coupling rows stay low-rank
    _STRUCT_MIN_VARS = 200
    _COUPLING_MAX = 40

    def __init__(self, g_mat, a_mat, scaling, refine):
        self.g_mat = g_mat
        self.a_mat = a_mat
        self.scaling = scaling
        self.refine = refine
        self.m_mat = (scaling.wi_mat @ g_mat).tocsr()
        n = self.m_mat.shape[1]
        self.chol = None
        self._split = None
        if n >= self._STRUCT_MIN_VARS:
            self._factor_structured(n)
        if self._split is None:
            self._factor_dense(n)
        if a_mat is not None:
            at_dense = a_mat.toarray().T
            hia = self._solve_h(at_dense)
            schur = a_mat @ hia
            p = schur.shape[0]
            sreg = 1e-12 * (1.0 + float(np.max(np.abs(np.diag(schur))))) if p else 0.0
            self.schur_lu = scipy.linalg.lu_factor(schur + sreg * np.eye(p), check_finite=False)

    def _factor_dense(self, n):
        h_dense = (self.m_mat.T @ self.m_mat).toarray()
        reg = 1e-12 * (1.0 + float(np.max(np.abs(np.diag(h_dense)))))
        for _ in range(4):
            try:
                self.chol = scipy.linalg.cho_factor(
                    h_dense + reg * np.eye(n), lower=True, check_finite=False)
                return
            except scipy.linalg.LinAlgError:
                reg *= 1e4
        raise _FactorError("normal equations not positive definite")

    def _factor_structured(self, n):
        nnz = np.diff(self.m_mat.indptr)
        cut = max(32, n // 8)
        heavy = np.flatnonzero(nnz > cut)
        k = heavy.size
        if k > self._COUPLING_MAX:
            return
        light = np.flatnonzero(nnz <= cut)
        m_light = self.m_mat[light]
        f = self.m_mat[heavy].toarray() if k else np.zeros((0, n))
        h_light = (m_light.T @ m_light).tocsc()
        diag = h_light.diagonal() + (f * f).sum(axis=0)
        reg = 1e-12 * (1.0 + float(diag.max()))
        try:
            lu = scipy.sparse.linalg.splu(h_light + reg * sp.eye(n, format="csc"))
            fw = lu.solve(f.T) if k else np.zeros((n, 0))
            cap_lu = scipy.linalg.lu_factor(np.eye(k) + f @ fw,
                                            check_finite=False) if k else None
            probe = lu.solve(np.ones(n))
        except (RuntimeError, scipy.linalg.LinAlgError, ValueError):
            return
        if not np.all(np.isfinite(probe)):
            return
        self._split = (lu, f, fw, cap_lu)

    def _solve_h(self, b):
        if self._split is not None:
            lu, f, fw, cap_lu = self._split
            t = lu.solve(b)
            if f.shape[0]:
                w = scipy.linalg.lu_solve(cap_lu, f @ t, check_finite=False)
                t = t - fw @ w
            return t
        return scipy.linalg.cho_solve(self.chol, b, check_finite=False)

    def _base_solve(self, bx, by, bz):
        rhs = bx + self.m_mat.T @ (self.scaling.wi_mat @ bz)
        if self.a_mat is None:
            ux = self._solve_h(rhs)
            uy = np.zeros(0)
        else:
            t1 = self._solve_h(rhs)
            uy = scipy.linalg.lu_solve(self.schur_lu, self.a_mat @ t1 - by, check_finite=False)
            ux = self._solve_h(rhs - self.a_mat.T @ uy)
        uz = self.scaling.wi_mat @ (self.scaling.wi_mat @ (self.g_mat @ ux - bz))
        return ux, uy, uz

    def solve(self, bx, by, bz):
        ux, uy, uz = self._base_solve(bx, by, bz)
        for _ in range(self.refine):
            e1 = self.g_mat.T @ uz - bx
            if self.a_mat is not None:
                e1 = e1 + self.a_mat.T @ uy
                e2 = self.a_mat @ ux - by
            else:
                e2 = np.zeros(0)
            e3 = self.g_mat @ ux - self.scaling.w_mat @ (self.scaling.w_mat @ uz) - bz
            cx, cy, cz = self._base_solve(e1, e2, e3)
            ux, uy, uz = ux - cx, uy - cy, uz - cz
        return ux, uy, uz


def _kkt_check(c, a_mat, b, g_mat, h, layout, x, y, z):
    """Honest residuals at a candidate primal-dual point."""
    s = h - g_mat @ x
    cone_gap = max(0.0, -layout.min_margin(s))
    pres = cone_gap / (1.0 + float(np.linalg.norm(h, np.inf)) if h.size else 1.0)
    if a_mat is not None:
        eqres = float(np.linalg.norm(a_mat @ x - b, np.inf)) / (1.0 + float(np.linalg.norm(b, np.inf)))
        pres = max(pres, eqres)
    dvec = c + g_mat.T @ z
    if a_mat is not None:
        dvec = dvec + a_mat.T @ y
    dres = float(np.linalg.norm(dvec, np.inf)) / (1.0 + float(np.linalg.norm(c, np.inf)))
    dres = max(dres, max(0.0, -layout.min_margin(z)))
    pcost = float(c @ x)
    dcost = -float(h @ z) - (float(b @ y) if a_mat is not None else 0.0)
    gap = abs(pcost - dcost) / (1.0 + abs(pcost))
    return {"primal": pres, "dual": dres, "gap": gap}


def solve(program: ConicProgram, settings: Optional[SolverSettings] = None) -> ConicSolution:
    """Run the interior-point iteration on a well-formed program.

    Always returns a ConicSolution; numerical breakdown is reported
    through the status field, never raised.
    """
    cfg = settings or SolverSettings()
    g_mat, h, layout = program.stacked()
    a_mat = program.eq_coeffs
    b = program.eq_shift if a_mat is not None else np.zeros(0)
    # iterate on a unit-scale objective so huge penalty weights do not
    # push the duals (and the normal-equation errors) to matching size
    c_raw = program.objective
    cost_scale = max(1.0, float(np.linalg.norm(c_raw, np.inf)))
    c = c_raw / cost_scale
    n = program.num_vars
    p = a_mat.shape[0] if a_mat is not None else 0

    x = np.zeros(n)
    y = np.zeros(p)
    s = layout.identity()
    z = layout.identity()
    tau, kappa = 1.0, 1.0

    norm_b = float(np.linalg.norm(b, np.inf)) if p else 0.0
    norm_h = float(np.linalg.norm(h, np.inf)) if h.size else 0.0
    norm_c = float(np.linalg.norm(c, np.inf))

    def package(status, iterations):
        xh = x / tau
        yh, zh = y * cost_scale / tau, z * cost_scale / tau
        resid = _kkt_check(c_raw, a_mat, b, g_mat, h, layout, xh, yh, zh)
        # the status certifies the unit-cost iteration; residuals against
        # the caller's data are still reported at true scale above
        scaled = _kkt_check(c, a_mat, b, g_mat, h, layout, xh, y / tau, z / tau)
        certified = max(scaled.values()) <= 10 * cfg.feastol
        if status == _STATUS_OPTIMAL and not certified:
            status = _STATUS_NUMERICAL
        elif status == _STATUS_NUMERICAL and certified:
            # breakdown right at the boundary of an already-solved problem
            status = _STATUS_OPTIMAL
        obj = float(c_raw @ xh) if status in (_STATUS_OPTIMAL, _STATUS_ITERLIMIT) else None
        return ConicSolution(
            status=status,
            primal=xh,
            dual=zh,
            eq_dual=yh if p else None,
            objective_value=obj,
            kkt_residuals=resid,
            iterations=iterations,
        )

    def certificate(status, iterations, primal, dual, eq_dual):
        nan = {"primal": np.nan, "dual": np.nan, "gap": np.nan}
        return ConicSolution(status, primal, dual, eq_dual, None, nan, iterations)

    for it in range(cfg.max_iter + 1):
        rx = g_mat.T @ z + c * tau + (a_mat.T @ y if p else 0.0)
        ry = a_mat @ x - b * tau if p else np.zeros(0)
        rz = g_mat @ x + s - h * tau
        rtau = -float(c @ x) - float(h @ z) - kappa - (float(b @ y) if p else 0.0)
        mu = (float(s @ z) + tau * kappa) / (layout.degree + 1)

        xh, sh, zh = x / tau, s / tau, z / tau
        pres = float(np.linalg.norm(rz, np.inf)) / tau / (1.0 + norm_h)
        if p:
            pres = max(pres, float(np.linalg.norm(ry, np.inf)) / tau / (1.0 + norm_b))
        dres = float(np.linalg.norm(rx, np.inf)) / tau / (1.0 + norm_c)
        pcost = float(c @ xh)
        absgap = float(sh @ zh)
        relgap = absgap / max(1.0, abs(pcost))
        if cfg.verbose:
            print(f"it {it:3d}  pres {pres:9.2e}  dres {dres:9.2e}  "
                  f"gap {absgap:9.2e}  rel {relgap:9.2e}  mu {mu:9.2e}  "
                  f"tau {tau:9.2e}  kap {kappa:9.2e}")
        if pres <= cfg.feastol and dres <= cfg.feastol and (absgap <= cfg.abstol or relgap <= cfg.reltol):
            return package(_STATUS_OPTIMAL, it)

        if it > 0:
            by_hz = float(h @ z) + (float(b @ y) if p else 0.0)
            if by_hz < -1e-14:
                scalef = -1.0 / by_hz
                yc, zc = y * scalef, z * scalef
                cert = g_mat.T @ zc + (a_mat.T @ yc if p else 0.0)
                size = max(1.0, float(np.linalg.norm(zc, np.inf)),
                           float(np.linalg.norm(yc, np.inf)) if p else 0.0)
                if float(np.linalg.norm(cert, np.inf)) <= cfg.feastol * size:
                    return certificate(_STATUS_INFEASIBLE, it, None, zc, yc if p else None)
            ctx = float(c @ x)
            if ctx < -1e-14:
                scalef = -1.0 / ctx
                xc, sc = x * scalef, s * scalef
                size = max(1.0, float(np.linalg.norm(xc, np.inf)))
                ok = float(np.linalg.norm(g_mat @ xc + sc, np.inf)) <= cfg.feastol * size
                if p:
                    ok = ok and float(np.linalg.norm(a_mat @ xc, np.inf)) <= cfg.feastol * size
                if ok:
                    return certificate(_STATUS_UNBOUNDED, it, xc, None, None)

        if it == cfg.max_iter:
            return package(_STATUS_ITERLIMIT, it)

        scaling = layout.scaling(s, z)
        if scaling is None:
            return package(_STATUS_NUMERICAL, it)
        try:
            newton = _Newton(g_mat, a_mat, scaling, cfg.refine_steps)
        except _FactorError:
            return package(_STATUS_NUMERICAL, it)

        x2, y2, z2 = newton.solve(-c, b, h)
        denom = float(c @ x2) + float(h @ z2) + (float(b @ y2) if p else 0.0) - kappa / tau
        if not np.isfinite(denom) or denom >= 0:
            return package(_STATUS_NUMERICAL, it)

        lam = scaling.lam
        lam_sq = layout.jordan(lam, lam)
        e = layout.identity()

        def direction(fx, fy, fz, ft, ds_rhs, dk_rhs):
            tmp = scaling.w_mat @ layout.jordan_solve(lam, ds_rhs)
            x1, y1, z1 = newton.solve(-fx, -fy, -fz - tmp)
            num = ft - dk_rhs / tau - float(c @ x1) - float(h @ z1) - (float(b @ y1) if p else 0.0)
            dtau = num / denom
            dx = x1 + dtau * x2
            dy = y1 + dtau * y2 if p else y1
            dz = z1 + dtau * z2
            ds = tmp - scaling.w_mat @ (scaling.w_mat @ dz)
            dkap = (dk_rhs - kappa * dtau) / tau
            return dx, dy, dz, dtau, ds, dkap

        # predictor: aim straight at the complementarity target
        dxa, dya, dza, dta, dsa, dka = direction(rx, ry, rz, rtau, -lam_sq, -tau * kappa)
        alpha_aff = min(layout.max_step(s, dsa), layout.max_step(z, dza))
        if dta < 0:
            alpha_aff = min(alpha_aff, -tau / dta)
        if dka < 0:
            alpha_aff = min(alpha_aff, -kappa / dka)
        alpha_aff = min(1.0, alpha_aff)
        sigma = (1.0 - alpha_aff) ** 3

        corr = layout.jordan(scaling.wi_mat @ dsa, scaling.w_mat @ dza)
        ds_rhs = -lam_sq - corr + sigma * mu * e
        dk_rhs = -tau * kappa - dta * dka + sigma * mu
        shrink = 1.0 - sigma
        dx, dy, dz, dtau, ds, dkap = direction(
            shrink * rx, shrink * ry, shrink * rz, shrink * rtau, ds_rhs, dk_rhs)

        alpha_max = min(layout.max_step(s, ds), layout.max_step(z, dz))
        if dtau < 0:
            alpha_max = min(alpha_max, -tau / dtau)
        if dkap < 0:
            alpha_max = min(alpha_max, -kappa / dkap)
        if alpha_max <= 1e-10 or not np.isfinite(float(np.sum(dx))):
            return package(_STATUS_NUMERICAL, it)
        alpha = min(cfg.step_fraction * alpha_max, 1.0)

        # interior guard: roundoff near the boundary can push an iterate out
        for _ in range(40):
            s_new = s + alpha * ds
            z_new = z + alpha * dz
            tau_new = tau + alpha * dtau
            kappa_new = kappa + alpha * dkap
            if (layout.min_margin(s_new) > 0 and layout.min_margin(z_new) > 0
                    and tau_new > 0 and kappa_new > 0):
                break
            alpha *= 0.8
        else:
            return package(_STATUS_NUMERICAL, it)

        x = x + alpha * dx
        if p:
            y = y + alpha * dy
        z, s, tau, kappa = z_new, s_new, tau_new, kappa_new

    return package(_STATUS_ITERLIMIT, cfg.max_iter)
