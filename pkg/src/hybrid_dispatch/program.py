"""Convex program assembly contract and its HiGHS backend.

A program is: ``min c.x + sum(quad * x**2) + offset`` subject to
``row_lo <= A x <= row_hi`` and ``lb <= x <= ub``. Every dispatch model in
this package (hindsight, single-period, tracking, look-ahead, prox steps) is
expressed in this form, so any LP/QP method could back it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import clarabel
import highspy
import numpy as np
import scipy.sparse as sp

INF = highspy.kHighsInf


class SolverError(RuntimeError):
    """The backend failed for a reason other than infeasibility."""


class InfeasibleProgramError(RuntimeError):
    """Program has no feasible point; ``groups`` names the constraint groups
    that had to be relaxed to restore feasibility."""

    def __init__(self, groups: list[str], message: str = ""):
        self.groups = list(groups)
        text = message or "infeasible program"
        super().__init__(f"{text} (binding groups: {', '.join(self.groups) or 'unknown'})")


@dataclass(frozen=True)
class SolverSettings:
    feasibility_tol: float = 1e-9
    optimality_tol: float = 1e-9
    iteration_cap: int = 10_000_000
    deterministic: bool = True

    def __post_init__(self):
        if not (self.feasibility_tol > 0 and self.optimality_tol > 0):
            raise ValueError("solver tolerances must be positive")


@dataclass(frozen=True)
class ConvexProgram:
    c: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    A: sp.csr_matrix
    row_lo: np.ndarray
    row_hi: np.ndarray
    quad: np.ndarray
    offset: float = 0.0
    row_groups: tuple[tuple[str, np.ndarray], ...] = ()
    col_groups: tuple[tuple[str, np.ndarray], ...] = ()
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.c)

    @property
    def is_quadratic(self) -> bool:
        return bool(np.any(self.quad != 0.0))

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.c @ x + self.quad @ (x * x) + self.offset)

    def residuals(self, x) -> dict[str, float]:
        """Largest row and bound violations of ``x`` (independent of any solver)."""
        x = np.asarray(x, dtype=float)
        ax = self.A @ x
        row = np.maximum(self.row_lo - ax, 0.0) + np.maximum(ax - self.row_hi, 0.0)
        bnd = np.maximum(self.lb - x, 0.0) + np.maximum(x - self.ub, 0.0)
        return {
            "rows": float(row.max(initial=0.0)),
            "bounds": float(bnd.max(initial=0.0)),
        }


class ProgramBuilder:
    """Incremental, vectorised assembly of a :class:`ConvexProgram`."""

    def __init__(self):
        self._c: list[np.ndarray] = []
        self._lb: list[np.ndarray] = []
        self._ub: list[np.ndarray] = []
        self._quad: list[np.ndarray] = []
        self._col_groups: list[tuple[str, np.ndarray]] = []
        self.n = 0
        self.m = 0
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []
        self._rlo: list[np.ndarray] = []
        self._rhi: list[np.ndarray] = []
        self._row_groups: dict[str, list[np.ndarray]] = {}
        self.offset = 0.0

    def add_vars(self, count: int, lb=0.0, ub=INF, cost=0.0, group: str = "") -> np.ndarray:
        idx = np.arange(self.n, self.n + count)
        self._c.append(np.broadcast_to(np.asarray(cost, float), (count,)).copy())
        self._lb.append(np.broadcast_to(np.asarray(lb, float), (count,)).copy())
        self._ub.append(np.broadcast_to(np.asarray(ub, float), (count,)).copy())
        self._quad.append(np.zeros(count))
        if group:
            self._col_groups.append((group, idx))
        self.n += count
        return idx

    def add_rows(self, count: int, lo, hi, group: str) -> np.ndarray:
        idx = np.arange(self.m, self.m + count)
        self._rlo.append(np.broadcast_to(np.asarray(lo, float), (count,)).copy())
        self._rhi.append(np.broadcast_to(np.asarray(hi, float), (count,)).copy())
        self._row_groups.setdefault(group, []).append(idx)
        self.m += count
        return idx

    def add_coef(self, rows, cols, vals):
        rows, cols, vals = np.broadcast_arrays(
            np.asarray(rows), np.asarray(cols), np.asarray(vals, dtype=float))
        self._rows.append(rows.ravel())
        self._cols.append(cols.ravel())
        self._vals.append(vals.ravel())

    def build(self, metadata: dict | None = None) -> ConvexProgram:
        cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0)
        if self._rows:
            A = sp.csr_matrix(
                (cat(self._vals), (cat(self._rows).astype(np.int64), cat(self._cols).astype(np.int64))),
                shape=(self.m, self.n))
        else:
            A = sp.csr_matrix((self.m, self.n))
        groups = tuple((g, np.concatenate(ix)) for g, ix in self._row_groups.items())
        return ConvexProgram(
            c=cat(self._c), lb=cat(self._lb), ub=cat(self._ub), A=A,
            row_lo=cat(self._rlo), row_hi=cat(self._rhi), quad=cat(self._quad),
            offset=self.offset, row_groups=groups, col_groups=tuple(self._col_groups),
            metadata=dict(metadata or {}))


@dataclass(frozen=True)
class Solution:
    x: np.ndarray
    objective: float
    status: str
    wall_time: float
    row_dual: np.ndarray | None = None


def strict_convexity_regularizer(program: ConvexProgram, eps: float = 1e-8,
                                 columns=None) -> ConvexProgram:
    """Add ``eps * ||x_S||^2`` on the selected columns so the argmin is unique there."""
    if eps == 0.0:
        return program
    if eps < 0.0:
        raise ValueError("regularizer weight must be nonnegative")
    quad = program.quad.copy()
    cols = np.arange(program.n) if columns is None else np.asarray(columns)
    quad[cols] += eps
    meta = dict(program.metadata)
    meta["regularizer_eps"] = eps
    meta["regularized_columns"] = int(len(cols))
    return replace(program, quad=quad, metadata=meta)


def _highs(settings: SolverSettings) -> highspy.Highs:
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("primal_feasibility_tolerance", settings.feasibility_tol)
    h.setOptionValue("dual_feasibility_tolerance", settings.optimality_tol)
    h.setOptionValue("simplex_iteration_limit", int(settings.iteration_cap))
    h.setOptionValue("qp_iteration_limit", int(settings.iteration_cap))
    if settings.deterministic:
        h.setOptionValue("threads", 1)
        h.setOptionValue("random_seed", 0)
    return h


def _to_highs_model(program: ConvexProgram) -> highspy.HighsModel:
    lp = highspy.HighsLp()
    lp.num_col_ = program.n
    lp.num_row_ = program.A.shape[0]
    lp.col_cost_ = np.asarray(program.c, dtype=float)
    lp.col_lower_ = np.where(np.isfinite(program.lb), program.lb, -INF)
    lp.col_upper_ = np.where(np.isfinite(program.ub), program.ub, INF)
    lp.row_lower_ = np.where(np.isfinite(program.row_lo), program.row_lo, -INF)
    lp.row_upper_ = np.where(np.isfinite(program.row_hi), program.row_hi, INF)
    lp.offset_ = float(program.offset)
    csc = program.A.tocsc()
    csc.sort_indices()
    lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    lp.a_matrix_.start_ = csc.indptr.astype(np.int32)
    lp.a_matrix_.index_ = csc.indices.astype(np.int32)
    lp.a_matrix_.value_ = csc.data.astype(float)
    model = highspy.HighsModel()
    model.lp_ = lp
    if program.is_quadratic:
        nz = np.flatnonzero(program.quad)
        hess = highspy.HighsHessian()
        hess.dim_ = program.n
        hess.format_ = highspy.HessianFormat.kTriangular
        counts = np.zeros(program.n, dtype=np.int32)
        counts[nz] = 1
        hess.start_ = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        hess.index_ = nz.astype(np.int32)
        hess.value_ = 2.0 * program.quad[nz]
        model.hessian_ = hess
    return model


def _bound_conflicts(program: ConvexProgram) -> list[str]:
    bad = np.flatnonzero(program.lb > program.ub + 1e-12)
    if len(bad) == 0:
        return []
    names = [g for g, ix in program.col_groups if np.intersect1d(ix, bad).size]
    return names or ["variable bounds"]


def diagnose_infeasibility(program: ConvexProgram, settings: SolverSettings) -> list[str]:
    """Name the row groups whose elastic relaxation is needed for feasibility."""
    conflicts = _bound_conflicts(program)
    if conflicts:
        return conflicts
    m = program.A.shape[0]
    b = ProgramBuilder()
    b.add_vars(program.n, program.lb, program.ub, 0.0)
    pos = b.add_vars(m, 0.0, INF, 1.0)
    neg = b.add_vars(m, 0.0, INF, 1.0)
    rows = b.add_rows(m, program.row_lo, program.row_hi, "elastic")
    coo = program.A.tocoo()
    b.add_coef(coo.row, coo.col, coo.data)
    b.add_coef(rows, pos, 1.0)
    b.add_coef(rows, neg, -1.0)
    elastic = b.build()
    sol = _solve_raw(elastic, settings)
    if sol.status != "optimal":
        return ["unknown"]
    slack = sol.x[pos] + sol.x[neg]
    hit = np.flatnonzero(slack > 1e-6)
    groups = [g for g, ix in program.row_groups if np.intersect1d(ix, hit).size]
    return groups or ["unknown"]


_STATUS = {
    highspy.HighsModelStatus.kOptimal: "optimal",
    highspy.HighsModelStatus.kInfeasible: "infeasible",
    highspy.HighsModelStatus.kUnboundedOrInfeasible: "infeasible_or_unbounded",
    highspy.HighsModelStatus.kUnbounded: "unbounded",
}


def _solve_raw(program: ConvexProgram, settings: SolverSettings) -> Solution:
    t0 = time.perf_counter()
    h = _highs(settings)
    if program.is_quadratic:
        # deterministic cap; a stalled active-set QP falls back to the conic path
        h.setOptionValue("qp_iteration_limit", max(1000, 10 * program.n))
    h.passModel(_to_highs_model(program))
    h.run()
    status = _STATUS.get(h.getModelStatus(), str(h.getModelStatus()))
    sol = h.getSolution()
    x = np.asarray(sol.col_value, dtype=float)
    dual = np.asarray(sol.row_dual, dtype=float) if sol.dual_valid else None
    obj = float(h.getInfo().objective_function_value)
    return Solution(x, obj, status, time.perf_counter() - t0, dual)


def _to_conic(program: ConvexProgram):
    """Rewrite rows and finite bounds as ``A x + s = b`` with zero/nonnegative cones."""
    n = program.n
    A = program.A.tocsr()
    eye = sp.identity(n, format="csr")
    lo = np.concatenate([program.row_lo, program.lb])
    hi = np.concatenate([program.row_hi, program.ub])
    G = sp.vstack([A, eye], format="csr")
    fin_lo, fin_hi = np.isfinite(lo), np.isfinite(hi)
    eq = fin_lo & fin_hi & (np.abs(hi - lo) <= 1e-14)
    up = fin_hi & ~eq
    dn = fin_lo & ~eq
    blocks = [G[eq], G[up], -G[dn]]
    b = np.concatenate([hi[eq], hi[up], -lo[dn]])
    cones = []
    if eq.sum():
        cones.append(clarabel.ZeroConeT(int(eq.sum())))
    if up.sum() + dn.sum():
        cones.append(clarabel.NonnegativeConeT(int(up.sum() + dn.sum())))
    P = sp.diags(2.0 * program.quad, format="csc")
    return P, np.asarray(program.c, float), sp.vstack(blocks, format="csc"), b, cones


def _solve_conic(program: ConvexProgram, settings: SolverSettings) -> Solution:
    t0 = time.perf_counter()
    P, q, A, b, cones = _to_conic(program)
    opts = clarabel.DefaultSettings()
    opts.verbose = False
    # interior-point gaps overstate the distance to the vertex optimum; tighten
    opts.tol_feas = min(settings.feasibility_tol, 1e-10)
    opts.tol_gap_abs = opts.tol_gap_rel = min(settings.optimality_tol, 1e-10)
    opts.max_threads = 1
    sol = clarabel.DefaultSolver(P, q, A, b, cones, opts).solve()
    name = str(sol.status).split(".")[-1]
    status = {"Solved": "optimal", "AlmostSolved": "optimal_relaxed",
              "PrimalInfeasible": "infeasible", "AlmostPrimalInfeasible": "infeasible"}.get(name, name)
    x = np.clip(np.asarray(sol.x, float), program.lb, program.ub)
    return Solution(x, program.objective(x), status, time.perf_counter() - t0)


def solve_program(program: ConvexProgram, settings: SolverSettings | None = None, *,
                  backend: str = "highs") -> Solution:
    """Solve to optimality or raise :class:`InfeasibleProgramError` / :class:`SolverError`.

    ``backend`` is ``"highs"`` (simplex / active-set QP) or ``"conic"`` (an
    interior-point method, robust on small dense QPs). A HiGHS QP that stalls
    falls back to the interior-point method.
    """
    settings = settings or SolverSettings()
    conflicts = _bound_conflicts(program)
    if conflicts:
        raise InfeasibleProgramError(conflicts, "contradictory bounds")
    if backend == "conic":
        sol = _solve_conic(program, settings)
        if sol.status in ("optimal", "optimal_relaxed"):
            return sol
        if sol.status == "infeasible":
            raise InfeasibleProgramError(diagnose_infeasibility(program, settings))
        raise SolverError(f"interior-point solver returned status {sol.status}")
    if backend != "highs":
        raise ValueError(f"unknown backend {backend!r}")
    sol = _solve_raw(program, settings)
    if sol.status != "optimal" and program.is_quadratic:
        # the active-set QP path occasionally stalls or misreports a bounded
        # convex QP; defer to the interior-point method
        return solve_program(program, settings, backend="conic")
    if sol.status == "optimal":
        return sol
    if sol.status in ("infeasible", "infeasible_or_unbounded"):
        raise InfeasibleProgramError(diagnose_infeasibility(program, settings))
    raise SolverError(f"solver returned status {sol.status}")
