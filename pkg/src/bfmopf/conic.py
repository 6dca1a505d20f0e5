"""Sparse conic programs and a solver wrapper.

A problem is stored in slack form::

    minimize    c^T x
    subject to  A x + s = b,   s in K = K_1 x ... x K_p

where each block ``K_i`` is the zero cone, the nonnegative orthant, the
second-order cone ``{(t, w): ||w|| <= t}`` or the rotated cone
``{(u, v, w): u v >= ||w||^2, u, v >= 0}``. Rotated blocks are mapped to
standard second-order blocks before solving.

The interior-point work is delegated to Clarabel (homogeneous embedding,
Nesterov-Todd scaling, sparse quasi-definite LDL with static
regularization).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

ZERO = "zero"
NONNEG = "nonnegative"
SOC = "second_order"
RSOC = "rotated_second_order"
KINDS = (ZERO, NONNEG, SOC, RSOC)
_MIN_DIM = {ZERO: 1, NONNEG: 1, SOC: 2, RSOC: 3}

STATUSES = ("optimal", "primal_infeasible", "dual_infeasible", "max_iter", "numerical")


class ConicError(ValueError):
    pass


@dataclass(frozen=True)
class ConeBlock:
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConicError(f"unknown cone kind {self.kind!r}")
        if self.dim < _MIN_DIM[self.kind]:
            raise ConicError(f"{self.kind} cone needs dim >= {_MIN_DIM[self.kind]}, got {self.dim}")


@dataclass(frozen=True)
class ConeSpec:
    blocks: tuple[ConeBlock, ...]

    def __init__(self, blocks: Sequence[ConeBlock | tuple[str, int]] = ()):
        object.__setattr__(self, "blocks", tuple(b if isinstance(b, ConeBlock) else ConeBlock(*b) for b in blocks))

    @property
    def dim(self) -> int:
        return sum(b.dim for b in self.blocks)

    def offsets(self) -> list[int]:
        out, k = [], 0
        for b in self.blocks:
            out.append(k)
            k += b.dim
        return out

    def __iter__(self):
        return iter(self.blocks)

    def __len__(self):
        return len(self.blocks)


@dataclass
class ConicProblem:
    c: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    cones: ConeSpec
    var_names: list[str] = field(default_factory=list)
    row_names: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.A = sp.csc_matrix(self.A, dtype=float)
        if self.A.shape != (len(self.b), len(self.c)):
            raise ConicError(f"A has shape {self.A.shape}, expected ({len(self.b)}, {len(self.c)})")
        if self.cones.dim != len(self.b):
            raise ConicError(f"cone dims sum to {self.cones.dim}, but there are {len(self.b)} rows")
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.A.data))):
            raise ConicError("non-finite coefficients")

    @property
    def n_vars(self) -> int:
        return len(self.c)

    @property
    def n_rows(self) -> int:
        return len(self.b)


@dataclass
class ConicSolution:
    status: str
    x: np.ndarray
    y: np.ndarray  # duals of zero-cone rows
    z: np.ndarray  # full dual vector, one entry per row
    s: np.ndarray
    objective: float
    residuals: dict
    iterations: int
    solve_time: float = 0.0
    raw_status: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


# Rotated cones ---------------------------------------------------------------

def rotated_to_soc(block: np.ndarray) -> np.ndarray:
    """Map a rotated-cone vector ``(u, v, w...)`` to ``(u+v, u-v, 2w...)``.

    ``u v >= ||w||^2`` with ``u, v >= 0`` holds iff the image lies in the
    standard second-order cone. Works on vectors or on row blocks (arrays
    or sparse matrices whose leading axis is the cone coordinate).
    """
    if sp.issparse(block):
        block = sp.csr_matrix(block)
        m = block.shape[0]
        T = _rotation_matrix(m)
        return sp.csr_matrix(T @ block)
    arr = np.asarray(block, dtype=float)
    out = np.empty_like(arr)
    out[0] = arr[0] + arr[1]
    out[1] = arr[0] - arr[1]
    out[2:] = 2.0 * arr[2:]
    return out


def soc_to_rotated(block: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rotated_to_soc` on vectors."""
    arr = np.asarray(block, dtype=float)
    out = np.empty_like(arr)
    out[0] = 0.5 * (arr[0] + arr[1])
    out[1] = 0.5 * (arr[0] - arr[1])
    out[2:] = 0.5 * arr[2:]
    return out


def _rotation_matrix(m: int) -> sp.csr_matrix:
    rows = [0, 0, 1, 1] + list(range(2, m))
    cols = [0, 1, 0, 1] + list(range(2, m))
    vals = [1.0, 1.0, 1.0, -1.0] + [2.0] * (m - 2)
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, m))


def soc_margin(vec: np.ndarray) -> float:
    """``t - ||w||`` for a standard cone vector (negative outside the cone)."""
    vec = np.asarray(vec, dtype=float)
    return float(vec[0] - np.linalg.norm(vec[1:]))


def cone_violation(s: np.ndarray, cones: ConeSpec) -> float:
    """Largest violation of ``s in K``, with rotated blocks measured after mapping."""
    worst = 0.0
    for blk, off in zip(cones.blocks, cones.offsets()):
        seg = s[off:off + blk.dim]
        if blk.kind == ZERO:
            worst = max(worst, float(np.max(np.abs(seg))))
        elif blk.kind == NONNEG:
            worst = max(worst, float(np.max(-seg, initial=0.0)))
        else:
            vec = rotated_to_soc(seg) if blk.kind == RSOC else seg
            worst = max(worst, -soc_margin(vec))
    return max(worst, 0.0)


def dual_cone_violation(z: np.ndarray, cones: ConeSpec) -> float:
    """Violation of ``z in K*``; zero-cone duals are free.

    The rotated cone ``u v >= ||w||^2`` has dual ``u v >= ||w||^2 / 4``.
    """
    worst = 0.0
    for blk, off in zip(cones.blocks, cones.offsets()):
        seg = z[off:off + blk.dim]
        if blk.kind == NONNEG:
            worst = max(worst, float(np.max(-seg, initial=0.0)))
        elif blk.kind == SOC:
            worst = max(worst, -soc_margin(seg))
        elif blk.kind == RSOC:
            worst = max(worst, -soc_margin(np.concatenate([[seg[0] + seg[1], seg[0] - seg[1]], seg[2:]])))
    return max(worst, 0.0)


def _standardize(prob: ConicProblem) -> tuple[sp.csc_matrix, np.ndarray, list[ConeBlock]]:
    """Replace rotated blocks by standard ones (row transform of A and b)."""
    if not any(b.kind == RSOC for b in prob.cones):
        return prob.A, prob.b, list(prob.cones.blocks)
    diag = []
    blocks = []
    for blk in prob.cones:
        if blk.kind == RSOC:
            diag.append(_rotation_matrix(blk.dim))
            blocks.append(ConeBlock(SOC, blk.dim))
        else:
            diag.append(sp.identity(blk.dim, format="csr"))
            blocks.append(blk)
    T = sp.block_diag(diag, format="csr")
    return sp.csc_matrix(T @ prob.A), T @ prob.b, blocks


# Presolve --------------------------------------------------------------------

@dataclass
class Presolved:
    problem: ConicProblem
    keep_vars: np.ndarray
    fixed_vals: np.ndarray  # full-length, NaN where free
    keep_rows: np.ndarray
    n_vars: int
    n_rows: int
    infeasible: bool = False
    fixing_rows: dict = field(default_factory=dict)  # var -> (row, coefficient)

    def expand_x(self, x: np.ndarray) -> np.ndarray:
        full = self.fixed_vals.copy()
        full[self.keep_vars] = x
        return full

    def expand_rows(self, z: np.ndarray, original: ConicProblem | None = None) -> np.ndarray:
        """Full-length dual vector; duals of fixing rows are recovered from
        stationarity ``c + A^T z = 0`` in the eliminated columns."""
        full = np.zeros(self.n_rows)
        full[self.keep_rows] = z
        if original is not None and self.fixing_rows:
            r = original.c + original.A.T @ full
            for j, (i, a) in self.fixing_rows.items():
                full[i] = -r[j] / a
        return full


def presolve(prob: ConicProblem, max_passes: int = 5) -> Presolved:
    """Remove fixed variables, empty rows and duplicate rows of the zero cone.

    A zero-cone row with a single nonzero fixes one variable, which is then
    substituted out of every other row. Only zero-cone rows are deleted, so
    the remaining cone structure is untouched.
    """
    n, mrows = prob.n_vars, prob.n_rows
    A = sp.csr_matrix(prob.A)
    b = prob.b.copy()
    zero_rows = np.zeros(mrows, dtype=bool)
    for blk, off in zip(prob.cones.blocks, prob.cones.offsets()):
        if blk.kind == ZERO:
            zero_rows[off:off + blk.dim] = True
    fixed = np.full(n, np.nan)
    fixing = {}
    alive_rows = np.ones(mrows, dtype=bool)
    infeasible = False
    for _ in range(max_passes):
        changed = False
        A.eliminate_zeros()
        nnz = np.diff(A.indptr)
        for i in np.flatnonzero(zero_rows & alive_rows & (nnz == 1)):
            j = A.indices[A.indptr[i]]
            a = A.data[A.indptr[i]]
            val = b[i] / a
            if not np.isnan(fixed[j]):
                if abs(fixed[j] - val) > 1e-12 * (1 + abs(val)):
                    infeasible = True
                alive_rows[i] = False
                continue
            fixed[j] = val
            fixing[j] = (i, a)
            alive_rows[i] = False
            changed = True
        js = np.flatnonzero(~np.isnan(fixed))
        if len(js):
            col = sp.csc_matrix(A)[:, js]
            b = b - col @ fixed[js]
            A = sp.csr_matrix(A)
            mask = sp.diags(np.where(np.isnan(fixed), 1.0, 0.0))
            A = sp.csr_matrix(A @ mask)
            A.eliminate_zeros()
        nnz = np.diff(A.indptr)
        for i in np.flatnonzero(zero_rows & alive_rows & (nnz == 0)):
            if abs(b[i]) > 1e-9 * (1 + np.abs(prob.b).max(initial=0)):
                infeasible = True
            alive_rows[i] = False
            changed = True
        if not changed:
            break
    # duplicate zero-cone rows (identical pattern, values and rhs)
    seen = {}
    for i in np.flatnonzero(zero_rows & alive_rows):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        key = (tuple(A.indices[lo:hi]), tuple(A.data[lo:hi]), b[i])
        if key in seen:
            alive_rows[i] = False
        else:
            seen[key] = i
    keep_vars = np.flatnonzero(np.isnan(fixed))
    keep_rows = np.flatnonzero(alive_rows)
    blocks = []
    for blk, off in zip(prob.cones.blocks, prob.cones.offsets()):
        if blk.kind == ZERO:
            d = int(alive_rows[off:off + blk.dim].sum())
            if d:
                blocks.append(ConeBlock(ZERO, d))
        else:
            blocks.append(blk)
    A2 = sp.csc_matrix(A[keep_rows][:, keep_vars])
    c_fixed = float(prob.c[~np.isnan(fixed)] @ fixed[~np.isnan(fixed)]) if len(keep_vars) < n else 0.0
    meta = dict(prob.meta)
    meta["objective_offset"] = meta.get("objective_offset", 0.0) + c_fixed
    reduced = ConicProblem(
        prob.c[keep_vars], A2, b[keep_rows], ConeSpec(blocks),
        [prob.var_names[j] for j in keep_vars] if prob.var_names else [],
        [prob.row_names[i] for i in keep_rows] if prob.row_names else [],
        meta,
    )
    return Presolved(reduced, keep_vars, fixed, keep_rows, n, mrows, infeasible, fixing)


# Solve -----------------------------------------------------------------------

_STATUS_MAP = {
    "Solved": "optimal",
    "AlmostSolved": "optimal",
    "PrimalInfeasible": "primal_infeasible",
    "AlmostPrimalInfeasible": "primal_infeasible",
    "DualInfeasible": "dual_infeasible",
    "AlmostDualInfeasible": "dual_infeasible",
    "MaxIterations": "max_iter",
    "MaxTime": "max_iter",
}


def residuals(prob: ConicProblem, x: np.ndarray, z: np.ndarray) -> dict:
    """Independent primal/dual/gap measures for a candidate primal-dual pair.

    ``s = b - A x``; primal residual is the cone violation of ``s`` relative
    to ``1 + ||b||``, dual residual ``||c + A^T z|| / (1 + ||c||)`` plus the
    dual cone violation of ``z``, gap ``|c^T x + b^T z| / (1 + |c^T x| + |b^T z|)``.
    """
    s = prob.b - prob.A @ x
    nb = 1.0 + np.linalg.norm(prob.b, np.inf)
    nc = 1.0 + np.linalg.norm(prob.c, np.inf)
    primal = cone_violation(s, prob.cones) / nb
    dual = (np.linalg.norm(prob.c + prob.A.T @ z, np.inf) + dual_cone_violation(z, prob.cones)) / nc
    pobj = float(prob.c @ x)
    dobj = float(-prob.b @ z)
    gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    return {"primal": float(primal), "dual": float(dual), "gap": float(gap), "dual_objective": dobj}


def solve(prob: ConicProblem, eps_feas: float = 1e-8, eps_gap: float = 1e-8, max_iter: int = 200,
          use_presolve: bool = True, verbose: bool = False) -> ConicSolution:
    """Solve a conic program.

    Always returns a :class:`ConicSolution`; non-optimal outcomes are
    reported in ``status`` (infeasibility certificates are left in ``z`` for
    primal infeasibility and in ``x`` for dual infeasibility).
    """
    import clarabel

    t0 = time.perf_counter()
    pre = presolve(prob) if use_presolve else None
    work = pre.problem if pre is not None else prob
    if pre is not None and pre.infeasible:
        return ConicSolution("primal_infeasible", pre.expand_x(np.zeros(work.n_vars)), np.zeros(0),
                             np.zeros(prob.n_rows), prob.b.copy(), np.nan,
                             {"primal": np.inf, "dual": np.nan, "gap": np.nan}, 0,
                             time.perf_counter() - t0, "presolve")
    A, b, blocks = _standardize(work)
    cones = []
    for blk in blocks:
        if blk.kind == ZERO:
            cones.append(clarabel.ZeroConeT(blk.dim))
        elif blk.kind == NONNEG:
            cones.append(clarabel.NonnegativeConeT(blk.dim))
        else:
            cones.append(clarabel.SecondOrderConeT(blk.dim))
    st = clarabel.DefaultSettings()
    st.verbose = verbose
    st.tol_feas = eps_feas
    st.tol_gap_abs = eps_gap
    st.tol_gap_rel = eps_gap
    st.max_iter = max_iter
    st.static_regularization_constant = 1e-9
    st.max_step_fraction = 0.99
    st.presolve_enable = False
    nvar = work.n_vars
    P = sp.csc_matrix((nvar, nvar))
    solver = clarabel.DefaultSolver(P, work.c, sp.csc_matrix(A), b, cones, st)
    res = solver.solve()
    raw = str(res.status).split(".")[-1]
    status = _STATUS_MAP.get(raw, "numerical")
    x = np.asarray(res.x, dtype=float)
    zstd = np.asarray(res.z, dtype=float)
    # dual of the original (possibly rotated) rows: z_orig = T^T z_std
    if any(b.kind == RSOC for b in work.cones):
        diag = [(_rotation_matrix(blk.dim) if blk.kind == RSOC else sp.identity(blk.dim)) for blk in work.cones]
        z = sp.block_diag(diag, format="csr").T @ zstd
    else:
        z = zstd
    if pre is not None:
        x_full = pre.expand_x(x)
        z_full = pre.expand_rows(z, prob)
    else:
        x_full, z_full = x, z
    s_full = prob.b - prob.A @ x_full
    if status == "optimal":
        resid = residuals(prob, x_full, z_full)
        if raw == "AlmostSolved":
            log.info("solver returned a reduced-accuracy solution: %s", resid)
    else:
        resid = {"primal": np.nan, "dual": np.nan, "gap": np.nan}
    zero_idx = np.concatenate([np.arange(off, off + blk.dim) for blk, off in zip(prob.cones.blocks, prob.cones.offsets())
                               if blk.kind == ZERO] or [np.zeros(0, dtype=int)]).astype(int)
    obj = float(prob.c @ x_full) if status == "optimal" else np.nan
    return ConicSolution(status, x_full, z_full[zero_idx], z_full, s_full, obj, resid, int(res.iterations),
                         time.perf_counter() - t0, raw)


# Plain-text dump -------------------------------------------------------------

def dump(prob: ConicProblem, path: str | Path) -> None:
    """Write ``prob`` in a sparse triplet text format.

    Layout: a header line, ``vars <n>``, ``rows <m>``, one ``cone <kind> <dim>``
    line per block, then sections ``c``, ``b`` with ``<index> <value>`` lines
    for nonzeros and ``A`` with ``<row> <col> <value>`` lines; indices are
    0-based and values are written with 17 significant digits.
    """
    A = sp.coo_matrix(prob.A)
    lines = ["# bfmopf conic v1", f"vars {prob.n_vars}", f"rows {prob.n_rows}"]
    lines += [f"cone {blk.kind} {blk.dim}" for blk in prob.cones]
    lines.append("c")
    lines += [f"{k} {v:.17g}" for k, v in enumerate(prob.c) if v != 0]
    lines.append("b")
    lines += [f"{k} {v:.17g}" for k, v in enumerate(prob.b) if v != 0]
    lines.append("A")
    order = np.lexsort((A.col, A.row))
    lines += [f"{A.row[k]} {A.col[k]} {A.data[k]:.17g}" for k in order]
    Path(path).write_text("\n".join(lines) + "\n")


def load(path: str | Path) -> ConicProblem:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# bfmopf conic"):
        raise ConicError("not a conic dump file")
    n = m = None
    blocks = []
    section = None
    c = b = None
    rows, cols, vals = [], [], []
    for raw in text[1:]:
        parts = raw.split()
        if not parts:
            continue
        head = parts[0]
        if head == "vars":
            n = int(parts[1])
        elif head == "rows":
            m = int(parts[1])
        elif head == "cone":
            blocks.append(ConeBlock(parts[1], int(parts[2])))
        elif head in ("c", "b", "A") and len(parts) == 1:
            section = head
            if c is None:
                c, b = np.zeros(n), np.zeros(m)
        elif section == "c":
            c[int(parts[0])] = float(parts[1])
        elif section == "b":
            b[int(parts[0])] = float(parts[1])
        elif section == "A":
            rows.append(int(parts[0]))
            cols.append(int(parts[1]))
            vals.append(float(parts[2]))
        else:
            raise ConicError(f"unexpected line {raw!r}")
    A = sp.csc_matrix((vals, (rows, cols)), shape=(m, n))
    return ConicProblem(c, A, b, ConeSpec(blocks))
