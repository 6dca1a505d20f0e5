"""OPF-cr: the second-order cone relaxation of OPF in the branch flow model.

For every line ``i -> j`` with tap ``tau`` on the from side, write
``w_i = v_i / tau^2`` for the squared voltage behind the ideal transformer.
The relaxed model is

    p_j = sum_{j->k} P_jk - sum_{i->j} (P_ij - r_ij l_ij) + g_j v_j
    q_j = sum_{j->k} Q_jk - sum_{i->j} (Q_ij - x_ij l_ij) + b_j v_j
    v_j = w_i - 2 (r_ij P_ij + x_ij Q_ij) + |z_ij|^2 l_ij
    l_ij w_i >= P_ij^2 + Q_ij^2

with ``b_j = -Im(shunt_j)``. A plain line has ``tau = 1`` and ``w_i = v_i``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import conic
from .netmodel import INF, Network

log = logging.getLogger(__name__)

OBJECTIVES = ("loss", "gen_cost", "cvr_mix", "loadability")


class OPFError(ValueError):
    """Invalid OPF input detected while building the problem."""


class OPFSolveError(RuntimeError):
    def __init__(self, status: str, message: str, diagnostics: list[str] | None = None):
        super().__init__(f"{status}: {message}")
        self.status = status
        self.diagnostics = diagnostics or []


@dataclass(frozen=True)
class Objective:
    """Objective selector.

    ``gen_cost`` uses ``c`` (per-bus linear costs, default ``Bus.cost``);
    ``cvr_mix`` is ``sum r l + sum c p^g + sum alpha v``; ``loadability``
    maximizes a uniform load factor ``lam`` with a small loss tie-break.
    """

    kind: str = "loss"
    c: tuple[float, ...] | None = None
    alpha: tuple[float, ...] | None = None
    loss_weight: float = 1e-6

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise OPFError(f"unknown objective {self.kind!r}; choose from {OBJECTIVES}")
        for name in ("c", "alpha"):
            vals = getattr(self, name)
            if vals is not None and self.kind == "cvr_mix" and min(vals, default=0.0) < 0:
                raise OPFError(f"cvr_mix coefficients {name} must be nonnegative")

    @property
    def sense(self) -> str:
        return "max" if self.kind == "loadability" else "min"


@dataclass(frozen=True)
class OPFOptions:
    eps_feas: float = 1e-8
    eps_gap: float = 1e-8
    max_iter: int = 200
    tol_gap: float = 1e-6
    relax_load_ub: bool = False
    bound_slack_gen: bool = True
    polish: bool = True


class VarIndex:
    """Offsets of the variable blocks ``[P, Q, l, v, pg, qg, pc, qc, p0, q0, (lam)]``."""

    def __init__(self, m: int, nb: int, loadability: bool):
        self.m, self.nb = m, nb
        self.P = np.arange(m)
        self.Q = m + self.P
        self.l = 2 * m + self.P
        base = 3 * m
        self.v = base + np.arange(nb)
        self.pg = base + nb + np.arange(nb)
        self.qg = base + 2 * nb + np.arange(nb)
        self.pc = base + 3 * nb + np.arange(nb)
        self.qc = base + 4 * nb + np.arange(nb)
        self.p0 = base + 5 * nb
        self.q0 = self.p0 + 1
        self.lam = self.q0 + 1 if loadability else None
        self.size = self.q0 + (2 if loadability else 1)

    def names(self) -> list[str]:
        out = [f"P[{k}]" for k in range(self.m)] + [f"Q[{k}]" for k in range(self.m)]
        out += [f"l[{k}]" for k in range(self.m)]
        for tag in ("v", "pg", "qg", "pc", "qc"):
            out += [f"{tag}[{i}]" for i in range(self.nb)]
        out += ["p0", "q0"]
        if self.lam is not None:
            out.append("lam")
        return out


class _Rows:
    """Triplet accumulator for one cone kind."""

    def __init__(self):
        self.r, self.c, self.v, self.b, self.names = [], [], [], [], []

    def add(self, cols, vals, rhs, name):
        k = len(self.b)
        for j, a in zip(cols, vals):
            if a != 0:
                self.r.append(k)
                self.c.append(int(j))
                self.v.append(float(a))
        self.b.append(float(rhs))
        self.names.append(name)

    def __len__(self):
        return len(self.b)


def build_opf_cr(net: Network, obj: Objective | str = "loss", relax_load_ub: bool = False,
                 bound_slack_gen: bool = True) -> conic.ConicProblem:
    """Assemble OPF-cr as a :class:`~bfmopf.conic.ConicProblem`.

    Equality rows come first (bus balances, voltage drops, slack links,
    load scaling, fixed boxes), then bound rows, then one second-order block
    per apparent-power limit and one rotated block ``(l, w, P, Q)`` per line.
    The slack generator box is enforced only when ``bound_slack_gen`` or for
    the loadability objective.
    """
    if isinstance(obj, str):
        obj = Objective(obj)
    m, nb = net.m, len(net.buses)
    load_mode = obj.kind == "loadability"
    ix = VarIndex(m, nb, load_mode)
    f, t = net.from_idx, net.to_idx
    r, x, tau = net.r, net.x, net.tap
    z2 = r**2 + x**2
    g = net.shunt.real
    bsh = -net.shunt.imag

    eq, ineq = _Rows(), _Rows()
    out_lines = [[] for _ in range(nb)]
    in_lines = [[] for _ in range(nb)]
    for e in range(m):
        out_lines[f[e]].append(e)
        in_lines[t[e]].append(e)

    for j in range(nb):
        inj_p = [ix.p0] if j == 0 else [ix.pg[j], ix.pc[j]]
        sgn = [-1.0] if j == 0 else [-1.0, 1.0]
        cols = [ix.P[e] for e in out_lines[j]] + [ix.P[e] for e in in_lines[j]]
        vals = [1.0] * len(out_lines[j]) + [-1.0] * len(in_lines[j])
        cols += [ix.l[e] for e in in_lines[j]] + [ix.v[j]] + inj_p
        vals += [r[e] for e in in_lines[j]] + [g[j]] + sgn
        eq.add(cols, vals, 0.0, f"p_balance[{j}]")
    for j in range(nb):
        inj_q = [ix.q0] if j == 0 else [ix.qg[j], ix.qc[j]]
        sgn = [-1.0] if j == 0 else [-1.0, 1.0]
        cols = [ix.Q[e] for e in out_lines[j]] + [ix.Q[e] for e in in_lines[j]]
        vals = [1.0] * len(out_lines[j]) + [-1.0] * len(in_lines[j])
        cols += [ix.l[e] for e in in_lines[j]] + [ix.v[j]] + inj_q
        vals += [x[e] for e in in_lines[j]] + [bsh[j]] + sgn
        eq.add(cols, vals, 0.0, f"q_balance[{j}]")
    for e in range(m):
        eq.add([ix.v[t[e]], ix.v[f[e]], ix.P[e], ix.Q[e], ix.l[e]],
               [1.0, -1.0 / tau[e] ** 2, 2 * r[e], 2 * x[e], -z2[e]], 0.0, f"voltage_drop[{e}]")
    eq.add([ix.p0, ix.pg[0], ix.pc[0]], [1.0, -1.0, 1.0], 0.0, "slack_p")
    eq.add([ix.q0, ix.qg[0], ix.qc[0]], [1.0, -1.0, 1.0], 0.0, "slack_q")

    def box(col, lo, hi, name):
        if lo > hi:
            raise OPFError(f"infeasible bounds on {name}: {lo} > {hi}")
        if lo == hi:
            eq.add([col], [1.0], lo, f"fix_{name}")
            return
        if math.isfinite(hi):
            ineq.add([col], [1.0], hi, f"ub_{name}")
        if math.isfinite(lo):
            ineq.add([col], [-1.0], -lo, f"lb_{name}")

    base_p = np.array([b.pc_min for b in net.buses])
    base_q = np.array([b.qc_min for b in net.buses])
    if load_mode:
        if not np.any(base_p) and not np.any(base_q):
            raise OPFError("loadability needs a nonzero base load")
        for i in range(nb):
            eq.add([ix.pc[i], ix.lam], [1.0, -base_p[i]], 0.0, f"load_scale_p[{i}]")
            eq.add([ix.qc[i], ix.lam], [1.0, -base_q[i]], 0.0, f"load_scale_q[{i}]")
        ineq.add([ix.lam], [-1.0], 0.0, "lb_lam")

    for i, bus in enumerate(net.buses):
        box(ix.v[i], bus.v_min, bus.v_max, f"v[{i}]")
        if i > 0 or bound_slack_gen or load_mode:
            box(ix.pg[i], bus.pg_min, bus.pg_max, f"pg[{i}]")
            box(ix.qg[i], bus.qg_min, bus.qg_max, f"qg[{i}]")
        if not load_mode:
            pc_hi = INF if relax_load_ub else bus.pc_max
            qc_hi = INF if relax_load_ub else bus.qc_max
            box(ix.pc[i], bus.pc_min, pc_hi, f"pc[{i}]")
            box(ix.qc[i], bus.qc_min, qc_hi, f"qc[{i}]")
    for e, ln in enumerate(net.lines):
        ineq.add([ix.l[e]], [-1.0], 0.0, f"lb_l[{e}]")
        if math.isfinite(ln.i_max):
            ineq.add([ix.l[e]], [1.0], ln.i_max**2, f"ub_l[{e}]")

    soc_blocks = []
    for e, ln in enumerate(net.lines):
        if math.isfinite(ln.s_max):
            soc_blocks.append((
                [([], [], ln.s_max), ([ix.P[e]], [-1.0], 0.0), ([ix.Q[e]], [-1.0], 0.0)],
                f"s_max[{e}]",
            ))
    rsoc_blocks = []
    for e in range(m):
        rsoc_blocks.append((
            [([ix.l[e]], [-1.0], 0.0), ([ix.v[f[e]]], [-1.0 / tau[e] ** 2], 0.0),
             ([ix.P[e]], [-1.0], 0.0), ([ix.Q[e]], [-1.0], 0.0)],
            f"cone[{e}]",
        ))

    cone_rows = _Rows()
    for rows, name in soc_blocks + rsoc_blocks:
        for k, (cols, vals, rhs) in enumerate(rows):
            cone_rows.add(cols, vals, rhs, f"{name}.{k}")

    blocks = []
    if len(eq):
        blocks.append(conic.ConeBlock(conic.ZERO, len(eq)))
    if len(ineq):
        blocks.append(conic.ConeBlock(conic.NONNEG, len(ineq)))
    blocks += [conic.ConeBlock(conic.SOC, 3)] * len(soc_blocks)
    blocks += [conic.ConeBlock(conic.RSOC, 4)] * len(rsoc_blocks)

    parts = [eq, ineq, cone_rows]
    offs = np.cumsum([0] + [len(p) for p in parts])
    rows = np.concatenate([np.asarray(p.r, dtype=int) + o for p, o in zip(parts, offs)])
    cols = np.concatenate([np.asarray(p.c, dtype=int) for p in parts])
    vals = np.concatenate([np.asarray(p.v, dtype=float) for p in parts])
    A = sp.csc_matrix((vals, (rows, cols)), shape=(int(offs[-1]), ix.size))
    b = np.concatenate([np.asarray(p.b, dtype=float) for p in parts])

    c = np.zeros(ix.size)
    if obj.kind == "loss":
        c[ix.l] = r
    elif obj.kind == "gen_cost":
        c[ix.pg] = np.asarray(obj.c if obj.c is not None else [bus.cost for bus in net.buses], dtype=float)
    elif obj.kind == "cvr_mix":
        c[ix.l] = r
        c[ix.pg] = np.asarray(obj.c if obj.c is not None else [bus.cost for bus in net.buses], dtype=float)
        c[ix.v] = np.asarray(obj.alpha if obj.alpha is not None else np.zeros(nb), dtype=float)
    else:
        c[ix.lam] = -1.0
        c[ix.l] = obj.loss_weight * r
    meta = {"index": ix, "objective": obj, "relax_load_ub": relax_load_ub}
    return conic.ConicProblem(c, A, b, conic.ConeSpec(blocks), ix.names(),
                              eq.names + ineq.names + cone_rows.names, meta)


@dataclass
class RelaxedSolution:
    net: Network
    P: np.ndarray
    Q: np.ndarray
    l: np.ndarray
    v: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    pc: np.ndarray
    qc: np.ndarray
    p0: float
    q0: float
    objective: float = float("nan")
    objective_kind: str = "loss"
    lam: float | None = None
    status: str = "optimal"
    raw_gap: np.ndarray | None = None  # relative SOC gaps at the solver point
    polished: bool = False
    iterations: int = 0
    solve_time: float = 0.0
    solver_residuals: dict = field(default_factory=dict)

    @property
    def w(self) -> np.ndarray:
        """Squared sending-end voltage behind each line's tap."""
        return self.v[self.net.from_idx] / self.net.tap**2

    @property
    def soc_gap(self) -> np.ndarray:
        """``l w - P^2 - Q^2`` per line."""
        return self.l * self.w - self.P**2 - self.Q**2

    @property
    def rel_gap(self) -> np.ndarray:
        return self.soc_gap / np.maximum(1.0, self.l * self.w)

    @property
    def S(self) -> np.ndarray:
        return self.P + 1j * self.Q

    @property
    def p(self) -> np.ndarray:
        """Net injections per bus (slack entry is ``p0``)."""
        out = self.pg - self.pc
        out[0] = self.p0
        return out

    @property
    def q(self) -> np.ndarray:
        out = self.qg - self.qc
        out[0] = self.q0
        return out

    @property
    def loss_mw(self) -> float:
        return float(self.net.r @ self.l * self.net.base_mva)


@dataclass
class ExactnessReport:
    exact: bool
    max_gap: float
    offending: list[int]
    gaps: np.ndarray
    tol: float


def check_exactness(sol: RelaxedSolution, tol: float = 1e-6) -> ExactnessReport:
    """Relative gap ``g / max(1, l w)`` per line; exact iff no line exceeds ``tol``.

    Uses the gaps recorded at the solver point when present, otherwise those
    of the stored arrays.
    """
    gaps = sol.raw_gap if sol.raw_gap is not None else sol.rel_gap
    bad = [int(e) for e in np.flatnonzero(gaps > tol)]
    return ExactnessReport(not bad, float(np.max(gaps, initial=0.0)), bad, gaps, tol)


def relaxed_residuals(sol: RelaxedSolution) -> dict:
    """Max absolute residuals of the relaxed equations (balances, drops, cone equality)."""
    F = _equations(sol.net, sol.P, sol.Q, sol.l, sol.v, sol.p, sol.q, include_slack=True)
    n_b = len(sol.net.buses)
    m = sol.net.m
    return {
        "p_balance": float(np.max(np.abs(F[:n_b]))),
        "q_balance": float(np.max(np.abs(F[n_b:2 * n_b]))),
        "voltage_drop": float(np.max(np.abs(F[2 * n_b:2 * n_b + m]), initial=0.0)),
        "cone_equality": float(np.max(np.abs(F[2 * n_b + m:]), initial=0.0)),
    }


def _incidence(net: Network):
    nb, m = len(net.buses), net.m
    Cf = sp.csr_matrix((np.ones(m), (net.from_idx, np.arange(m))), shape=(nb, m))
    Ct = sp.csr_matrix((np.ones(m), (net.to_idx, np.arange(m))), shape=(nb, m))
    return Cf, Ct


def _equations(net, P, Q, l, v, p, q, include_slack=False):
    Cf, Ct = _incidence(net)
    r, x, tau = net.r, net.x, net.tap
    g, bsh = net.shunt.real, -net.shunt.imag
    fp = Cf @ P - Ct @ (P - r * l) + g * v - p
    fq = Cf @ Q - Ct @ (Q - x * l) + bsh * v - q
    if not include_slack:
        fp, fq = fp[1:], fq[1:]
    w = v[net.from_idx] / tau**2
    fv = v[net.to_idx] - w + 2 * (r * P + x * Q) - (r**2 + x**2) * l
    fc = l * w - P**2 - Q**2
    return np.concatenate([fp, fq, fv, fc])


def polish(sol: RelaxedSolution, max_iter: int = 20, tol: float = 1e-13) -> bool:
    """Project an exact relaxed point onto the relaxed equations with equality cones.

    Non-slack injections and ``v_0`` are held fixed; ``(P, Q, l, v)`` move by
    minimum-norm Gauss-Newton steps and the slack injection is recomputed.
    Returns True on convergence (arrays are updated in place).
    """
    net = sol.net
    m, nb = net.m, len(net.buses)
    Cf, Ct = _incidence(net)
    r, x, tau = net.r, net.x, net.tap
    g, bsh = net.shunt.real, -net.shunt.imag
    f, t = net.from_idx, net.to_idx
    p, q = sol.p, sol.q
    P, Q, l, v = sol.P.copy(), sol.Q.copy(), sol.l.copy(), sol.v.copy()
    v0 = v[0]
    Sel = sp.csr_matrix((np.ones(nb - 1), (np.arange(nb - 1), np.arange(1, nb))), shape=(nb - 1, nb))
    Ef = sp.csr_matrix((1 / tau**2, (np.arange(m), f)), shape=(m, nb))
    Et = sp.csr_matrix((np.ones(m), (np.arange(m), t)), shape=(m, nb))
    Z = sp.csr_matrix((nb - 1, m))
    converged = False
    for _ in range(max_iter):
        F = np.concatenate([_equations(net, P, Q, l, v, p, q), [v[0] - v0]])
        if np.max(np.abs(F)) <= tol:
            converged = True
            break
        w = v[f] / tau**2
        Jp = sp.hstack([Sel @ (Cf - Ct), Z, Sel @ Ct @ sp.diags(r), Sel @ sp.diags(g)])
        Jq = sp.hstack([Z, Sel @ (Cf - Ct), Sel @ Ct @ sp.diags(x), Sel @ sp.diags(bsh)])
        Jv = sp.hstack([2 * sp.diags(r), 2 * sp.diags(x), -sp.diags(r**2 + x**2), Et - Ef])
        Jc = sp.hstack([-2 * sp.diags(P), -2 * sp.diags(Q), sp.diags(w), sp.diags(l) @ Ef])
        J0 = sp.csr_matrix(([1.0], ([0], [3 * m])), shape=(1, 3 * m + nb))
        J = sp.csr_matrix(sp.vstack([Jp, Jq, Jv, Jc, J0]))
        M = sp.csc_matrix(J @ J.T + 1e-15 * sp.identity(J.shape[0]))
        try:
            step = -(J.T @ spla.spsolve(M, F))
        except (RuntimeError, ValueError):
            return False
        if not np.all(np.isfinite(step)):
            return False
        P += step[:m]
        Q += step[m:2 * m]
        l += step[2 * m:3 * m]
        v += step[3 * m:]
    if not converged:
        F = np.concatenate([_equations(net, P, Q, l, v, p, q), [v[0] - v0]])
        converged = np.max(np.abs(F)) <= 1e-10
    if not converged or np.any(l < -1e-12) or np.any(v <= 0):
        return False
    sol.P, sol.Q, sol.l, sol.v = P, Q, l, v
    p0 = float((Cf @ P - Ct @ (P - r * l) + g * v)[0])
    q0 = float((Cf @ Q - Ct @ (Q - x * l) + bsh * v)[0])
    sol.pg = sol.pg.copy()
    sol.qg = sol.qg.copy()
    sol.pg[0] += p0 - sol.p0
    sol.qg[0] += q0 - sol.q0
    sol.p0, sol.q0 = p0, q0
    sol.polished = True
    return True


def _diagnose(prob: conic.ConicProblem, res: conic.ConicSolution, k: int = 5) -> list[str]:
    """Rows with the largest certificate weight (binding constraints)."""
    z = np.abs(res.z)
    if not np.any(z) or not prob.row_names:
        return []
    top = np.argsort(-z)[:k]
    return [f"{prob.row_names[i]} ({z[i]:.3g})" for i in top if z[i] > 0]


def solve_opf_cr(net: Network, obj: Objective | str = "loss", opts: OPFOptions | None = None) -> RelaxedSolution:
    """Build and solve OPF-cr; the objective is reported in MW for losses."""
    opts = opts or OPFOptions()
    if isinstance(obj, str):
        obj = Objective(obj)
    prob = build_opf_cr(net, obj, opts.relax_load_ub, opts.bound_slack_gen)
    res = conic.solve(prob, opts.eps_feas, opts.eps_gap, opts.max_iter)
    if not res.ok:
        diag = _diagnose(prob, res)
        msg = {"primal_infeasible": "OPF-cr is infeasible",
               "dual_infeasible": "OPF-cr is unbounded",
               "max_iter": "iteration limit reached"}.get(res.status, "solver failure")
        raise OPFSolveError(res.status, msg + (f"; binding: {', '.join(diag)}" if diag else ""), diag)
    ix: VarIndex = prob.meta["index"]
    xs = res.x
    sol = RelaxedSolution(
        net, xs[ix.P].copy(), xs[ix.Q].copy(), np.maximum(xs[ix.l], 0.0), xs[ix.v].copy(),
        xs[ix.pg].copy(), xs[ix.qg].copy(), xs[ix.pc].copy(), xs[ix.qc].copy(),
        float(xs[ix.p0]), float(xs[ix.q0]), objective_kind=obj.kind,
        lam=float(xs[ix.lam]) if ix.lam is not None else None,
        iterations=res.iterations, solve_time=res.solve_time, solver_residuals=res.residuals,
    )
    sol.raw_gap = sol.rel_gap.copy()
    if obj.kind == "loss":
        sol.objective = sol.loss_mw
    elif obj.kind == "loadability":
        sol.objective = sol.lam
    else:
        sol.objective = float(prob.c @ xs)
    if opts.polish and np.max(sol.raw_gap, initial=0.0) <= opts.tol_gap:
        if not polish(sol):
            log.warning("%s: polishing did not converge; keeping the solver point", net.name or "network")
    return sol


def solve_loadability(net: Network, opts: OPFOptions | None = None) -> tuple[float, RelaxedSolution]:
    """Maximum uniform load factor ``lam*`` (1.0 = base load) and its solution."""
    opts = opts or OPFOptions()
    sol = solve_opf_cr(net, Objective("loadability"), opts)
    return float(sol.lam), sol


def solution_to_dict(sol: RelaxedSolution) -> dict:
    gaps = sol.raw_gap if sol.raw_gap is not None else sol.rel_gap
    return {
        "format": "bfmopf-relaxed-solution",
        "case": sol.net.name,
        "base_mva": sol.net.base_mva,
        "units": {"power": "pu", "voltage": "pu^2", "current": "pu^2", "loss": "MW"},
        "objective_kind": sol.objective_kind,
        "objective": sol.objective,
        "lambda": sol.lam,
        "loss_mw": sol.loss_mw,
        "lines": [
            {"index": e, "from": int(sol.net.from_idx[e]), "to": int(sol.net.to_idx[e]),
             "P": float(sol.P[e]), "Q": float(sol.Q[e]), "l": float(sol.l[e]), "gap": float(gaps[e])}
            for e in range(sol.net.m)
        ],
        "buses": [
            {"index": i, "label": sol.net.bus_labels[i], "v": float(sol.v[i]),
             "pg": float(sol.pg[i]), "qg": float(sol.qg[i]), "pc": float(sol.pc[i]), "qc": float(sol.qc[i])}
            for i in range(len(sol.net.buses))
        ],
        "slack": {"p0": sol.p0, "q0": sol.q0},
    }


def solution_to_json(sol: RelaxedSolution, indent: int | None = 1) -> str:
    return json.dumps(solution_to_dict(sol), indent=indent)
