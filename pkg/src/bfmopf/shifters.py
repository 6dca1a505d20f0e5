"""Phase shifter synthesis.

With an idealized shifter of angle ``phi_ij`` on line ``i -> j`` the
recovery condition becomes ``B theta = beta - phi (mod 2 pi)``. Two
settings are provided: shifters only on non-tree lines (fewest devices,
``phi_T = 0``) and the least-squares residual of ``beta`` against
``range(B)`` (smallest angles, devices potentially on every line).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .angles import AngleError, BetaVector, BranchFlowSolution, verify_branch_flow, wrap_angle
from .netmodel import IncidenceMatrices, SpanningTree, tree_solve

log = logging.getLogger(__name__)

ACTIVE_DEG = 0.1


@dataclass
class ShifterSetting:
    """Shifter angles per line (radians, line-indexed) with tree bookkeeping."""

    phi: np.ndarray
    tree: SpanningTree
    method: str = "min-count"
    threshold_deg: float = ACTIVE_DEG

    @property
    def phi_T(self) -> np.ndarray:
        return self.phi[list(self.tree.tree_lines)]

    @property
    def phi_perp(self) -> np.ndarray:
        return self.phi[list(self.tree.non_tree_lines)]

    @property
    def phi_deg(self) -> np.ndarray:
        return np.degrees(self.phi)

    @property
    def active(self) -> list[int]:
        return [int(e) for e in np.flatnonzero(np.abs(self.phi_deg) > self.threshold_deg)]

    @property
    def required(self) -> int:
        """Shifters potentially required for convexification, ``m - n``."""
        return len(self.tree.non_tree_lines)

    @property
    def sites(self) -> list[int]:
        """Lines that may carry a nonzero angle under this method."""
        if self.method == "min-norm":
            return list(range(len(self.phi)))
        return list(self.tree.non_tree_lines)

    def summary(self) -> dict:
        deg = self.phi_deg
        sites = self.sites
        vals = deg[sites] if sites else np.zeros(0)
        return {
            "method": self.method,
            "required": self.required,
            "active": len(self.active),
            "min_deg": float(vals.min()) if len(vals) else 0.0,
            "max_deg": float(vals.max()) if len(vals) else 0.0,
            "norm_deg": float(np.linalg.norm(deg)),
        }


def min_count_shifters(beta: BetaVector, mats: IncidenceMatrices, tree: SpanningTree | None = None,
                       tol: float = 1e-6) -> tuple[np.ndarray, ShifterSetting]:
    """Shifters on non-tree lines only: ``phi_perp = P(beta_perp - B_perp B_T^{-1} beta_T)``.

    When every mismatch is within ``tol`` the network already satisfies the
    recovery condition and ``phi`` is returned as exact zeros.
    """
    tree = tree or mats.tree
    if tree.rows != mats.tree.rows:
        raise AngleError("tree does not match the incidence matrices")
    theta_hat = tree_solve(tree, None, beta.beta_T)
    phi = np.zeros(len(beta.beta))
    if tree.non_tree_lines:
        delta = wrap_angle(beta.beta_perp - mats.B_perp @ theta_hat)
        if np.max(np.abs(delta)) > tol:
            phi[list(tree.non_tree_lines)] = delta
    return wrap_angle(theta_hat), ShifterSetting(phi, tree, "min-count")


def min_norm_shifters(beta: BetaVector, mats: IncidenceMatrices, cond_limit: float = 1e12) -> tuple[np.ndarray, ShifterSetting]:
    """Least-squares shifters ``phi = (I - B (B^T B)^{-1} B^T) beta'`` with ``beta' = P(beta)``.

    The normal equations are solved with a sparse direct factorization; an
    ``lsqr`` solve is used instead when the 1-norm condition estimate of
    ``B^T B`` exceeds ``cond_limit`` or the direct solve is inaccurate.
    """
    tree = mats.tree
    rows = list(tree.rows)
    bp = wrap_angle(beta.beta)[rows]
    B = sp.csr_matrix(mats.B, dtype=float)
    G = sp.csc_matrix(B.T @ B)
    rhs = B.T @ bp
    theta = None
    try:
        lu = spla.splu(G)
        n = G.shape[0]
        inv_norm = spla.onenormest(spla.LinearOperator((n, n), matvec=lu.solve, rmatvec=lambda y: lu.solve(y, trans="T")))
        cond = spla.norm(G, 1) * inv_norm
        if cond <= cond_limit:
            theta = lu.solve(rhs)
            if np.linalg.norm(G @ theta - rhs) > 1e-10 * (1 + np.linalg.norm(rhs)):
                theta = None
        else:
            log.info("B^T B condition estimate %.3g exceeds %.3g; using lsqr", cond, cond_limit)
    except RuntimeError as exc:  # singular factor
        raise AngleError(f"B^T B is singular ({exc}); the network must be connected") from None
    if theta is None:
        theta = spla.lsqr(B, bp, atol=1e-15, btol=1e-15, iter_lim=10 * B.shape[1] + 100)[0]
    resid = bp - B @ theta
    phi = np.zeros(len(beta.beta))
    phi[rows] = resid
    if np.any(np.abs(phi) > math.pi):
        phi = wrap_angle(phi)
    return wrap_angle(theta), ShifterSetting(phi, tree, "min-norm")


@dataclass
class PlacementReport:
    recoverable: bool
    mismatches: dict[int, float]  # unshifted non-tree lines -> delta
    required_phi: dict[int, float]  # shifted lines -> angle needed
    offending: list[int] = field(default_factory=list)


def check_placement(beta: BetaVector, mats: IncidenceMatrices, tree: SpanningTree | None, placement,
                    tol: float = 1e-6) -> PlacementReport:
    """Recovery test when only the lines in ``placement`` carry shifters.

    For the given tree, a shifter on a non-tree line absorbs that line's
    mismatch, while a shifter on a tree line is set to zero (it cannot
    remove any basis-cycle mismatch for this tree).
    """
    tree = tree or mats.tree
    placement = {int(e) for e in placement}
    if any(e < 0 or e >= len(beta.beta) for e in placement):
        raise AngleError("placement contains an unknown line")
    theta_hat = tree_solve(tree, None, beta.beta_T)
    delta = wrap_angle(beta.beta_perp - mats.B_perp @ theta_hat) if tree.non_tree_lines else np.zeros(0)
    mism, req = {}, {}
    for e, d in zip(tree.non_tree_lines, np.atleast_1d(delta)):
        if e in placement:
            req[int(e)] = float(d)
        else:
            mism[int(e)] = float(d)
    for e in placement:
        req.setdefault(e, 0.0)
    bad = sorted(e for e, d in mism.items() if abs(d) > tol)
    return PlacementReport(not bad, mism, req, bad)


def normalize_tree_shifters(x: BranchFlowSolution, phi: ShifterSetting | np.ndarray, tree: SpanningTree,
                            tol: float = 1e-8) -> tuple[BranchFlowSolution, np.ndarray]:
    """Move shifter angles off the tree without changing ``|V|``, ``|I|`` or ``S``.

    With ``alpha = B_T^{-1} phi_T`` the map is ``V_i <- V_i exp(1j alpha_i)``,
    ``I_ij <- I_ij exp(1j alpha_i)`` and ``phi_ij <- phi_ij - (alpha_i - alpha_j)``
    off the tree (zero on it).
    """
    net = x.net
    ph = np.asarray(phi.phi if isinstance(phi, ShifterSetting) else phi, dtype=float)
    res = verify_branch_flow(x, net, ph)
    if not res.ok(tol):
        raise AngleError(f"input does not satisfy the shifted branch flow equations (residual {res.max:.3g})")
    alpha = np.concatenate([[0.0], tree_solve(tree, None, ph[list(tree.tree_lines)])])
    f, t = net.from_idx, net.to_idx
    V = x.V * np.exp(1j * alpha)
    I = x.I * np.exp(1j * alpha[f])
    new_phi = wrap_angle(ph - (alpha[f] - alpha[t]))
    new_phi[list(tree.tree_lines)] = 0.0
    return BranchFlowSolution(net, V, I, x.S.copy(), x.s.copy(), new_phi), new_phi


def shifter_report(setting: ShifterSetting, tree_id: str | None = None) -> dict:
    s = setting.summary()
    sites = setting.sites
    return {
        "tree_id": tree_id or setting.tree.strategy,
        "method": setting.method,
        "required": s["required"],
        "active": s["active"],
        "threshold_deg": setting.threshold_deg,
        "phi_deg": [{"line": int(e), "value": float(setting.phi_deg[e])} for e in sites],
        "range_deg": [s["min_deg"], s["max_deg"]],
        "norm_deg": s["norm_deg"],
    }


def shifter_report_json(setting: ShifterSetting, tree_id: str | None = None, indent: int | None = 1) -> str:
    return json.dumps(shifter_report(setting, tree_id), indent=indent)
