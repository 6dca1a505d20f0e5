"""Phase angle recovery from relaxed branch flow solutions.

For a line ``i -> j`` the relaxed variables fix the angle difference across
the series impedance: ``beta_ij = angle(w_i - conj(z_ij) S_ij)`` with
``w_i = v_i / tau^2``. Bus angles exist iff ``B theta = beta (mod 2 pi)`` is
solvable, which is checked on a spanning tree: ``theta = B_T^{-1} beta_T``
and the mismatch ``beta_perp - B_perp theta`` must vanish modulo ``2 pi``.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .netmodel import IncidenceMatrices, Network, SpanningTree, incidence_matrix, spanning_tree, tree_solve
from .opf import RelaxedSolution, check_exactness

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


class AngleError(ValueError):
    pass


def wrap_angle(x):
    """Map angles into ``(-pi, pi]``; ``-pi`` itself goes to ``+pi``."""
    arr = np.asarray(x, dtype=float)
    out = np.mod(arr + math.pi, TWO_PI) - math.pi
    out = np.where(out <= -math.pi, math.pi, out)
    if np.ndim(x) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class BetaVector:
    """Angle differences per line, stored by line index.

    ``beta_T`` and ``beta_perp`` follow ``tree.tree_lines`` and
    ``tree.non_tree_lines``.
    """

    beta: np.ndarray
    tree: SpanningTree
    advisory: bool = False  # computed from an inexact relaxed point

    @property
    def beta_T(self) -> np.ndarray:
        return self.beta[list(self.tree.tree_lines)]

    @property
    def beta_perp(self) -> np.ndarray:
        return self.beta[list(self.tree.non_tree_lines)]

    @property
    def rows(self) -> np.ndarray:
        """Tree-first ordering, matching the rows of ``B``."""
        return self.beta[list(self.tree.rows)]


def _beta_from(net: Network, P, Q, v) -> np.ndarray:
    w = v[net.from_idx] / net.tap**2
    arg = w - np.conj(net.z) * (P + 1j * Q)
    small = np.flatnonzero(np.abs(arg) < 1e-12)
    if len(small):
        raise AngleError(f"degenerate line(s) {small.tolist()}: |v_i - conj(z) S| < 1e-12")
    return wrap_angle(np.angle(arg))


def compute_beta(sol: RelaxedSolution, net: Network | None = None, tree: SpanningTree | None = None,
                 tol_gap: float = 1e-6) -> BetaVector:
    net = net or sol.net
    tree = tree or spanning_tree(net)
    rep = check_exactness(sol, tol_gap)
    if not rep.exact:
        log.warning("beta computed from an inexact relaxed point (max gap %.3g)", rep.max_gap)
    return BetaVector(_beta_from(net, sol.P, sol.Q, sol.v), tree, advisory=not rep.exact)


@dataclass
class RecoveryReport:
    verdict: str
    theta: np.ndarray | None  # buses 1..n, radians
    mismatches: np.ndarray  # per non-tree line, in tree.non_tree_lines order
    links: tuple[int, ...]
    offending: list[int]
    tol: float
    method: str = "centralized"
    theta_tree: np.ndarray | None = None  # B_T^{-1} beta_T before wrapping
    current_angles: np.ndarray | None = None

    @property
    def recovered(self) -> bool:
        return self.verdict == "recovered"

    @property
    def max_mismatch(self) -> float:
        return float(np.max(np.abs(self.mismatches), initial=0.0))


def _verdict(delta: np.ndarray, links, tol: float):
    bad = [int(links[k]) for k in np.flatnonzero(np.abs(delta) > tol)]
    worst = float(np.max(np.abs(delta), initial=0.0))
    if not bad and worst > 0.1 * tol:
        log.warning("angle mismatch %.3g rad is within a decade of the tolerance %.3g", worst, tol)
    if bad and worst <= 10 * tol:
        log.warning("angle mismatch %.3g rad only slightly above the tolerance %.3g", worst, tol)
    return bad


def recover_centralized(beta: BetaVector, mats: IncidenceMatrices, tol: float = 1e-6) -> RecoveryReport:
    """Matrix form of the recovery test, with ``B_T^{-1}`` applied by a tree pass."""
    tree = mats.tree
    if tree.rows != beta.tree.rows:
        raise AngleError("beta and incidence matrices use different spanning trees")
    theta_hat = tree_solve(tree, None, beta.beta_T)
    delta = wrap_angle(beta.beta_perp - mats.B_perp @ theta_hat) if tree.non_tree_lines else np.zeros(0)
    bad = _verdict(delta, tree.non_tree_lines, tol)
    ok = not bad
    return RecoveryReport("recovered" if ok else "failed", wrap_angle(theta_hat) if ok else None,
                          np.asarray(delta, dtype=float), tree.non_tree_lines, bad, tol, "centralized", theta_hat)


def recover_distributed(sol: RelaxedSolution, net: Network | None = None, tree: SpanningTree | None = None,
                        tol: float = 1e-6) -> RecoveryReport:
    """Breadth-first angle propagation; each node needs only its parent's data.

    Voltage angles follow ``angle V_k = angle V_j - angle(w_j - conj(z) S_jk)``
    down the tree and current angles ``angle I_jk = angle V_j - angle S_jk``;
    every non-tree line then compares the two angles at its ends.
    """
    net = net or sol.net
    tree = tree or spanning_tree(net)
    nb = len(net.buses)
    adj = [[] for _ in range(nb)]
    for e in tree.tree_lines:
        ln = net.lines[e]
        adj[ln.from_bus].append((ln.to_bus, e))
        adj[ln.to_bus].append((ln.from_bus, e))
    angle_v = np.zeros(nb)
    seen = np.zeros(nb, dtype=bool)
    seen[0] = True
    queue = deque([0])
    # same traversal order as the tree, so the path sums agree bit for bit
    order_pos = {j: k for k, j in enumerate(tree.order)}
    while queue:
        j = queue.popleft()
        for k, e in sorted(adj[j], key=lambda t: order_pos[t[0]]):
            if seen[k]:
                continue
            seen[k] = True
            ln = net.lines[e]
            b = _line_beta(net, sol, e)
            # beta is the angle drop from ln.from_bus to ln.to_bus
            angle_v[k] = angle_v[j] - b if ln.from_bus == j else angle_v[j] - (-b)
            queue.append(k)
    angle_i = np.zeros(net.m)
    for e, ln in enumerate(net.lines):
        angle_i[e] = angle_v[ln.from_bus] - np.angle(sol.P[e] + 1j * sol.Q[e])
    delta = np.zeros(len(tree.non_tree_lines))
    for k, e in enumerate(tree.non_tree_lines):
        ln = net.lines[e]
        delta[k] = wrap_angle(_line_beta(net, sol, e) - (angle_v[ln.from_bus] - angle_v[ln.to_bus]))
    bad = _verdict(delta, tree.non_tree_lines, tol)
    ok = not bad
    return RecoveryReport("recovered" if ok else "failed", wrap_angle(angle_v[1:]) if ok else None, delta,
                          tree.non_tree_lines, bad, tol, "distributed", angle_v[1:],
                          wrap_angle(angle_i) if ok else None)


def _line_beta(net: Network, sol: RelaxedSolution, e: int) -> float:
    ln = net.lines[e]
    arg = sol.v[ln.from_bus] / ln.tap**2 - np.conj(ln.z) * complex(sol.P[e], sol.Q[e])
    if abs(arg) < 1e-12:
        raise AngleError(f"degenerate line {e}: |v_i - conj(z) S| < 1e-12")
    return wrap_angle(np.angle(arg))


@dataclass
class BranchFlowSolution:
    """Complex phasor solution ``(S, I, V, s0)`` with the injections ``s``."""

    net: Network
    V: np.ndarray
    I: np.ndarray
    S: np.ndarray
    s: np.ndarray  # complex net injection per bus; s[0] is the slack injection
    phi: np.ndarray | None = None

    @property
    def s0(self) -> complex:
        return complex(self.s[0])

    def projection(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, complex]:
        """``(S, l, v, s0)`` with phase angles dropped."""
        return self.S.copy(), np.abs(self.I) ** 2, np.abs(self.V) ** 2, self.s0


def inverse_project(sol: RelaxedSolution, theta: np.ndarray, phi: np.ndarray | None = None) -> BranchFlowSolution:
    """Lift ``(S, l, v)`` with bus angles ``theta`` (buses ``1..n``; bus 0 has angle 0)."""
    net = sol.net
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (net.n,):
        raise AngleError(f"theta must have length {net.n}")
    th = np.concatenate([[0.0], theta])
    V = np.sqrt(sol.v) * np.exp(1j * th)
    S = sol.P + 1j * sol.Q
    I = np.sqrt(np.maximum(sol.l, 0.0)) * np.exp(1j * (th[net.from_idx] - np.angle(S)))
    s = sol.p + 1j * sol.q
    return BranchFlowSolution(net, V, I, S, s, None if phi is None else np.asarray(phi, dtype=float))


@dataclass
class ResidualReport:
    ohm: float
    power: float
    balance: float

    @property
    def max(self) -> float:
        return max(self.ohm, self.power, self.balance)

    def ok(self, tol: float = 1e-8) -> bool:
        return self.max <= tol


def verify_branch_flow(x: BranchFlowSolution, net: Network | None = None, phi: np.ndarray | None = None) -> ResidualReport:
    """Residuals of Ohm's law, the branch power definition and bus balance.

    Ohm's law with a shifter reads ``I = y (V_i / tau - V_j exp(-1j phi))``;
    ``phi`` defaults to ``x.phi`` and then to zero.
    """
    net = net or x.net
    if phi is None:
        phi = x.phi
    f, t = net.from_idx, net.to_idx
    tau = net.tap
    ph = np.zeros(net.m) if phi is None else np.asarray(phi, dtype=float)
    y = 1.0 / net.z
    Vs = x.V[f] / tau
    ohm = np.abs(x.I - y * (Vs - x.V[t] * np.exp(-1j * ph)))
    power = np.abs(x.S - Vs * np.conj(x.I))
    nb = len(net.buses)
    bal = np.conj(net.shunt) * np.abs(x.V) ** 2 - x.s
    flow_loss = x.S - net.z * np.abs(x.I) ** 2
    np.add.at(bal, f, x.S)
    np.add.at(bal, t, -flow_loss)
    return ResidualReport(float(np.max(ohm, initial=0.0)), float(np.max(power, initial=0.0)),
                          float(np.max(np.abs(bal[:nb]), initial=0.0)))


def recovery_to_dict(rep: RecoveryReport) -> dict:
    return {
        "verdict": rep.verdict,
        "method": rep.method,
        "tol_rad": rep.tol,
        "theta_deg": None if rep.theta is None else np.degrees(rep.theta).tolist(),
        "mismatches": [{"line": int(e), "delta_deg": float(np.degrees(d))} for e, d in zip(rep.links, rep.mismatches)],
        "offending": list(rep.offending),
    }


def recovery_to_json(rep: RecoveryReport, indent: int | None = 1) -> str:
    return json.dumps(recovery_to_dict(rep), indent=indent)


def recover(sol: RelaxedSolution, tree: SpanningTree | None = None, tol: float = 1e-6) -> tuple[BetaVector, RecoveryReport]:
    """Convenience: ``compute_beta`` followed by ``recover_centralized``."""
    tree = tree or spanning_tree(sol.net)
    beta = compute_beta(sol, sol.net, tree)
    return beta, recover_centralized(beta, incidence_matrix(sol.net, tree), tol)
