"""Independent reference computations used to validate the main modules.

Each routine works directly from the edge list, with plain loops and no
incidence algebra, so it shares as little code as possible with the code it
checks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .netmodel import Network

log = logging.getLogger(__name__)


class OracleError(ValueError):
    pass


# Forward-backward sweep ------------------------------------------------------

@dataclass
class SweepResult:
    converged: bool
    iterations: int
    V: np.ndarray
    S: np.ndarray  # sending-end power per line, in line orientation
    I: np.ndarray  # series current per line, from -> to
    s0: complex
    mismatch: float
    history: list[float] = field(default_factory=list)


def _radial_order(net: Network):
    adj = [[] for _ in net.buses]
    for e, ln in enumerate(net.lines):
        adj[ln.from_bus].append((ln.to_bus, e))
        adj[ln.to_bus].append((ln.from_bus, e))
    parent = [-1] * len(net.buses)
    pline = [-1] * len(net.buses)
    order = [0]
    seen = {0}
    k = 0
    while k < len(order):
        i = order[k]
        k += 1
        for j, e in adj[i]:
            if j not in seen:
                seen.add(j)
                parent[j], pline[j] = i, e
                order.append(j)
    return order, parent, pline


def _bus_mismatch(net: Network, V, S, I, s):
    worst = 0.0
    for j in range(1, len(net.buses)):
        bal = np.conj(net.buses[j].shunt) * abs(V[j]) ** 2 - s[j]
        for e, ln in enumerate(net.lines):
            if ln.from_bus == j:
                bal += S[e]
            if ln.to_bus == j:
                bal -= S[e] - ln.z * abs(I[e]) ** 2
        worst = max(worst, abs(bal))
    return worst


def sweep_power_flow(net: Network, s, v0: complex = 1.0, tol: float = 1e-10, max_iter: int = 100) -> SweepResult:
    """Power flow on a radial network by backward power / forward voltage sweeps.

    ``s`` holds complex net injections per bus (entry 0 is ignored). Shunts
    are treated as extra demand ``conj(y_i) |V_i|^2`` updated every pass.
    Iteration stops when the largest bus power mismatch is ``<= tol``.
    Raises :class:`OracleError` for meshed input or when 10 consecutive
    iterations fail to improve on the best mismatch so far (this covers
    steady growth as well as the oscillation seen beyond the loadability
    limit).
    """
    if net.m != net.n:
        raise OracleError("sweep power flow needs a radial network")
    s = np.asarray(s, dtype=complex)
    nb = len(net.buses)
    order, parent, pline = _radial_order(net)
    V = np.full(nb, complex(v0))
    S = np.zeros(net.m, dtype=complex)
    I = np.zeros(net.m, dtype=complex)
    history = []
    stall = 0
    best = math.inf
    mismatch = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        # backward: power needed at the child terminal of each parent line
        down = np.zeros(nb, dtype=complex)
        J = np.zeros(nb, dtype=complex)  # current from parent side toward child
        for j in reversed(order[1:]):
            ln = net.lines[pline[j]]
            need = down[j] + np.conj(net.buses[j].shunt) * abs(V[j]) ** 2 - s[j]
            child_terminal = V[j] / ln.tap if ln.from_bus == j else V[j]
            J[j] = np.conj(need / child_terminal)
            down[parent[j]] += need + ln.z * abs(J[j]) ** 2
        # forward: voltages from the root
        for j in order[1:]:
            ln = net.lines[pline[j]]
            p = parent[j]
            parent_terminal = V[p] / ln.tap if ln.from_bus == p else V[p]
            child_terminal = parent_terminal - ln.z * J[j]
            V[j] = child_terminal * ln.tap if ln.from_bus == j else child_terminal
        for j in order[1:]:
            e = pline[j]
            ln = net.lines[e]
            if ln.from_bus == parent[j]:
                I[e] = J[j]
                S[e] = V[parent[j]] / ln.tap * np.conj(I[e])
            else:
                I[e] = -J[j]
                S[e] = V[j] / ln.tap * np.conj(I[e])
        new = _bus_mismatch(net, V, S, I, s)
        history.append(new)
        if new > mismatch and it > 3:
            log.warning("sweep mismatch increased at iteration %d (%.3g -> %.3g)", it, mismatch, new)
        if not new < best:
            stall += 1
            if stall >= 10:
                raise OracleError(f"sweep diverged after {it} iterations (mismatch {new:.3g})")
        else:
            stall = 0
            best = new
        mismatch = new
        if mismatch <= tol:
            break
    s0 = np.conj(net.buses[0].shunt) * abs(V[0]) ** 2
    for e, ln in enumerate(net.lines):
        if ln.from_bus == 0:
            s0 += S[e]
        if ln.to_bus == 0:
            s0 -= S[e] - ln.z * abs(I[e]) ** 2
    return SweepResult(mismatch <= tol, it, V, S, I, complex(s0), float(mismatch), history)


# Relaxed-equation residuals ----------------------------------------------------

def relaxed_residuals_loop(net: Network, P, Q, l, v, p, q) -> dict:
    """Loop evaluation of bus balances, voltage drops and cone gaps."""
    nb = len(net.buses)
    bp = [0.0] * nb
    bq = [0.0] * nb
    for j, bus in enumerate(net.buses):
        bp[j] = bus.shunt.real * v[j] - p[j]
        bq[j] = -bus.shunt.imag * v[j] - q[j]
    drop = 0.0
    cone = 0.0
    for e, ln in enumerate(net.lines):
        i, j = ln.from_bus, ln.to_bus
        bp[i] += P[e]
        bq[i] += Q[e]
        bp[j] -= P[e] - ln.r * l[e]
        bq[j] -= Q[e] - ln.x * l[e]
        w = v[i] / ln.tap**2
        drop = max(drop, abs(v[j] - (w - 2 * (ln.r * P[e] + ln.x * Q[e]) + (ln.r**2 + ln.x**2) * l[e])))
        cone = max(cone, abs(l[e] * w - P[e] ** 2 - Q[e] ** 2))
    return {"p_balance": max(abs(a) for a in bp), "q_balance": max(abs(a) for a in bq),
            "voltage_drop": drop, "cone_equality": cone}


# Brute-force recovery ------------------------------------------------------------

@dataclass
class BruteForceVerdict:
    recoverable: bool
    n_cycles: int
    worst: float


def _wrap(a: float) -> float:
    out = math.fmod(a + math.pi, 2 * math.pi)
    if out <= 0:
        out += 2 * math.pi
    return out - math.pi


def simple_cycles(net: Network, limit: int = 200_000) -> list[list[tuple[int, int]]]:
    """Every simple cycle as a closed walk of ``(line, sign)``; each appears once per direction."""
    nb = len(net.buses)
    adj = [[] for _ in range(nb)]
    for e, ln in enumerate(net.lines):
        adj[ln.from_bus].append((ln.to_bus, e, 1))
        adj[ln.to_bus].append((ln.from_bus, e, -1))
    out = []
    for start in range(nb):
        stack = [(start, [], {start})]
        while stack:
            node, walk, visited = stack.pop()
            for nxt, e, sgn in adj[node]:
                if walk and e == walk[-1][0]:
                    continue
                if nxt == start and walk:
                    out.append(walk + [(e, sgn)])
                    if len(out) > limit:
                        raise OracleError("too many simple cycles")
                elif nxt > start and nxt not in visited:
                    stack.append((nxt, walk + [(e, sgn)], visited | {nxt}))
    return out


def brute_force_recovery(beta, net: Network, tol: float = 1e-6, max_buses: int = 12) -> BruteForceVerdict:
    """Recovery verdict from the signed angle sum around every simple cycle.

    ``beta`` is indexed by line. Angles exist iff every cycle sum is a
    multiple of ``2 pi``; the check enumerates cycles, so it is limited to
    small graphs.
    """
    if len(net.buses) > max_buses:
        raise OracleError(f"brute force recovery is limited to {max_buses} buses")
    cycles = simple_cycles(net)
    worst = 0.0
    for cyc in cycles:
        total = 0.0
        for e, sgn in cyc:
            total += sgn * float(beta[e])
        worst = max(worst, abs(_wrap(total)))
    return BruteForceVerdict(worst <= tol, len(cycles), worst)


# Reference conic solver ------------------------------------------------------------

def _project_soc(u: np.ndarray) -> np.ndarray:
    t, w = u[0], u[1:]
    nw = np.linalg.norm(w)
    if nw <= t:
        return u
    if nw <= -t:
        return np.zeros_like(u)
    a = 0.5 * (t + nw)
    return np.concatenate([[a], (a / nw) * w])


def reference_conic_solve(prob, rho: float = 1.0, max_iter: int = 200_000, tol: float = 1e-10):
    """Small-problem reference solver: ADMM on ``A x + s = b``, ``s in K``.

    Rotated blocks are first mapped to standard ones. Returns
    ``(x, objective)``; intended for problems with a few dozen variables.
    """
    from . import conic  # only for the cone kinds and the rotated-block map

    A, b, blocks = conic._standardize(prob)
    A = np.asarray(A.todense())
    c = prob.c
    n = A.shape[1]
    sigma = 1e-6
    K = rho * A.T @ A + sigma * np.eye(n)
    L = np.linalg.cholesky(K)
    x = np.zeros(n)
    s = np.zeros(len(b))
    u = np.zeros(len(b))
    offs = np.cumsum([0] + [blk.dim for blk in blocks])

    def proj(y):
        out = y.copy()
        for blk, o in zip(blocks, offs):
            seg = y[o:o + blk.dim]
            if blk.kind == conic.ZERO:
                out[o:o + blk.dim] = 0.0
            elif blk.kind == conic.NONNEG:
                out[o:o + blk.dim] = np.maximum(seg, 0.0)
            else:
                out[o:o + blk.dim] = _project_soc(seg)
        return out

    for _ in range(max_iter):
        rhs = -c + rho * A.T @ (b - s - u) + sigma * x
        x = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        s_old = s
        s = proj(b - A @ x - u)
        u = u + A @ x + s - b
        r_p = np.linalg.norm(A @ x + s - b)
        r_d = rho * np.linalg.norm(A.T @ (s - s_old))
        if r_p <= tol * (1 + np.linalg.norm(b)) and r_d <= tol * (1 + np.linalg.norm(c)):
            break
    return x, float(c @ x)
