"""Network data model, incidence matrices, spanning trees and cycle bases.

Buses are indexed ``0..n`` with bus 0 the slack (substation) bus. Lines keep
the orientation given by the input data: the from-bus is the sending end and
the side carrying the off-nominal tap, so flipping a line is not a free
relabeling. All incidence and path computations below are therefore signed
and work for any orientation of tree links.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

INF = math.inf


class NetworkError(ValueError):
    """Raised for structurally invalid networks or trees."""


@dataclass(frozen=True)
class Bus:
    """A bus in per-unit.

    ``shunt`` is the shunt admittance ``y = g - i b`` seen from the bus to
    ground (MATPOWER sign: positive imaginary part is capacitive). Voltage
    bounds are on the *squared* magnitude.
    """

    index: int
    shunt: complex = 0j
    v_min: float = 0.0
    v_max: float = INF
    pg_min: float = 0.0
    pg_max: float = 0.0
    qg_min: float = 0.0
    qg_max: float = 0.0
    pc_min: float = 0.0
    pc_max: float = 0.0
    qc_min: float = 0.0
    qc_max: float = 0.0
    is_slack: bool = False
    cost: float = 0.0
    label: int | None = None

    def __post_init__(self):
        if self.v_min > self.v_max:
            raise NetworkError(f"bus {self.index}: v_min > v_max")
        for lo, hi, name in ((self.pg_min, self.pg_max, "pg"), (self.qg_min, self.qg_max, "qg"),
                             (self.pc_min, self.pc_max, "pc"), (self.qc_min, self.qc_max, "qc")):
            if lo > hi:
                raise NetworkError(f"bus {self.index}: {name} lower bound exceeds upper bound")

    @property
    def g(self) -> float:
        return self.shunt.real

    @property
    def b(self) -> float:
        # convention y = g - i b
        return -self.shunt.imag


@dataclass(frozen=True)
class Line:
    """A series branch ``from_bus -> to_bus``.

    ``tap`` is an ideal transformer ratio on the from side (1.0 for a plain
    line). ``i_max`` bounds the series current magnitude and ``s_max`` the
    sending-end apparent power; ``inf`` means no limit.
    """

    from_bus: int
    to_bus: int
    r: float
    x: float
    tap: float = 1.0
    i_max: float = INF
    s_max: float = INF
    label: int | None = None

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkError(f"line {self.label}: from == to ({self.from_bus})")
        if self.r == 0.0 and self.x == 0.0:
            raise NetworkError(f"line {self.label}: zero impedance")
        if self.tap <= 0:
            raise NetworkError(f"line {self.label}: tap must be positive")

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)

    @property
    def y(self) -> complex:
        return 1.0 / self.z


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    base_mva: float = 100.0
    name: str = ""
    bus_labels: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        nb = len(self.buses)
        if nb < 1:
            raise NetworkError("network has no buses")
        for k, bus in enumerate(self.buses):
            if bus.index != k:
                raise NetworkError(f"bus at position {k} has index {bus.index}")
        slack = [b.index for b in self.buses if b.is_slack]
        if slack != [0]:
            raise NetworkError(f"expected exactly one slack bus at index 0, got {slack}")
        for ln in self.lines:
            if not (0 <= ln.from_bus < nb and 0 <= ln.to_bus < nb):
                raise NetworkError(f"line {ln.label} references a missing bus")
        if not self.bus_labels:
            object.__setattr__(self, "bus_labels", tuple(range(nb)))
        if _components(nb, self.lines) != 1:
            raise NetworkError("network is disconnected")

    @property
    def n(self) -> int:
        """Number of non-slack buses."""
        return len(self.buses) - 1

    @property
    def m(self) -> int:
        return len(self.lines)

    @property
    def from_idx(self) -> np.ndarray:
        return np.array([ln.from_bus for ln in self.lines], dtype=int)

    @property
    def to_idx(self) -> np.ndarray:
        return np.array([ln.to_bus for ln in self.lines], dtype=int)

    @property
    def r(self) -> np.ndarray:
        return np.array([ln.r for ln in self.lines])

    @property
    def x(self) -> np.ndarray:
        return np.array([ln.x for ln in self.lines])

    @property
    def z(self) -> np.ndarray:
        return np.array([ln.z for ln in self.lines])

    @property
    def tap(self) -> np.ndarray:
        return np.array([ln.tap for ln in self.lines])

    @property
    def shunt(self) -> np.ndarray:
        return np.array([b.shunt for b in self.buses])

    def is_radial(self) -> bool:
        return self.m == self.n

    def total_fixed_load(self) -> complex:
        return complex(sum(b.pc_min for b in self.buses), sum(b.qc_min for b in self.buses))


def _components(nb: int, lines: Sequence[Line]) -> int:
    parent = list(range(nb))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    count = nb
    for ln in lines:
        ra, rb = find(ln.from_bus), find(ln.to_bus)
        if ra != rb:
            parent[ra] = rb
            count -= 1
    return count


@dataclass(frozen=True)
class SpanningTree:
    """Spanning tree rooted at bus 0.

    ``parent[i]`` / ``parent_line[i]`` give the tree parent of bus ``i`` and
    the line joining them (``-1`` at the root). ``direction[i]`` is ``+1``
    when that line points parent -> child and ``-1`` otherwise. ``order``
    lists buses in breadth-first order from the root.
    """

    tree_lines: tuple[int, ...]
    non_tree_lines: tuple[int, ...]
    parent: tuple[int, ...]
    parent_line: tuple[int, ...]
    direction: tuple[int, ...]
    order: tuple[int, ...]
    strategy: str = "mst"

    @property
    def rows(self) -> tuple[int, ...]:
        """Line indices in tree-first row order of ``B``."""
        return self.tree_lines + self.non_tree_lines

    @property
    def n(self) -> int:
        return len(self.tree_lines)

    def path_to_root(self, bus: int) -> list[int]:
        """Lines on the tree path from ``bus`` up to the root."""
        out = []
        while bus != 0:
            out.append(self.parent_line[bus])
            bus = self.parent[bus]
        return out


def tree_from_lines(net: Network, tree_lines: Sequence[int], strategy: str = "given") -> SpanningTree:
    """Build a :class:`SpanningTree` from an explicit set of ``n`` line indices."""
    nb = len(net.buses)
    tree_lines = tuple(int(e) for e in tree_lines)
    if len(set(tree_lines)) != net.n:
        raise NetworkError(f"a spanning tree needs {net.n} distinct lines, got {len(set(tree_lines))}")
    adj: list[list[tuple[int, int]]] = [[] for _ in range(nb)]
    for e in tree_lines:
        if not 0 <= e < net.m:
            raise NetworkError(f"tree line {e} out of range")
        ln = net.lines[e]
        adj[ln.from_bus].append((ln.to_bus, e))
        adj[ln.to_bus].append((ln.from_bus, e))
    parent = [-1] * nb
    parent_line = [-1] * nb
    direction = [0] * nb
    seen = [False] * nb
    seen[0] = True
    order = [0]
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j, e in sorted(adj[i], key=lambda t: t[1]):
            if seen[j]:
                continue
            seen[j] = True
            parent[j], parent_line[j] = i, e
            direction[j] = 1 if net.lines[e].from_bus == i else -1
            order.append(j)
            queue.append(j)
    if len(order) != nb:
        raise NetworkError("tree lines do not span the network")
    in_tree = set(tree_lines)
    # tree rows follow BFS discovery so B_T is lower triangular up to sign
    ordered_tree = tuple(parent_line[j] for j in order[1:])
    non_tree = tuple(e for e in range(net.m) if e not in in_tree)
    return SpanningTree(ordered_tree, non_tree, tuple(parent), tuple(parent_line),
                        tuple(direction), tuple(order), strategy)


def spanning_tree(net: Network, strategy: str = "mst") -> SpanningTree:
    """Spanning tree rooted at bus 0.

    ``"mst"`` (alias ``"mst_by_reactance"``) is Kruskal on ``|x|`` with ties
    broken by the lower line index; ``"bfs"`` takes lines in breadth-first
    discovery order from the root, lowest line index first.
    """
    nb = len(net.buses)
    if strategy in ("mst", "mst_by_reactance"):
        parent = list(range(nb))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        chosen = []
        for e in sorted(range(net.m), key=lambda k: (abs(net.lines[k].x), k)):
            ln = net.lines[e]
            ra, rb = find(ln.from_bus), find(ln.to_bus)
            if ra != rb:
                parent[ra] = rb
                chosen.append(e)
        if len(chosen) != net.n:
            raise NetworkError("network is disconnected")
        return tree_from_lines(net, chosen, "mst")
    if strategy == "bfs":
        adj: list[list[tuple[int, int]]] = [[] for _ in range(nb)]
        for e, ln in enumerate(net.lines):
            adj[ln.from_bus].append((ln.to_bus, e))
            adj[ln.to_bus].append((ln.from_bus, e))
        seen = [False] * nb
        seen[0] = True
        chosen = []
        queue = deque([0])
        while queue:
            i = queue.popleft()
            for j, e in sorted(adj[i], key=lambda t: t[1]):
                if not seen[j]:
                    seen[j] = True
                    chosen.append(e)
                    queue.append(j)
        if len(chosen) != net.n:
            raise NetworkError("network is disconnected")
        return tree_from_lines(net, chosen, "bfs")
    raise ValueError(f"unknown spanning tree strategy {strategy!r}")


@dataclass(frozen=True)
class IncidenceMatrices:
    """Reduced transposed incidence matrix in tree-first row order.

    ``B[k, i-1] = +1`` if line ``rows[k]`` leaves bus ``i``, ``-1`` if it
    enters, for non-slack buses ``i = 1..n``.
    """

    B: sp.csr_matrix
    B_T: sp.csr_matrix
    B_perp: sp.csr_matrix
    tree: SpanningTree
    rows: tuple[int, ...] = field(default=())

    @property
    def n(self) -> int:
        return self.B.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[0]

    def line_order(self) -> np.ndarray:
        """Permutation taking line-indexed vectors to row order: ``v[order]``."""
        return np.asarray(self.rows, dtype=int)


def incidence_matrix(net: Network, tree: SpanningTree | None = None) -> IncidenceMatrices:
    if tree is None:
        tree = spanning_tree(net)
    if len(tree.tree_lines) != net.n or len(tree.rows) != net.m:
        raise NetworkError("tree does not match network")
    rows, cols, vals = [], [], []
    for k, e in enumerate(tree.rows):
        ln = net.lines[e]
        if ln.from_bus != 0:
            rows.append(k)
            cols.append(ln.from_bus - 1)
            vals.append(1)
        if ln.to_bus != 0:
            rows.append(k)
            cols.append(ln.to_bus - 1)
            vals.append(-1)
    B = sp.csr_matrix((np.array(vals, dtype=np.int8), (rows, cols)), shape=(net.m, net.n), dtype=np.int8)
    return IncidenceMatrices(B, B[: net.n], B[net.n:], tree, tuple(tree.rows))


def tree_solve(tree: SpanningTree, net: Network | None, beta_tree: np.ndarray) -> np.ndarray:
    """Solve ``B_T theta = beta_T`` by one root-to-leaf pass.

    ``beta_tree`` is indexed by position in ``tree.tree_lines``. Returns the
    length-``n`` vector for buses ``1..n`` (the root angle is 0).
    """
    pos = {e: k for k, e in enumerate(tree.tree_lines)}
    theta = np.zeros(len(tree.parent), dtype=np.result_type(beta_tree, float))
    for j in tree.order[1:]:
        e = tree.parent_line[j]
        # row of e reads theta_from - theta_to = beta_e
        theta[j] = theta[tree.parent[j]] - tree.direction[j] * beta_tree[pos[e]]
    return theta[1:]


def tree_inverse_dense(tree: SpanningTree, net: Network) -> np.ndarray:
    """Dense ``B_T^{-1}`` from the path formula (for tests and small nets).

    Entry ``(i-1, k)`` is ``-direction`` of tree line ``k`` when it lies on
    the root path of bus ``i``; this is ``-1`` on every path entry when tree
    lines point away from the root.
    """
    n = net.n
    pos = {e: k for k, e in enumerate(tree.tree_lines)}
    out = np.zeros((n, n))
    for i in range(1, n + 1):
        node = i
        while node != 0:
            e = tree.parent_line[node]
            out[i - 1, pos[e]] = -tree.direction[node]
            node = tree.parent[node]
    return out


@dataclass(frozen=True)
class Cycle:
    """Basis cycle of a non-tree line.

    ``edges`` is the closed walk as ``(line, sign)`` pairs: the non-tree line
    first, traversed in its own direction (sign ``+1``), then the tree path
    back to its from-bus; ``sign`` is ``+1`` where the walk follows the line
    orientation.
    """

    link: int
    edges: tuple[tuple[int, int], ...]
    buses: tuple[int, ...]

    def signed_sum(self, values: np.ndarray) -> float:
        """Sum of line-indexed ``values`` around the walk."""
        return float(sum(s * values[e] for e, s in self.edges))


def _tree_path(tree: SpanningTree, a: int, b: int) -> list[tuple[int, int]]:
    """Tree path a -> b as (line, sign) with sign +1 where traversal follows the line."""
    up_a = []
    node = a
    anc_a = {a: 0}
    while node != 0:
        up_a.append(node)
        node = tree.parent[node]
        anc_a[node] = len(up_a)
    node = b
    down_b = []
    while node not in anc_a:
        down_b.append(node)
        node = tree.parent[node]
    lca = node
    path = []
    node = a
    while node != lca:
        # moving child -> parent
        path.append((tree.parent_line[node], -tree.direction[node]))
        node = tree.parent[node]
    for node in reversed(down_b):
        path.append((tree.parent_line[node], tree.direction[node]))
    return path


def cycle_basis(net: Network, tree: SpanningTree) -> list[Cycle]:
    cycles = []
    for e in tree.non_tree_lines:
        ln = net.lines[e]
        edges = [(e, 1)] + _tree_path(tree, ln.to_bus, ln.from_bus)
        buses = [ln.from_bus]
        node = ln.from_bus
        for k, s in edges:
            other = net.lines[k]
            node = other.to_bus if s == 1 else other.from_bus
            buses.append(node)
        cycles.append(Cycle(e, tuple(edges), tuple(buses[:-1])))
    return cycles
