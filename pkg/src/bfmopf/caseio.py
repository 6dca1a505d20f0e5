"""Case file input/output.

Reads MATPOWER version-2 case files (a grammar subset: ``mpc.<name> = value;``
scalars and ``mpc.<table> = [ ... ];`` matrices with ``%`` comments) and a
native JSON network schema, and converts raw tables to a per-unit
:class:`~bfmopf.netmodel.Network`.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .netmodel import INF, Bus, Line, Network, NetworkError

log = logging.getLogger(__name__)

# MATPOWER column indices (0-based)
BUS_I, BUS_TYPE, PD, QD, GS, BS, VM, VMAX, VMIN = 0, 1, 2, 3, 4, 5, 7, 11, 12
GEN_BUS, QMAX, QMIN, VG, GEN_STATUS, PMAX, PMIN = 0, 3, 4, 5, 7, 8, 9
F_BUS, T_BUS, BR_R, BR_X, BR_B, RATE_A, TAP, SHIFT, BR_STATUS = 0, 1, 2, 3, 4, 5, 8, 9, 10

MIN_COLS = {"bus": 13, "gen": 10, "branch": 11}

BUNDLED = {
    "case14": "case14.m",
    "ieee14": "case14.m",
    "case30": "case30.m",
    "case_ieee30": "case_ieee30.m",
    "ieee30": "case_ieee30.m",
    "case39": "case39.m",
    "ne39": "case39.m",
    "case57": "case57.m",
    "ieee57": "case57.m",
    "case118": "case118.m",
    "ieee118": "case118.m",
    "case300": "case300.m",
    "ieee300": "case300.m",
}

SCHEMA_ID = "bfmopf-network"


class CaseFormatError(ValueError):
    """Syntax or content error in a case file; carries a 1-based line/column when known."""

    def __init__(self, message, line=None, column=None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column


@dataclass
class RawCase:
    base_mva: float
    bus: np.ndarray
    gen: np.ndarray
    branch: np.ndarray
    gencost: np.ndarray | None = None
    name: str = ""


@dataclass(frozen=True)
class CaseOptions:
    """Preprocessing applied by :func:`to_network`.

    Taps are modeled (``ignore_taps=False``) and parallel branches are kept
    as separate lines by default; ``fix_slack_voltage`` pins the slack bus
    voltage to its generator setpoint instead of the bus voltage box.
    """

    zero_r_epsilon: float = 1e-6
    lump_line_charging: bool = True
    ignore_taps: bool = False
    merge_parallel: bool = False
    fix_slack_voltage: bool = False
    relax_load_ub: bool = False

    def __post_init__(self):
        if self.zero_r_epsilon < 0:
            raise ValueError("zero_r_epsilon must be nonnegative")


_ASSIGN = re.compile(r"mpc\.(\w+)\s*=\s*")
_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?(?:Inf|inf|NaN|nan)")


def _strip_comments(text: str) -> str:
    out = []
    for line in text.splitlines():
        # MATLAB strings in case files only appear in assignments we skip
        k = line.find("%")
        out.append(line if k < 0 else line[:k])
    return "\n".join(out)


def _line_col(text: str, pos: int) -> tuple[int, int]:
    line = text.count("\n", 0, pos) + 1
    col = pos - (text.rfind("\n", 0, pos) + 1) + 1
    return line, col


def _parse_matrix(body: str, text: str, offset: int, name: str) -> np.ndarray:
    rows = []
    width = None
    pos = 0
    for chunk in re.split(r"[;\n]", body):
        start = offset + pos
        pos += len(chunk) + 1
        tokens = chunk.replace(",", " ").split()
        if not tokens:
            continue
        vals = []
        for tok in tokens:
            if not _NUMBER.fullmatch(tok):
                line, col = _line_col(text, start + max(chunk.find(tok), 0))
                raise CaseFormatError(f"invalid number {tok!r} in table {name}", line, col)
            vals.append(float(tok))
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            line, col = _line_col(text, start)
            raise CaseFormatError(f"inconsistent column count in table {name}: {len(vals)} != {width}", line, col)
        rows.append(vals)
    if not rows:
        return np.zeros((0, 0))
    return np.array(rows, dtype=float)


def parse_matpower(text: str) -> RawCase:
    """Parse MATPOWER case text into tables."""
    clean = _strip_comments(text)
    name_match = re.search(r"function\s+mpc\s*=\s*(\w+)", clean)
    scalars: dict[str, float] = {}
    tables: dict[str, np.ndarray] = {}
    for match in _ASSIGN.finditer(clean):
        key = match.group(1)
        start = match.end()
        if clean.startswith("[", start):
            end = clean.find("]", start)
            if end < 0:
                line, col = _line_col(clean, start)
                raise CaseFormatError(f"unterminated matrix for mpc.{key}", line, col)
            tables[key] = _parse_matrix(clean[start + 1:end], clean, start + 1, key)
        elif clean.startswith("{", start) or clean.startswith("'", start):
            continue
        else:
            end = clean.find(";", start)
            token = clean[start:end if end >= 0 else None].strip()
            try:
                scalars[key] = float(token)
            except ValueError:
                line, col = _line_col(clean, start)
                raise CaseFormatError(f"cannot parse value of mpc.{key}: {token!r}", line, col) from None
    if "baseMVA" not in scalars:
        raise CaseFormatError("missing scalar: baseMVA")
    for key in ("bus", "gen", "branch"):
        if key not in tables:
            raise CaseFormatError(f"missing table: {key}")
        tab = tables[key]
        if tab.size and tab.shape[1] < MIN_COLS[key]:
            raise CaseFormatError(f"table {key} has {tab.shape[1]} columns, expected at least {MIN_COLS[key]}")
    gen = tables["gen"]
    branch = tables["branch"]
    gencost = tables.get("gencost")
    if gen.size:
        keep = gen[:, GEN_STATUS] > 0
        if gencost is not None and len(gencost) >= len(gen):
            gencost = gencost[: len(gen)][keep]
        gen = gen[keep]
    if branch.size:
        branch = branch[branch[:, BR_STATUS] > 0]
    bus = tables["bus"]
    ids = set(bus[:, BUS_I].astype(int)) if bus.size else set()
    for tab, cols, key in ((gen, (GEN_BUS,), "gen"), (branch, (F_BUS, T_BUS), "branch")):
        for c in cols:
            missing = set(tab[:, c].astype(int)) - ids if tab.size else set()
            if missing:
                raise CaseFormatError(f"table {key} references unknown bus ids {sorted(missing)}")
    return RawCase(scalars["baseMVA"], bus, gen, branch, gencost, name_match.group(1) if name_match else "")


def parse_case(text: str) -> RawCase | Network:
    """Parse case text, auto-detecting the native JSON schema.

    MATPOWER text yields a :class:`RawCase`; JSON yields a :class:`Network`
    directly since it is already in per-unit with internal indexing.
    """
    if text.lstrip().startswith("{"):
        return network_from_json(text)
    return parse_matpower(text)


def _linear_cost(row: np.ndarray) -> float:
    # polynomial model: [2, startup, shutdown, ncost, c_{n-1} ... c_0]
    if int(row[0]) != 2:
        return 0.0
    ncost = int(row[3])
    coeffs = row[4:4 + ncost]
    return float(coeffs[-2]) if ncost >= 2 else 0.0


def to_network(raw: RawCase, opts: CaseOptions | None = None) -> Network:
    """Convert MATPOWER tables to a per-unit network with the slack at index 0."""
    opts = opts or CaseOptions()
    base = raw.base_mva
    bus = raw.bus
    slack_rows = np.flatnonzero(bus[:, BUS_TYPE] == 3)
    if len(slack_rows) == 0:
        raise NetworkError("no slack bus (type 3) in case")
    if len(slack_rows) > 1:
        raise NetworkError(f"multiple slack buses: {bus[slack_rows, BUS_I].astype(int).tolist()}")
    s = int(slack_rows[0])
    order = [s] + [k for k in range(len(bus)) if k != s]
    labels = [int(bus[k, BUS_I]) for k in order]
    index = {lab: i for i, lab in enumerate(labels)}
    nb = len(order)

    shunt = np.array([complex(bus[k, GS], bus[k, BS]) / base for k in order])
    pg_min = np.zeros(nb)
    pg_max = np.zeros(nb)
    qg_min = np.zeros(nb)
    qg_max = np.zeros(nb)
    cost_num = np.zeros(nb)
    v_set = None
    for g, row in enumerate(raw.gen):
        i = index[int(row[GEN_BUS])]
        pg_min[i] += row[PMIN] / base
        pg_max[i] += row[PMAX] / base
        qg_min[i] += row[QMIN] / base
        qg_max[i] += row[QMAX] / base
        if raw.gencost is not None and g < len(raw.gencost):
            cost_num[i] += _linear_cost(raw.gencost[g]) * max(row[PMAX] - row[PMIN], 1.0)
        if i == 0 and v_set is None:
            v_set = row[VG]
    cap = np.array([max(pg_max[i] - pg_min[i], 0.0) * base for i in range(nb)])
    cost = np.where(cap > 0, cost_num / np.maximum(cap, 1.0), 0.0) * base  # per pu

    lines = []
    lumped = np.zeros(nb, dtype=complex)
    tapped = []
    for k, row in enumerate(raw.branch):
        f, t = index[int(row[F_BUS])], index[int(row[T_BUS])]
        r, x, b = row[BR_R], row[BR_X], row[BR_B]
        tap = row[TAP] if row[TAP] != 0 else 1.0
        if row[SHIFT] != 0:
            log.warning("branch %d: phase shift %.3g deg ignored", k, row[SHIFT])
        if tap != 1.0:
            tapped.append(k)
            if opts.ignore_taps:
                tap = 1.0
        if r == 0:
            r = opts.zero_r_epsilon
        if opts.lump_line_charging and b != 0:
            lumped[f] += 1j * b / 2 / tap**2
            lumped[t] += 1j * b / 2
        s_max = row[RATE_A] / base if row[RATE_A] > 0 else INF
        lines.append(Line(f, t, float(r), float(x), float(tap), INF, float(s_max), label=k))
    if tapped and opts.ignore_taps:
        log.warning("ignoring off-nominal taps on branches %s", tapped)
    shunt = shunt + lumped
    if opts.merge_parallel:
        lines = merge_parallel_lines(lines)

    buses = []
    for i, k in enumerate(order):
        row = bus[k]
        vmin, vmax = row[VMIN] ** 2, row[VMAX] ** 2
        if i == 0 and opts.fix_slack_voltage:
            vm = v_set if v_set is not None else row[VM]
            vmin = vmax = vm**2
        pd, qd = row[PD] / base, row[QD] / base
        pc_max = INF if opts.relax_load_ub else pd
        qc_max = INF if opts.relax_load_ub else qd
        buses.append(Bus(i, complex(shunt[i]), float(vmin), float(vmax),
                         float(pg_min[i]), float(pg_max[i]), float(qg_min[i]), float(qg_max[i]),
                         float(pd), float(pc_max), float(qd), float(qc_max),
                         is_slack=(i == 0), cost=float(cost[i]), label=labels[i]))
    return Network(tuple(buses), tuple(lines), float(base), raw.name, tuple(labels))


def merge_parallel_lines(lines: list[Line]) -> list[Line]:
    """Combine lines joining the same bus pair into one equivalent impedance."""
    groups: dict[tuple[int, int], list[Line]] = {}
    for ln in lines:
        groups.setdefault(tuple(sorted((ln.from_bus, ln.to_bus))), []).append(ln)
    out = []
    for ln in lines:
        grp = groups[tuple(sorted((ln.from_bus, ln.to_bus)))]
        if grp[0] is not ln:
            continue
        if len(grp) == 1:
            out.append(ln)
            continue
        y = 0j
        s_max = 0.0
        for other in grp:
            if other.tap != grp[0].tap or (other.from_bus, other.to_bus) != (ln.from_bus, ln.to_bus):
                if other.tap != 1.0 or grp[0].tap != 1.0:
                    raise NetworkError(f"cannot merge parallel transformers {ln.label} and {other.label}")
            y += other.y
            s_max += other.s_max
        z = 1 / y
        out.append(Line(ln.from_bus, ln.to_bus, z.real, z.imag, ln.tap, INF, s_max, ln.label))
    return out


def load_case(source: str | Path, opts: CaseOptions | None = None) -> Network:
    """Load a network from a path, a bundled case name (``"case14"``) or case text."""
    text = None
    name = str(source)
    if name in BUNDLED:
        text = resources.files("bfmopf.cases").joinpath(BUNDLED[name]).read_text()
    elif "\n" not in name and Path(name).exists():
        text = Path(name).read_text()
    elif "\n" in name or name.lstrip().startswith("{"):
        text = name
    else:
        raise FileNotFoundError(name)
    parsed = parse_case(text)
    if isinstance(parsed, Network):
        return parsed
    return to_network(parsed, opts)


def _num(x: float):
    return None if math.isinf(x) else float(x)


def _unnum(x, default: float) -> float:
    return default if x is None else float(x)


def network_to_dict(net: Network) -> dict:
    return {
        "format": SCHEMA_ID,
        "version": 1,
        "name": net.name,
        "base_mva": net.base_mva,
        "buses": [
            {
                "index": b.index,
                "label": b.label,
                "slack": b.is_slack,
                "g": b.shunt.real,
                "b": b.shunt.imag,
                "v_min": b.v_min,
                "v_max": _num(b.v_max),
                "pg_min": _num(b.pg_min), "pg_max": _num(b.pg_max),
                "qg_min": _num(b.qg_min), "qg_max": _num(b.qg_max),
                "pc_min": _num(b.pc_min), "pc_max": _num(b.pc_max),
                "qc_min": _num(b.qc_min), "qc_max": _num(b.qc_max),
                "cost": b.cost,
            }
            for b in net.buses
        ],
        "lines": [
            {
                "from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x, "tap": ln.tap,
                "i_max": _num(ln.i_max), "s_max": _num(ln.s_max), "label": ln.label,
            }
            for ln in net.lines
        ],
    }


def network_to_json(net: Network, indent: int | None = 1) -> str:
    """Serialize to the native schema. Unbounded limits are written as ``null``;
    shunt ``b`` is the imaginary part of the shunt admittance."""
    return json.dumps(network_to_dict(net), indent=indent)


def network_from_dict(data: dict) -> Network:
    if data.get("format", SCHEMA_ID) != SCHEMA_ID:
        raise CaseFormatError(f"unexpected format {data.get('format')!r}")
    for key in ("base_mva", "buses", "lines"):
        if key not in data:
            raise CaseFormatError(f"missing field: {key}")
    buses = []
    for k, b in enumerate(data["buses"]):
        buses.append(Bus(
            int(b.get("index", k)), complex(b.get("g", 0.0), b.get("b", 0.0)),
            float(b.get("v_min", 0.0)), _unnum(b.get("v_max"), INF),
            _unnum(b.get("pg_min"), -INF), _unnum(b.get("pg_max"), INF),
            _unnum(b.get("qg_min"), -INF), _unnum(b.get("qg_max"), INF),
            _unnum(b.get("pc_min"), -INF), _unnum(b.get("pc_max"), INF),
            _unnum(b.get("qc_min"), -INF), _unnum(b.get("qc_max"), INF),
            is_slack=bool(b.get("slack", k == 0)), cost=float(b.get("cost", 0.0)),
            label=b.get("label"),
        ))
    lines = [
        Line(int(ln["from"]), int(ln["to"]), float(ln["r"]), float(ln["x"]), float(ln.get("tap", 1.0)),
             _unnum(ln.get("i_max"), INF), _unnum(ln.get("s_max"), INF), ln.get("label"))
        for ln in data["lines"]
    ]
    labels = tuple(b.label if b.label is not None else b.index for b in buses)
    return Network(tuple(buses), tuple(lines), float(data["base_mva"]), data.get("name", ""), labels)


def network_from_json(text: str) -> Network:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from None
    return network_from_dict(data)
