"""Command line front end: ``bfm-opf solve`` and ``bfm-opf report``.

``solve`` runs the pipeline solve -> exactness check -> angle recovery ->
(on failure) phase shifter synthesis -> branch flow verification.

Exit codes: 0 solved exactly (recovered, or convexified by shifters);
1 relaxation inexact; 2 recovery failed with shifters disabled;
3 verification of the recovered point failed; 4 solver failure;
5 input error; 6 internal error; 7 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .angles import inverse_project, recover_centralized, recover_distributed, compute_beta, verify_branch_flow
from .caseio import CaseFormatError, CaseOptions, load_case
from .netmodel import NetworkError, incidence_matrix, spanning_tree
from .opf import OPFError, OPFOptions, OPFSolveError, Objective, check_exactness, solve_opf_cr
from .shifters import min_count_shifters, min_norm_shifters, shifter_report

log = logging.getLogger("bfmopf")

EXIT_OK, EXIT_INEXACT, EXIT_NO_RECOVERY, EXIT_VERIFY, EXIT_SOLVER, EXIT_INPUT, EXIT_INTERNAL, EXIT_USAGE = range(8)

OBJECTIVE_FLAGS = {"loss": "loss", "cost": "gen_cost", "cvr": "cvr_mix", "loadability": "loadability"}
VERIFY_TOL = 1e-8


@dataclass(frozen=True)
class RunConfig:
    input: str
    objective: str = "loss"
    tree: str = "mst"
    phis: str = "min-count"
    tol_gap: float = 1e-6
    tol_angle: float = 1e-6
    zero_r_eps: float = 1e-6
    relax_load_ub: bool = False
    ignore_taps: bool = False
    fix_slack_voltage: bool = False
    timings: bool = True

    def __post_init__(self):
        if self.objective not in OBJECTIVE_FLAGS:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.tree not in ("mst", "bfs"):
            raise ValueError(f"unknown tree strategy {self.tree!r}")
        if self.phis not in ("min-count", "min-norm", "none"):
            raise ValueError(f"unknown shifter method {self.phis!r}")
        for name in ("tol_gap", "tol_angle"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.zero_r_eps < 0:
            raise ValueError("zero_r_eps must be nonnegative")


def _clean(obj):
    """JSON-safe copy: numpy scalars to float, non-finite floats to None."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def run_case(cfg: RunConfig) -> tuple[dict, int]:
    """Run the full pipeline on one case; returns the report and an exit code."""
    report = {"case": cfg.input, "config": asdict(cfg), "angle_unit": "rad"}
    report["config"].pop("timings")
    timings = {}
    t0 = time.perf_counter()
    try:
        opts = CaseOptions(zero_r_epsilon=cfg.zero_r_eps, ignore_taps=cfg.ignore_taps,
                           fix_slack_voltage=cfg.fix_slack_voltage, relax_load_ub=cfg.relax_load_ub)
        net = load_case(cfg.input, opts)
    except (OSError, CaseFormatError, NetworkError) as exc:
        report["error"] = f"input error: {exc}"
        return report, EXIT_INPUT
    timings["load"] = time.perf_counter() - t0
    report.update(name=net.name, buses=len(net.buses), links=net.m, n=net.n, base_mva=net.base_mva)

    obj = Objective(OBJECTIVE_FLAGS[cfg.objective])
    t1 = time.perf_counter()
    try:
        sol = solve_opf_cr(net, obj, OPFOptions(tol_gap=cfg.tol_gap, relax_load_ub=cfg.relax_load_ub))
    except OPFSolveError as exc:
        report["error"] = str(exc)
        report["solver_status"] = exc.status
        return report, EXIT_SOLVER
    except OPFError as exc:
        report["error"] = f"input error: {exc}"
        return report, EXIT_INPUT
    timings["solve"] = time.perf_counter() - t1
    report["objective"] = {
        "kind": obj.kind,
        "value": sol.objective,
        "unit": {"loss": "MW", "loadability": "fraction of base load"}.get(obj.kind, "cost units"),
        "loss_mw": sol.loss_mw,
        "lambda": sol.lam,
    }
    ex = check_exactness(sol, cfg.tol_gap)
    report["exactness"] = {"exact": ex.exact, "max_gap": ex.max_gap, "tol": ex.tol, "offending": ex.offending}
    if not ex.exact:
        report["recovery"] = None
        report["timings"] = timings
        return _finish(report, cfg, t0), EXIT_INEXACT

    t2 = time.perf_counter()
    tree = spanning_tree(net, cfg.tree)
    mats = incidence_matrix(net, tree)
    beta = compute_beta(sol, net, tree, cfg.tol_gap)
    rec = recover_centralized(beta, mats, cfg.tol_angle)
    dist = recover_distributed(sol, net, tree, cfg.tol_angle)
    if dist.verdict != rec.verdict:
        report["error"] = "centralized and distributed recovery disagree"
        return report, EXIT_INTERNAL
    report["tree"] = {"strategy": cfg.tree, "tree_lines": list(tree.tree_lines), "non_tree_lines": list(tree.non_tree_lines)}
    report["recovery"] = {
        "verdict": rec.verdict,
        "max_mismatch_rad": rec.max_mismatch,
        "mismatches": [{"line": int(e), "delta_rad": float(d)} for e, d in zip(rec.links, rec.mismatches)],
    }
    timings["recovery"] = time.perf_counter() - t2

    phi = None
    if rec.recovered:
        theta = rec.theta
        report["shifters"] = None
        code = EXIT_OK
    elif cfg.phis == "none":
        report["shifters"] = None
        report["timings"] = timings
        return _finish(report, cfg, t0), EXIT_NO_RECOVERY
    else:
        t3 = time.perf_counter()
        th_c, set_c = min_count_shifters(beta, mats, tree, cfg.tol_angle)
        th_n, set_n = min_norm_shifters(beta, mats)
        report["shifters"] = {
            "method": cfg.phis,
            "min-count": shifter_report(set_c, cfg.tree),
            "min-norm": shifter_report(set_n, cfg.tree),
        }
        chosen = set_c if cfg.phis == "min-count" else set_n
        theta = th_c if cfg.phis == "min-count" else th_n
        phi = chosen.phi
        report["shifters"]["phi_rad"] = phi.tolist()
        timings["shifters"] = time.perf_counter() - t3
        code = EXIT_OK
    x = inverse_project(sol, theta, phi)
    res = verify_branch_flow(x, net, phi)
    report["theta_rad"] = np.asarray(theta).tolist()
    report["residuals"] = {"ohm": res.ohm, "power": res.power, "balance": res.balance, "tol": VERIFY_TOL}
    if not res.ok(VERIFY_TOL):
        code = EXIT_VERIFY
    report["timings"] = timings
    return _finish(report, cfg, t0), code


def _finish(report: dict, cfg: RunConfig, t0: float) -> dict:
    if cfg.timings:
        report["timings"]["total"] = time.perf_counter() - t0
    else:
        report.pop("timings", None)
    return report


def _run_one(cfg: RunConfig):
    try:
        rep, code = run_case(cfg)
    except Exception as exc:  # noqa: BLE001 - any failure becomes an exit code
        log.exception("internal error on %s", cfg.input)
        rep, code = {"case": cfg.input, "error": f"internal error: {exc}"}, EXIT_INTERNAL
    rep["exit_code"] = code
    return _clean(rep), code


# Rendering ---------------------------------------------------------------------------

def _fmt_range(sh: dict | None, method: str) -> str:
    if not sh:
        return "-"
    lo, hi = sh[method]["range_deg"]
    return f"[{lo:.2f}, {hi:.2f}]"


def _summary_row(rep: dict) -> dict:
    sh = rep.get("shifters")
    obj = rep.get("objective") or {}
    ex = rep.get("exactness") or {}
    rec = rep.get("recovery") or {}
    row = {
        "case": rep.get("name") or rep.get("case"),
        "links": rep.get("links"),
        "objective": obj.get("kind"),
        "value": obj.get("value"),
        "max_gap": ex.get("max_gap"),
        "exact": ex.get("exact"),
        "recovery": rec.get("verdict", "-") if rec else "-",
        "required_ps": sh["min-count"]["required"] if sh else (rep["links"] - rep["n"] if "n" in rep else None),
        "active_ps": sh[sh["method"]]["active"] if sh else None,
        "min_count_range_deg": _fmt_range(sh, "min-count"),
        "min_norm_range_deg": _fmt_range(sh, "min-norm"),
        "residual": (rep.get("residuals") or {}).get("ohm"),
        "exit_code": rep.get("exit_code"),
        "error": rep.get("error", ""),
    }
    return row


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def render_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
    width = [max(len(c), *(len(row[k]) for row in cells)) for k, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, width)), "  ".join("-" * w for w in width)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, width)) for row in cells]
    return "\n".join(line.rstrip() for line in lines)


def render_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) if v is not None else "" for k, v in r.items()})
    return buf.getvalue()


def _details(rep: dict) -> str:
    """Human-readable detail block (degrees)."""
    out = []
    rec = rep.get("recovery")
    if rec and rec["verdict"] == "failed":
        out.append(f"{rep.get('name') or rep['case']}: angle recovery failed; per-cycle mismatch (deg):")
        for mm in rec["mismatches"]:
            out.append(f"  line {mm['line']:4d}  {math.degrees(mm['delta_rad']):+.4f}")
    sh = rep.get("shifters")
    if sh:
        s = sh[sh["method"]]
        out.append(f"  shifters ({sh['method']}): required {s['required']}, active {s['active']}, "
                   f"range [{s['range_deg'][0]:.2f}, {s['range_deg'][1]:.2f}] deg")
    if rep.get("error"):
        out.append(f"{rep['case']}: {rep['error']}")
    return "\n".join(out)


def emit(reports: list[dict], fmt: str) -> str:
    if fmt == "json":
        data = reports[0] if len(reports) == 1 else reports
        return json.dumps(data, indent=1, sort_keys=True) + "\n"
    rows = [_summary_row(r) for r in reports]
    if fmt == "csv":
        return render_csv(rows)
    text = render_table(rows)
    details = [d for d in (_details(r) for r in reports) if d]
    return text + "\n" + ("\n".join(details) + "\n" if details else "")


# Report of several runs ----------------------------------------------------------------

LOSS_COLUMNS = ["case", "links", "min_loss_no_ps_mw", "min_loss_opf_cr_mw", "required_ps", "active_ps",
                "min_count_range_deg", "min_norm_range_deg"]
LOAD_COLUMNS = ["case", "max_load_no_ps", "max_load_opf_cr", "required_ps", "active_ps",
                "min_count_range_deg", "min_norm_range_deg", "time_s"]


def comparison_tables(reports: list[dict], external: dict[str, float] | None = None) -> dict[str, list[dict]]:
    """Group solve reports into a loss table and a loadability table."""
    external = external or {}
    tables = {"loss": [], "loadability": []}
    for rep in reports:
        if "objective" not in rep or "links" not in rep:
            raise ValueError(f"not a solve report: {rep.get('case', '?')}")
        name = rep.get("name") or rep["case"]
        sh = rep.get("shifters")
        required = rep["links"] - rep["n"]
        active = sh["min-count"]["active"] if sh else (0 if (rep.get("recovery") or {}).get("verdict") == "recovered" else None)
        kind = rep["objective"]["kind"]
        ext = external.get(name)
        if kind == "loadability":
            lam = rep["objective"]["lambda"]
            tables["loadability"].append({
                "case": name,
                "max_load_no_ps": f"{100 * ext:.1f}%" if ext is not None else "-",
                "max_load_opf_cr": f"{100 * lam:.1f}%" if lam is not None else "-",
                "required_ps": required, "active_ps": active,
                "min_count_range_deg": _fmt_range(sh, "min-count"),
                "min_norm_range_deg": _fmt_range(sh, "min-norm"),
                "time_s": (rep.get("timings") or {}).get("total"),
            })
        else:
            tables["loss"].append({
                "case": name, "links": rep["links"],
                "min_loss_no_ps_mw": ext,
                "min_loss_opf_cr_mw": rep["objective"]["loss_mw"],
                "required_ps": required, "active_ps": active,
                "min_count_range_deg": _fmt_range(sh, "min-count"),
                "min_norm_range_deg": _fmt_range(sh, "min-norm"),
            })
    return {k: v for k, v in tables.items() if v}


# Argument parsing -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bfm-opf", description="Branch flow OPF with conic relaxation, angle recovery and phase shifters.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("solve", help="solve one or more cases")
    s.add_argument("cases", nargs="+", help="case files (MATPOWER .m or native JSON) or bundled names such as case14")
    s.add_argument("--objective", choices=sorted(OBJECTIVE_FLAGS), default="loss")
    s.add_argument("--tree", choices=["mst", "bfs"], default="mst")
    s.add_argument("--phis", choices=["min-count", "min-norm", "none"], default="min-count")
    s.add_argument("--tol-gap", type=float, default=1e-6)
    s.add_argument("--tol-angle", type=float, default=1e-6)
    s.add_argument("--zero-r-eps", type=float, default=1e-6)
    s.add_argument("--relax-load-ub", action="store_true", help="drop the upper bounds on loads")
    s.add_argument("--ignore-taps", action="store_true", help="force transformer ratios to 1")
    s.add_argument("--fix-slack-voltage", action="store_true", help="pin the slack voltage to its setpoint")
    s.add_argument("--format", choices=["table", "json", "csv"], default="table")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--no-timings", action="store_true")
    s.add_argument("-o", "--output", help="write the report here instead of stdout")

    r = sub.add_parser("report", help="tabulate saved JSON solve reports")
    r.add_argument("files", nargs="+")
    r.add_argument("--no-ps", action="append", default=[], metavar="CASE=VALUE",
                   help="externally computed objective without shifters (MW, or load factor)")
    r.add_argument("--format", choices=["table", "json", "csv"], default="table")
    r.add_argument("-o", "--output")
    return p


def _write(text: str, path: str | None):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_solve(args) -> int:
    try:
        cfgs = [RunConfig(c, args.objective, args.tree, args.phis, args.tol_gap, args.tol_angle, args.zero_r_eps,
                          args.relax_load_ub, args.ignore_taps, args.fix_slack_voltage, not args.no_timings)
                for c in args.cases]
    except ValueError as exc:
        sys.stderr.write(f"bfm-opf: error: {exc}\n")
        return EXIT_USAGE
    if args.jobs > 1 and len(cfgs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one, cfgs))
    else:
        results = [_run_one(c) for c in cfgs]
    reports = [r for r, _ in results]
    _write(emit(reports, args.format), args.output)
    return max(code for _, code in results)


def cmd_report(args) -> int:
    reports = []
    try:
        for path in args.files:
            with open(path) as fh:
                data = json.load(fh)
            reports.extend(data if isinstance(data, list) else [data])
        external = {}
        for item in args.no_ps:
            name, _, val = item.partition("=")
            external[name] = float(val)
        tables = comparison_tables(reports, external)
    except (OSError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"bfm-opf: input error: {exc}\n")
        return EXIT_INPUT
    except ValueError as exc:
        sys.stderr.write(f"bfm-opf: schema mismatch: {exc}\n")
        return EXIT_INPUT
    if args.format == "json":
        text = json.dumps(_clean(tables), indent=1, sort_keys=True) + "\n"
    elif args.format == "csv":
        text = "".join(render_csv(rows) for rows in tables.values())
    else:
        title = {"loss": "Loss minimization", "loadability": "Loadability maximization"}
        text = "\n\n".join(f"{title[k]}\n{render_table(v)}" for k, v in tables.items()) + "\n"
    _write(text, args.output)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("BFM_OPF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "solve":
        return cmd_solve(args)
    if args.command == "report":
        return cmd_report(args)
    parser.print_usage(sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
