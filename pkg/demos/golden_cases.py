# ---
# jupyter:
#   jupytext:
#     formats: py:percent
# ---

# %% [markdown]
# # Loss and loadability on the bundled cases
#
# Loss minimization on four IEEE cases and loadability on two, with the
# exactness verdict for each. The same numbers come out of
# `bfm-opf solve ... --format json` followed by `bfm-opf report`.

# %%
import time

from bfmopf.caseio import load_case
from bfmopf.opf import check_exactness, solve_loadability, solve_opf_cr

for case in ("case14", "case_ieee30", "case57", "case118"):
    t0 = time.perf_counter()
    sol = solve_opf_cr(load_case(case))
    rep = check_exactness(sol)
    print(f"{case:12s} loss {sol.objective:8.4f} MW  exact={rep.exact!s:5s} gap {rep.max_gap:.1e}  "
          f"m-n={sol.net.m - sol.net.n}  {time.perf_counter() - t0:.2f} s")

# %%
for case in ("case14", "case39"):
    lam, sol = solve_loadability(load_case(case))
    print(f"{case:8s} max load {100 * lam:6.2f}%  exact={check_exactness(sol).exact}")

# %% [markdown]
# Inexact runs involve lines with near-zero resistance, where the objective
# barely prices the current variable, so the cone need not be tight there.

# %%
sol = solve_opf_cr(load_case("case57"))
rep = check_exactness(sol)
for e in rep.offending:
    ln = sol.net.lines[e]
    print(f"line {e}: r={ln.r:.0e} tap={ln.tap:.3f} gap={rep.gaps[e]:.2e}")
