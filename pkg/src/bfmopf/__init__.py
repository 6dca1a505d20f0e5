"""Optimal power flow in the branch flow model.

Second-order cone relaxation, exactness checks, phase angle recovery and
phase shifter synthesis for radial and mesh networks.
"""

__version__ = "0.1.0"

from .netmodel import (  # noqa: E402
    Bus, Line, Network, NetworkError, SpanningTree, IncidenceMatrices, Cycle,
    spanning_tree, tree_from_lines, incidence_matrix, cycle_basis, tree_solve,
)
from .caseio import CaseOptions, RawCase, CaseFormatError, parse_case, to_network, load_case  # noqa: E402
from .conic import ConeSpec, ConeBlock, ConicProblem, ConicSolution, solve, rotated_to_soc  # noqa: E402
from .opf import (  # noqa: E402
    Objective, OPFOptions, RelaxedSolution, ExactnessReport, build_opf_cr, solve_opf_cr,
    check_exactness, solve_loadability,
)
from .angles import (  # noqa: E402
    BetaVector, BranchFlowSolution, RecoveryReport, wrap_angle, compute_beta,
    recover_centralized, recover_distributed, inverse_project, verify_branch_flow,
)
from .shifters import (  # noqa: E402
    ShifterSetting, min_count_shifters, min_norm_shifters, check_placement, normalize_tree_shifters,
)
from .oracle import sweep_power_flow, brute_force_recovery  # noqa: E402
