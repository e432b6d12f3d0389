"""Modular iterative least-squares solver for factor graphs on manifolds."""

from .autodiff import Dual, jacobian_of
from .graph import (
    CorrespondencePool,
    FactorGraph,
    GraphView,
    Variable,
    VariableStatus,
    make_view,
)
from .manifold import Isometry2, Isometry3, GimbalLock
from .robust import Kernel, RobustifierPolicy, robustify
from .solver import (
    IterationStats,
    LmConfig,
    SolverConfig,
    compute_covariance,
    gauss_newton,
    levenberg_marquardt,
    solve,
    total_chi2,
)
from .sparse_block import (
    BlockLayout,
    BlockSparseMatrix,
    NotPositiveDefinite,
    Permutation,
)

__all__ = [
    "Dual",
    "jacobian_of",
    "CorrespondencePool",
    "FactorGraph",
    "GraphView",
    "Variable",
    "VariableStatus",
    "make_view",
    "Isometry2",
    "Isometry3",
    "GimbalLock",
    "Kernel",
    "RobustifierPolicy",
    "robustify",
    "IterationStats",
    "LmConfig",
    "SolverConfig",
    "compute_covariance",
    "gauss_newton",
    "levenberg_marquardt",
    "solve",
    "total_chi2",
    "BlockLayout",
    "BlockSparseMatrix",
    "NotPositiveDefinite",
    "Permutation",
]
