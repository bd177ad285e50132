from .program import (
    AffExpr,
    ConicProgram,
    HermitianBlock,
    ProgramBuilder,
    cplx_inner,
    mat_to_svec,
    svec_to_mat,
)
from .solver import ConicSolution, SolverOptions, solve

__all__ = [
    "AffExpr",
    "ConicProgram",
    "HermitianBlock",
    "ProgramBuilder",
    "cplx_inner",
    "mat_to_svec",
    "svec_to_mat",
    "ConicSolution",
    "SolverOptions",
    "solve",
]
