"""Nearby lower-rank matrix polynomials under affine perturbation structures."""

from .embedding import (MinimalEmbedding, REmbedding, distance_lower_bound,
                        minimal_embed, phi, psi, r_embed)
from .kkt import KKTProblem, check_second_order
from .polycore import MatrixPolynomial, PolyVector, apply, frobenius_norm
from .rankfact import coordinate_descent, separation_check
from .solver import (RigidStructureError, SolveReport, SolverError,
                     Tolerances, solve)
from .structure import (NormalizationSpec, PerturbationStructure,
                        read_mask_file, structure_degree_preserving,
                        structure_entry_degree_preserving,
                        structure_support_preserving, write_mask_file)

__version__ = "0.1.0"

__all__ = [
    "MatrixPolynomial",
    "PolyVector",
    "apply",
    "frobenius_norm",
    "REmbedding",
    "MinimalEmbedding",
    "phi",
    "psi",
    "r_embed",
    "minimal_embed",
    "distance_lower_bound",
    "PerturbationStructure",
    "NormalizationSpec",
    "structure_degree_preserving",
    "structure_entry_degree_preserving",
    "structure_support_preserving",
    "read_mask_file",
    "write_mask_file",
    "KKTProblem",
    "check_second_order",
    "Tolerances",
    "SolveReport",
    "SolverError",
    "RigidStructureError",
    "solve",
    "coordinate_descent",
    "separation_check",
]
