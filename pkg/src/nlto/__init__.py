"""2D density-based topology optimization engine with dataset generation."""

__version__ = "0.1.0"

from .mesh import Mesh, BoundaryConditions, build_grid, make_boundary, element_dofs
from .materials import (
    LinearElasticMaterial,
    NeoHookeanMaterial,
    ElementMatrices,
    plane_stress_matrix,
    build_m_matrix,
    q4_stiffness,
    q4_vm_matrix,
    neo_hookean_point,
)

__all__ = [
    "__version__",
    "Mesh",
    "BoundaryConditions",
    "build_grid",
    "make_boundary",
    "element_dofs",
    "LinearElasticMaterial",
    "NeoHookeanMaterial",
    "ElementMatrices",
    "plane_stress_matrix",
    "build_m_matrix",
    "q4_stiffness",
    "q4_vm_matrix",
    "neo_hookean_point",
]
