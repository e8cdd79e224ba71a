"""Constitutive models and element-level matrices.

Two material models are supported: isotropic linear elasticity parametrized
by bulk and shear moduli, and a compressible neo-Hookean hyperelastic model

    psi = c10 * (I1_bar - 3) + (1 / d1) * (J - 1)**2,

where I1_bar is the first deviatoric invariant built from squared deviatoric
stretches, J = det(F), and the small-strain limit recovers mu = 2 * c10 and
kappa = 2 / d1.

Element matrices are for square bilinear quads with 2x2 Gauss quadrature:
the stiffness ke0 at unit density, and the von Mises matrix kvmo whose
quadratic form u' kvmo u is the element average of the squared von Mises
stress of the unit-density material.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ElementInversionError, IllConditionedMaterialError

PLANE_STRESS = "plane_stress"
PLANE_STRAIN = "plane_strain"

_GAUSS = (-1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0))
# Corner order matches mesh.elem_conn: BL, BR, TR, TL.
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])


@dataclass(frozen=True)
class LinearElasticMaterial:
    """Isotropic linear elastic material given by 3D bulk/shear moduli."""

    kappa: float
    mu: float
    mode: str = PLANE_STRESS

    def __post_init__(self):
        if self.kappa <= 0 or self.mu <= 0:
            raise ValueError("bulk and shear moduli must be positive")
        if self.mode not in (PLANE_STRESS, PLANE_STRAIN):
            raise ValueError(f"unknown 2D mode {self.mode!r}")

    @property
    def youngs(self) -> float:
        return 9.0 * self.kappa * self.mu / (3.0 * self.kappa + self.mu)

    @property
    def poisson(self) -> float:
        return (3.0 * self.kappa - 2.0 * self.mu) / (2.0 * (3.0 * self.kappa + self.mu))

    @classmethod
    def from_youngs(cls, youngs, poisson, mode=PLANE_STRESS):
        kappa = youngs / (3.0 * (1.0 - 2.0 * poisson))
        mu = youngs / (2.0 * (1.0 + poisson))
        return cls(kappa=kappa, mu=mu, mode=mode)


@dataclass(frozen=True)
class NeoHookeanMaterial:
    """Compressible neo-Hookean material, plane-strain kinematics by default."""

    c10: float
    d1: float
    mode: str = PLANE_STRAIN

    def __post_init__(self):
        if self.c10 <= 0 or self.d1 <= 0:
            raise ValueError("c10 and d1 must be positive")

    @property
    def mu(self) -> float:
        return 2.0 * self.c10

    @property
    def kappa(self) -> float:
        return 2.0 / self.d1

    def to_linear(self) -> LinearElasticMaterial:
        """Small-strain equivalent for consistency checks."""
        return LinearElasticMaterial(kappa=self.kappa, mu=self.mu, mode=PLANE_STRAIN)


@dataclass(frozen=True)
class ElementMatrices:
    """Per-element matrices at unit density for one uniform square element."""

    ke0: np.ndarray
    kvmo: np.ndarray
    emat: np.ndarray


def plane_stress_matrix(mat: LinearElasticMaterial) -> np.ndarray:
    """3x3 plane stress material matrix from the 3D moduli."""
    nu = mat.poisson
    if nu > 0.4999:
        raise IllConditionedMaterialError(
            f"Poisson ratio {nu:.6f} too close to 0.5 for a plane stress matrix")
    e = mat.youngs
    c = e / (1.0 - nu * nu)
    return c * np.array([[1.0, nu, 0.0],
                         [nu, 1.0, 0.0],
                         [0.0, 0.0, 0.5 * (1.0 - nu)]])


def plane_strain_matrix(mat: LinearElasticMaterial) -> np.ndarray:
    """3x3 plane strain material matrix from the 3D moduli."""
    lam = mat.kappa - 2.0 * mat.mu / 3.0
    mu = mat.mu
    return np.array([[lam + 2.0 * mu, lam, 0.0],
                     [lam, lam + 2.0 * mu, 0.0],
                     [0.0, 0.0, mu]])


def elastic_matrix(mat: LinearElasticMaterial) -> np.ndarray:
    """Material matrix matching mat.mode."""
    if mat.mode == PLANE_STRAIN:
        return plane_strain_matrix(mat)
    return plane_stress_matrix(mat)


def shape_gradients(side: float):
    """Shape function gradients of the square quad at the 2x2 Gauss points.

    Returns a list of (B, grad_n, det_j) per Gauss point, where B is the 3x8
    strain-displacement matrix, grad_n the (4, 2) array of dN/dx, dN/dy, and
    det_j the constant Jacobian determinant side^2 / 4.
    """
    if side <= 0:
        raise ValueError("element side must be positive")
    out = []
    det_j = side * side / 4.0
    for eta in _GAUSS:
        for xi in _GAUSS:
            dn_dxi = 0.25 * _XI * (1.0 + _ETA * eta)
            dn_deta = 0.25 * _ETA * (1.0 + _XI * xi)
            grad_n = np.column_stack([dn_dxi, dn_deta]) * (2.0 / side)
            b = np.zeros((3, 8))
            b[0, 0::2] = grad_n[:, 0]
            b[1, 1::2] = grad_n[:, 1]
            b[2, 0::2] = grad_n[:, 1]
            b[2, 1::2] = grad_n[:, 0]
            out.append((b, grad_n, det_j))
    return out


def q4_stiffness(emat: np.ndarray, side: float, thickness: float = 1.0) -> np.ndarray:
    """8x8 stiffness of one square quad, 2x2 Gauss quadrature."""
    ke = np.zeros((8, 8))
    for b, _, det_j in shape_gradients(side):
        ke += det_j * (b.T @ emat @ b)
    ke *= thickness
    return 0.5 * (ke + ke.T)


def build_m_matrix() -> np.ndarray:
    """Coefficient matrix of the squared von Mises stress in Voigt form."""
    return np.array([[1.0, -0.5, 0.0],
                     [-0.5, 1.0, 0.0],
                     [0.0, 0.0, 3.0]])


def q4_vm_matrix(emat: np.ndarray, side: float) -> np.ndarray:
    """8x8 matrix whose quadratic form is the element-mean squared von Mises stress."""
    m = build_m_matrix()
    core = emat @ m @ emat
    area = side * side
    k = np.zeros((8, 8))
    for b, _, det_j in shape_gradients(side):
        k += (det_j / area) * (b.T @ core @ b)
    return 0.5 * (k + k.T)


def element_matrices(mat: LinearElasticMaterial, side: float, thickness: float = 1.0) -> ElementMatrices:
    emat = elastic_matrix(mat)
    return ElementMatrices(ke0=q4_stiffness(emat, side, thickness),
                           kvmo=q4_vm_matrix(emat, side),
                           emat=emat)


def neo_hookean_batch(f: np.ndarray, mat: NeoHookeanMaterial, f33: float = 1.0,
                      order: int = 2):
    """Energy density, first Piola stress and tangent for a batch of in-plane F.

    f has shape (n, 2, 2); the out-of-plane stretch f33 is held fixed (1.0 is
    plane strain). Returns (psi (n,), piola (n, 2, 2), tangent (n, 2, 2, 2, 2));
    order trims the computation (0: energy only, 1: plus stress), returning
    None for the skipped parts. States with non-positive Jacobian get
    psi = +inf and zeroed derivatives so callers can reject them in a line
    search.
    """
    f = np.asarray(f, dtype=float)
    det2 = f[:, 0, 0] * f[:, 1, 1] - f[:, 0, 1] * f[:, 1, 0]
    jac = f33 * det2
    ok = jac > 0.0
    safe_det = np.where(ok, det2, 1.0)

    i1 = np.einsum("nij,nij->n", f, f) + f33 * f33
    safe_jac = np.where(ok, jac, 1.0)
    a = safe_jac ** (-2.0 / 3.0)

    c10, d1 = mat.c10, mat.d1
    psi = c10 * (a * i1 - 3.0) + (1.0 / d1) * (safe_jac - 1.0) ** 2
    psi = np.where(ok, psi, np.inf)
    if order == 0:
        return psi, None, None

    # In-plane inverse transpose, g_ij = (F^{-1})_ji.
    g = np.empty_like(f)
    g[:, 0, 0] = f[:, 1, 1]
    g[:, 1, 1] = f[:, 0, 0]
    g[:, 0, 1] = -f[:, 1, 0]
    g[:, 1, 0] = -f[:, 0, 1]
    g /= safe_det[:, None, None]

    # piola = 2 c10 a (F - I1/3 G) + (2/d1) (J-1) J G
    dev = f - (i1 / 3.0)[:, None, None] * g
    piola = 2.0 * c10 * a[:, None, None] * dev
    piola += (2.0 / d1) * ((safe_jac - 1.0) * safe_jac)[:, None, None] * g
    if order == 1:
        piola[~ok] = 0.0
        return psi, piola, None

    eye = np.eye(2)
    gg = np.einsum("nij,nkl->nijkl", g, g)
    gf = np.einsum("nkl,nij->nijkl", g, f)  # G_kl F_ij
    fg = np.einsum("nkl,nij->nijkl", f, g)  # F_kl G_ij
    # d g_ij / d F_kl = -g_kj g_il
    dg = -np.einsum("nkj,nil->nijkl", g, g)
    ii = np.einsum("ik,jl->ijkl", eye, eye)

    tangent = 2.0 * c10 * a[:, None, None, None, None] * (
        ii[None]
        - (2.0 / 3.0) * (gf + fg)
        + (2.0 / 9.0) * i1[:, None, None, None, None] * gg
        - (i1 / 3.0)[:, None, None, None, None] * dg
    )
    tangent += (2.0 / d1) * (
        ((2.0 * safe_jac - 1.0) * safe_jac)[:, None, None, None, None] * gg
        + ((safe_jac - 1.0) * safe_jac)[:, None, None, None, None] * dg
    )

    piola[~ok] = 0.0
    tangent[~ok] = 0.0
    return psi, piola, tangent


def neo_hookean_point(f: np.ndarray, mat: NeoHookeanMaterial, f33: float = 1.0):
    """Pointwise energy, stress and tangent for a single 2x2 deformation gradient."""
    f = np.asarray(f, dtype=float)
    if f.shape != (2, 2):
        raise ValueError("deformation gradient must be 2x2")
    if f33 * (f[0, 0] * f[1, 1] - f[0, 1] * f[1, 0]) <= 0.0:
        raise ElementInversionError("non-positive Jacobian in deformation gradient")
    psi, piola, tangent = neo_hookean_batch(f[None], mat, f33=f33)
    return float(psi[0]), piola[0], tangent[0]
