"""Equilibrium solves: sparse linear elasticity and incremental Newton.

The global stiffness is assembled from one shared unit-density element
matrix scaled by rho^n per element, then partitioned into free and
prescribed blocks (all prescribed displacements are zero). The linear path
uses a direct sparse LU factorization which is retained on the state for
adjoint solves. The finite-deformation path runs load-incremental Newton
with an energy backtracking line search; element inversion shows up as
infinite energy and is rejected by the search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NewtonConvergenceError, SingularSystemError
from .materials import ElementMatrices, NeoHookeanMaterial, neo_hookean_batch, shape_gradients
from .mesh import BoundaryConditions, Mesh, all_element_dofs

NEWTON_RTOL = 1e-6
NEWTON_FLOOR = 1e-8
NEWTON_MAX_ITER = 50
DEFAULT_INCREMENTS = 10
MAX_HALVINGS = 4


@dataclass
class PartitionedSystem:
    """Stiffness blocks partitioned by free (f) and prescribed (p) dofs."""

    k_ff: sp.csr_matrix
    k_fp: sp.csr_matrix
    k_pf: sp.csr_matrix
    k_pp: sp.csr_matrix
    free: np.ndarray
    fixed: np.ndarray
    mesh: Mesh
    matrices: ElementMatrices
    densities: np.ndarray
    penal: float


@dataclass
class EquilibriumState:
    """Converged solve: displacements, reactions and per-element data.

    elem_energy holds the unpenalized strain energy integral of each element;
    elem_internal_force0 (finite-deformation only) the unpenalized internal
    nodal force vectors, so the penalized force of element e is
    rho_e^n * elem_internal_force0[e].
    """

    u: np.ndarray
    free: np.ndarray
    fixed: np.ndarray
    reactions: np.ndarray
    elem_energy: np.ndarray
    load: np.ndarray
    dofs: np.ndarray
    matrices: ElementMatrices | None = None
    elem_internal_force0: np.ndarray | None = None
    tangent_factorization: object = None
    newton_residuals: list = field(default_factory=list)

    @property
    def u_free(self) -> np.ndarray:
        return self.u[self.free]


def _physical(densities) -> np.ndarray:
    phys = getattr(densities, "physical", densities)
    return np.asarray(phys, dtype=float).ravel()


def free_dofs(mesh: Mesh, bc: BoundaryConditions) -> np.ndarray:
    return np.setdiff1d(np.arange(mesh.n_dofs), bc.fixed_dofs)


def assemble(mesh: Mesh, bc: BoundaryConditions, densities, penal: float,
             matrices: ElementMatrices) -> PartitionedSystem:
    """Assemble the SIMP-scaled global stiffness and partition it."""
    rho = _physical(densities)
    if rho.shape != (mesh.n_elems,):
        raise ValueError("density vector length does not match the mesh")
    dofs = all_element_dofs(mesh)
    rows = np.repeat(dofs, 8, axis=1).ravel()
    cols = np.tile(dofs, (1, 8)).ravel()
    vals = (matrices.ke0[None, :, :] * (rho ** penal)[:, None, None]).ravel()
    k = sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()

    free = free_dofs(mesh, bc)
    fixed = np.asarray(bc.fixed_dofs)
    return PartitionedSystem(
        k_ff=k[free][:, free], k_fp=k[free][:, fixed],
        k_pf=k[fixed][:, free], k_pp=k[fixed][:, fixed],
        free=free, fixed=fixed, mesh=mesh, matrices=matrices,
        densities=rho, penal=penal)


def _factorize(k_ff):
    try:
        lu = spla.splu(k_ff.tocsc())
    except RuntimeError as err:
        diag = k_ff.diagonal()
        weak = int(np.argmin(np.abs(diag)))
        raise SingularSystemError(
            f"stiffness factorization failed ({err}); weakest free-dof pivot "
            f"index {weak} with diagonal {diag[weak]:.3e}", dof=weak) from err
    return lu


def solve_linear(system: PartitionedSystem, load: np.ndarray) -> EquilibriumState:
    """Direct solve of the partitioned linear system for a full-length load."""
    load = np.asarray(load, dtype=float)
    lu = _factorize(system.k_ff)
    load_f = load[system.free]
    u_f = lu.solve(load_f)
    if not np.all(np.isfinite(u_f)):
        raise SingularSystemError("non-finite solution from factorization")
    # SuperLU may factor a singular matrix without erroring; verify the solve
    resid = np.linalg.norm(system.k_ff @ u_f - load_f)
    if resid > 1e-7 * max(np.linalg.norm(load_f), 1e-300):
        diag = system.k_ff.diagonal()
        weak = int(np.argmin(np.abs(diag)))
        raise SingularSystemError(
            f"factorized solve left residual {resid:.3e}; system is singular "
            f"(weakest pivot at free dof {weak})", dof=weak)

    mesh = system.mesh
    u = np.zeros(mesh.n_dofs)
    u[system.free] = u_f
    reactions = system.k_pf @ u_f

    dofs = all_element_dofs(mesh)
    ue = u[dofs]
    elem_energy = 0.5 * np.einsum("ni,ij,nj->n", ue, system.matrices.ke0, ue)

    return EquilibriumState(u=u, free=system.free, fixed=system.fixed,
                            reactions=reactions, elem_energy=elem_energy,
                            load=load, dofs=dofs, matrices=system.matrices,
                            tangent_factorization=lu)


class _NonlinearModel:
    """Vectorized total-Lagrangian kinematics on the uniform quad mesh."""

    def __init__(self, mesh: Mesh, mat: NeoHookeanMaterial, rho: np.ndarray, penal: float):
        self.mesh = mesh
        self.mat = mat
        self.rho_n = rho ** penal
        self.dofs = all_element_dofs(mesh)
        self.gps = shape_gradients(mesh.side)
        self.rows = np.repeat(self.dofs, 8, axis=1).ravel()
        self.cols = np.tile(self.dofs, (1, 8)).ravel()

    def _def_grads(self, u):
        ue = u[self.dofs].reshape(-1, 4, 2)
        for _, grad_n, det_j in self.gps:
            h = np.einsum("nai,aj->nij", ue, grad_n)
            f = h + np.eye(2)
            yield f, grad_n, det_j, ue

    def energy(self, u):
        """Total penalized internal energy; +inf on element inversion."""
        total = 0.0
        for f, _, det_j, _ in self._def_grads(u):
            psi, _, _ = neo_hookean_batch(f, self.mat, order=0)
            if np.any(~np.isfinite(psi)):
                return np.inf
            total += det_j * float(self.rho_n @ psi)
        return total

    def forces_and_tangent(self, u, need_tangent=True):
        """(elem_energy0, f0_elem (n,8), f_int global, K_T coo-values or None)."""
        n = self.mesh.n_elems
        psi_e = np.zeros(n)
        f0 = np.zeros((n, 4, 2))
        kt = np.zeros((n, 8, 8)) if need_tangent else None
        for f, grad_n, det_j, _ in self._def_grads(u):
            psi, piola, tang = neo_hookean_batch(f, self.mat, order=2 if need_tangent else 1)
            psi_e += det_j * psi
            f0 += det_j * np.einsum("nij,aj->nai", piola, grad_n)
            if need_tangent:
                kt += det_j * np.einsum("aj,nijkl,bl->naibk", grad_n, tang, grad_n).reshape(n, 8, 8)
        f0 = f0.reshape(n, 8)
        f_int = np.zeros(self.mesh.n_dofs)
        np.add.at(f_int, self.dofs.ravel(), (self.rho_n[:, None] * f0).ravel())
        vals = (self.rho_n[:, None, None] * kt).ravel() if need_tangent else None
        return psi_e, f0, f_int, vals

    def tangent_matrix(self, vals):
        return sp.coo_matrix((vals, (self.rows, self.cols)),
                             shape=(self.mesh.n_dofs, self.mesh.n_dofs)).tocsr()


def _line_search(model, u, d, free, load_full, pot, slope):
    """Backtracking on the total potential; returns (u_new, pot_new) or None."""
    alpha = 1.0
    for _ in range(40):
        u_try = u.copy()
        u_try[free] += alpha * d
        e_try = model.energy(u_try)
        pot_try = e_try - float(load_full @ u_try) if np.isfinite(e_try) else np.inf
        if pot_try <= pot + 1e-4 * alpha * slope:
            return u_try, pot_try
        alpha *= 0.5
    return None


def _newton_increment(model, u, load_full, free, rtol, max_iter, residuals):
    """Newton with energy backtracking toward equilibrium at load_full.

    When the tangent direction is not a descent direction for the potential
    (indefinite tangent near local instabilities of near-void elements) or
    its line search stalls, the step is recomputed from a Levenberg-damped
    tangent with growing damping, which always yields a usable descent
    direction.
    """
    tol = rtol * max(np.linalg.norm(load_full[free]), NEWTON_FLOOR)
    energy = model.energy(u)
    if not np.isfinite(energy):
        return None
    pot = energy - float(load_full @ u)
    eye = None

    for _ in range(max_iter):
        _, _, f_int, kt_vals = model.forces_and_tangent(u)
        r = f_int - load_full
        r_f = r[free]
        r_norm = np.linalg.norm(r_f)
        residuals.append(r_norm)
        if r_norm <= tol:
            return u
        k_ff = model.tangent_matrix(kt_vals)[free][:, free]
        tau = 0.0
        tau0 = 1e-6 * abs(k_ff.diagonal()).mean()
        accepted = None
        for _ in range(10):
            try:
                if tau == 0.0:
                    lu = _factorize(k_ff)
                else:
                    if eye is None:
                        eye = sp.identity(k_ff.shape[0], format="csr")
                    lu = _factorize((k_ff + tau * eye).tocsr())
                d = lu.solve(-r_f)
            except SingularSystemError:
                d = None
            if d is not None and np.all(np.isfinite(d)) and float(r_f @ d) < 0.0:
                step = _line_search(model, u, d, free, load_full, pot, float(r_f @ d))
                if step is not None:
                    accepted = step
                    break
            tau = max(10.0 * tau, tau0)
        if accepted is None:
            return None
        u, pot = accepted
    # final residual check after the last iteration budget
    _, _, f_int, _ = model.forces_and_tangent(u, need_tangent=False)
    r_norm = np.linalg.norm((f_int - load_full)[free])
    residuals.append(r_norm)
    return u if r_norm <= tol else None


def solve_newton(mesh: Mesh, bc: BoundaryConditions, densities, penal: float,
                 mat: NeoHookeanMaterial, load: np.ndarray,
                 n_increments: int = DEFAULT_INCREMENTS, u0: np.ndarray | None = None,
                 rtol: float = NEWTON_RTOL, max_iter: int = NEWTON_MAX_ITER) -> EquilibriumState:
    """Incremental Newton solve of the penalized neo-Hookean equilibrium.

    The load is ramped in n_increments equal steps; a failed increment is
    retried at half the step, up to MAX_HALVINGS nested halvings. When a warm
    start u0 is given, a single full-load solve is attempted first.
    """
    rho = _physical(densities)
    load = np.asarray(load, dtype=float)
    free = free_dofs(mesh, bc)
    model = _NonlinearModel(mesh, mat, rho, penal)
    residuals: list = []

    u = None
    if u0 is not None:
        u_try = np.array(u0, dtype=float)
        u_try[bc.fixed_dofs] = 0.0
        warm_res: list = []
        u = _newton_increment(model, u_try, load, free, rtol, max_iter, warm_res)
        if u is not None:
            residuals.extend(warm_res)

    if u is None:
        u = np.zeros(mesh.n_dofs)
        s_done = 0.0
        stack = [((k + 1) / n_increments, 0) for k in reversed(range(n_increments))]
        while stack:
            target, depth = stack.pop()
            step_res: list = []
            u_next = _newton_increment(model, u.copy(), target * load, free,
                                       rtol, max_iter, step_res)
            if u_next is None:
                if depth >= MAX_HALVINGS:
                    last = step_res[-1] if step_res else np.nan
                    raise NewtonConvergenceError(
                        f"increment to load factor {target:.4f} failed after "
                        f"{MAX_HALVINGS} halvings (last residual {last:.3e})",
                        residual=last)
                mid = s_done + 0.5 * (target - s_done)
                stack.append((target, depth + 1))
                stack.append((mid, depth + 1))
                continue
            u = u_next
            s_done = target
            residuals.extend(step_res)

    psi_e, f0, f_int, kt_vals = model.forces_and_tangent(u)
    k = model.tangent_matrix(kt_vals)
    lu = _factorize(k[free][:, free])
    fixed = np.asarray(bc.fixed_dofs)

    return EquilibriumState(u=u, free=free, fixed=fixed,
                            reactions=f_int[fixed], elem_energy=psi_e,
                            load=load, dofs=model.dofs, matrices=None,
                            elem_internal_force0=f0,
                            tangent_factorization=lu,
                            newton_residuals=residuals)
