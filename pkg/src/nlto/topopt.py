"""Density-based compliance minimization: filter, objective, outer loop.

The design variables are element densities in [rho_min, 1]. A cone density
filter maps them to the physical field the solver and constraints see; its
transpose carries sensitivities back. The outer loop alternates equilibrium
solves with moving-asymptotes updates until the design stalls
(max |d rho| < 0.01) or the iteration cap is reached.

Linear-scenario runs solve at unit load magnitude and rescale the reported
compliance by magnitude^2 afterwards, which is exact for linear elasticity
and makes the optimized design independent of load amplitude by
construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import fe
from .dataset import ProblemSpec
from .materials import (
    LinearElasticMaterial,
    NeoHookeanMaterial,
    element_matrices,
)
from .mesh import Mesh, build_grid, make_boundary
from .mma import MmaState, mma_update

RHO_MIN = 1e-3
MOVE_TOL = 0.01
MAX_ITERATIONS = 100
FEASIBILITY_TOL = 1e-3


@dataclass
class DensityField:
    """Design variables plus the filtered field consumed by physics."""

    design: np.ndarray
    physical: np.ndarray


@dataclass(frozen=True)
class FilterOperator:
    """Row-stochastic cone filter over element centers."""

    weights: sp.csr_matrix
    r_min: float

    def apply(self, x: np.ndarray) -> np.ndarray:
        out = self.weights @ x
        # row-stochastic weights preserve bounds exactly in real arithmetic;
        # clip the float roundoff so the invariant holds bitwise too
        return np.clip(out, x.min(), x.max())


def build_filter(mesh: Mesh, r_min: float) -> FilterOperator:
    """Cone weights w = max(0, r_min - d) over element centers, row-normalized."""
    if r_min <= 0:
        raise ValueError("filter radius must be positive")
    h = mesh.side
    reach = int(np.ceil(r_min / h))
    offsets = []
    for di in range(-reach, reach + 1):
        for dj in range(-reach, reach + 1):
            d = h * np.hypot(di, dj)
            if d < r_min:
                offsets.append((di, dj, r_min - d))

    rows_idx, cols_idx = np.divmod(np.arange(mesh.n_elems), mesh.nx)
    rows, cols, vals = [], [], []
    for di, dj, w in offsets:
        ri = rows_idx + di
        cj = cols_idx + dj
        keep = (ri >= 0) & (ri < mesh.ny) & (cj >= 0) & (cj < mesh.nx)
        rows.append(np.flatnonzero(keep))
        cols.append(ri[keep] * mesh.nx + cj[keep])
        vals.append(np.full(keep.sum(), w))
    w = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(mesh.n_elems, mesh.n_elems)).tocsr()
    scale = np.asarray(w.sum(axis=1)).ravel()
    w = sp.diags(1.0 / scale) @ w
    return FilterOperator(weights=w.tocsr(), r_min=float(r_min))


def filter_chain_rule(filt: FilterOperator, d_phys: np.ndarray) -> np.ndarray:
    """Pull a physical-density sensitivity back to the design variables."""
    d_phys = np.asarray(d_phys, dtype=float)
    if d_phys.shape[0] != filt.weights.shape[0]:
        raise ValueError("sensitivity length does not match the filter")
    return filt.weights.T @ d_phys


def compliance(state: fe.EquilibriumState, load: np.ndarray) -> float:
    """External work of the applied load at equilibrium."""
    return float(np.asarray(load) @ state.u)


def compliance_sens_linear(state: fe.EquilibriumState, densities, penal: float,
                           ke0: np.ndarray) -> np.ndarray:
    """d compliance / d physical density for the self-adjoint linear case."""
    rho = np.asarray(getattr(densities, "physical", densities), dtype=float)
    ue = state.u[state.dofs]
    quad = np.einsum("ni,ij,nj->n", ue, ke0, ue)
    return -penal * rho ** (penal - 1.0) * quad


def compliance_sens_nonlinear(state: fe.EquilibriumState, densities,
                              penal: float) -> np.ndarray:
    """Adjoint compliance sensitivity at a converged finite-deformation state."""
    if state.tangent_factorization is None or state.elem_internal_force0 is None:
        raise RuntimeError("state is missing the converged tangent factorization")
    rho = np.asarray(getattr(densities, "physical", densities), dtype=float)
    lam = np.zeros_like(state.u)
    lam[state.free] = state.tangent_factorization.solve(state.load[state.free])
    lam_e = lam[state.dofs]
    return -penal * rho ** (penal - 1.0) * np.einsum(
        "ni,ni->n", lam_e, state.elem_internal_force0)


def volume_constraint(densities, v_f: float):
    """g1 = mean(physical density) - v_f and its uniform gradient."""
    rho = np.asarray(getattr(densities, "physical", densities), dtype=float)
    g1 = float(rho.mean() - v_f)
    return g1, np.full(rho.size, 1.0 / rho.size)


@dataclass
class OptimizationResult:
    densities: np.ndarray          # final physical field
    design: np.ndarray             # final design variables
    compliance_history: list
    g1_history: list
    g2_history: list | None
    max_drho_history: list
    iterations: int
    converged: bool
    wall_time: float
    spec: ProblemSpec | None = None


def _resolve_materials(spec: ProblemSpec):
    if spec.scenario == "neohookean":
        nh = NeoHookeanMaterial(c10=spec.mu / 2.0, d1=2.0 / spec.kappa)
        return nh.to_linear(), nh
    mode = spec.kinematics or "plane_stress"
    return LinearElasticMaterial(kappa=spec.kappa, mu=spec.mu, mode=mode), None


def evaluation_setup(spec: ProblemSpec):
    """Mesh, boundary, matrices, filter and load shared by all evaluations."""
    mesh = build_grid(spec.nx, spec.ny, spec.width, spec.height)
    fe_magnitude = 1.0 if spec.scenario == "linear" else spec.magnitude
    bc = make_boundary(mesh, spec.load_row, spec.theta, fe_magnitude)
    lin, nh = _resolve_materials(spec)
    matrices = element_matrices(lin, mesh.side)
    filt = build_filter(mesh, spec.r_min)
    load = bc.load_full(mesh.n_dofs)
    return mesh, bc, matrices, filt, load, nh


def _evaluate(spec, mesh, bc, matrices, filt, load, nh, x, params, u_prev=None):
    """One design evaluation: physics plus objective/constraint data."""
    from .stress import aggregate_g2, g2_sensitivity  # local import, no cycle

    phys = filt.apply(x)
    dens = DensityField(design=x, physical=phys)
    if spec.scenario == "neohookean":
        state = fe.solve_newton(mesh, bc, dens, spec.penal, nh, load, u0=u_prev)
        dG_phys = compliance_sens_nonlinear(state, dens, spec.penal)
    else:
        system = fe.assemble(mesh, bc, dens, spec.penal, matrices)
        state = fe.solve_linear(system, load)
        dG_phys = compliance_sens_linear(state, dens, spec.penal, matrices.ke0)
    g = compliance(state, load)
    g1, dg1_phys = volume_constraint(dens, spec.v_f)
    out = {
        "state": state, "dens": dens, "G": g,
        "dG": filter_chain_rule(filt, dG_phys),
        "g1": g1, "dg1": filter_chain_rule(filt, dg1_phys),
    }
    if spec.scenario == "stress":
        g2, _, _ = aggregate_g2(state, dens, params)
        dg2, _ = g2_sensitivity(state, dens, params, filt)
        out["g2"] = g2
        out["dg2"] = dg2
    return out


def optimize(spec: ProblemSpec, on_iteration=None) -> OptimizationResult:
    """Run the outer optimization loop for one problem."""
    from .stress import StressConstraintParams  # local import, no cycle

    mesh, bc, matrices, filt, load, nh = evaluation_setup(spec)
    params = None
    if spec.scenario == "stress":
        params = StressConstraintParams(sigma_lim=spec.sigma_lim, penal=spec.penal)

    start = time.perf_counter()
    report_scale = spec.magnitude ** 2 if spec.scenario == "linear" else 1.0

    x = np.full(mesh.n_elems, min(max(spec.v_f, RHO_MIN), 1.0))
    mma_state = MmaState()
    u_prev = None

    comp_hist, g1_hist, drho_hist = [], [], []
    g2_hist = [] if spec.scenario == "stress" else None
    converged = False
    iterations = 0

    for it in range(MAX_ITERATIONS + 1):
        ev = _evaluate(spec, mesh, bc, matrices, filt, load, nh, x, params,
                       u_prev=u_prev)
        u_prev = ev["state"].u
        comp_hist.append(ev["G"] * report_scale)
        g1_hist.append(ev["g1"])
        if g2_hist is not None:
            g2_hist.append(ev["g2"])
        if on_iteration:
            on_iteration(it, ev)
        if converged or it == MAX_ITERATIONS:
            break

        if spec.scenario == "stress":
            g = np.array([ev["g1"], ev["g2"]])
            dg = np.vstack([ev["dg1"], ev["dg2"]])
        else:
            g = np.array([ev["g1"]])
            dg = ev["dg1"][None, :]
        x_new, mma_state = mma_update(mma_state, x, ev["G"], ev["dG"], g, dg,
                                      (RHO_MIN, 1.0))
        drho = float(np.max(np.abs(x_new - x)))
        drho_hist.append(drho)
        x = x_new
        iterations = it + 1
        if drho < MOVE_TOL:
            converged = True

    final_phys = filt.apply(x)
    return OptimizationResult(
        densities=final_phys, design=x,
        compliance_history=comp_hist, g1_history=g1_hist, g2_history=g2_hist,
        max_drho_history=drho_hist, iterations=iterations,
        converged=converged, wall_time=time.perf_counter() - start, spec=spec)
