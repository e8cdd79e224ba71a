"""Aggregated von Mises stress constraint and its adjoint sensitivities.

Per element, delta_e = u_e' kvmo u_e is the mean squared von Mises stress of
the unit-density material and sigma_e = rho_e^n sqrt(delta_e) the penalized
element stress. The single global constraint aggregates the relaxed ratios

    r_e = rho_e^(eta + n) * sqrt(delta_e) / sigma_lim

into g2 = (sum_e r_e^q)^(1/q) - (1 + xi) <= 0. Internally everything is
computed through s = (sum r_e^q)^(1/q) and t_e = (r_e / s)^q, which keeps
q = 10 powers of stresses in the hundreds of MPa inside float range.

Sensitivities use one adjoint solve against the retained stiffness
factorization: K_ff w = -dg2/du_f, then Dg2/Drho_e = dg2/drho_e + w' dR/drho_e,
pulled through the density filter.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .fe import EquilibriumState
from .topopt import FilterOperator, filter_chain_rule

AGGREGATION_Q = 10.0
RELAXATION_ETA = 3.0
SLACK_XI = 1e-7


@dataclass(frozen=True)
class StressConstraintParams:
    sigma_lim: float
    q: float = AGGREGATION_Q
    eta: float = RELAXATION_ETA
    xi: float = SLACK_XI
    penal: float = 3.0

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("aggregation exponent must be >= 1")
        if self.sigma_lim <= 0:
            raise ValueError("stress limit must be positive")
        if self.xi < 0:
            raise ValueError("slack must be non-negative")


@dataclass
class AdjointState:
    """Adjoint vectors; the prescribed part is identically zero here."""

    omega_f: np.ndarray
    omega_p: np.ndarray


def element_vm(u_e: np.ndarray, kvmo: np.ndarray, rho: float, penal: float):
    """Element-average von Mises stress and its squared form delta."""
    u_e = np.asarray(u_e, dtype=float)
    delta = float(u_e @ kvmo @ u_e)
    floor = 1e-14 * np.linalg.norm(kvmo) * float(u_e @ u_e)
    if delta < 0.0:
        if delta < -floor:
            raise ValueError(f"negative quadratic form {delta} beyond roundoff floor")
        delta = 0.0
    return rho ** penal * np.sqrt(delta), delta


def _element_deltas(state: EquilibriumState) -> np.ndarray:
    ue = state.u[state.dofs]
    delta = np.einsum("ni,ij,nj->n", ue, state.matrices.kvmo, ue)
    return np.maximum(delta, 0.0)


def _aggregate(state, densities, params):
    """Shared terms: deltas, ratios r_e, aggregate s and weights t_e."""
    rho = np.asarray(getattr(densities, "physical", densities), dtype=float)
    delta = _element_deltas(state)
    ratios = rho ** (params.eta + params.penal) * np.sqrt(delta) / params.sigma_lim
    rmax = float(ratios.max()) if ratios.size else 0.0
    if rmax == 0.0:
        return rho, delta, ratios, 0.0, np.zeros_like(ratios)
    scaled = ratios / rmax
    total = float(np.sum(scaled ** params.q))
    s = rmax * total ** (1.0 / params.q)
    t = scaled ** params.q / total  # equals (r_e / s)^q
    return rho, delta, ratios, s, t


def aggregate_g2(state: EquilibriumState, densities, params: StressConstraintParams):
    """Aggregated constraint value, the raw sum Z, and the delta cache."""
    _, delta, _, s, _ = _aggregate(state, densities, params)
    g2 = s - (1.0 + params.xi)
    z = s ** params.q
    return g2, z, delta


def g2_sensitivity(state: EquilibriumState, densities,
                   params: StressConstraintParams, filt: FilterOperator):
    """Design-variable gradient of g2 plus the adjoint state used for it."""
    rho, delta, _, s, t = _aggregate(state, densities, params)
    n_free = len(state.free)

    if s == 0.0:
        # Fully unstressed: continuous limit of every term is zero.
        zeros = np.zeros(rho.size)
        adj = AdjointState(omega_f=np.zeros(n_free), omega_p=np.zeros(len(state.fixed)))
        return filter_chain_rule(filt, zeros), adj

    # dg2/du assembled from s * t_e / delta_e * (kvmo u_e); unstressed
    # elements contribute nothing by continuity.
    ue = state.u[state.dofs]
    kvu = ue @ state.matrices.kvmo
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(delta > 0.0, s * t / np.where(delta > 0.0, delta, 1.0), 0.0)
    dg2_du = np.zeros_like(state.u)
    np.add.at(dg2_du, state.dofs.ravel(), (coef[:, None] * kvu).ravel())

    omega_f = state.tangent_factorization.solve(-dg2_du[state.free])
    omega = np.zeros_like(state.u)
    omega[state.free] = omega_f

    # Explicit density term: (eta + n) * s * t_e / rho_e.
    dg2_drho = (params.eta + params.penal) * s * t / rho

    # w' dR/drho_e with R = K(rho) u - P.
    omega_e = omega[state.dofs]
    ke_u = ue @ state.matrices.ke0
    coupling = params.penal * rho ** (params.penal - 1.0) * np.einsum(
        "ni,ni->n", omega_e, ke_u)

    total = dg2_drho + coupling
    adj = AdjointState(omega_f=omega_f, omega_p=np.zeros(len(state.fixed)))
    return filter_chain_rule(filt, total), adj


@dataclass
class FdReport:
    """Adjoint vs central finite difference comparison per quantity."""

    h: float
    quantities: dict  # name -> dict(adjoint, fd, rel_err arrays)

    def max_rel_err(self, name=None):
        names = [name] if name else list(self.quantities)
        return max(float(self.quantities[n]["rel_err"].max()) for n in names)

    def mean_rel_err(self, name):
        return float(self.quantities[name]["rel_err"].mean())

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["quantity", "element", "adjoint", "fd", "rel_err"])
            for name, data in self.quantities.items():
                for j in range(len(data["adjoint"])):
                    writer.writerow([name, j, repr(data["adjoint"][j]),
                                     repr(data["fd"][j]), repr(data["rel_err"][j])])


def _rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
    out = np.abs(a - b) / denom
    out[(a == 0.0) & (b == 0.0)] = 0.0
    return out


def fd_verify(problem, h: float = 1e-6, perturb_adjoint: float | None = None) -> FdReport:
    """Check adjoint gradients of G, g1 (and g2) against central differences.

    Evaluated at the uniform initial design rho = v_f, differentiating with
    respect to the raw design variables (before the filter). perturb_adjoint
    deliberately scales one adjoint entry, as a self-test of the harness.
    """
    from .topopt import _evaluate, evaluation_setup

    mesh, bc, matrices, filt, load, nh = evaluation_setup(problem)
    params = None
    if problem.scenario == "stress":
        params = StressConstraintParams(sigma_lim=problem.sigma_lim, penal=problem.penal)

    x0 = np.full(mesh.n_elems, problem.v_f)
    base = _evaluate(problem, mesh, bc, matrices, filt, load, nh, x0, params)

    names = ["G", "g1"] + (["g2"] if problem.scenario == "stress" else [])
    grads = {"G": base["dG"].copy(), "g1": base["dg1"].copy()}
    if problem.scenario == "stress":
        grads["g2"] = base["dg2"].copy()
    if perturb_adjoint is not None:
        grads["G"][0] *= perturb_adjoint

    fd = {name: np.zeros(mesh.n_elems) for name in names}
    for j in range(mesh.n_elems):
        vals = {}
        for sgn in (+1.0, -1.0):
            x = x0.copy()
            x[j] += sgn * h
            ev = _evaluate(problem, mesh, bc, matrices, filt, load, nh, x, params)
            vals[sgn] = ev
        for name in names:
            fd[name][j] = (vals[+1.0][name] - vals[-1.0][name]) / (2.0 * h)

    quantities = {
        name: {"adjoint": grads[name], "fd": fd[name],
               "rel_err": _rel_err(grads[name], fd[name])}
        for name in names
    }
    return FdReport(h=h, quantities=quantities)
