"""Method of moving asymptotes.

Each update builds a separable convex approximation of the objective and
constraints around the current iterate, between per-variable moving
asymptotes, and solves it through its dual. Constraints carry elastic
variables with a large penalty so the subproblem is always feasible.

The objective gradient is normalized by its max-abs entry before the
approximation is formed, which makes the update invariant under positive
scaling of the objective (exactly so for power-of-two scalings).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SubproblemError

ASYMPTOTE_INIT = 0.5
ASYMPTOTE_EXPAND = 1.2
ASYMPTOTE_SHRINK = 0.7
# Offsets are relative to the variable range; the small floor (rather than
# the usual 0.01) is what lets iterates resolve an optimum finely, since the
# scale-invariant approximation has no absolute regularization term.
ASYMPTOTE_MIN_OFFSET = 1e-4
ASYMPTOTE_MAX_OFFSET = 10.0
MOVE_LIMIT = 0.2
ALBEFA = 0.1
ELASTIC_PENALTY = 1.0e6
KKT_TOL = 1.0e-10


@dataclass
class MmaState:
    """History carried between updates: two previous iterates and asymptotes."""

    x_prev1: np.ndarray | None = None
    x_prev2: np.ndarray | None = None
    low: np.ndarray | None = None
    upp: np.ndarray | None = None
    iteration: int = 0


def mma_update(state, x, f0, df0, g, dg, bounds):
    """One moving-asymptotes step.

    x: current design (n,). f0/df0: objective value and gradient. g: constraint
    values (m,), feasible when <= 0. dg: constraint Jacobian (m, n). bounds:
    (x_min, x_max) scalars or arrays. Returns (x_next, new_state).
    """
    x = np.asarray(x, dtype=float)
    df0 = np.asarray(df0, dtype=float)
    g = np.atleast_1d(np.asarray(g, dtype=float))
    n = x.size
    dg = np.asarray(dg, dtype=float).reshape(len(g), n) if len(g) else np.zeros((0, n))
    if df0.shape != (n,):
        raise ValueError("gradient shapes do not match the design vector")
    x_min = np.broadcast_to(np.asarray(bounds[0], dtype=float), (n,)).copy()
    x_max = np.broadcast_to(np.asarray(bounds[1], dtype=float), (n,)).copy()
    if np.any(x < x_min - 1e-12) or np.any(x > x_max + 1e-12):
        raise ValueError("current design violates its bounds")

    xrange = x_max - x_min

    if state.iteration < 2 or state.x_prev1 is None or state.x_prev2 is None:
        low = x - ASYMPTOTE_INIT * xrange
        upp = x + ASYMPTOTE_INIT * xrange
    else:
        osc = (x - state.x_prev1) * (state.x_prev1 - state.x_prev2)
        gamma = np.ones(n)
        gamma[osc > 0] = ASYMPTOTE_EXPAND
        gamma[osc < 0] = ASYMPTOTE_SHRINK
        low = x - gamma * (state.x_prev1 - state.low)
        upp = x + gamma * (state.upp - state.x_prev1)
        low = np.minimum(np.maximum(low, x - ASYMPTOTE_MAX_OFFSET * xrange),
                         x - ASYMPTOTE_MIN_OFFSET * xrange)
        upp = np.maximum(np.minimum(upp, x + ASYMPTOTE_MAX_OFFSET * xrange),
                         x + ASYMPTOTE_MIN_OFFSET * xrange)

    alpha = np.maximum.reduce([x_min, low + ALBEFA * (x - low), x - MOVE_LIMIT * xrange])
    beta = np.minimum.reduce([x_max, upp - ALBEFA * (upp - x), x + MOVE_LIMIT * xrange])

    ux = upp - x
    xl = x - low

    # Objective scale-normalization keeps the subproblem invariant under
    # positive rescaling of (f0, df0).
    s0 = np.max(np.abs(df0)) if df0.size else 0.0
    df0n = df0 / s0 if s0 > 0 else np.zeros_like(df0)
    dfp = np.maximum(df0n, 0.0)
    dfm = np.maximum(-df0n, 0.0)
    p0 = ux**2 * (1.001 * dfp + 0.001 * dfm)
    q0 = xl**2 * (0.001 * dfp + 1.001 * dfm)

    m = len(g)
    if m:
        sc = np.maximum(np.max(np.abs(dg), axis=1), 1e-30)
        dgn = dg / sc[:, None]
        gn = g / sc
        pc = ux[None, :] ** 2 * np.maximum(dgn, 0.0)
        qc = xl[None, :] ** 2 * np.maximum(-dgn, 0.0)
        rhs = (pc / ux[None, :] + qc / xl[None, :]).sum(axis=1) - gn
    else:
        pc = np.zeros((0, n))
        qc = np.zeros((0, n))
        rhs = np.zeros(0)

    x_next = solve_subproblem(p0, q0, pc, qc, rhs, low, upp, alpha, beta)

    new_state = MmaState(x_prev1=x.copy(), x_prev2=None if state.x_prev1 is None else state.x_prev1.copy(),
                         low=low, upp=upp, iteration=state.iteration + 1)
    return x_next, new_state


def _primal(lam, p0, q0, pc, qc, low, upp, alpha, beta):
    """Closed-form minimizer of the separable Lagrangian for given duals."""
    p = p0 + (lam @ pc if lam.size else 0.0)
    q = q0 + (lam @ qc if lam.size else 0.0)
    sp = np.sqrt(p)
    sq = np.sqrt(q)
    denom = sp + sq
    flat = denom <= 0.0
    safe = np.where(flat, 1.0, denom)
    x = (sp * low + sq * upp) / safe
    x = np.where(flat, 0.5 * (alpha + beta), x)
    clipped_lo = x <= alpha
    clipped_hi = x >= beta
    x = np.clip(x, alpha, beta)
    interior = ~(flat | clipped_lo | clipped_hi)
    return x, p, q, sp, sq, interior


def _dual_grad(x, pc, qc, rhs, low, upp):
    return (pc / (upp - x)[None, :] + qc / (x - low)[None, :]).sum(axis=1) - rhs


def solve_subproblem(p0, q0, pc, qc, rhs, low, upp, alpha, beta,
                     elastic_penalty=ELASTIC_PENALTY):
    """Solve the separable subproblem; returns the primal minimizer.

    Coefficients follow the convex approximation
        sum_j p_j / (upp_j - x_j) + q_j / (x_j - low_j)
    with constraint rows (pc, qc) required to stay <= rhs, relaxed by elastic
    variables priced at elastic_penalty. Dual solved by a projected Newton
    iteration with a coordinate-bisection fallback.
    """
    p0 = np.asarray(p0, dtype=float)
    q0 = np.asarray(q0, dtype=float)
    m = len(rhs)
    lam = np.zeros(m)

    if m == 0:
        x, *_ = _primal(lam, p0, q0, pc, qc, low, upp, alpha, beta)
        return x

    cap = elastic_penalty

    def residual(lam, grad):
        r = np.abs(grad)
        r = np.where((lam <= 0.0) & (grad < 0.0), 0.0, r)
        r = np.where((lam >= cap) & (grad > 0.0), 0.0, r)
        return r / np.maximum(1.0, np.abs(rhs))

    def eval_grad(lam):
        x, *_ = _primal(lam, p0, q0, pc, qc, low, upp, alpha, beta)
        return x, _dual_grad(x, pc, qc, rhs, low, upp)

    x, grad = eval_grad(lam)
    for _ in range(100):
        res = residual(lam, grad)
        if np.max(res) < KKT_TOL:
            return x
        # Newton step on the dual (concave); Hessian from the unclipped set.
        xx, p, q, sp, sq, interior = _primal(lam, p0, q0, pc, qc, low, upp, alpha, beta)
        ux = upp - xx
        xl = xx - low
        with np.errstate(divide="ignore", invalid="ignore"):
            dx_dp = np.where(interior & (sp > 0), sq * (low - upp) / (2 * sp * (sp + sq) ** 2), 0.0)
            dx_dq = np.where(interior & (sq > 0), sp * (upp - low) / (2 * sq * (sp + sq) ** 2), 0.0)
        dwdx = pc / ux[None, :] ** 2 - qc / xl[None, :] ** 2
        dxdl = dx_dp[None, :] * pc + dx_dq[None, :] * qc
        hess = dwdx @ dxdl.T
        hess = 0.5 * (hess + hess.T) - 1e-14 * np.eye(m)
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            step = grad.copy()
        lam_new = np.clip(lam + step, 0.0, cap)
        x_new, grad_new = eval_grad(lam_new)
        if np.max(residual(lam_new, grad_new)) < np.max(res):
            lam, x, grad = lam_new, x_new, grad_new
            continue
        # Fallback: coordinatewise bisection sweep (dual is concave, each
        # coordinate gradient is monotone decreasing).
        improved = False
        for i in range(m):
            loi, hii = 0.0, cap
            li = lam.copy()
            li[i] = loi
            _, glo = eval_grad(li)
            if glo[i] <= 0.0:
                lam_i = 0.0
            else:
                li[i] = hii
                _, ghi = eval_grad(li)
                if ghi[i] >= 0.0:
                    lam_i = cap
                else:
                    for _ in range(80):
                        mid = 0.5 * (loi + hii)
                        li[i] = mid
                        _, gm = eval_grad(li)
                        if gm[i] > 0.0:
                            loi = mid
                        else:
                            hii = mid
                    lam_i = 0.5 * (loi + hii)
            if lam_i != lam[i]:
                improved = True
            lam[i] = lam_i
        x, grad = eval_grad(lam)
        if not improved and np.max(residual(lam, grad)) >= np.max(res):
            break

    res = residual(lam, grad)
    if np.max(res) < 1e-7:
        return x
    raise SubproblemError(
        f"dual solve stalled, kkt residual {np.max(res):.3e}, lambda {lam}")
