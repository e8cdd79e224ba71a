import numpy as np
import pytest

from nlto.errors import SingularSystemError
from nlto.fe import (
    _NonlinearModel,
    assemble,
    free_dofs,
    solve_linear,
    solve_newton,
)
from nlto.materials import (
    LinearElasticMaterial,
    NeoHookeanMaterial,
    element_matrices,
)
from nlto.mesh import build_grid, make_boundary


@pytest.fixture
def cantilever8():
    mesh = build_grid(8, 8, 1.0, 1.0)
    bc = make_boundary(mesh, 4, -np.pi / 2, 1.0)
    mat = LinearElasticMaterial.from_youngs(1.0, 0.3)
    mats = element_matrices(mat, mesh.side)
    return mesh, bc, mats


def test_assemble_unpenalized_at_full_density(cantilever8):
    mesh, bc, mats = cantilever8
    rho = np.ones(mesh.n_elems)
    a = assemble(mesh, bc, rho, 3.0, mats)
    b = assemble(mesh, bc, rho, 1.0, mats)
    assert np.abs((a.k_ff - b.k_ff)).max() == 0.0


def test_assemble_uniform_density_scaling(cantilever8):
    mesh, bc, mats = cantilever8
    a = assemble(mesh, bc, np.full(mesh.n_elems, 0.5), 3.0, mats)
    b = assemble(mesh, bc, np.ones(mesh.n_elems), 3.0, mats)
    assert np.allclose(a.k_ff.toarray(), 0.125 * b.k_ff.toarray())


def test_assemble_single_element_partition():
    mesh = build_grid(1, 1, 1.0, 1.0)
    bc = make_boundary(mesh, 0, 0.0, 1.0)
    mat = LinearElasticMaterial.from_youngs(1.0, 0.3)
    sys_ = assemble(mesh, bc, np.ones(1), 3.0, element_matrices(mat, 1.0))
    assert sys_.k_ff.shape == (8 - len(bc.fixed_dofs), 8 - len(bc.fixed_dofs))


def test_solve_linear_zero_load(cantilever8):
    mesh, bc, mats = cantilever8
    sys_ = assemble(mesh, bc, np.full(mesh.n_elems, 0.4), 3.0, mats)
    st = solve_linear(sys_, np.zeros(mesh.n_dofs))
    assert np.all(st.u == 0.0)
    assert st.elem_energy.sum() == 0.0


def test_solve_linear_linearity(cantilever8):
    mesh, bc, mats = cantilever8
    sys_ = assemble(mesh, bc, np.full(mesh.n_elems, 0.7), 3.0, mats)
    load = bc.load_full(mesh.n_dofs)
    st1 = solve_linear(sys_, load)
    st2 = solve_linear(sys_, 2.0 * load)
    assert np.allclose(st2.u, 2.0 * st1.u, rtol=1e-13)
    assert np.allclose(st2.reactions, 2.0 * st1.reactions, rtol=1e-13)


def test_solve_linear_matches_dense_oracle(cantilever8):
    mesh, bc, mats = cantilever8
    sys_ = assemble(mesh, bc, np.ones(mesh.n_elems), 3.0, mats)
    load = bc.load_full(mesh.n_dofs)
    st = solve_linear(sys_, load)
    u_ref = np.linalg.solve(sys_.k_ff.toarray(), load[sys_.free])
    assert np.linalg.norm(st.u_free - u_ref) / np.linalg.norm(u_ref) < 1e-10


def test_solve_linear_global_equilibrium(cantilever8):
    mesh, bc, mats = cantilever8
    sys_ = assemble(mesh, bc, np.full(mesh.n_elems, 0.35), 3.0, mats)
    load = bc.load_full(mesh.n_dofs)
    st = solve_linear(sys_, load)
    scale = np.linalg.norm(load)
    assert abs(st.reactions[0::2].sum() + load[0::2].sum()) < 1e-8 * scale
    assert abs(st.reactions[1::2].sum() + load[1::2].sum()) < 1e-8 * scale


def test_solve_linear_singular_support():
    # no fixed dofs at all: free-floating structure must fail with a named pivot
    mesh = build_grid(2, 2, 1.0, 1.0)
    bc = make_boundary(mesh, 0, 0.0, 1.0)
    object.__setattr__(bc, "fixed_dofs", np.array([], dtype=int))
    mat = LinearElasticMaterial.from_youngs(1.0, 0.3)
    sys_ = assemble(mesh, bc, np.ones(4), 3.0, element_matrices(mat, mesh.side))
    with pytest.raises(SingularSystemError):
        solve_linear(sys_, bc.load_full(mesh.n_dofs))


def test_maxwell_betti_reciprocity(cantilever8):
    mesh, bc, mats = cantilever8
    sys_ = assemble(mesh, bc, np.full(mesh.n_elems, 0.6), 3.0, mats)
    rng = np.random.default_rng(4)
    free = sys_.free
    for _ in range(5):
        i, j = rng.choice(len(free), 2, replace=False)
        ei = np.zeros(mesh.n_dofs)
        ej = np.zeros(mesh.n_dofs)
        ei[free[i]] = 1.0
        ej[free[j]] = 1.0
        ui = solve_linear(sys_, ei).u
        uj = solve_linear(sys_, ej).u
        a, b = ui[free[j]], uj[free[i]]
        assert abs(a - b) / max(abs(a), abs(b)) < 1e-9


RUBBER = NeoHookeanMaterial(c10=1e6, d1=1e-8)


def test_newton_zero_load():
    mesh = build_grid(4, 4, 1.0, 1.0)
    bc = make_boundary(mesh, 2, 0.0, 0.0)
    st = solve_newton(mesh, bc, np.full(16, 0.5), 3.0, RUBBER,
                      bc.load_full(mesh.n_dofs), n_increments=1)
    assert np.all(st.u == 0.0)
    assert len(st.newton_residuals) == 1


def test_newton_small_load_matches_linear():
    mesh = build_grid(6, 6, 1.0, 1.0)
    bc = make_boundary(mesh, 3, -np.pi / 2, 5.0)
    rho = np.full(36, 0.6)
    load = bc.load_full(mesh.n_dofs)
    st_n = solve_newton(mesh, bc, rho, 3.0, RUBBER, load)
    # matched small-strain moduli, same plane-strain kinematics
    lin = RUBBER.to_linear()
    st_l = solve_linear(assemble(mesh, bc, rho, 3.0, element_matrices(lin, mesh.side)), load)
    grad_scale = np.abs(st_n.u).max() / mesh.side
    assert grad_scale < 1e-4
    assert np.linalg.norm(st_n.u - st_l.u) / np.linalg.norm(st_l.u) < 1e-3


def test_newton_quadratic_convergence_tail():
    # single element under a significant stretch: near the solution the
    # residual ratios r_{k+1} / r_k^2 stay bounded
    mesh = build_grid(1, 1, 1.0, 1.0)
    bc = make_boundary(mesh, 0, 0.0, 2e5)
    st = solve_newton(mesh, bc, np.ones(1), 3.0, RUBBER,
                      bc.load_full(mesh.n_dofs), n_increments=1)
    res = [r for r in st.newton_residuals if r > 0]
    tail = res[-3:]
    ratios = [tail[i + 1] / tail[i] ** 2 for i in range(len(tail) - 1)]
    assert all(r < 1e-2 for r in ratios)  # superlinear contraction near the root


def test_newton_internal_force_is_energy_gradient():
    mesh = build_grid(2, 2, 1.0, 1.0)
    model = _NonlinearModel(mesh, RUBBER, np.full(4, 0.5), 3.0)
    rng = np.random.default_rng(1)
    u = 0.05 * rng.standard_normal(mesh.n_dofs)
    _, _, f_int, _ = model.forces_and_tangent(u, need_tangent=False)
    h = 1e-7
    for dof in rng.choice(mesh.n_dofs, 8, replace=False):
        up, um = u.copy(), u.copy()
        up[dof] += h
        um[dof] -= h
        fd = (model.energy(up) - model.energy(um)) / (2 * h)
        assert fd == pytest.approx(f_int[dof], rel=1e-5)


def test_newton_global_equilibrium_large_load():
    mesh = build_grid(4, 4, 1.0, 1.0)
    bc = make_boundary(mesh, 2, -np.pi / 2, 1.5e5)
    load = bc.load_full(mesh.n_dofs)
    st = solve_newton(mesh, bc, np.full(16, 0.5), 3.0, RUBBER, load)
    scale = np.linalg.norm(load)
    assert abs(st.reactions[0::2].sum() + load[0::2].sum()) < 1e-8 * scale
    assert abs(st.reactions[1::2].sum() + load[1::2].sum()) < 1e-8 * scale


def test_newton_warm_start_agrees_with_cold():
    mesh = build_grid(4, 4, 1.0, 1.0)
    bc = make_boundary(mesh, 2, -np.pi / 2, 5e4)
    rho = np.full(16, 0.5)
    load = bc.load_full(mesh.n_dofs)
    cold = solve_newton(mesh, bc, rho, 3.0, RUBBER, load)
    warm = solve_newton(mesh, bc, rho, 3.0, RUBBER, load, u0=cold.u)
    assert np.linalg.norm(warm.u - cold.u) / np.linalg.norm(cold.u) < 1e-6
    assert len(warm.newton_residuals) <= 3
