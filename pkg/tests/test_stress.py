import numpy as np
import pytest

from nlto.dataset import default_spec
from nlto.fe import assemble, solve_linear
from nlto.materials import LinearElasticMaterial, element_matrices
from nlto.mesh import build_grid, make_boundary
from nlto.stress import (
    StressConstraintParams,
    aggregate_g2,
    element_vm,
    fd_verify,
    g2_sensitivity,
)
from nlto.topopt import build_filter

EPOXY = LinearElasticMaterial.from_youngs(4.07e9, 0.34)
PARAMS = StressConstraintParams(sigma_lim=16.44e6)


def _solved_state(nx=4, ny=4, rho=0.5, magnitude=1e6, theta=-np.pi / 2, seed=None):
    mesh = build_grid(nx, ny, 1.0, 1.0)
    bc = make_boundary(mesh, ny // 2, theta, magnitude)
    mats = element_matrices(EPOXY, mesh.side)
    if seed is None:
        dens = np.full(mesh.n_elems, rho)
    else:
        dens = np.random.default_rng(seed).uniform(0.2, 1.0, mesh.n_elems)
    sys_ = assemble(mesh, bc, dens, 3.0, mats)
    st = solve_linear(sys_, bc.load_full(mesh.n_dofs))
    return mesh, bc, mats, dens, st


def test_element_vm_zero_displacement():
    mats = element_matrices(EPOXY, 0.25)
    sigma, delta = element_vm(np.zeros(8), mats.kvmo, 0.5, 3.0)
    assert sigma == 0.0 and delta == 0.0


def test_element_vm_rigid_rotation_stress_free():
    mats = element_matrices(EPOXY, 1.0)
    corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    rel = corners - corners.mean(axis=0)
    u = 1e-3 * np.column_stack([-rel[:, 1], rel[:, 0]]).ravel()
    sigma, _ = element_vm(u, mats.kvmo, 1.0, 3.0)
    # linearized rotation carries no stress up to the quadratic geometric term
    assert sigma < 1e-10 * EPOXY.youngs


def test_element_vm_uniform_uniaxial_matches_pointwise():
    side, delta_x = 0.25, 1e-4
    mats = element_matrices(EPOXY, side)
    u = np.array([0, 0, delta_x, 0, delta_x, 0, 0, 0], dtype=float)
    rho = 0.7
    sigma, _ = element_vm(u, mats.kvmo, rho, 3.0)
    ey, nu = EPOXY.youngs, EPOXY.poisson
    eps = delta_x / side
    sx = ey * eps / (1 - nu**2)
    sy = nu * sx
    pointwise = np.sqrt(sx**2 + sy**2 - sx * sy)
    assert sigma == pytest.approx(rho**3 * pointwise, rel=1e-12)


def test_aggregate_all_unstressed():
    mesh, bc, mats, dens, st = _solved_state(magnitude=0.0)
    g2, z, deltas = aggregate_g2(st, dens, PARAMS)
    assert g2 == pytest.approx(-(1.0 + PARAMS.xi))
    assert z == 0.0
    assert np.all(deltas == 0.0)


def test_aggregate_uniform_ratio_arithmetic():
    # closed-form check on synthetic per-element data fed through a state
    mesh, bc, mats, dens, st = _solved_state(nx=20, ny=20, rho=0.35)
    g2, z, deltas = aggregate_g2(st, dens, PARAMS)
    # independent recomputation straight from the definition
    ratios = dens ** (PARAMS.eta + PARAMS.penal) * np.sqrt(deltas) / PARAMS.sigma_lim
    z_ref = np.sum(ratios ** PARAMS.q)
    assert z == pytest.approx(z_ref, rel=1e-10)
    assert g2 == pytest.approx(z_ref ** (1 / PARAMS.q) - (1 + PARAMS.xi), rel=1e-10)
    # uniform-ratio arithmetic: n identical ratios aggregate to n^(1/q) r
    n, r = 400, 0.123
    z_uniform = n * r ** PARAMS.q
    assert z_uniform ** (1 / PARAMS.q) == pytest.approx(400 ** 0.1 * r, rel=1e-12)
    assert 400 ** 0.1 == pytest.approx(1.8206, abs=5e-5)


def test_aggregate_approaches_max_at_high_q():
    mesh, bc, mats, dens, st = _solved_state(seed=5)
    params = StressConstraintParams(sigma_lim=16.44e6, q=200.0)
    g2, _, deltas = aggregate_g2(st, dens, params)
    ratios = dens ** (params.eta + params.penal) * np.sqrt(deltas) / params.sigma_lim
    agg = g2 + 1 + params.xi
    assert agg >= ratios.max() - 1e-12 * ratios.max()
    assert agg <= 1.03 * ratios.max()


def test_aggregation_sandwich():
    mesh, bc, mats, dens, st = _solved_state(seed=11)
    g2, z, deltas = aggregate_g2(st, dens, PARAMS)
    ratios = dens ** (PARAMS.eta + PARAMS.penal) * np.sqrt(deltas) / PARAMS.sigma_lim
    agg = z ** (1 / PARAMS.q)
    assert ratios.max() <= agg * (1 + 1e-12)
    assert agg <= len(ratios) ** (1 / PARAMS.q) * ratios.max() * (1 + 1e-12)


def test_g2_unstressed_gradient_zero():
    mesh, bc, mats, dens, st = _solved_state(magnitude=0.0)
    filt = build_filter(mesh, 0.3)
    grad, adj = g2_sensitivity(st, dens, PARAMS, filt)
    assert np.all(grad == 0.0)
    assert np.all(adj.omega_f == 0.0)


def test_g2_adjoint_identity():
    mesh, bc, mats, dens, st = _solved_state(nx=6, ny=6, seed=3)
    filt = build_filter(mesh, 0.25)
    grad, adj = g2_sensitivity(st, dens, PARAMS, filt)
    # K_ff omega_f must equal -dg2/du_f; rebuild dg2/du independently
    rho = dens
    deltas = aggregate_g2(st, dens, PARAMS)[2]
    ratios = rho ** (PARAMS.eta + PARAMS.penal) * np.sqrt(deltas) / PARAMS.sigma_lim
    z = np.sum(ratios ** PARAMS.q)
    s = z ** (1 / PARAMS.q)
    ue = st.u[st.dofs]
    kvu = ue @ st.matrices.kvmo
    coef = np.where(deltas > 0, s * (ratios / s) ** PARAMS.q / np.where(deltas > 0, deltas, 1), 0.0)
    dg2_du = np.zeros_like(st.u)
    np.add.at(dg2_du, st.dofs.ravel(), (coef[:, None] * kvu).ravel())
    sys_ = assemble(mesh, bc, dens, 3.0, mats)
    lhs = sys_.k_ff @ adj.omega_f
    assert np.allclose(lhs, -dg2_du[st.free], rtol=1e-9, atol=1e-12 * np.abs(dg2_du).max())
    assert np.all(adj.omega_p == 0.0)


def test_g2_homogeneity_in_stress_limit():
    mesh, bc, mats, dens, st = _solved_state(seed=7)
    filt = build_filter(mesh, 0.3)
    p1 = StressConstraintParams(sigma_lim=10e6)
    p2 = StressConstraintParams(sigma_lim=20e6)
    g2a, _, _ = aggregate_g2(st, dens, p1)
    g2b, _, _ = aggregate_g2(st, dens, p2)
    assert g2b + 1 + p2.xi == pytest.approx(0.5 * (g2a + 1 + p1.xi), rel=1e-12)
    ga, _ = g2_sensitivity(st, dens, p1, filt)
    gb, _ = g2_sensitivity(st, dens, p2, filt)
    assert np.allclose(gb, 0.5 * ga, rtol=1e-10)


def test_g2_permutation_equivariance():
    # relabeling elements by mirroring the mesh relabels the gradient identically
    mesh, bc, mats, dens, st = _solved_state(nx=5, ny=5, seed=13)
    filt = build_filter(mesh, 0.1 * mesh.side)  # identity filter isolates the element terms
    grad, _ = g2_sensitivity(st, dens, PARAMS, filt)
    # mirrored problem: flip rows of densities and the load row
    perm = (np.arange(25).reshape(5, 5)[::-1, :]).ravel()
    bc2 = make_boundary(mesh, 5 - 2, -bc_angle(bc), np.hypot(*bc.load_vector))
    mesh2, bc3, mats2, dens2, st2 = mesh, bc2, mats, dens[perm], None
    sys2 = assemble(mesh2, bc3, dens2, 3.0, mats2)
    st2 = solve_linear(sys2, bc3.load_full(mesh2.n_dofs))
    grad2, _ = g2_sensitivity(st2, dens2, PARAMS, filt)
    assert np.allclose(grad2, grad[perm], rtol=1e-9)


def bc_angle(bc):
    return np.arctan2(bc.load_vector[1], bc.load_vector[0])


def test_fd_verify_self_check():
    spec = default_spec("stress", nx=4, ny=4, load_row=2, theta=-np.pi / 2,
                        magnitude=1e6, r_min=0.1, v_f=0.35)
    report = fd_verify(spec, h=1e-5)
    for data in report.quantities.values():
        fd_only = np.abs(data["fd"] - data["fd"]) / np.maximum(np.abs(data["fd"]), 1e-300)
        assert np.all(fd_only == 0.0)


def test_fd_verify_small_mesh_accuracy():
    spec = default_spec("stress", nx=8, ny=8, load_row=4, theta=3 * np.pi / 2,
                        magnitude=1e6, r_min=0.1, v_f=0.35)
    report = fd_verify(spec, h=1e-4)
    assert report.max_rel_err("G") < 1e-4
    assert report.max_rel_err("g1") < 1e-6
    assert report.max_rel_err("g2") < 1e-3


def test_fd_verify_perturbation_hook_detected():
    spec = default_spec("stress", nx=4, ny=4, load_row=2, theta=3 * np.pi / 2,
                        magnitude=1e6, r_min=0.1, v_f=0.35)
    report = fd_verify(spec, h=1e-5, perturb_adjoint=1.5)
    assert report.max_rel_err("G") > 0.1


def test_fd_verify_step_sweep_order():
    spec = default_spec("stress", nx=8, ny=8, load_row=4, theta=3 * np.pi / 2,
                        magnitude=1e6, r_min=0.1, v_f=0.35)
    errs = {h: fd_verify(spec, h=h).max_rel_err("g2") for h in (1e-4, 1e-5, 1e-6)}
    # truncation-dominated between the two largest steps, then a roundoff floor
    assert errs[1e-4] / errs[1e-5] > 10.0
    assert errs[1e-6] < 1e-4


def test_fd_report_csv(tmp_path):
    spec = default_spec("stress", nx=4, ny=4, load_row=2, theta=3 * np.pi / 2,
                        magnitude=1e6, r_min=0.1, v_f=0.35)
    report = fd_verify(spec, h=1e-5)
    path = tmp_path / "report.csv"
    report.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "quantity,element,adjoint,fd,rel_err"
    assert len(lines) == 1 + 3 * 16
