import numpy as np
import pytest
from hypothesis import given, strategies as st

from ifol import autodiff as ad
from ifol.checks import check_loss_gradient, default_problems
from ifol.fem import (AllenCahn, DirichletSpec, Hyperelastic, LinearElasticity, StationaryDiffusion,
                      TransientThermal, apply_dirichlet, assemble, batch_loss, dirichlet_from_sets, element_work,
                      problem_from_dict, problem_to_dict)
from ifol.mesh import generate_grid
from ifol.oracle import newton_solve

UNIT = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def test_quad4_laplacian_matches_closed_form():
    # at T = 0 the nonlinear conductivity reduces to k0, so the Hessian is the stiffness matrix
    H = element_work(StationaryDiffusion(), UNIT, np.zeros(4), np.ones(4), want_hess=True).hess
    a, b, c = 2 / 3, -1 / 6, -1 / 3
    K = np.array([[a, b, c, b], [b, a, b, c], [c, b, a, b], [b, c, b, a]])
    np.testing.assert_allclose(H, K, atol=1e-12)


@pytest.mark.parametrize("problem", default_problems(), ids=lambda p: p.kind)
def test_gradient_and_tangent_match_finite_differences(problem):
    mesh = generate_grid(2, (3, 3))
    for seed in range(3):
        g_err, k_err = check_loss_gradient(problem, mesh, seed)
        assert g_err < 1e-6 and k_err < 1e-5


def test_uniaxial_strain_energy():
    e = 0.01
    p = LinearElasticity(lam=2.0, mu=1.5)
    u = np.zeros(8)
    u[0::2] = e * UNIT[:, 0]
    w = element_work(p, UNIT, u, np.ones(4))
    assert w.loss == pytest.approx(0.5 * 2.0 * e ** 2 + 1.5 * e ** 2, rel=1e-12)


def test_elasticity_patch_test():
    # an affine displacement imposed on the whole boundary is reproduced inside
    mesh = generate_grid(2, (5, 5))
    A = np.array([[0.01, -0.004], [0.003, 0.02]])
    exact = (mesh.coords @ A.T).ravel()
    boundary = np.unique(np.concatenate([mesh.node_sets[k] for k in ("left", "right", "top", "bottom")]))
    spec = DirichletSpec.from_entries([(n, i, exact[2 * n + i]) for n in boundary for i in range(2)])
    u = newton_solve(LinearElasticity(), mesh, np.ones(mesh.n_nodes), spec)
    np.testing.assert_allclose(u, exact, atol=1e-12)


def test_hyperelastic_linearizes_to_elasticity():
    mu, kappa = 1.3, 7.0
    hyper = element_work(Hyperelastic(mu=mu, kappa=kappa), UNIT, np.zeros(8), np.ones(4), want_hess=True)
    lin = element_work(LinearElasticity(lam=kappa - 2 * mu / 3, mu=mu), UNIT, np.zeros(8), np.ones(4),
                       want_hess=True)
    assert abs(hyper.loss) < 1e-14
    np.testing.assert_allclose(hyper.grad, 0.0, atol=1e-14)
    np.testing.assert_allclose(hyper.hess, lin.hess, atol=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 5), st.floats(1e-3, 1))
def test_transient_mass_term(a, b, rho_cp, dt):
    p = TransientThermal(rho_cp=rho_cp, dt=dt)
    w = element_work(p, UNIT, np.full(4, a), np.ones(4), np.full(4, b))
    assert w.loss >= 0
    assert w.loss == pytest.approx(0.5 * rho_cp * (a - b) ** 2 / dt, rel=1e-10, abs=1e-14)


@pytest.mark.parametrize("phase", [1.0, -1.0])
def test_allen_cahn_stationary_wells(phase):
    w = element_work(AllenCahn(), UNIT, np.full(4, phase), np.ones(4), np.full(4, phase))
    # quadrature-point values carry interpolation roundoff
    assert abs(w.loss) < 1e-25
    np.testing.assert_allclose(w.grad, 0.0, atol=1e-13)


def test_neumann_total_load():
    mesh = generate_grid(2, (4, 6), [(0, 2), (0, 3)])
    p = StationaryDiffusion(neumann=(("right", 0, 0.5),))
    g = assemble(p, mesh, np.zeros(mesh.n_nodes), np.ones(mesh.n_nodes)).grad
    assert -g.sum() == pytest.approx(0.5 * 3.0, rel=1e-13)
    assert np.all(g[mesh.node_sets["right"]] < 0)


def test_dirichlet_condensation():
    mesh = generate_grid(2, (3, 3))
    spec = dirichlet_from_sets(mesh, [("left", 0, 1.0)])
    u = apply_dirichlet(np.zeros(mesh.n_nodes), spec, 1)
    np.testing.assert_array_equal(u[mesh.node_sets["left"]], 1.0)
    w = assemble(StationaryDiffusion(), mesh, u, np.ones(mesh.n_nodes), dirichlet=spec, want="tangent")
    K = w.tangent.toarray()
    d = spec.dofs(1)
    np.testing.assert_array_equal(w.residual[d], 0.0)
    np.testing.assert_array_equal(K[d][:, d], np.eye(len(d)))
    free = np.setdiff1d(np.arange(mesh.n_nodes), d)
    np.testing.assert_array_equal(K[np.ix_(d, free)], 0.0)
    np.testing.assert_array_equal(K[np.ix_(free, d)], 0.0)


def test_dirichlet_duplicates_rejected():
    with pytest.raises(ValueError):
        DirichletSpec.from_entries([(0, 0, 1.0), (0, 0, 2.0)])


def test_sample_values_override_rules():
    mesh = generate_grid(2, (3, 3))
    spec = dirichlet_from_sets(mesh, [("left", 0, 1.0), ("right", 0, 0.0)], values=[5.0, -2.0])
    dense = spec.dense_values(mesh.n_nodes)
    np.testing.assert_array_equal(dense[mesh.node_sets["left"]], 5.0)
    np.testing.assert_array_equal(dense[mesh.node_sets["right"]], -2.0)


@pytest.mark.parametrize("problem", default_problems(), ids=lambda p: p.kind)
def test_batch_loss_matches_assembly(problem, rng):
    mesh = generate_grid(2, (4, 3))
    comp = problem.n_components(2)
    U = 0.05 * rng.standard_normal((3, mesh.n_nodes * comp))
    C = rng.uniform(0.5, 1.5, (3, mesh.n_nodes))
    Up = rng.standard_normal(U.shape) if problem.transient else None
    total = ad.primal(batch_loss(problem, mesh, U, C, Up))
    ref = sum(assemble(problem, mesh, U[b], C[b], None if Up is None else Up[b], want="loss").loss for b in range(3))
    assert float(total) == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("problem", default_problems(), ids=lambda p: p.kind)
def test_problem_dict_round_trip(problem):
    assert problem_from_dict(problem_to_dict(problem)) == problem


def test_invalid_problem_inputs():
    with pytest.raises(ValueError):
        LinearElasticity(nu=0.5)
    with pytest.raises(ValueError):
        problem_from_dict({"type": "navier_stokes"})
    with pytest.raises(ValueError):
        element_work(TransientThermal(), UNIT, np.zeros(4), np.ones(4))
    with pytest.raises(ValueError):
        element_work(StationaryDiffusion(), UNIT, np.zeros(4), np.array([1, 1, np.nan, 1]))
