import numpy as np
import pytest

from afem_eit.cem import measure, trigonometric_battery
from afem_eit.fem import assemble_system, stiffness_matrix
from afem_eit.inversion import (
    InversionProblem,
    eval_gradient,
    eval_objective,
    hessian_vector,
    minimize,
    project,
    sensitivity,
    variational_inequality,
)
from afem_eit.mesh import build_initial_mesh, uniform_refine
from afem_eit.synthetic import OMEGA_PRIME, add_noise, generate_exact_data, truth_field

BATTERY = trigonometric_battery()


@pytest.fixture(scope="module")
def mesh289():
    m, _ = uniform_refine(build_initial_mesh(8))
    assert m.n_vertices == 289
    return m


@pytest.fixture(scope="module")
def example1_data():
    exact = generate_exact_data(1, BATTERY, 8000)
    return add_noise(exact.voltages, 1e-3, 11)


def random_admissible(mesh, rng):
    x, y = mesh.vertices.T
    a = rng.normal(size=4)
    return np.clip(1.0 + 0.4 * np.sin(a[0] * x + a[1]) * np.cos(a[2] * y + a[3]), 0.2, 5.0)


def test_project_examples():
    np.testing.assert_array_equal(project(np.array([0.05, 3.0, 20.0]), 0.1), [0.1, 3.0, 10.0])
    s = np.array([0.5, 1.0, 2.0])
    np.testing.assert_array_equal(project(s, 0.1), s)
    np.testing.assert_array_equal(project(s, 0.1, np.array([True, False, True])), [0.5, 1.0, 2.0])
    np.testing.assert_array_equal(project(np.array([0.5, 0.5]), 0.1, np.array([True, False])), [0.5, 1.0])


def test_objective_consistency(mesh289):
    sigma = truth_field(1, mesh289)
    data = measure(assemble_system(mesh289, sigma), BATTERY)
    prob = InversionProblem(mesh289, data, BATTERY, alpha=2.5e-4)
    ev = eval_objective(prob, sigma)
    assert ev.misfit == pytest.approx(0.0, abs=1e-24)
    K = stiffness_matrix(mesh289)
    assert ev.objective == pytest.approx(0.5 * 2.5e-4 * sigma @ K @ sigma, rel=1e-12)
    assert eval_objective(prob, np.full(289, 1.7)).penalty == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_central_differences(mesh289, example1_data, seed):
    rng = np.random.default_rng(seed)
    prob = InversionProblem(mesh289, example1_data.noisy, BATTERY, alpha=2.5e-4)
    sigma = random_admissible(mesh289, rng)
    mu = rng.normal(size=289) * ~mesh289.boundary_vertex_mask
    g = eval_gradient(prob, sigma)
    t = 1e-5
    fd = (eval_objective(prob, sigma + t * mu).objective - eval_objective(prob, sigma - t * mu).objective) / (2 * t)
    assert abs(g @ mu - fd) <= 1e-4 * abs(g @ mu)


def test_gradient_penalty_part_when_misfit_vanishes(mesh289):
    sigma = 1.0 + 0.3 * mesh289.vertices[:, 0] ** 2
    data = measure(assemble_system(mesh289, sigma), BATTERY)
    prob = InversionProblem(mesh289, data, BATTERY, alpha=1e-2)
    g = eval_gradient(prob, sigma)
    np.testing.assert_allclose(g, 1e-2 * (stiffness_matrix(mesh289) @ sigma), atol=1e-15)


def test_gradient_points_into_the_blob(mesh289, example1_data):
    prob = InversionProblem(mesh289, example1_data.exact, BATTERY, alpha=2.5e-4)
    g = eval_gradient(prob, np.ones(289))
    x, y = mesh289.vertices.T
    blob = (x**2 + (y - 0.55) ** 2) < 0.1
    assert g[blob].min() < 0


def test_sensitivity_and_hessian_match_differences(mesh289, example1_data):
    rng = np.random.default_rng(4)
    prob = InversionProblem(mesh289, example1_data.noisy, BATTERY, alpha=2.5e-4)
    sigma = random_admissible(mesh289, rng)
    delta = rng.normal(size=289)
    ev = eval_objective(prob, sigma)
    eval_gradient(prob, sigma, ev)
    t = 1e-6
    plus, minus = eval_objective(prob, sigma + t * delta), eval_objective(prob, sigma - t * delta)
    basis = ev.system.basis
    dU = ((plus.U - minus.U) / (2 * t)) @ basis
    np.testing.assert_allclose(sensitivity(prob, ev) @ delta, dU.ravel(), rtol=1e-6, atol=1e-8 * np.abs(dU).max())
    fd = (eval_gradient(prob, plus.sigma, plus) - eval_gradient(prob, minus.sigma, minus)) / (2 * t)
    hv = hessian_vector(prob, ev, delta)
    assert np.linalg.norm(hv - fd) <= 1e-6 * np.linalg.norm(fd)


def test_minimize_stops_at_exact_minimizer(mesh289):
    data = measure(assemble_system(mesh289, np.ones(289)), BATTERY)
    prob = InversionProblem(mesh289, data, BATTERY, alpha=2.5e-4)
    state = minimize(prob, np.ones(289))
    assert state.iterations == 0 and state.converged
    assert state.proj_grad_norm <= 1e-14


def test_h1_metric_descends(mesh289, example1_data):
    # the plain H1 Riesz map converges slowly; only descent is checked here
    prob = InversionProblem(mesh289, example1_data.noisy, BATTERY, alpha=2.5e-4)
    state = minimize(prob, metric="h1", max_iters=40)
    objectives = [row[1] for row in state.trace]
    assert objectives[-1] < 0.5 * objectives[0]
    assert all(b <= a for a, b in zip(objectives, objectives[1:]))
    assert state.sigma.min() >= 0.1 and state.sigma.max() <= 10.0


@pytest.mark.parametrize("metric", ["gauss-newton", "newton"])
def test_minimize_example1_on_fixed_mesh(mesh289, example1_data, metric):
    prob = InversionProblem(mesh289, example1_data.noisy, BATTERY, alpha=2.5e-4)
    state = minimize(prob, metric=metric, max_iters=300)
    assert state.converged, state.message
    j0 = eval_objective(prob, np.ones(289)).objective
    assert state.objective < j0
    noise = example1_data.noisy - example1_data.exact
    assert state.misfit <= 10 * np.sum(noise**2)
    objectives = [row[1] for row in state.trace]
    assert all(b <= a for a, b in zip(objectives, objectives[1:]))
    assert state.sigma.min() >= 0.1 and state.sigma.max() <= 10.0

    # discrete variational inequality against random admissible test fields
    rng = np.random.default_rng(0)
    mu = rng.uniform(0.1, 10.0, size=(100, 289))
    vi = variational_inequality(prob, state.evaluation, mu)
    assert vi.min() >= -1e-6


def test_minimize_respects_the_support(mesh289, example1_data):
    exact = generate_exact_data(3, BATTERY, 6000)
    prob = InversionProblem(mesh289, exact.voltages, BATTERY, alpha=3.2e-3, support=OMEGA_PRIME)
    state = minimize(prob, max_iters=200)
    x, y = mesh289.vertices.T
    x0, x1, y0, y1 = OMEGA_PRIME
    outside = (x < x0) | (x > x1) | (y < y0) | (y > y1)
    assert np.all(state.sigma[outside] == 1.0)
    assert state.sigma[~outside].max() > 1.05
    assert state.converged


def test_warm_start_from_minimizer_needs_no_work(mesh289, example1_data):
    prob = InversionProblem(mesh289, example1_data.noisy, BATTERY, alpha=2.5e-4)
    first = minimize(prob)
    again = minimize(prob, first.sigma)
    assert again.iterations <= 1
    assert again.objective == pytest.approx(first.objective, rel=1e-10)


def test_problem_validation(mesh289):
    with pytest.raises(ValueError):
        InversionProblem(mesh289, np.zeros((10, 16)), BATTERY, alpha=0.0)
    with pytest.raises(ValueError):
        InversionProblem(mesh289, np.zeros((9, 16)), BATTERY, alpha=1e-3)
    prob = InversionProblem(mesh289, np.zeros((10, 16)), BATTERY, alpha=1e-3)
    with pytest.raises(ValueError):
        minimize(prob, metric="bfgs")
