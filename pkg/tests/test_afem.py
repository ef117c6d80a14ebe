import numpy as np
import pytest

from afem_eit.afem import ProblemSpec, afem_run, error_vs_dof, fit_rate, fit_window, uniform_run
from afem_eit.cem import trigonometric_battery
from afem_eit.fem import prolong
from afem_eit.inversion import eval_objective
from afem_eit.mesh import build_initial_mesh
from afem_eit.synthetic import add_noise, generate_exact_data

BATTERY = trigonometric_battery()


@pytest.fixture(scope="module")
def spec():
    exact = generate_exact_data(1, BATTERY, 6000)
    noisy = add_noise(exact.voltages, 1e-3, 5)
    return ProblemSpec(build_initial_mesh(8), noisy.noisy, BATTERY, alpha=2.5e-4)


@pytest.fixture(scope="module")
def short_run(spec):
    return afem_run(spec, dof_budget=800)


def test_fit_rate_recovers_power_law():
    n = np.array([100, 200, 400, 800, 1600])
    assert fit_rate(n, 3.0 / n) == pytest.approx(1.0, abs=0.01)
    assert fit_rate(n, n ** -1.5) == pytest.approx(1.5, abs=1e-12)
    assert np.isnan(fit_rate(n, np.zeros(5)))


def test_fit_window_uses_last_pre_final_levels():
    assert fit_window(4) == slice(0, 3)
    assert fit_window(9) == slice(1, 8)
    assert fit_window(15) == slice(1, 14)


def test_single_level_run(spec):
    run = afem_run(spec, max_levels=1)
    assert run.n_levels == 1 and run.stop_reason == "max levels"
    assert run.records[0].dof == 81
    assert len(run.parent_maps) == 0


def test_run_stops_before_exceeding_budget(short_run):
    run = short_run
    assert run.stop_reason == "dof budget"
    dofs = run.dofs
    assert dofs[-1] <= 800
    assert np.all(np.diff(dofs) > 0)
    assert len(run.parent_maps) == run.n_levels - 1
    for k, pmap in enumerate(run.parent_maps):
        coarse, fine = run.meshes[k], run.meshes[k + 1]
        # nestedness: old vertices kept, each child inside its parent's area budget
        np.testing.assert_array_equal(fine.vertices[: coarse.n_vertices], coarse.vertices)
        per_parent = np.bincount(pmap.element_parent, weights=fine.areas, minlength=coarse.n_elements)
        np.testing.assert_allclose(per_parent, coarse.areas, rtol=1e-12)
    for rec in run.records:
        assert rec.reciprocity <= 1e-10
        assert rec.n_marked >= 1
        assert rec.eta == pytest.approx(np.sqrt(rec.eta1**2 + rec.eta2**2 + rec.eta3**2), rel=1e-12)


def test_estimator_floor_stops_run(spec, short_run):
    floor = short_run.records[2].eta * 1.0001
    run = afem_run(spec, estimator_floor=floor)
    assert run.stop_reason == "estimator floor"
    assert run.n_levels == 3


def test_theta_one_is_uniform_refinement(spec):
    adaptive = afem_run(spec, theta=1.0, max_levels=3)
    uniform = uniform_run(spec, 3)
    assert list(adaptive.dofs) == list(uniform.dofs) == [81, 145, 289]
    for a, b in zip(adaptive.sigmas, uniform.sigmas):
        np.testing.assert_array_equal(a, b)


def test_prolongation_preserves_penalty(spec, short_run):
    """Warm start: the prolonged minimizer has the same penalty on the finer mesh."""
    run = short_run
    for k, pmap in enumerate(run.parent_maps):
        coarse = eval_objective(spec.on(run.meshes[k]), run.sigmas[k])
        fine_sigma = prolong(run.sigmas[k], pmap)
        fine = eval_objective(spec.on(run.meshes[k + 1]), fine_sigma)
        assert fine.penalty == pytest.approx(coarse.penalty, rel=1e-10)
        assert coarse.objective == pytest.approx(run.records[k].objective, rel=1e-10)


def test_errors_against_own_finest(short_run):
    table = error_vs_dof(short_run)
    assert table.l2[-1] == 0.0 and table.h1[-1] == 0.0
    assert np.all(table.h1 >= table.l2)
    assert table.rate_l2 > 0 and table.rate_h1 > 0


def test_errors_need_four_levels(spec):
    with pytest.raises(ValueError):
        error_vs_dof(uniform_run(spec, 3))


def test_bad_theta(spec):
    with pytest.raises(ValueError):
        afem_run(spec, theta=1.5)
