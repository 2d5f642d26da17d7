import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochbh import fem2d
from stochbh import stochastic_grids as sg
from stochbh.karhunen_loeve import KLExpansion
from stochbh.material_law import PowerLaw, RationalLaw
from stochbh.nonlinear_solver import SolveConfig, solve_nonlinear
from stochbh.uq_driver import (
    LSHAPE_SOURCE,
    PLAPLACE_INTERVAL,
    PLAPLACE_SOURCE,
    CollocationError,
    StudySpec,
    expected_plaplace_exact,
    kl_truncation_stability,
    lshape_law_factory,
    loglog_slope,
    plaplace_boundary,
    plaplace_exact,
    plaplace_law,
    poincare_constant,
    run_collocation,
    run_study,
    sensitivity_fd_check,
    stochastic_error_pLaplace,
    stochastic_error_successive,
)

SQRT3 = math.sqrt(3.0)


# problem definitions ----------------------------------------------------------------------


def test_lshape_law_at_the_center_is_the_nominal_law():
    assert lshape_law_factory([0.0, 0.0]) == RationalLaw(1.78, 14.0, 6000.0, 245.0)


def test_lshape_law_at_the_corner():
    law = lshape_law_factory([SQRT3, SQRT3])
    assert law.a == pytest.approx(1.78 * (1 + 0.2 * SQRT3), rel=1e-15)
    assert law.a == pytest.approx(2.3966, abs=5e-5)
    assert law.c == pytest.approx(8078.5, abs=0.05)
    assert law.b == 14.0 and law.d == 245.0


@given(st.floats(-SQRT3, SQRT3), st.floats(-SQRT3, SQRT3))
def test_lshape_laws_are_admissible(y1, y2):
    law = lshape_law_factory([y1, y2])
    s = np.linspace(0, 5, 2001)
    nu = law.nu(s)
    assert nu.min() >= 245.0
    assert nu.max() <= 245.0 + 6000.0 * (1 + 0.2 * SQRT3)
    assert np.all(np.diff(law.f(s)) > 0)


def test_plaplace_exact_solution_solves_the_radial_problem():
    p = 4.0
    value, grad = plaplace_exact(p)
    # flux |grad u|^(p-2) grad u equals -r (so its divergence is -2 = -J)
    x, y = np.array([0.8, 0.5, 0.1]), np.array([0.5, 0.9, 0.2])
    g = grad(x, y)
    flux = np.linalg.norm(g, axis=1) ** (p - 2) * g.T
    np.testing.assert_allclose(flux.T, -np.column_stack([x - 0.5, y - 0.5]), rtol=1e-13)
    # zero on the inscribed circle, positive inside
    assert value(np.array([1.0]), np.array([0.5]))[0] == pytest.approx(0.0, abs=1e-15)
    assert value(np.array([0.5]), np.array([0.5]))[0] > 0


def test_plaplace_factories_read_the_exponent():
    assert plaplace_law([3.5]) == PowerLaw(3.5)
    x = np.array([0.2])
    assert plaplace_boundary([3.5])(x, x) == plaplace_exact(3.5)[0](x, x)


# collocation ------------------------------------------------------------------------------


def test_parameter_free_factory_has_zero_variance():
    mesh = fem2d.mesh_lshape(2)
    grid = sg.tensor_grid(2, 2)
    law = RationalLaw()
    res = run_collocation(mesh, lambda y: law, grid, SolveConfig(), LSHAPE_SOURCE)
    u, _ = solve_nonlinear(mesh, law, LSHAPE_SOURCE)
    assert np.abs(res.variance).max() <= 1e-12 * max(1.0, np.abs(res.mean).max() ** 2)
    np.testing.assert_allclose(res.mean, u.values, rtol=1e-12, atol=1e-12)


def test_single_point_grid():
    mesh = fem2d.mesh_lshape(2)
    res = run_collocation(mesh, lshape_law_factory, sg.tensor_grid(0, 2), SolveConfig(), LSHAPE_SOURCE)
    u, _ = solve_nonlinear(mesh, lshape_law_factory([0.0, 0.0]), LSHAPE_SOURCE)
    np.testing.assert_array_equal(res.mean, u.values)
    assert not res.variance.any()
    assert res.solves == 1


def test_plaplace_moments_have_the_expected_shape():
    # every realization peaks at the center and vanishes on the circle r = 1/2,
    # so the mean peaks at the center and the variance vanishes at the edge midpoints
    mesh = fem2d.mesh_unit_square(16)
    grid = sg.tensor_grid(4, 1, PLAPLACE_INTERVAL)
    res = run_collocation(mesh, plaplace_law, grid, SolveConfig(), PLAPLACE_SOURCE, plaplace_boundary)
    x, y = mesh.vertices.T
    center = np.flatnonzero((x == 0.5) & (y == 0.5))[0]
    midpoints = np.flatnonzero(np.isclose(np.hypot(x - 0.5, y - 0.5), 0.5) & mesh.boundary)
    assert midpoints.size == 4
    assert np.argmax(res.mean) == center
    assert np.argmax(res.variance) == center
    assert np.all(res.variance[midpoints] < 1e-6 * res.variance.max())


def test_non_convergence_names_the_point():
    mesh = fem2d.mesh_lshape(2)
    with pytest.raises(CollocationError) as info:
        run_collocation(mesh, lshape_law_factory, sg.tensor_grid(1, 2), SolveConfig(max_iter=1), LSHAPE_SOURCE)
    assert len(info.value.failing) == 4


def test_process_pool_matches_serial():
    mesh = fem2d.mesh_lshape(2)
    grid = sg.smolyak_grid(2, 2)
    serial = run_collocation(mesh, lshape_law_factory, grid, SolveConfig(), LSHAPE_SOURCE)
    pooled = run_collocation(mesh, lshape_law_factory, grid, SolveConfig(), LSHAPE_SOURCE, workers=2)
    assert serial.mean.tobytes() == pooled.mean.tobytes()


# studies ----------------------------------------------------------------------------------


def test_solve_count_accounting():
    spec = StudySpec("lshape", 2, refinements=(0, 1), grid_kind="smolyak", levels=(1, 2, 3), reference_level=4)
    result = run_study(spec)
    per_mesh = sum(len(sg.smolyak_grid(q, 2)) for q in (1, 2, 3))
    assert result.total_solves == 2 * per_mesh
    assert result.extra["reference_solves_mesh0"] == 25
    # Gauss rules are not nested, so few points are shared between components
    assert [r.n_points for r in result.rows[:3]] == [5, 17, 49]


def test_successive_differences_solve_one_extra_level():
    spec = StudySpec("lshape", 2, levels=(1, 2))
    result = run_study(spec)
    assert result.extra["successive_top_solves_mesh0"] == 16
    q, err = result.errors()
    assert q.tolist() == [1, 2] and np.all(err > 0)


def test_study_is_deterministic():
    spec = StudySpec("lshape", 2, levels=(1, 2), reference_level=3)
    a, b = run_study(spec), run_study(spec)
    assert [r.error for r in a.rows] == [r.error for r in b.rows]


def test_identical_consecutive_fields_have_zero_error():
    mesh = fem2d.mesh_lshape(2)
    u = np.random.default_rng(1).standard_normal(mesh.n_vertices)
    assert stochastic_error_successive(mesh, {1: u, 2: u.copy()}) == {1: 0.0}


def test_plaplace_error_table_decays():
    mesh = fem2d.mesh_unit_square(8)
    out = stochastic_error_pLaplace(mesh, levels=[1, 2, 3, 10], reference_level=10)
    err = out["error"]
    assert err[-1] == 0.0
    assert err[0] > err[1] > err[2]


def test_expected_exact_solution_averages_the_radial_family():
    value, _ = expected_plaplace_exact(20)
    x = np.array([0.3])
    rule = sg.gauss_rule_uniform(20, PLAPLACE_INTERVAL)
    direct = sum(w * plaplace_exact(p)[0](x, x) for p, w in zip(rule.nodes, rule.weights))
    assert value(x, x) == pytest.approx(direct, rel=1e-14)


def test_loglog_slope_of_a_power_law():
    q = np.arange(1, 9)
    assert loglog_slope(q, 3.0 * q**-2.5) == pytest.approx(-2.5, abs=1e-12)


# truncation stability and sensitivities ---------------------------------------------------


@pytest.fixture(scope="module")
def kl_four(bh_table):
    return KLExpansion.from_table(bh_table, length=0.5, M=4)


def test_poincare_constant_of_the_unit_square():
    # continuous value 1 / (sqrt(2) pi); the discrete one approaches it from below
    c = poincare_constant(fem2d.mesh_unit_square(16))
    assert c == pytest.approx(1 / (math.sqrt(2) * math.pi), rel=0.01)
    assert c < 1 / (math.sqrt(2) * math.pi)


def test_equal_truncation_has_zero_difference(kl_four):
    mesh = fem2d.mesh_unit_square(8)
    check = kl_truncation_stability(kl_four, [0.5, -1.0, 0.3, 1.2], 3, 3, mesh, 5000.0)
    assert check.difference == 0.0 and check.nu_gap == 0.0


@settings(max_examples=5)
@given(st.lists(st.floats(-SQRT3, SQRT3), min_size=4, max_size=4), st.integers(1, 3))
def test_stability_bound_holds(kl_four, y, M_small):
    mesh = fem2d.mesh_unit_square(8)
    check = kl_truncation_stability(kl_four, y, M_small, 4, mesh, 5000.0)
    assert check.ratio >= 1.0


def test_sensitivity_matches_finite_differences(kl_four):
    mesh = fem2d.mesh_unit_square(8)
    rel = sensitivity_fd_check(kl_four, [0.3, -0.8, 1.1, 0.0], 1, mesh, 5000.0)
    assert rel < 1e-3
