import dataclasses

import numpy as np
import pytest

from stochbh.fem2d import LinearSystem, apply_dirichlet, mesh_lshape, mesh_unit_square, newton_matrix, norms
from stochbh.material_law import PowerLaw, RationalLaw
from stochbh.nonlinear_solver import SolveConfig, SolveReport, sensitivity_solve, solve_nonlinear
from stochbh.uq_driver import plaplace_exact


# a source that puts the field around the knee of the rational law
KNEE_SOURCE = 1e4


@pytest.fixture(scope="module")
def lshape_runs():
    mesh = mesh_lshape(2)
    law = RationalLaw()
    runs = {
        scheme: solve_nonlinear(
            mesh, law, KNEE_SOURCE, 0.0, SolveConfig(scheme=scheme, tol_increment=1e-12, max_iter=500)
        )
        for scheme in ("kacanov", "newton")
    }
    return mesh, law, runs


def test_config_validation():
    with pytest.raises(ValueError):
        SolveConfig(scheme="picard")
    with pytest.raises(ValueError):
        SolveConfig(tol_increment=0.0)
    with pytest.raises(ValueError):
        SolveConfig(backtrack_factor=1.0)


@pytest.mark.parametrize("scheme", ["kacanov", "newton"])
def test_linear_law_converges_in_one_step(scheme):
    mesh = mesh_unit_square(8)
    _, report = solve_nonlinear(mesh, PowerLaw(2.0), 1.0, 0.0, SolveConfig(scheme=scheme))
    assert report.converged and report.iterations == 1


@pytest.mark.parametrize("scheme", ["kacanov", "newton"])
def test_plaplace_solution_is_close_to_the_exact_one(scheme):
    value, grad = plaplace_exact(4.0)
    errs = []
    for n in (8, 16):
        mesh = mesh_unit_square(n)
        u, report = solve_nonlinear(mesh, PowerLaw(4.0), 2.0, value, SolveConfig(scheme=scheme, max_iter=400))
        assert report.converged
        errs.append(norms(mesh, u, value, grad).h1_semi)
    assert 1.7 <= errs[0] / errs[1] <= 2.3
    assert errs[1] < 0.1


def test_schemes_agree(lshape_runs):
    _, _, runs = lshape_runs
    (uk, rk), (un, rn) = runs["kacanov"], runs["newton"]
    assert rk.converged and rn.converged
    scale = np.abs(un.values).max()
    assert np.abs(uk.values - un.values).max() <= 1e-8 * max(1.0, scale)


def test_kacanov_tail_contracts(lshape_runs):
    # stop well above round-off so the tail shows the contraction, not noise
    mesh, law, _ = lshape_runs
    _, report = solve_nonlinear(mesh, law, KNEE_SOURCE, 0.0, SolveConfig(scheme="kacanov", tol_increment=1e-8))
    assert report.converged and report.iterations > 10
    tail = report.increments[-5:]
    assert all(b < a for a, b in zip(tail, tail[1:]))


def test_newton_tail_is_superlinear(lshape_runs):
    _, _, runs = lshape_runs
    inc = runs["newton"][1].increments
    # compare the last increment above round-off with its predecessor
    k = max(i for i in range(1, len(inc)) if inc[i] > 1e-14 * max(inc))
    assert inc[k] < inc[k - 1] ** 1.5


def test_newton_is_faster_than_kacanov(lshape_runs):
    _, _, runs = lshape_runs
    assert runs["newton"][1].iterations < runs["kacanov"][1].iterations


def test_damping_records_step_sizes(lshape_runs):
    _, _, runs = lshape_runs
    for _, report in runs.values():
        assert len(report.step_sizes) == report.iterations
        assert all(0 < t <= 1 for t in report.step_sizes)


def test_iteration_cap_is_reported():
    mesh = mesh_lshape(2)
    _, report = solve_nonlinear(mesh, RationalLaw(), KNEE_SOURCE, 0.0, SolveConfig(scheme="kacanov", max_iter=2))
    assert not report.converged and report.iterations == 2


def test_warm_start_at_the_solution_stops_immediately(lshape_runs):
    mesh, law, runs = lshape_runs
    u, _ = runs["newton"]
    _, report = solve_nonlinear(mesh, law, KNEE_SOURCE, 0.0, SolveConfig(), u0=u.values)
    assert report.converged and report.iterations <= 2


# sensitivities --------------------------------------------------------------------------


def test_zero_direction_gives_zero_sensitivity(lshape_runs):
    mesh, law, runs = lshape_runs
    u, report = runs["newton"]
    du = sensitivity_solve(mesh, law, u, lambda s: np.zeros_like(s), report)
    assert np.abs(du.values).max() == 0.0


def test_parameter_free_law_has_zero_sensitivity():
    mesh = mesh_unit_square(6)
    law = PowerLaw(2.0)
    u, report = solve_nonlinear(mesh, law, 1.0)
    du = sensitivity_solve(mesh, law, u, lambda s: 0.0 * s, report)
    assert not du.values.any()


def test_sensitivity_to_the_rational_saturation_matches_finite_differences(lshape_runs):
    mesh, law, runs = lshape_runs
    u, report = runs["newton"]
    x = lambda s: (s**2 / law.a) ** law.b  # noqa: E731
    du = sensitivity_solve(mesh, law, u, lambda s: x(s) / (1 + x(s)), report)
    eps = 1e-4 * law.c
    plus, _ = solve_nonlinear(mesh, _shift_c(law, eps), KNEE_SOURCE, u0=u.values)
    minus, _ = solve_nonlinear(mesh, _shift_c(law, -eps), KNEE_SOURCE, u0=u.values)
    fd = (plus.values - minus.values) / (2 * eps)
    assert norms(mesh, fd - du.values).h1 <= 1e-3 * norms(mesh, du.values).h1


def _shift_c(law, eps):
    return dataclasses.replace(law, c=law.c + eps)


def test_sensitivity_refuses_unconverged_base():
    mesh = mesh_unit_square(2)
    with pytest.raises(ValueError):
        sensitivity_solve(mesh, PowerLaw(2.0), np.zeros(9), lambda s: s, SolveReport(converged=False))


def test_sensitivity_matrix_is_spd(lshape_runs):
    mesh, law, runs = lshape_runs
    u, _ = runs["newton"]
    n = mesh.n_vertices
    A = apply_dirichlet(LinearSystem(newton_matrix(mesh, law, u.values), np.zeros(n), None, None), mesh).matrix
    assert np.linalg.eigvalsh(A.toarray()).min() > 0
