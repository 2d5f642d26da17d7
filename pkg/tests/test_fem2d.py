import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from stochbh import fem2d
from stochbh.fem2d import (
    FEFunction,
    LinearSystem,
    TriMesh,
    apply_dirichlet,
    assemble_linearized,
    load_vector,
    mesh_lshape,
    mesh_unit_square,
    newton_matrix,
    norms,
    refine_uniform,
    residual,
    solve_linear,
    stiffness,
)
from stochbh.material_law import PowerLaw, RationalLaw
from stochbh.nonlinear_solver import SolveConfig, solve_nonlinear


def sin_sin(x, y):
    return np.sin(math.pi * x) * np.sin(math.pi * y)


def sin_sin_grad(x, y):
    return math.pi * np.column_stack(
        [np.cos(math.pi * x) * np.sin(math.pi * y), np.sin(math.pi * x) * np.cos(math.pi * y)]
    )


def reduced(system, mesh, g=0.0):
    return apply_dirichlet(system, mesh, g)


# meshes --------------------------------------------------------------------------------


def test_single_cell_square():
    mesh = mesh_unit_square(1)
    assert mesh.n_vertices == 4 and mesh.n_triangles == 2
    assert mesh.boundary.all()


@pytest.mark.parametrize("n", [1, 2, 5])
def test_square_area_and_boundary_flags(n):
    mesh = mesh_unit_square(n)
    assert abs(mesh.areas.sum() - 1) <= 1e-14
    p = mesh.vertices
    on_edge = np.isin(p[:, 0], [0, 1]) | np.isin(p[:, 1], [0, 1])
    np.testing.assert_array_equal(mesh.boundary, on_edge)


@pytest.mark.parametrize("n", [1, 2, 4])
def test_lshape_geometry(n):
    mesh = mesh_lshape(n)
    assert abs(mesh.areas.sum() - 3) <= 1e-14
    origin = np.flatnonzero(np.all(mesh.vertices == 0, axis=1))
    assert origin.size == 1 and mesh.boundary[origin[0]]
    assert abs(mesh_lshape(2 * n).h - mesh.h / 2) <= 1e-14


def test_lshape_boundary_is_the_polygon():
    mesh = mesh_lshape(3)
    x, y = mesh.vertices.T
    outer = (np.abs(x) == 1) | (np.abs(y) == 1)
    reentrant = ((x == 0) & (y >= 0)) | ((y == 0) & (x >= 0))
    np.testing.assert_array_equal(mesh.boundary, outer | reentrant)


@pytest.mark.parametrize("mesh", [mesh_unit_square(3), mesh_lshape(2)])
def test_refinement_bookkeeping(mesh):
    fine = refine_uniform(mesh)
    assert fine.n_triangles == 4 * mesh.n_triangles
    assert fine.n_vertices == mesh.n_vertices + mesh.edges.shape[0]
    assert abs(fine.areas.sum() - mesh.areas.sum()) <= 1e-14
    assert fine.min_angle() == pytest.approx(mesh.min_angle(), abs=1e-12)
    assert fine.h == pytest.approx(mesh.h / 2, abs=1e-14)
    assert fine.quasi_uniformity() == pytest.approx(mesh.quasi_uniformity(), rel=1e-12)


def test_orientation_is_normalized():
    mesh = TriMesh.from_arrays([[0, 0], [1, 0], [0, 1]], [[0, 2, 1]])
    assert mesh.areas[0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        TriMesh.from_arrays([[0, 0], [1, 0], [2, 0]], [[0, 1, 2]])


# assembly ------------------------------------------------------------------------------


def test_single_cell_laplace_stiffness_by_hand():
    mesh = mesh_unit_square(1)
    A = stiffness(mesh).toarray()
    # diagonal split from (0,0) to (1,1): the diagonal carries no coupling
    expected = {
        ((0, 0), (0, 0)): 1.0,
        ((0, 0), (1, 0)): -0.5,
        ((0, 0), (0, 1)): -0.5,
        ((0, 0), (1, 1)): 0.0,
        ((1, 0), (0, 1)): 0.0,
        ((1, 0), (1, 1)): -0.5,
        ((0, 1), (1, 1)): -0.5,
    }
    index = {tuple(v): i for i, v in enumerate(mesh.vertices.astype(int).tolist())}
    for (a, b), value in expected.items():
        assert A[index[a], index[b]] == pytest.approx(value, abs=1e-15)
        assert A[index[b], index[a]] == pytest.approx(value, abs=1e-15)


@pytest.mark.parametrize("scheme", ["kacanov", "newton"])
def test_linear_law_gives_laplace_matrix(scheme, rng):
    mesh = mesh_unit_square(4)
    u = rng.standard_normal(mesh.n_vertices)
    A = assemble_linearized(mesh, PowerLaw(2.0), u, scheme).matrix
    assert abs(A - stiffness(mesh)).max() <= 1e-13


def test_newton_and_kacanov_agree_when_nu_is_constant(rng):
    mesh = mesh_unit_square(3)
    u = rng.standard_normal(mesh.n_vertices)
    law = RationalLaw(c=0.0)
    K = assemble_linearized(mesh, law, u, "kacanov").matrix
    N = assemble_linearized(mesh, law, u, "newton").matrix
    assert abs(N - K).max() <= 1e-12 * abs(K).max()


@pytest.mark.parametrize("law", [RationalLaw(), PowerLaw(4.0)])
def test_newton_matrix_is_the_residual_jacobian(law, rng):
    mesh = mesh_unit_square(4)
    u = rng.uniform(0.0, 1.5, mesh.n_vertices)
    load = np.zeros(mesh.n_vertices)
    J = newton_matrix(mesh, law, u).toarray()
    d = rng.standard_normal(mesh.n_vertices)
    h = 1e-6
    fd = (residual(mesh, law, u + h * d, load) - residual(mesh, law, u - h * d, load)) / (2 * h)
    assert np.linalg.norm(J @ d - fd) <= 1e-6 * np.linalg.norm(J @ d)


@pytest.mark.parametrize("law", [RationalLaw(), PowerLaw(3.0), PowerLaw(5.0)])
@pytest.mark.parametrize("scheme", ["kacanov", "newton"])
def test_linearized_matrices_are_spd(law, scheme, rng):
    mesh = mesh_unit_square(4)
    u = rng.uniform(-1.0, 1.0, mesh.n_vertices)
    system = reduced(assemble_linearized(mesh, law, u, scheme), mesh)
    A = system.matrix.toarray()
    np.testing.assert_allclose(A, A.T, rtol=1e-12, atol=1e-14 * abs(A).max())
    assert np.linalg.eigvalsh(A).min() > 0


def test_unknown_scheme():
    mesh = mesh_unit_square(1)
    with pytest.raises(ValueError):
        assemble_linearized(mesh, PowerLaw(2.0), np.zeros(4), "picard")


def test_load_vector_of_constant_source_sums_to_area():
    mesh = mesh_lshape(2)
    assert load_vector(mesh, 2.0).sum() == pytest.approx(6.0, rel=1e-14)
    assert load_vector(mesh, lambda x, y: 2.0 + 0 * x).sum() == pytest.approx(6.0, rel=1e-14)


# boundary conditions and linear solves ----------------------------------------------------


def test_zero_dirichlet_gives_interior_spd_system():
    mesh = mesh_unit_square(4)
    system = reduced(LinearSystem(stiffness(mesh), load_vector(mesh, 1.0), np.arange(25), np.zeros(25)), mesh)
    assert system.matrix.shape == (9, 9)
    assert np.linalg.eigvalsh(system.matrix.toarray()).min() > 0


def test_constant_boundary_value_is_reproduced():
    mesh = mesh_lshape(2)
    n = mesh.n_vertices
    system = reduced(LinearSystem(stiffness(mesh), np.zeros(n), np.arange(n), np.zeros(n)), mesh, 3.25)
    np.testing.assert_allclose(solve_linear(system), 3.25, rtol=1e-13)


def test_linear_solution_is_reproduced_exactly():
    mesh = mesh_unit_square(5)
    n = mesh.n_vertices

    def affine(x, y):
        return 1.0 + 2.0 * x - 3.0 * y

    system = reduced(LinearSystem(stiffness(mesh), np.zeros(n), np.arange(n), np.zeros(n)), mesh, affine)
    u = solve_linear(system, mesh)
    np.testing.assert_allclose(u.values, affine(*mesh.vertices.T), atol=1e-13)
    assert norms(mesh, u, affine, lambda x, y: np.column_stack([2 + 0 * x, -3 + 0 * y])).h1 <= 1e-12


def test_one_node_system():
    system = LinearSystem(sp.csr_matrix([[4.0]]), np.array([2.0]), np.array([0]), np.zeros(1))
    assert solve_linear(system).tolist() == [0.5]


def test_solve_meets_residual_contract(rng):
    mesh = mesh_lshape(4)
    n = mesh.n_vertices
    system = reduced(LinearSystem(stiffness(mesh), load_vector(mesh, 1.0), np.arange(n), np.zeros(n)), mesh)
    x = solve_linear(system)[system.free]
    r = system.matrix @ x - system.rhs
    assert np.linalg.norm(r) <= 1e-12 * np.linalg.norm(system.rhs)


def test_exact_interpolant_is_nearly_consistent():
    # p-Laplace solution as boundary data: the interpolant leaves an interior
    # residual that shrinks in the discrete dual norm as h decreases
    from stochbh.uq_driver import plaplace_exact

    law = PowerLaw(4.0)
    value, _ = plaplace_exact(4.0)
    dual = []
    for n in (8, 16, 32):
        mesh = mesh_unit_square(n)
        r = residual(mesh, law, value(*mesh.vertices.T), load_vector(mesh, 2.0))[~mesh.boundary]
        K = reduced(LinearSystem(stiffness(mesh), np.zeros(mesh.n_vertices), None, None), mesh).matrix
        dual.append(math.sqrt(r @ fem2d.spla.spsolve(K.tocsc(), r)))
    assert dual[2] < dual[1] < dual[0]
    assert dual[2] < 0.05 * math.sqrt(load_vector(mesh, 2.0).sum())


# norms ------------------------------------------------------------------------------------


def test_norms_of_zero():
    mesh = mesh_unit_square(3)
    z = norms(mesh, np.zeros(mesh.n_vertices))
    assert z.l2 == z.h1_semi == z.linf_nodal == 0.0


def test_norms_of_the_coordinate_function():
    mesh = mesh_unit_square(4)
    x = mesh.vertices[:, 0]
    n = norms(mesh, x)
    assert n.h1_semi == pytest.approx(1.0, abs=1e-14)
    assert n.l2 == pytest.approx(1 / math.sqrt(3), abs=1e-14)
    # the quadrature path agrees with the matrix path
    q = norms(mesh, x, lambda a, b: 0 * a, lambda a, b: np.zeros((a.size, 2)))
    assert q.l2 == pytest.approx(n.l2, abs=1e-14) and q.h1_semi == pytest.approx(n.h1_semi, abs=1e-14)


@given(st.integers(0, 2**32 - 1))
def test_difference_of_identical_functions(seed):
    mesh = mesh_unit_square(3)
    u = FEFunction(mesh, np.random.default_rng(seed).standard_normal(mesh.n_vertices))
    assert norms(mesh, u - u).h1 <= 1e-14


# convergence ------------------------------------------------------------------------------


def test_linear_problem_converges_at_first_order():
    errs = []
    for n in (8, 16, 32, 64):
        mesh = mesh_unit_square(n)
        N = mesh.n_vertices
        load = load_vector(mesh, lambda x, y: 2 * math.pi**2 * sin_sin(x, y))
        u = solve_linear(reduced(LinearSystem(stiffness(mesh), load, np.arange(N), np.zeros(N)), mesh), mesh)
        errs.append(norms(mesh, u, sin_sin, sin_sin_grad).h1_semi)
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios >= 1.8) & (ratios <= 2.2))


@pytest.mark.parametrize("scheme", ["kacanov", "newton"])
def test_galerkin_orthogonality_of_the_discrete_solution(scheme):
    mesh = mesh_lshape(2)
    law = RationalLaw()
    u, report = solve_nonlinear(mesh, law, 1e5, 0.0, SolveConfig(scheme=scheme, tol_increment=1e-13, max_iter=400))
    assert report.converged
    load = load_vector(mesh, 1e5)
    r = residual(mesh, law, u.values, load)
    assert np.abs(r[~mesh.boundary]).max() <= 1e-10 * np.abs(load).max()


def test_non_finite_coefficients_are_reported():
    mesh = mesh_unit_square(2)
    u = np.full(mesh.n_vertices, np.nan)
    with pytest.raises(fem2d.AssemblyError, match="element"):
        assemble_linearized(mesh, RationalLaw(), u, "kacanov")
