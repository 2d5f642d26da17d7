"""Collocation sweeps, stochastic error estimates and the convergence studies."""

from __future__ import annotations

import concurrent.futures
import dataclasses
import functools
import math
import time
from typing import Callable, Optional, Sequence

import numpy as np
import numpy.typing as npt
import scipy.linalg as sla

from . import fem2d
from . import stochastic_grids as sg
from .fem2d import Source, TriMesh
from .karhunen_loeve import KLExpansion
from .material_law import MaterialLaw, PowerLaw, RationalLaw
from .nonlinear_solver import SolveConfig, SolveReport, sensitivity_solve, solve_nonlinear

FloatArray = npt.NDArray[np.float64]

PLAPLACE_SOURCE = 2.0
LSHAPE_SOURCE = 1e5
PLAPLACE_INTERVAL = (3.0, 5.0)
LSHAPE_PERTURBATION = 0.2


class CollocationError(RuntimeError):
    def __init__(self, failing: Sequence[tuple[float, ...]]):
        self.failing = list(failing)
        super().__init__(f"nonlinear solve did not converge at {len(self.failing)} point(s): {self.failing}")


# problem definitions -----------------------------------------------------------------


def plaplace_exact(p: float, center: tuple[float, float] = (0.5, 0.5)):
    """Radial solution of the p-Laplace problem with ``J = 2``; returns ``(u, grad u)``."""
    e = p / (p - 1)
    shift = (p - 1) / p * 0.5**e

    def value(x, y):
        r = np.hypot(x - center[0], y - center[1])
        return -(p - 1) / p * r**e + shift

    def grad(x, y):
        dx, dy = x - center[0], y - center[1]
        r = np.hypot(dx, dy)
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.where(r > 0, r ** (1 / (p - 1) - 1), 0.0)
        return np.column_stack([-k * dx, -k * dy])

    return value, grad


def plaplace_law(y: Sequence[float]) -> PowerLaw:
    return PowerLaw(float(y[0]))


def plaplace_boundary(y: Sequence[float]):
    return plaplace_exact(float(y[0]))[0]


def lshape_law_factory(y: Sequence[float]) -> RationalLaw:
    """Rational law with ``a`` and ``c`` perturbed by 20 % times ``y_1``, ``y_2``."""
    base = RationalLaw()
    return RationalLaw(
        a=base.a * (1 + LSHAPE_PERTURBATION * float(y[0])),
        b=base.b,
        c=base.c * (1 + LSHAPE_PERTURBATION * float(y[1])),
        d=base.d,
    )


# collocation ---------------------------------------------------------------------------


@dataclasses.dataclass
class CollocationResult:
    grid: sg.CollocationGrid
    solutions: FloatArray  # (n_points, n_vertices)
    reports: list[SolveReport]
    mean: FloatArray
    variance: FloatArray
    time_s: float

    @property
    def solves(self) -> int:
        return len(self.reports)


def _solve_point(
    mesh: TriMesh,
    law_factory: Callable,
    source: Source,
    bc_factory: Optional[Callable],
    config: SolveConfig,
    y: FloatArray,
) -> tuple[FloatArray, SolveReport]:
    bc = 0.0 if bc_factory is None else bc_factory(y)
    u, report = solve_nonlinear(mesh, law_factory(y), source, bc, config)
    return u.values, report


def run_collocation(
    mesh: TriMesh,
    law_factory: Callable[[FloatArray], MaterialLaw],
    grid: sg.CollocationGrid,
    config: SolveConfig | None = None,
    source: Source = 0.0,
    bc_factory: Callable | None = None,
    workers: int = 1,
) -> CollocationResult:
    """One nonlinear solve per grid point, then quadrature for mean and variance.

    With ``workers > 1`` the solves run in a process pool; factories must
    then be picklable. Results are gathered in grid order either way.
    """
    config = config or SolveConfig()
    task = functools.partial(_solve_point, mesh, law_factory, source, bc_factory, config)
    start = time.perf_counter()
    if workers > 1 and len(grid) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(task, list(grid.points)))
    else:
        out = [task(y) for y in grid.points]
    elapsed = time.perf_counter() - start
    reports = [r for _, r in out]
    failing = [tuple(map(float, y)) for y, r in zip(grid.points, reports) if not r.converged]
    if failing:
        raise CollocationError(failing)
    sols = np.array([u for u, _ in out])
    return CollocationResult(grid, sols, reports, sg.expectation(grid, sols), sg.variance(grid, sols), elapsed)


def make_grid(kind: str, q: int, M: int, gamma=None) -> sg.CollocationGrid:
    if kind == "tensor":
        return sg.tensor_grid(q, M, gamma)
    if kind == "smolyak":
        return sg.smolyak_grid(q, M, gamma)
    raise ValueError(f"unknown grid kind {kind!r}")


# studies -------------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class StudySpec:
    problem: str  # plaplace | lshape
    mesh_n: int
    refinements: tuple[int, ...] = (0,)
    grid_kind: str = "tensor"
    levels: tuple[int, ...] = tuple(range(1, 9))
    reference_level: Optional[int] = None  # None: successive differences
    solver: SolveConfig = SolveConfig()
    workers: int = 1

    def __post_init__(self) -> None:
        if not self.levels:
            raise ValueError("level range is empty")
        if self.problem not in ("plaplace", "lshape"):
            raise ValueError(f"unknown problem {self.problem!r}")


@dataclasses.dataclass
class LevelRow:
    mesh_level: int
    h: float
    q: int
    n_points: int
    error: float
    slope_estimate: float
    time_s: float
    solves: int


@dataclasses.dataclass
class StudyResult:
    spec: StudySpec
    rows: list[LevelRow]
    meshes: dict[int, TriMesh]
    fields: dict[tuple[int, int], tuple[FloatArray, FloatArray]]  # (mesh_level, q) -> (E, Var)
    reports: dict[tuple[int, int], list[SolveReport]] = dataclasses.field(default_factory=dict)
    extra: dict[str, float] = dataclasses.field(default_factory=dict)

    @property
    def total_solves(self) -> int:
        return sum(r.solves for r in self.rows)

    def errors(self, mesh_level: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        level = max(self.meshes) if mesh_level is None else mesh_level
        rows = [r for r in self.rows if r.mesh_level == level]
        return np.array([r.q for r in rows]), np.array([r.error for r in rows])


def loglog_slope(x: npt.ArrayLike, err: npt.ArrayLike) -> float:
    """Least-squares slope of ``log err`` against ``log x``."""
    x, err = np.asarray(x, dtype=float), np.asarray(err, dtype=float)
    keep = (x > 0) & (err > 0)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[keep]), np.log(err[keep]), 1)[0])


def _local_slopes(qs: Sequence[int], errs: Sequence[float]) -> list[float]:
    out = [float("nan")]
    for i in range(1, len(qs)):
        out.append(loglog_slope(qs[i - 1 : i + 1], errs[i - 1 : i + 1]))
    return out


def study_meshes(spec: StudySpec) -> dict[int, TriMesh]:
    base = fem2d.mesh_unit_square(spec.mesh_n) if spec.problem == "plaplace" else fem2d.mesh_lshape(spec.mesh_n)
    meshes: dict[int, TriMesh] = {}
    mesh, level = base, 0
    for target in sorted(spec.refinements):
        while level < target:
            mesh, level = fem2d.refine_uniform(mesh), level + 1
        meshes[target] = mesh
    return meshes


def _problem(spec: StudySpec):
    if spec.problem == "plaplace":
        return plaplace_law, PLAPLACE_SOURCE, plaplace_boundary, 1, PLAPLACE_INTERVAL
    return lshape_law_factory, LSHAPE_SOURCE, None, 2, None


def run_study(spec: StudySpec) -> StudyResult:
    """Expectation error per level on every mesh of the study.

    With a reference level the error is ``||E_q - E_ref||_H1``, otherwise
    ``||E_q - E_{q+1}||_H1`` (so level ``max(levels) + 1`` is also solved).
    The reference is always a tensor grid.
    """
    law_factory, source, bc_factory, M, gamma = _problem(spec)
    meshes = study_meshes(spec)
    rows: list[LevelRow] = []
    fields: dict[tuple[int, int], tuple[FloatArray, FloatArray]] = {}
    reports: dict[tuple[int, int], list[SolveReport]] = {}
    extra: dict[str, float] = {}
    for mesh_level, mesh in meshes.items():
        results: dict[int, CollocationResult] = {}

        def collocate(q: int, kind: str = spec.grid_kind) -> CollocationResult:
            grid = make_grid(kind, q, M, gamma)
            return run_collocation(mesh, law_factory, grid, spec.solver, source, bc_factory, spec.workers)

        for q in spec.levels:
            results[q] = collocate(q)
        if spec.reference_level is not None:
            reference = collocate(spec.reference_level, "tensor")
            extra[f"reference_time_s_mesh{mesh_level}"] = reference.time_s
            extra[f"reference_solves_mesh{mesh_level}"] = reference.solves
            targets = {q: reference.mean for q in spec.levels}
        else:
            nxt = max(spec.levels) + 1
            results[nxt] = collocate(nxt)
            targets = {q: results[q + 1].mean if q + 1 in results else None for q in spec.levels}
        qs = list(spec.levels)
        errs = [fem2d.h1_difference(mesh, results[q].mean, targets[q]) for q in qs]
        slopes = _local_slopes(qs, errs)
        for q, err, slope in zip(qs, errs, slopes):
            res = results[q]
            rows.append(LevelRow(mesh_level, mesh.h, q, len(res.grid), err, slope, res.time_s, res.solves))
            fields[(mesh_level, q)] = (res.mean, res.variance)
            reports[(mesh_level, q)] = res.reports
        if spec.reference_level is None:
            top = max(spec.levels) + 1
            extra[f"successive_top_solves_mesh{mesh_level}"] = results[top].solves
            fields[(mesh_level, top)] = (results[top].mean, results[top].variance)
            reports[(mesh_level, top)] = results[top].reports
    return StudyResult(spec, rows, meshes, fields, reports, extra)


def stochastic_error_pLaplace(
    mesh: TriMesh,
    levels: Sequence[int],
    reference_level: int = 10,
    config: SolveConfig | None = None,
    workers: int = 1,
    exact_points: int = 0,
) -> dict[str, np.ndarray]:
    """``||E_q[u_h] - E_ref[u_h]||_H1`` for a shared mesh.

    With ``exact_points > 0`` also reports the distance to the expectation of
    the analytic solution, integrated over ``p`` with that many Gauss points.
    """
    spec_levels = sorted(set(levels) | {reference_level})
    means = {}
    for q in spec_levels:
        grid = sg.tensor_grid(q, 1, PLAPLACE_INTERVAL)
        res = run_collocation(mesh, plaplace_law, grid, config, PLAPLACE_SOURCE, plaplace_boundary, workers)
        means[q] = res.mean
    out = {
        "q": np.array(list(levels)),
        "error": np.array([fem2d.h1_difference(mesh, means[q], means[reference_level]) for q in levels]),
    }
    if exact_points:
        value, grad = expected_plaplace_exact(exact_points)
        out["error_exact"] = np.array([fem2d.norms(mesh, means[q], value, grad).h1 for q in levels])
    return out


def expected_plaplace_exact(n_points: int = 20):
    """Expectation over ``p ~ U(3, 5)`` of the analytic solution and its gradient."""
    rule = sg.gauss_rule_uniform(n_points, PLAPLACE_INTERVAL)
    pairs = [plaplace_exact(p) for p in rule.nodes]

    def value(x, y):
        return sum(w * u(x, y) for w, (u, _) in zip(rule.weights, pairs))

    def grad(x, y):
        return sum(w * g(x, y) for w, (_, g) in zip(rule.weights, pairs))

    return value, grad


def stochastic_error_successive(mesh: TriMesh, means: dict[int, FloatArray]) -> dict[int, float]:
    """``||E_q - E_{q+1}||_H1`` for every ``q`` whose successor is available."""
    return {q: fem2d.h1_difference(mesh, means[q], means[q + 1]) for q in sorted(means) if q + 1 in means}


def compare_tensor_sparse(
    mesh: TriMesh,
    tensor_q: int = 6,
    sparse_q: int = 3,
    reference_q: int = 9,
    config: SolveConfig | None = None,
    workers: int = 1,
) -> dict[str, float]:
    """L-shape expectation errors of a tensor and a Smolyak grid against a tensor reference."""
    out: dict[str, float] = {}
    reference = run_collocation(
        mesh, lshape_law_factory, sg.tensor_grid(reference_q, 2), config, LSHAPE_SOURCE, None, workers
    )
    for name, grid in (("tensor", sg.tensor_grid(tensor_q, 2)), ("sparse", sg.smolyak_grid(sparse_q, 2))):
        res = run_collocation(mesh, lshape_law_factory, grid, config, LSHAPE_SOURCE, None, workers)
        out[f"{name}_points"] = len(grid)
        out[f"{name}_error"] = fem2d.h1_difference(mesh, res.mean, reference.mean)
    return out


# truncation stability -----------------------------------------------------------------


def poincare_constant(mesh: TriMesh) -> float:
    """Discrete Friedrichs constant: ``||v||_L2 <= C ||grad v||_L2`` on the interior space."""
    free = np.flatnonzero(~mesh.boundary)
    K = fem2d.stiffness(mesh)[free][:, free].toarray()
    Mm = fem2d.mass_matrix(mesh)[free][:, free].toarray()
    lam_min = sla.eigh(K, Mm, eigvals_only=True, subset_by_index=[0, 0])[0]
    return 1.0 / math.sqrt(lam_min)


@dataclasses.dataclass(frozen=True)
class StabilityCheck:
    M_small: int
    M_large: int
    difference: float  # H1 seminorm of u_large - u_small
    bound: float
    nu_gap: float

    @property
    def ratio(self) -> float:
        return self.bound / self.difference if self.difference > 0 else math.inf


def kl_truncation_stability(
    kl: KLExpansion,
    y: Sequence[float],
    M_small: int,
    M_large: int,
    mesh: TriMesh,
    source: float,
    config: SolveConfig | None = None,
    poincare: float | None = None,
) -> StabilityCheck:
    """Compare the solution for the first ``M_small`` modes with the one for ``M_large``.

    The bound is ``||nu - nu_M||_inf C_F ||J||_L2 / (alpha alpha_M)`` in the
    gradient seminorm; the sup is taken over probes of ``[0, s_max]`` and the
    element gradients of the truncated solution, which are the only points
    where the two reluctivities are compared.
    """
    y = np.asarray(y, dtype=float)
    law_large = kl.with_truncation(M_large).sample_law(y[:M_large])
    law_small = kl.with_truncation(M_small).sample_law(y[:M_small])
    u_large, rep_l = solve_nonlinear(mesh, law_large, source, 0.0, config)
    u_small, rep_s = solve_nonlinear(mesh, law_small, source, 0.0, config)
    if not (rep_l.converged and rep_s.converged):
        raise CollocationError([tuple(y)])
    diff = fem2d.norms(mesh, u_large.values - u_small.values).h1_semi
    grads = np.linalg.norm(u_small.gradient(), axis=1)
    probes = np.concatenate([np.linspace(0, 1.01 * max(grads.max(), kl.space.b), 4001), grads])
    gap = float(np.max(np.abs(law_large.nu(probes) - law_small.nu(probes))))
    c_f = poincare_constant(mesh) if poincare is None else poincare
    j_norm = abs(source) * math.sqrt(float(mesh.areas.sum()))
    bound = gap * c_f * j_norm / (law_large.alpha * law_small.alpha)
    return StabilityCheck(M_small, M_large, diff, bound, gap)


def sensitivity_fd_check(
    kl: KLExpansion,
    y: Sequence[float],
    m: int,
    mesh: TriMesh,
    source: float,
    eps: float = 1e-4,
    config: SolveConfig | None = None,
) -> float:
    """Relative H1 distance between the sensitivity field and a central difference."""
    y = np.asarray(y, dtype=float)
    law = kl.sample_law(y)
    u, rep = solve_nonlinear(mesh, law, source, 0.0, config)
    du = sensitivity_solve(mesh, law, u, kl.mode_curve(m), rep)
    e = np.zeros_like(y)
    e[m] = eps
    u_plus, _ = solve_nonlinear(mesh, kl.sample_law(y + e), source, 0.0, config, u0=u.values)
    u_minus, _ = solve_nonlinear(mesh, kl.sample_law(y - e), source, 0.0, config, u0=u.values)
    fd = (u_plus.values - u_minus.values) / (2 * eps)
    scale = fem2d.norms(mesh, fd).h1
    return fem2d.h1_difference(mesh, du.values, fd) / scale if scale > 0 else fem2d.norms(mesh, du.values).h1
