"""Kačanov and damped Newton iterations at a fixed parameter point."""

from __future__ import annotations

import dataclasses
from typing import Callable, Union

import numpy as np
import numpy.typing as npt

from . import fem2d
from .fem2d import FEFunction, LinearSystem, Source, TriMesh
from .material_law import MaterialLaw, PowerLaw

FloatArray = npt.NDArray[np.float64]
Boundary = Union[float, FloatArray, Callable[[FloatArray, FloatArray], FloatArray]]

SCHEMES = ("kacanov", "newton")


class NonFiniteError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class SolveConfig:
    scheme: str = "newton"
    tol_increment: float = 1e-12
    max_iter: int = 200
    damping: bool = True
    backtrack_factor: float = 0.5
    max_halvings: int = 6

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if not self.tol_increment > 0:
            raise ValueError("tol_increment must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")


@dataclasses.dataclass
class SolveReport:
    iterations: int = 0
    increments: list[float] = dataclasses.field(default_factory=list)
    step_sizes: list[float] = dataclasses.field(default_factory=list)
    residual_norm: float = float("nan")
    converged: bool = False

    @property
    def final_increment(self) -> float:
        return self.increments[-1] if self.increments else float("nan")


def initial_iterate(mesh: TriMesh, law: MaterialLaw, load: FloatArray, bc: Boundary) -> FloatArray:
    """Linear solve with the reluctivity frozen at its value at zero field.

    Power laws with ``nu(0) = 0`` use ``nu = 1`` instead; any positive constant
    gives the same linear solution up to scaling of the interior part.
    """
    nu0 = float(law.nu(0.0))
    if isinstance(law, PowerLaw) or not np.isfinite(nu0) or nu0 <= 0:
        nu0 = 1.0
    system = LinearSystem(fem2d.stiffness(mesh, nu0), load, np.arange(mesh.n_vertices), np.zeros(mesh.n_vertices))
    return fem2d.solve_linear(fem2d.apply_dirichlet(system, mesh, bc))


def _free_residual_norm(mesh: TriMesh, law: MaterialLaw, u: FloatArray, load: FloatArray) -> float:
    r = fem2d.residual(mesh, law, u, load)
    return float(np.linalg.norm(r[~mesh.boundary]))


def solve_nonlinear(
    mesh: TriMesh,
    law: MaterialLaw,
    source: Source,
    bc: Boundary = 0.0,
    config: SolveConfig | None = None,
    u0: FloatArray | None = None,
) -> tuple[FEFunction, SolveReport]:
    """Iterate until the nodal max-norm increment drops below ``tol_increment``.

    Each proposed step ``u + t (u_new - u)`` is accepted at ``t = 1`` unless
    damping is on and the interior residual grows; then ``t`` is reduced by
    ``backtrack_factor`` up to ``max_halvings`` times and the last trial is
    taken regardless.
    """
    config = config or SolveConfig()
    load = fem2d.load_vector(mesh, source)
    if u0 is None:
        u = initial_iterate(mesh, law, load, bc)
    else:
        u = np.array(u0, dtype=float)
        u[mesh.boundary] = fem2d.nodal_values(mesh, bc)[mesh.boundary]
    report = SolveReport()
    res = _free_residual_norm(mesh, law, u, load)

    for _ in range(config.max_iter):
        target = _linearized_target(mesh, law, u, load, config.scheme)
        if not np.all(np.isfinite(target)):
            raise NonFiniteError("non-finite iterate in nonlinear solve")
        step = target - u
        t = 1.0
        trial = u + step
        trial_res = _free_residual_norm(mesh, law, trial, load)
        if config.damping:
            halvings = 0
            while not trial_res < res and halvings < config.max_halvings:
                t *= config.backtrack_factor
                trial = u + t * step
                trial_res = _free_residual_norm(mesh, law, trial, load)
                halvings += 1
        increment = float(np.max(np.abs(trial - u))) if u.size else 0.0
        u, res = trial, trial_res
        report.iterations += 1
        report.increments.append(increment)
        report.step_sizes.append(t)
        if not np.isfinite(increment):
            raise NonFiniteError("non-finite increment in nonlinear solve")
        if increment < config.tol_increment:
            report.converged = True
            break
    report.residual_norm = res
    return FEFunction(mesh, u), report


def _linearized_target(mesh: TriMesh, law: MaterialLaw, u: FloatArray, load: FloatArray, scheme: str) -> FloatArray:
    """Undamped next iterate; boundary values are carried over from ``u``."""
    n = mesh.n_vertices
    free = np.arange(n)
    if scheme == "kacanov":
        A = fem2d.stiffness(mesh, fem2d.reluctivity_field(mesh, law, u))
        return fem2d.solve_linear(fem2d.apply_dirichlet(LinearSystem(A, load, free, np.zeros(n)), mesh, u))
    A = fem2d.newton_matrix(mesh, law, u)
    rhs = -fem2d.residual(mesh, law, u, load)
    du = fem2d.solve_linear(fem2d.apply_dirichlet(LinearSystem(A, rhs, free, np.zeros(n)), mesh, 0.0))
    return u + du


def sensitivity_solve(
    mesh: TriMesh,
    law: MaterialLaw,
    u: FEFunction | FloatArray,
    law_derivative: MaterialLaw | Callable[[FloatArray], FloatArray],
    report: SolveReport | None = None,
) -> FEFunction:
    """Derivative of the solution with respect to one parameter of the law.

    ``law_derivative`` gives ``d nu / d y_m`` as a function of ``|grad u|``
    (or a law whose ``nu`` is that function; for KL laws use
    ``kl.mode_curve(m)``). Solves the Newton system at ``u`` with homogeneous
    Dirichlet data and right-hand side ``-(d nu (grad u), grad v)``.
    """
    if report is not None and not report.converged:
        raise ValueError("sensitivity needs a converged base solution")
    uv = u.values if isinstance(u, FEFunction) else np.asarray(u, dtype=float)
    dnu = law_derivative.nu if isinstance(law_derivative, MaterialLaw) else law_derivative
    g = fem2d.element_gradients(mesh, uv)
    s = np.maximum(np.linalg.norm(g, axis=1), fem2d.GRAD_FLOOR)
    coef = np.asarray(dnu(s), dtype=float) * mesh.areas
    rhs = -mesh.assemble_vector(coef[:, None] * np.einsum("tid,td->ti", mesh.grads, g))
    A = fem2d.newton_matrix(mesh, law, uv)
    n = mesh.n_vertices
    system = fem2d.apply_dirichlet(LinearSystem(A, rhs, np.arange(n), np.zeros(n)), mesh, 0.0)
    return fem2d.solve_linear(system, mesh)
