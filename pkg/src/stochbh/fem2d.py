"""P1 finite elements for ``-div(nu(|grad u|) grad u) = J`` on triangulated polygons."""

from __future__ import annotations

import dataclasses
import functools
from typing import Callable, Union

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .material_law import MaterialLaw, diff_reluctivity_batch

FloatArray = npt.NDArray[np.float64]
Source = Union[float, Callable[[FloatArray, FloatArray], FloatArray]]

# |grad u| is clamped below by this before evaluating nu (power laws vanish at 0)
GRAD_FLOOR = 1e-12


class AssemblyError(RuntimeError):
    pass


class LinearSolveError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class TriMesh:
    """Conforming triangulation; triangles are counterclockwise."""

    vertices: FloatArray
    triangles: npt.NDArray[np.int64]
    boundary: npt.NDArray[np.bool_]

    @classmethod
    def from_arrays(cls, vertices: npt.ArrayLike, triangles: npt.ArrayLike) -> TriMesh:
        p = np.asarray(vertices, dtype=float)
        t = np.asarray(triangles, dtype=np.int64)
        e1 = p[t[:, 1]] - p[t[:, 0]]
        e2 = p[t[:, 2]] - p[t[:, 0]]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(det == 0):
            raise ValueError("degenerate triangle")
        t = np.where((det < 0)[:, None], t[:, [0, 2, 1]], t)
        edges, counts = _edges(t)
        boundary = np.zeros(p.shape[0], dtype=bool)
        boundary[edges[counts == 1].ravel()] = True
        return cls(p, t, boundary)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @functools.cached_property
    def areas(self) -> FloatArray:
        p, t = self.vertices, self.triangles
        e1 = p[t[:, 1]] - p[t[:, 0]]
        e2 = p[t[:, 2]] - p[t[:, 0]]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @functools.cached_property
    def grads(self) -> FloatArray:
        """Gradients of the barycentric basis functions, shape ``(n_triangles, 3, 2)``."""
        p, t = self.vertices, self.triangles
        x, y = p[t, 0], p[t, 1]
        g = np.empty((t.shape[0], 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            g[:, i, 0] = y[:, j] - y[:, k]
            g[:, i, 1] = x[:, k] - x[:, j]
        return g / (2 * self.areas)[:, None, None]

    @functools.cached_property
    def edges(self) -> npt.NDArray[np.int64]:
        return _edges(self.triangles)[0]

    @property
    def h(self) -> float:
        """Maximum element diameter (longest edge)."""
        p = self.vertices
        e = self.edges
        return float(np.max(np.linalg.norm(p[e[:, 0]] - p[e[:, 1]], axis=1)))

    def inradii(self) -> FloatArray:
        p, t = self.vertices, self.triangles
        per = sum(np.linalg.norm(p[t[:, i]] - p[t[:, (i + 1) % 3]], axis=1) for i in range(3))
        return 2 * self.areas / per

    def quasi_uniformity(self) -> float:
        """``min_T diam(B_T) / h``; bounded below for a quasi-uniform family."""
        return float(2 * self.inradii().min() / self.h)

    def min_angle(self) -> float:
        p, t = self.vertices, self.triangles
        out = np.inf
        for i in range(3):
            a = p[t[:, (i + 1) % 3]] - p[t[:, i]]
            b = p[t[:, (i + 2) % 3]] - p[t[:, i]]
            cos = np.sum(a * b, axis=1) / np.linalg.norm(a, axis=1) / np.linalg.norm(b, axis=1)
            out = min(out, float(np.arccos(np.clip(cos, -1, 1)).min()))
        return out

    @functools.cached_property
    def _pattern(self) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
        t = self.triangles
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        return rows, cols

    def assemble_matrix(self, local: FloatArray) -> sp.csr_matrix:
        """Sum ``(n_triangles, 3, 3)`` element matrices into a sparse matrix."""
        rows, cols = self._pattern
        n = self.n_vertices
        return sp.csr_matrix((local.reshape(-1), (rows, cols)), shape=(n, n))

    def assemble_vector(self, local: FloatArray) -> FloatArray:
        return np.bincount(self.triangles.ravel(), weights=local.reshape(-1), minlength=self.n_vertices)


def _edges(t: npt.NDArray[np.int64]) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
    e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    return np.unique(e, axis=0, return_counts=True)


@dataclasses.dataclass(frozen=True)
class FEFunction:
    mesh: TriMesh
    values: FloatArray

    def __post_init__(self) -> None:
        if self.values.shape != (self.mesh.n_vertices,):
            raise ValueError("one coefficient per vertex expected")

    def gradient(self) -> FloatArray:
        """Elementwise constant gradient, shape ``(n_triangles, 2)``."""
        return element_gradients(self.mesh, self.values)

    def __sub__(self, other: FEFunction) -> FEFunction:
        return FEFunction(self.mesh, self.values - other.values)


def element_gradients(mesh: TriMesh, u: FloatArray) -> FloatArray:
    return np.einsum("ti,tid->td", u[mesh.triangles], mesh.grads)


def _grid_mesh(n: int, x0: float, y0: float, size: float, keep=None) -> TriMesh:
    xs = x0 + size * np.arange(n + 1) / n
    ys = y0 + size * np.arange(n + 1) / n
    X, Y = np.meshgrid(xs, ys)
    p = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i, j = i.ravel(), j.ravel()
    if keep is not None:
        mask = keep(xs[i], ys[j])
        i, j = i[mask], j[mask]
    v00 = j * (n + 1) + i
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    t = np.concatenate([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])])
    used = np.unique(t)
    renum = np.full(p.shape[0], -1)
    renum[used] = np.arange(used.size)
    return TriMesh.from_arrays(p[used], renum[t])


def mesh_unit_square(n: int) -> TriMesh:
    """``2 n^2`` right triangles on ``(0, 1)^2``, all diagonals in the same direction."""
    if n < 1:
        raise ValueError("n must be positive")
    return _grid_mesh(n, 0.0, 0.0, 1.0)


def mesh_lshape(n: int) -> TriMesh:
    """``[-1, 1]^2`` minus ``[0, 1]^2`` with ``n`` cells per unit length."""
    if n < 1:
        raise ValueError("n must be positive")
    return _grid_mesh(2 * n, -1.0, -1.0, 2.0, keep=lambda x, y: ~((x >= 0) & (y >= 0)))


def refine_uniform(mesh: TriMesh) -> TriMesh:
    """Split each triangle into four congruent children at the edge midpoints."""
    p, t = mesh.vertices, mesh.triangles
    edges = mesh.edges
    nv = p.shape[0]
    mid = nv + np.arange(edges.shape[0])
    lookup = {(int(a), int(b)): int(m) for (a, b), m in zip(edges, mid)}

    def m(a, b):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return np.array([lookup[(x, y)] for x, y in zip(lo.tolist(), hi.tolist())])

    m01 = m(t[:, 0], t[:, 1])
    m12 = m(t[:, 1], t[:, 2])
    m20 = m(t[:, 2], t[:, 0])
    new_t = np.concatenate(
        [
            np.column_stack([t[:, 0], m01, m20]),
            np.column_stack([m01, t[:, 1], m12]),
            np.column_stack([m20, m12, t[:, 2]]),
            np.column_stack([m01, m12, m20]),
        ]
    )
    new_p = np.concatenate([p, 0.5 * (p[edges[:, 0]] + p[edges[:, 1]])])
    return TriMesh.from_arrays(new_p, new_t)


@dataclasses.dataclass(frozen=True)
class LinearSystem:
    """``matrix @ x = rhs`` on the ``free`` vertices; other vertices take ``values``."""

    matrix: sp.csr_matrix
    rhs: FloatArray
    free: npt.NDArray[np.int64]
    values: FloatArray

    @property
    def n_vertices(self) -> int:
        return self.values.size


def load_vector(mesh: TriMesh, source: Source) -> FloatArray:
    """``(J, phi_i)`` with the edge-midpoint rule (exact for quadratic integrands)."""
    if callable(source):
        p, t = mesh.vertices, mesh.triangles
        local = np.zeros((mesh.n_triangles, 3))
        for a, b in ((0, 1), (1, 2), (2, 0)):
            xm = 0.5 * (p[t[:, a]] + p[t[:, b]])
            jm = np.asarray(source(xm[:, 0], xm[:, 1]), dtype=float) * np.ones(mesh.n_triangles)
            # phi_a = phi_b = 1/2 at the midpoint of edge ab, the third vanishes
            local[:, a] += 0.5 * jm
            local[:, b] += 0.5 * jm
        local *= (mesh.areas / 3)[:, None]
    else:
        local = np.repeat((float(source) * mesh.areas / 3)[:, None], 3, axis=1)
    return mesh.assemble_vector(local)


def stiffness(mesh: TriMesh, coeff: FloatArray | float = 1.0) -> sp.csr_matrix:
    """``(c grad phi_j, grad phi_i)`` for an elementwise constant coefficient."""
    g = mesh.grads
    c = np.broadcast_to(np.asarray(coeff, dtype=float), (mesh.n_triangles,))
    local = (c * mesh.areas)[:, None, None] * np.einsum("tid,tjd->tij", g, g)
    return mesh.assemble_matrix(local)


def tensor_stiffness(mesh: TriMesh, tensors: FloatArray) -> sp.csr_matrix:
    g = mesh.grads
    local = mesh.areas[:, None, None] * np.einsum("tid,tde,tje->tij", g, tensors, g)
    return mesh.assemble_matrix(local)


def mass_matrix(mesh: TriMesh) -> sp.csr_matrix:
    base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return mesh.assemble_matrix(mesh.areas[:, None, None] * base[None])


def _check_finite(values: FloatArray, what: str) -> None:
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise AssemblyError(f"non-finite {what} on element {int(bad[0])}")


def reluctivity_field(mesh: TriMesh, law: MaterialLaw, u: FloatArray) -> FloatArray:
    g = element_gradients(mesh, u)
    nu = law.nu(np.maximum(np.linalg.norm(g, axis=1), GRAD_FLOOR))
    _check_finite(nu, "reluctivity")
    return nu


def residual(mesh: TriMesh, law: MaterialLaw, u: FloatArray, load: FloatArray) -> FloatArray:
    """``(nu(|grad u|) grad u, grad phi_i) - (J, phi_i)`` for all vertices."""
    g = element_gradients(mesh, u)
    nu = reluctivity_field(mesh, law, u)
    local = (nu * mesh.areas)[:, None] * np.einsum("tid,td->ti", mesh.grads, g)
    return mesh.assemble_vector(local) - load


def assemble_linearized(
    mesh: TriMesh,
    law: MaterialLaw,
    u_prev: FEFunction | FloatArray,
    scheme: str = "kacanov",
    source: Source = 0.0,
) -> LinearSystem:
    """Linearized system at ``u_prev``.

    ``kacanov``: frozen-coefficient matrix with the load as right-hand side;
    the solution is the next iterate. ``newton``: tangent matrix with the
    negative residual as right-hand side; the solution is the increment.
    """
    u = u_prev.values if isinstance(u_prev, FEFunction) else np.asarray(u_prev, dtype=float)
    if u.shape != (mesh.n_vertices,):
        raise ValueError("previous iterate lives on a different mesh")
    load = load_vector(mesh, source)
    all_free = np.arange(mesh.n_vertices)
    if scheme == "kacanov":
        A = stiffness(mesh, reluctivity_field(mesh, law, u))
        return LinearSystem(A, load, all_free, np.zeros(mesh.n_vertices))
    if scheme == "newton":
        A = newton_matrix(mesh, law, u)
        return LinearSystem(A, -residual(mesh, law, u, load), all_free, np.zeros(mesh.n_vertices))
    raise ValueError(f"unknown linearization {scheme!r}")


def newton_matrix(mesh: TriMesh, law: MaterialLaw, u: FloatArray) -> sp.csr_matrix:
    nud = diff_reluctivity_batch(law, element_gradients(mesh, u), floor=GRAD_FLOOR)
    _check_finite(nud.reshape(nud.shape[0], -1).sum(axis=1), "differential reluctivity")
    return tensor_stiffness(mesh, nud)


def nodal_values(mesh: TriMesh, g: Callable | float | FloatArray) -> FloatArray:
    """Nodal interpolant of a constant, a nodal vector, or a function of ``(x, y)``."""
    n = mesh.n_vertices
    if callable(g):
        return np.asarray(g(mesh.vertices[:, 0], mesh.vertices[:, 1]), dtype=float) * np.ones(n)
    return np.broadcast_to(np.asarray(g, dtype=float), (n,)).copy()


def apply_dirichlet(
    system: LinearSystem, mesh: TriMesh, g: Callable | float | FloatArray = 0.0
) -> LinearSystem:
    """Eliminate boundary vertices symmetrically with prescribed values ``g``.

    ``g`` is a constant, a nodal vector, or a function of ``(x, y)``.
    """
    gv = nodal_values(mesh, g)
    values = np.zeros(mesh.n_vertices)
    values[mesh.boundary] = gv[mesh.boundary]
    free = np.flatnonzero(~mesh.boundary)
    fixed = np.flatnonzero(mesh.boundary)
    A = system.matrix.tocsr()
    A_ff = A[free][:, free]
    rhs = system.rhs[free] - A[free][:, fixed] @ values[fixed]
    return LinearSystem(A_ff.tocsr(), rhs, free, values)


def solve_linear(system: LinearSystem, mesh: TriMesh | None = None, rtol: float = 1e-12) -> FloatArray | FEFunction:
    """Solve the reduced system; returns nodal values (an FEFunction if ``mesh`` is given)."""
    A, b = system.matrix, system.rhs
    x = np.zeros(0)
    if b.size:
        x = spla.spsolve(A.tocsc(), b) if b.size > 1 else b / A.toarray().ravel()
        x = np.atleast_1d(x)
        bnorm = max(np.linalg.norm(b), np.finfo(float).tiny)
        if not np.all(np.isfinite(x)) or np.linalg.norm(A @ x - b) > rtol * bnorm:
            x = _refine(A, b, x if np.all(np.isfinite(x)) else np.zeros_like(b), rtol)
    out = system.values.copy()
    out[system.free] = x
    return FEFunction(mesh, out) if mesh is not None else out


def _refine(A: sp.csr_matrix, b: FloatArray, x: FloatArray, rtol: float) -> FloatArray:
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise LinearSolveError("matrix is not positive definite")
    prec = spla.LinearOperator(A.shape, matvec=lambda v: v / diag)
    bnorm = np.linalg.norm(b)
    x, info = spla.cg(A, b, x0=x, rtol=rtol * 0.5, atol=0.0, M=prec, maxiter=20 * b.size)
    if info != 0 or np.linalg.norm(A @ x - b) > rtol * bnorm * 10:
        raise LinearSolveError(f"linear solve failed to reach relative residual {rtol}")
    return x


# degree-4 symmetric rule on the reference triangle (barycentric points, weights sum to 1)
_A1, _W1 = 0.445948490915965, 0.223381589678011
_A2, _W2 = 0.091576213509771, 0.109951743655322
QUAD4_BARY = np.array(
    [
        [_A1, _A1, 1 - 2 * _A1],
        [_A1, 1 - 2 * _A1, _A1],
        [1 - 2 * _A1, _A1, _A1],
        [_A2, _A2, 1 - 2 * _A2],
        [_A2, 1 - 2 * _A2, _A2],
        [1 - 2 * _A2, _A2, _A2],
    ]
)
QUAD4_W = np.array([_W1] * 3 + [_W2] * 3)


@dataclasses.dataclass(frozen=True)
class Norms:
    l2: float
    h1_semi: float
    linf_nodal: float

    @property
    def h1(self) -> float:
        return float(np.hypot(self.l2, self.h1_semi))


def norms(
    mesh: TriMesh,
    u: FEFunction | FloatArray,
    exact: Callable | None = None,
    exact_grad: Callable | None = None,
) -> Norms:
    """L2, H1-seminorm and nodal max norms of ``u - exact`` (``exact`` defaults to 0).

    ``exact(x, y)`` returns values, ``exact_grad(x, y)`` an ``(n, 2)`` array;
    both are integrated with a degree-4 rule per element.
    """
    uv = u.values if isinstance(u, FEFunction) else np.asarray(u, dtype=float)
    p, t = mesh.vertices, mesh.triangles
    if exact is None and exact_grad is None:
        l2 = float(np.sqrt(max(uv @ (mass_matrix(mesh) @ uv), 0.0)))
        semi = float(np.sqrt(max(uv @ (stiffness(mesh) @ uv), 0.0)))
        return Norms(l2, semi, float(np.max(np.abs(uv), initial=0.0)))

    gu = element_gradients(mesh, uv)
    l2sq = semisq = 0.0
    for bary, w in zip(QUAD4_BARY, QUAD4_W):
        xq = np.einsum("i,tid->td", bary, p[t])
        uq = uv[t] @ bary
        if exact is not None:
            uq = uq - exact(xq[:, 0], xq[:, 1])
        l2sq += np.sum(w * mesh.areas * uq**2)
        gq = gu
        if exact_grad is not None:
            gq = gu - exact_grad(xq[:, 0], xq[:, 1])
        semisq += np.sum(w * mesh.areas * np.sum(gq**2, axis=1))
    nodal = uv - exact(p[:, 0], p[:, 1]) if exact is not None else uv
    return Norms(float(np.sqrt(l2sq)), float(np.sqrt(semisq)), float(np.max(np.abs(nodal))))


def h1_difference(mesh: TriMesh, u: FloatArray, v: FloatArray) -> float:
    """Discrete H1 norm of ``u - v`` (exact for P1 functions)."""
    return norms(mesh, np.asarray(u) - np.asarray(v)).h1
