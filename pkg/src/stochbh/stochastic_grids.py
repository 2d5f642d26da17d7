"""Tensor and Smolyak collocation grids for uniform densities.

One-dimensional rules are Gauss-Legendre, with weights normalized to the
uniform probability density. Smolyak grids use ``p(j) = 2^j`` (``p(0) = 0``)
and keep their component tensor grids so that interpolation is done with
the combination formula rather than a global Lagrange basis.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from typing import Sequence

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.float64]
Interval = tuple[float, float]

SQRT3 = math.sqrt(3.0)
UNIT_GAMMA: Interval = (-SQRT3, SQRT3)
MERGE_DECIMALS = 14


def _legendre_pair(n: int, x: FloatArray) -> tuple[FloatArray, FloatArray]:
    """``(P_n(x), P_n'(x))`` by the three-term recurrence."""
    p0, p1 = np.ones_like(x), x.copy()
    for j in range(2, n + 1):
        p0, p1 = p1, ((2 * j - 1) * x * p1 - (j - 1) * p0) / j
    return p1, n * (x * p1 - p0) / (x * x - 1)


def legendre_nodes(n: int, tol: float = 1e-15, max_iter: int = 100) -> tuple[FloatArray, FloatArray]:
    """Gauss-Legendre nodes and weights on ``[-1, 1]`` by Newton's method.

    Only the nonnegative half is iterated from Chebyshev-like initial guesses;
    the rest follows by symmetry, so the middle node of an odd rule is exactly 0.
    """
    if n < 1:
        raise ValueError("a quadrature rule needs at least one point")
    if n == 1:
        return np.zeros(1), np.full(1, 2.0)
    k = np.arange(1, n // 2 + 1)
    x = np.cos(np.pi * (k - 0.25) / (n + 0.5))
    for _ in range(max_iter):
        p, dp = _legendre_pair(n, x)
        dx = p / dp
        x = x - dx
        if np.max(np.abs(dx)) <= tol:
            break
    _, dp = _legendre_pair(n, x)
    w = 2.0 / ((1 - x * x) * dp * dp)
    mid_x = [0.0] if n % 2 else []
    mid_w = []
    if n % 2:
        _, dp0 = _legendre_pair(n, np.zeros(1))
        mid_w = [2.0 / dp0[0] ** 2]
    nodes = np.concatenate([-x, mid_x, x[::-1]])
    weights = np.concatenate([w, mid_w, w[::-1]])
    return nodes, weights


@dataclasses.dataclass(frozen=True)
class Rule1D:
    """Gauss rule on one stochastic coordinate; weights sum to one."""

    nodes: FloatArray
    weights: FloatArray
    interval: Interval
    level: int | None = None

    @property
    def n(self) -> int:
        return self.nodes.size


def gauss_rule_uniform(n: int, interval: Interval = UNIT_GAMMA, level: int | None = None) -> Rule1D:
    a, b = interval
    t, w = legendre_nodes(n)
    nodes = 0.5 * (a + b) + 0.5 * (b - a) * t
    if n % 2:
        nodes[n // 2] = 0.5 * (a + b)
    return Rule1D(nodes, 0.5 * w, (float(a), float(b)), level)


def smolyak_points_1d(j: int) -> int:
    """Number of points ``p(j) + 1`` at Smolyak level ``j``."""
    return 1 if j == 0 else 2**j + 1


@dataclasses.dataclass(frozen=True)
class Component:
    """One tensor grid in a Smolyak combination (or the whole tensor grid)."""

    multiindex: tuple[int, ...]
    coefficient: float
    rules: tuple[Rule1D, ...]
    point_index: npt.NDArray[np.int64]  # global index of each component point, C order

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(r.n for r in self.rules)


@dataclasses.dataclass(frozen=True)
class CollocationGrid:
    kind: str
    M: int
    q: int
    points: FloatArray
    weights: FloatArray
    intervals: tuple[Interval, ...]
    components: tuple[Component, ...]

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n_points(self) -> int:
        return len(self)


def _intervals(M: int, gamma: Interval | Sequence[Interval] | None) -> tuple[Interval, ...]:
    if gamma is None:
        return (UNIT_GAMMA,) * M
    if len(gamma) == 2 and np.isscalar(gamma[0]):
        return ((float(gamma[0]), float(gamma[1])),) * M
    if len(gamma) != M:
        raise ValueError(f"expected {M} intervals")
    return tuple((float(a), float(b)) for a, b in gamma)


def tensor_grid(q: int, M: int, gamma: Interval | Sequence[Interval] | None = None) -> CollocationGrid:
    """Isotropic tensor grid with ``q + 1`` Gauss points per dimension."""
    if q < 0 or M < 1:
        raise ValueError("need q >= 0 and M >= 1")
    ivals = _intervals(M, gamma)
    rules = tuple(gauss_rule_uniform(q + 1, iv, level=q) for iv in ivals)
    points = np.array(list(itertools.product(*(r.nodes for r in rules)))).reshape(-1, M)
    weights = np.prod(np.array(list(itertools.product(*(r.weights for r in rules)))).reshape(-1, M), axis=1)
    comp = Component((q,) * M, 1.0, rules, np.arange(points.shape[0]))
    return CollocationGrid("tensor", M, q, points, weights, ivals, (comp,))


def smolyak_multiindices(q: int, M: int) -> list[tuple[tuple[int, ...], int]]:
    """Multi-indices with nonzero combination coefficient and their coefficients."""
    out = []
    for total in range(max(0, q - M + 1), q + 1):
        coeff = (-1) ** (q - total) * math.comb(M - 1, q - total)
        if coeff == 0:
            continue
        for j in _compositions(total, M):
            out.append((j, coeff))
    return out


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def smolyak_grid(q: int, M: int, gamma: Interval | Sequence[Interval] | None = None) -> CollocationGrid:
    """Isotropic Smolyak grid of level ``q`` built from Gauss rules.

    Coinciding points of different components are merged after rounding to
    14 decimals; their weights are summed.
    """
    if q < 0 or M < 1:
        raise ValueError("need q >= 0 and M >= 1")
    ivals = _intervals(M, gamma)
    rule_cache: dict[tuple[int, int], Rule1D] = {}

    def rule(m: int, j: int) -> Rule1D:
        if (m, j) not in rule_cache:
            rule_cache[(m, j)] = gauss_rule_uniform(smolyak_points_1d(j), ivals[m], level=j)
        return rule_cache[(m, j)]

    index: dict[tuple[float, ...], int] = {}
    coords: list[tuple[float, ...]] = []
    weights: list[float] = []
    raw = []
    for j, coeff in smolyak_multiindices(q, M):
        rules = tuple(rule(m, jm) for m, jm in enumerate(j))
        ids = []
        for pt, w in zip(itertools.product(*(r.nodes for r in rules)), itertools.product(*(r.weights for r in rules))):
            key = tuple(np.round(pt, MERGE_DECIMALS) + 0.0)
            if key not in index:
                index[key] = len(coords)
                coords.append(tuple(float(v) for v in pt))
                weights.append(0.0)
            k = index[key]
            weights[k] += coeff * math.prod(w)
            ids.append(k)
        raw.append((j, float(coeff), rules, np.array(ids)))

    keys = list(index.keys())
    order = sorted(range(len(keys)), key=lambda i: keys[i])
    remap = np.empty(len(keys), dtype=np.int64)
    remap[order] = np.arange(len(keys))
    points = np.array([coords[i] for i in order]).reshape(-1, M)
    w = np.array([weights[i] for i in order])
    comps = tuple(Component(j, c, rules, remap[ids]) for j, c, rules, ids in raw)
    return CollocationGrid("smolyak", M, q, points, w, ivals, comps)


def _check_values(grid: CollocationGrid, values: npt.ArrayLike) -> FloatArray:
    values = np.asarray(values, dtype=float)
    if values.shape[0] != len(grid):
        raise ValueError(f"got {values.shape[0]} values for {len(grid)} grid points")
    return values


def expectation(grid: CollocationGrid, values: npt.ArrayLike) -> FloatArray:
    """Quadrature of ``values`` (one entry or row per grid point)."""
    values = _check_values(grid, values)
    return np.tensordot(grid.weights, values, axes=1)


def variance(grid: CollocationGrid, values: npt.ArrayLike) -> FloatArray:
    values = _check_values(grid, values)
    # shift by the first value (variance is shift invariant) so constants give exactly 0
    shifted = values - values[0]
    mean = expectation(grid, shifted)
    return np.maximum(expectation(grid, shifted**2) - mean**2, 0.0)


def lagrange_basis(nodes: FloatArray, y: float) -> FloatArray:
    """Values of all Lagrange polynomials on ``nodes`` at ``y`` (barycentric form)."""
    n = nodes.size
    if n == 1:
        return np.ones(1)
    hit = np.flatnonzero(np.abs(nodes - y) <= 1e-15 * max(1.0, abs(y)))
    if hit.size:
        out = np.zeros(n)
        out[hit[0]] = 1.0
        return out
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    bw = 1.0 / np.prod(diff, axis=1)
    t = bw / (y - nodes)
    return t / t.sum()


def interpolate(grid: CollocationGrid, values: npt.ArrayLike, y: npt.ArrayLike) -> FloatArray:
    """Evaluate the collocation interpolant at ``y`` (no extrapolation)."""
    values = _check_values(grid, values)
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != grid.M:
        raise ValueError(f"query has {y.size} coordinates, grid has {grid.M}")
    for ym, (a, b) in zip(y, grid.intervals):
        if ym < a - 1e-14 or ym > b + 1e-14:
            raise ValueError(f"query point {y.tolist()} outside the parameter domain")
    tail = values.shape[1:]
    total = np.zeros(tail)
    for comp in grid.components:
        local = values[comp.point_index].reshape(comp.shape + tail)
        for m, rule in enumerate(comp.rules):
            local = np.tensordot(lagrange_basis(rule.nodes, y[m]), local, axes=(0, 0))
        total = total + comp.coefficient * local
    return total
