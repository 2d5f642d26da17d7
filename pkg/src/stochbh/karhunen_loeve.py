"""Truncated Karhunen-Loeve expansion of a random B-H curve.

The covariance operator is discretized by Galerkin projection onto a cubic
B-spline space with C^1 continuity. Sampled trajectories are B-splines whose
coefficients are affine in the random vector ``y``; monotonicity of every
trajectory follows from monotone coefficients, which bounds the admissible
perturbation amplitude ``delta``.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable

import numpy as np
import numpy.typing as npt
import scipy.linalg
from scipy.interpolate import BSpline, CubicSpline, PPoly

from .material_law import MeasuredBHTable, MonotoneCubicSpline, SplineLaw

FloatArray = npt.NDArray[np.float64]

SQRT3 = math.sqrt(3.0)
EIG_FLOOR = 1e-10


@dataclasses.dataclass(frozen=True)
class BSplineSpace:
    """Splines of ``degree`` on ``n_spans`` uniform spans of ``[a, b]``.

    Interior breakpoints carry multiplicity ``degree - continuity`` so the
    space is exactly C^continuity.
    """

    a: float
    b: float
    n_spans: int
    degree: int = 3
    continuity: int = 1

    def __post_init__(self) -> None:
        if not self.b > self.a:
            raise ValueError("empty interval")
        if self.n_spans < 1 or not 0 <= self.continuity < self.degree:
            raise ValueError("invalid spline space")

    @classmethod
    def with_dimension(cls, a: float, b: float, dim: int, degree: int = 3, continuity: int = 1):
        mult = degree - continuity
        spans, rem = divmod(dim - degree - 1, mult)
        if rem or spans < 0:
            raise ValueError(f"no uniform C^{continuity} degree-{degree} space of dimension {dim}")
        return cls(a, b, spans + 1, degree, continuity)

    @property
    def breakpoints(self) -> FloatArray:
        return np.linspace(self.a, self.b, self.n_spans + 1)

    @property
    def knots(self) -> FloatArray:
        x = self.breakpoints
        mult = self.degree - self.continuity
        return np.concatenate(
            [np.full(self.degree + 1, x[0]), np.repeat(x[1:-1], mult), np.full(self.degree + 1, x[-1])]
        )

    @property
    def dim(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def h(self) -> float:
        return (self.b - self.a) / self.n_spans

    def basis(self, s: npt.ArrayLike, nu: int = 0) -> FloatArray:
        """Values (or ``nu``-th derivatives) of all basis functions, shape ``(len(s), dim)``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if np.any(s < self.a - 1e-14) or np.any(s > self.b + 1e-14):
            raise ValueError("spline basis evaluated outside its interval")
        s = np.clip(s, self.a, self.b)
        return BSpline(self.knots, np.eye(self.dim), self.degree, extrapolate=False)(s, nu)

    def quadrature(self, points_per_span: int | None = None) -> tuple[FloatArray, FloatArray]:
        """Composite Gauss-Legendre nodes and weights over all spans."""
        n = points_per_span or self.degree + 1
        t, w = np.polynomial.legendre.leggauss(n)
        x = self.breakpoints
        mid = 0.5 * (x[:-1] + x[1:])
        half = 0.5 * np.diff(x)
        nodes = (mid[:, None] + half[:, None] * t[None, :]).ravel()
        weights = (half[:, None] * w[None, :]).ravel()
        return nodes, weights

    def gram(self) -> FloatArray:
        s, w = self.quadrature()
        B = self.basis(s)
        G = B.T @ (w[:, None] * B)
        return 0.5 * (G + G.T)

    def project(self, func: Callable[[FloatArray], FloatArray]) -> FloatArray:
        """Coefficients of the L2 projection of ``func`` onto the space."""
        s, w = self.quadrature(self.degree + 3)
        B = self.basis(s)
        rhs = B.T @ (w * func(s))
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(self.gram()), rhs)

    def spline(self, coeffs: npt.ArrayLike) -> BSpline:
        return BSpline(self.knots, np.asarray(coeffs, dtype=float), self.degree, extrapolate=False)

    def to_ppoly(self, coeffs: npt.ArrayLike) -> PPoly:
        """Piecewise polynomial form without the zero-length intervals of repeated knots."""
        pp = PPoly.from_spline(self.spline(coeffs), extrapolate=False)
        keep = np.diff(pp.x) > 0
        x = np.r_[pp.x[:-1][keep], pp.x[-1]]
        return PPoly(pp.c[:, keep], x, extrapolate=False)


@dataclasses.dataclass(frozen=True)
class CovarianceKernel:
    """Covariance ``sigma(s) sigma(t) exp(-((s - t) / L)^2)``.

    ``variance`` is the pointwise variance ``sigma^2`` (``None`` means 1).
    ``kind="constant"`` gives ``cov = scale`` everywhere and exists mainly as
    an analytic test case. The perturbation amplitude is carried by the
    expansion, not by the kernel.
    """

    length: float = 0.5
    variance: Callable[[FloatArray], FloatArray] | None = None
    kind: str = "gaussian"
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian", "constant"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "gaussian" and not self.length > 0:
            raise ValueError("correlation length must be positive")

    def sigma(self, s: FloatArray) -> FloatArray:
        if self.variance is None:
            return np.ones_like(s)
        return np.sqrt(np.maximum(self.variance(s), 0.0))

    def __call__(self, s: npt.ArrayLike, t: npt.ArrayLike) -> FloatArray:
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full(np.broadcast(s, t).shape, self.scale)
        return self.scale * self.sigma(s) * self.sigma(t) * np.exp(-(((s - t) / self.length) ** 2))

    def matrix(self, s: FloatArray) -> FloatArray:
        return self(s[:, None], s[None, :])


def assemble_eigensystem(
    kernel: CovarianceKernel, space: BSplineSpace, points_per_span: int | None = None
) -> tuple[FloatArray, FloatArray]:
    """Galerkin matrices ``K_ij = <B_i, C B_j>`` and Gram ``G_ij = <B_i, B_j>``."""
    if space.dim < 2:
        raise ValueError("spline space needs at least two basis functions")
    s, w = space.quadrature(points_per_span)
    B = space.basis(s)
    WB = w[:, None] * B
    K = WB.T @ kernel.matrix(s) @ WB
    return 0.5 * (K + K.T), space.gram()


def solve_kl_eigenpairs(
    K: FloatArray, G: FloatArray, count: int | None = None
) -> tuple[FloatArray, FloatArray]:
    """Eigenpairs of ``K b = lambda G b`` in descending order.

    Eigenvectors (columns) are G-orthonormal. Tiny negative eigenvalues are
    set to zero; clearly negative ones mean the kernel is not PSD.
    """
    try:
        L = scipy.linalg.cholesky(G, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("Gram matrix is not positive definite; assembly is broken") from exc
    A = scipy.linalg.solve_triangular(L, K, lower=True)
    A = scipy.linalg.solve_triangular(L, A.T, lower=True)
    lam, V = np.linalg.eigh(0.5 * (A + A.T))
    order = np.argsort(lam)[::-1]
    lam, V = lam[order], V[:, order]
    top = max(lam[0], 0.0)
    if lam[-1] < -EIG_FLOOR * top:
        raise ValueError(f"covariance is not positive semidefinite (eigenvalue {lam[-1]!r})")
    lam = np.where(lam < 0, 0.0, lam)
    b = scipy.linalg.solve_triangular(L.T, V, lower=False)
    # deterministic sign: positive mean, else positive largest coefficient
    mean = G.sum(axis=0) @ b
    big = b[np.argmax(np.abs(b), axis=0), np.arange(b.shape[1])]
    sign = np.where(np.abs(mean) > 1e-12 * np.abs(b).max(axis=0), np.sign(mean), np.sign(big))
    b = b * np.where(sign == 0, 1.0, sign)
    if count is not None:
        lam, b = lam[:count], b[:, :count]
    return lam, b


def truncate_by_information(
    eigenvalues: npt.ArrayLike, threshold: float = 0.95, reference: int | None = None
) -> int:
    """Smallest M whose cumulative eigenvalue fraction exceeds ``threshold``.

    The fraction is taken relative to the first ``reference`` eigenvalues
    (default ``min(len, 30)``).
    """
    lam = np.asarray(eigenvalues, dtype=float)
    ref = min(lam.size, 30) if reference is None else reference
    total = lam[:ref].sum()
    if total <= 0:
        raise ValueError("eigenvalue spectrum is identically zero")
    ratio = np.cumsum(lam[:ref]) / total
    hits = np.flatnonzero(ratio > threshold)
    return int(hits[0]) + 1 if hits.size else ref


def information_content(eigenvalues: npt.ArrayLike, reference: int | None = None) -> FloatArray:
    lam = np.asarray(eigenvalues, dtype=float)
    ref = min(lam.size, 30) if reference is None else reference
    return np.cumsum(lam) / lam[:ref].sum()


def truncation_l2_error(eigenvalues: npt.ArrayLike, M: int) -> float:
    """Squared L2 truncation error: the sum of the discarded eigenvalues."""
    return float(np.sum(np.asarray(eigenvalues, dtype=float)[M:]))


def delta_bound(
    mean_coeffs: npt.ArrayLike, eigenvalues: npt.ArrayLike, eigenvectors: npt.ArrayLike, M: int
) -> float:
    """Amplitude bound from the combined mode ``eta_M = sum_n sqrt(lambda_n) b_n``.

    Keeps the coefficients of ``E + delta y eta_M`` nondecreasing for every
    scalar ``|y| <= sqrt3``. For ``M > 1`` independent coordinates can move
    the modes against each other, so this is only sufficient when ``M = 1``;
    :func:`delta_bound_worst_case` covers the whole parameter box.
    Returns ``inf`` when the perturbation has constant coefficients.
    """
    E = np.asarray(mean_coeffs, dtype=float)
    lam = np.asarray(eigenvalues, dtype=float)[:M]
    b = _as_columns(eigenvectors)
    eta = b[:, :M] @ np.sqrt(lam)
    return delta_bound_from_eta(E, eta)


def delta_bound_worst_case(
    mean_coeffs: npt.ArrayLike, eigenvalues: npt.ArrayLike, eigenvectors: npt.ArrayLike, M: int
) -> float:
    """Largest amplitude keeping coefficients nondecreasing for all ``y`` in the box.

    Uses ``sqrt3 sum_n sqrt(lambda_n) |b_{n,i} - b_{n,i-1}|`` as the worst
    coefficient decrease.
    """
    E = np.asarray(mean_coeffs, dtype=float)
    lam = np.asarray(eigenvalues, dtype=float)[:M]
    b = _as_columns(eigenvectors)[:, :M]
    spread = np.abs(np.diff(b, axis=0)) @ np.sqrt(lam)
    return _ratio_bound(E, spread, float(np.abs(b).max()) if b.size else 0.0)


def _as_columns(vectors: npt.ArrayLike) -> FloatArray:
    b = np.asarray(vectors, dtype=float)
    return b[:, None] if b.ndim == 1 else b


def delta_bound_from_eta(mean_coeffs: npt.ArrayLike, eta: npt.ArrayLike) -> float:
    eta = np.asarray(eta, dtype=float)
    return _ratio_bound(mean_coeffs, np.abs(np.diff(eta)), float(np.abs(eta).max()) if eta.size else 0.0)


def _ratio_bound(mean_coeffs: npt.ArrayLike, spread: FloatArray, scale: float) -> float:
    E = np.asarray(mean_coeffs, dtype=float)
    dE = np.diff(E)
    if np.any(dE < -1e-12 * np.abs(E).max()):
        raise ValueError("mean spline coefficients are not nondecreasing")
    mask = spread > 1e-14 * max(scale, 1e-300)
    if not mask.any():
        return math.inf
    return float(np.min(np.maximum(dE[mask], 0.0) / (SQRT3 * spread[mask])))


def prolong_to_origin(pp: PPoly, power: int = 2) -> PPoly:
    """C^1 continuation of ``pp`` to ``[0, x0]`` with value 0 at the origin.

    The added piece is ``a s + b s^(power + 1)`` matching value ``v`` and
    slope ``m`` at ``x0``. Its slope lies between ``a = S - (m - S) / power``
    and ``m`` with ``S = v / x0``, so it is increasing whenever
    ``m <= (power + 1) S`` and ``m >= 0``. For fixed ``power`` the piece is
    linear in ``pp``, so perturbation curves prolong consistently.
    """
    x0 = float(pp.x[0])
    if x0 <= 0:
        return pp
    if power < 1:
        raise ValueError("power must be at least 1")
    v = float(pp(x0))
    m = float(pp(x0, 1))
    secant = v / x0
    lead = (m - secant) / (power * x0**power)
    degree = max(power + 1, pp.c.shape[0] - 1)
    head = np.zeros(degree + 1)
    head[degree - power - 1] = lead
    head[degree - 1] = secant - (m - secant) / power
    body = np.vstack([np.zeros((degree + 1 - pp.c.shape[0], pp.c.shape[1])), pp.c])
    c = np.concatenate([head[:, None], body], axis=1)
    return PPoly(c, np.r_[0.0, pp.x], extrapolate=False)


@dataclasses.dataclass(frozen=True)
class KLExpansion:
    """Mean spline plus ``M`` scaled eigenmodes; ``y`` ranges over ``[-sqrt3, sqrt3]^M``."""

    space: BSplineSpace
    mean: FloatArray
    eigenvalues: FloatArray
    eigenvectors: FloatArray
    M: int
    delta: float

    def __post_init__(self) -> None:
        if not 1 <= self.M <= self.eigenvectors.shape[1]:
            raise ValueError(f"truncation order {self.M} out of range")

    @property
    def gamma(self) -> list[tuple[float, float]]:
        return [(-SQRT3, SQRT3)] * self.M

    def eta(self, M: int | None = None) -> FloatArray:
        M = self.M if M is None else M
        return self.eigenvectors[:, :M] @ np.sqrt(self.eigenvalues[:M])

    def delta_max(self, M: int | None = None) -> float:
        """Bound from the combined mode; see :func:`delta_bound`."""
        return delta_bound_from_eta(self.mean, self.eta(M))

    def delta_max_worst_case(self, M: int | None = None) -> float:
        M = self.M if M is None else M
        return delta_bound_worst_case(self.mean, self.eigenvalues, self.eigenvectors, M)

    def prolongation_power(self) -> int:
        """Power of the origin piece, large enough for every ``y`` in the box.

        Chosen so the slope of the origin piece stays above half the secant
        slope ``v / x0`` at the worst corner; it depends only on the expansion,
        which keeps sampled laws and mode curves consistent.
        """
        x0 = self.space.a
        basis = self.space.basis(np.array([x0]))[0]
        dbasis = self.space.basis(np.array([x0]), 1)[0]
        modes = self.eigenvectors[:, : self.M] * np.sqrt(self.eigenvalues[: self.M])
        reach = self.delta * SQRT3
        v_min = basis @ self.mean - reach * np.abs(basis @ modes).sum()
        m_max = dbasis @ self.mean + reach * np.abs(dbasis @ modes).sum()
        if v_min <= 0:
            return 2
        ratio = m_max * x0 / v_min
        return max(2, math.ceil(2 * (ratio - 1)))

    def with_truncation(self, M: int) -> KLExpansion:
        return dataclasses.replace(self, M=M)

    def with_delta(self, delta: float) -> KLExpansion:
        return dataclasses.replace(self, delta=delta)

    def coefficients(self, y: npt.ArrayLike) -> FloatArray:
        """Spline coefficients for one ``y`` (shape ``(M,)``) or many (``(k, M)``)."""
        y = np.asarray(y, dtype=float)
        modes = self.eigenvectors[:, : self.M] * np.sqrt(self.eigenvalues[: self.M])
        if y.shape[-1] != self.M:
            raise ValueError(f"expected {self.M} random coordinates, got {y.shape[-1]}")
        return self.mean + self.delta * (y @ modes.T)

    def sample_law(self, y: npt.ArrayLike) -> SplineLaw:
        """Material law of one trajectory; raises if it is not monotone."""
        y = np.asarray(y, dtype=float)
        if np.any(np.abs(y) > SQRT3 * (1 + 1e-12)):
            raise ValueError("random coordinates outside [-sqrt(3), sqrt(3)]")
        pp = self.space.to_ppoly(self.coefficients(y))
        return SplineLaw(prolong_to_origin(pp, self.prolongation_power()))

    def mode_curve(self, m: int) -> SplineLaw:
        """Derivative of the sampled law with respect to ``y_m`` (zero-based)."""
        coeffs = self.delta * math.sqrt(self.eigenvalues[m]) * self.eigenvectors[:, m]
        return SplineLaw(prolong_to_origin(self.space.to_ppoly(coeffs), self.prolongation_power()), check=False)

    def mean_law(self) -> SplineLaw:
        return SplineLaw(prolong_to_origin(self.space.to_ppoly(self.mean), self.prolongation_power()))

    @classmethod
    def from_table(
        cls,
        table: MeasuredBHTable,
        length: float = 0.5,
        dim: int = 60,
        M: int | None = None,
        threshold: float = 0.95,
        delta: float | None = None,
    ) -> KLExpansion:
        """Expansion from measured data with a variance-scaled Gaussian kernel.

        With a single sample column the variance is unknown and the kernel is
        used unscaled. ``delta`` defaults to the worst-case monotonicity bound.
        """
        kl_space = BSplineSpace.with_dimension(table.points[0], table.points[-1], dim)
        mean_spline = MonotoneCubicSpline.fit(table.points, table.sample_mean())
        variance = None
        if table.n_samples > 1:
            var_spline = CubicSpline(table.points, table.sample_variance())
            variance = lambda s: np.maximum(var_spline(s), 0.0)  # noqa: E731
        kernel = CovarianceKernel(length=length, variance=variance)
        return cls.from_kernel(kernel, kl_space, mean_spline, M=M, threshold=threshold, delta=delta)

    @classmethod
    def from_kernel(
        cls,
        kernel: CovarianceKernel,
        space: BSplineSpace,
        mean: Callable[[FloatArray], FloatArray],
        M: int | None = None,
        threshold: float = 0.95,
        delta: float | None = None,
    ) -> KLExpansion:
        K, G = assemble_eigensystem(kernel, space)
        lam, b = solve_kl_eigenpairs(K, G)
        mean_coeffs = space.project(mean)
        if M is None:
            M = truncate_by_information(lam, threshold)
        if delta is None:
            delta = delta_bound_worst_case(mean_coeffs, lam, b, M)
            if not math.isfinite(delta):
                raise ValueError("perturbation is unconstrained; give delta explicitly")
        return cls(space, mean_coeffs, lam, b, M, float(delta))
