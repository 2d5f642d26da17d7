"""Nonlinear magnetic material laws.

A material law is the map ``f: |B| -> |H|`` (tesla to ampere/meter). The
PDE coefficient is the reluctivity ``nu(s) = f(s) / s``. All quantities are
handled as plain floats internally; the unit conventions above are only
documentation.

Three kinds are provided:

* :class:`SplineLaw` -- a C^1 piecewise cubic ``f`` (monotone Hermite
  interpolant of measured data, or a sampled Karhunen-Loeve trajectory),
  continued linearly beyond the data range.
* :class:`RationalLaw` -- ``nu(s) = d + c s^(2b) / (a^b + s^(2b))``.
* :class:`PowerLaw` -- ``nu(s) = s^(p-2)``, the p-Laplacian.
"""

from __future__ import annotations

import dataclasses
import functools
import math

import numpy as np
import numpy.typing as npt
from scipy.interpolate import CubicHermiteSpline, PPoly

ArrayLike = npt.ArrayLike
FloatArray = npt.NDArray[np.float64]

ADMISSION_TOL = 1e-10


class NonMonotoneError(ValueError):
    """Raised when data or a law violates the monotonicity constraint."""


class CapabilityError(RuntimeError):
    """Raised when a law is not smooth enough for a requested derivative."""


@dataclasses.dataclass(frozen=True)
class MeasuredBHTable:
    """Measured B-H data: R field magnitudes and Q sample curves.

    ``points`` holds the flux density magnitudes, ``samples[i, j]`` the field
    magnitude of sample ``j`` at ``points[i]``.
    """

    points: FloatArray
    samples: FloatArray

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=float)
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "samples", samples)
        if points.ndim != 1 or points.size < 2:
            raise ValueError("need at least two measurement points")
        if samples.shape[0] != points.size:
            raise ValueError(f"samples have {samples.shape[0]} rows, expected {points.size}")
        if not np.all(np.isfinite(points)) or not np.all(np.isfinite(samples)):
            raise ValueError("table contains non-finite entries")
        bad = np.flatnonzero(np.diff(points) <= 0)
        if bad.size:
            i = int(bad[0])
            raise NonMonotoneError(f"points not strictly increasing at rows ({i}, {i + 1})")
        for j in range(samples.shape[1]):
            check_monotone(points, samples[:, j], column=j)

    @property
    def n_points(self) -> int:
        return self.points.size

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def sample_mean(self) -> FloatArray:
        return self.samples.mean(axis=1)

    def sample_variance(self) -> FloatArray:
        """Per-point unbiased sample variance (zeros when Q == 1)."""
        if self.n_samples < 2:
            return np.zeros(self.n_points)
        return self.samples.var(axis=1, ddof=1)


def check_monotone(x: ArrayLike, y: ArrayLike, column: int | None = None) -> None:
    """Raise :class:`NonMonotoneError` naming the first decreasing index pair."""
    y = np.asarray(y, dtype=float)
    bad = np.flatnonzero(np.diff(y) < 0)
    if bad.size:
        i = int(bad[0])
        where = "" if column is None else f" in column {column}"
        raise NonMonotoneError(
            f"data decreases{where} between rows ({i}, {i + 1}): {float(y[i])!r} > {float(y[i + 1])!r}"
        )


def fritsch_carlson_slopes(x: ArrayLike, y: ArrayLike) -> FloatArray:
    """Hermite slopes for a monotone C^1 cubic interpolant of nondecreasing data.

    Slopes start from three-point (parabolic) differences, are zeroed where
    they disagree in sign with an adjacent secant, and are then scaled into
    the circle ``alpha^2 + beta^2 <= 9`` interval by interval.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    h = np.diff(x)
    d = np.diff(y) / h
    n = x.size
    m = np.empty(n)
    if n == 2:
        m[:] = d[0]
        return m

    m[1:-1] = (h[1:] * d[:-1] + h[:-1] * d[1:]) / (h[:-1] + h[1:])
    m[0] = ((2 * h[0] + h[1]) * d[0] - h[0] * d[1]) / (h[0] + h[1])
    m[-1] = ((2 * h[-1] + h[-2]) * d[-1] - h[-1] * d[-2]) / (h[-1] + h[-2])

    # local extrema and sign disagreement
    interior = np.arange(1, n - 1)
    flat = d[:-1] * d[1:] <= 0
    m[interior[flat]] = 0.0
    if m[0] * d[0] <= 0:
        m[0] = 0.0
    if m[-1] * d[-1] <= 0:
        m[-1] = 0.0

    for k in range(n - 1):
        if d[k] == 0.0:
            m[k] = m[k + 1] = 0.0
            continue
        with np.errstate(over="ignore"):
            radius = math.hypot(m[k] / d[k], m[k + 1] / d[k])
        if radius > 3.0:
            tau = 3.0 / radius
            m[k] *= tau
            m[k + 1] *= tau
    return m


@dataclasses.dataclass(frozen=True)
class MonotoneCubicSpline:
    """C^1 cubic Hermite interpolant with Fritsch-Carlson limited slopes."""

    knots: FloatArray
    values: FloatArray
    derivatives: FloatArray

    @classmethod
    def fit(cls, x: ArrayLike, y: ArrayLike) -> MonotoneCubicSpline:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if np.any(np.diff(x) <= 0):
            raise ValueError("knots must be strictly increasing")
        check_monotone(x, y)
        return cls(x, y, fritsch_carlson_slopes(x, y))

    def ppoly(self) -> PPoly:
        return CubicHermiteSpline(self.knots, self.values, self.derivatives, extrapolate=False)

    def __call__(self, s: ArrayLike, nu: int = 0) -> FloatArray:
        return self.ppoly()(s, nu)


def monotone_interpolate(table: MeasuredBHTable, column: int) -> MonotoneCubicSpline:
    """Monotone C^1 interpolant of one sample column of ``table``."""
    return MonotoneCubicSpline.fit(table.points, table.samples[:, column])


def cubic_derivative_range(pp: PPoly) -> tuple[float, float]:
    """Exact min and max of the derivative of a piecewise cubic."""
    c = pp.c
    if c.shape[0] < 4:
        c = np.vstack([np.zeros((4 - c.shape[0], c.shape[1])), c])
    h = np.diff(pp.x)
    c3, c2, c1 = c[0], c[1], c[2]
    cand = [c1, 3 * c3 * h**2 + 2 * c2 * h + c1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(c3 != 0, -c2 / (3 * c3), -1.0)
    inside = (t > 0) & (t < h)
    cand.append(np.where(inside, 3 * c3 * t**2 + 2 * c2 * t + c1, c1))
    vals = np.concatenate(cand)
    return float(vals.min()), float(vals.max())


def ppoly_derivative_range(pp: PPoly) -> tuple[float, float]:
    """Exact derivative range of a piecewise polynomial of any degree.

    Cubic pieces use the closed form; higher-degree pieces go through the
    roots of their second derivative.
    """
    c = np.asarray(pp.c, dtype=float)
    if c.shape[0] <= 4:
        return cubic_derivative_range(pp)
    high = np.any(c[:-4] != 0, axis=0)
    lo, hi = np.inf, -np.inf
    if not high.all():
        # only coefficients and interval widths matter for the range
        widths = np.diff(pp.x)[~high]
        cubic = PPoly(c[-4:, ~high], np.r_[0.0, np.cumsum(widths)], extrapolate=False)
        lo, hi = cubic_derivative_range(cubic)
    for j in np.flatnonzero(high):
        h = pp.x[j + 1] - pp.x[j]
        d1 = np.polyder(c[:, j])
        d2 = np.polyder(d1)
        roots = np.roots(np.trim_zeros(d2, "f")) if np.any(d2 != 0) else np.array([])
        roots = roots[np.isreal(roots)].real
        t = np.r_[0.0, h, roots[(roots > 0) & (roots < h)]]
        vals = np.polyval(d1, t)
        lo, hi = min(lo, float(vals.min())), max(hi, float(vals.max()))
    return float(lo), float(hi)


def _as_nonneg(s: ArrayLike) -> FloatArray:
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("material law evaluated at negative field magnitude")
    return s


class MaterialLaw:
    """Common interface: ``f``, its slope, ``nu`` and derivatives of ``nu``.

    Subclasses implement :meth:`f`, :meth:`df` and :meth:`nu_derivatives`.
    ``alpha`` and ``beta`` bound the slope of ``f`` from below and above.
    """

    kind: str = "abstract"
    alpha: float
    beta: float
    max_nu_order: int = 3

    def f(self, s: ArrayLike) -> FloatArray:
        raise NotImplementedError

    def df(self, s: ArrayLike) -> FloatArray:
        raise NotImplementedError

    def nu_derivatives(self, s: ArrayLike, order: int) -> list[FloatArray]:
        """Return ``[nu, nu', ..., nu^(order)]`` evaluated at ``s``."""
        raise NotImplementedError

    def nu(self, s: ArrayLike) -> FloatArray:
        return self.nu_derivatives(s, 0)[0]

    def dnu(self, s: ArrayLike) -> FloatArray:
        return self.nu_derivatives(s, 1)[1]

    def _require_order(self, order: int) -> None:
        if order > self.max_nu_order:
            raise CapabilityError(
                f"{self.kind} law provides nu derivatives up to order {self.max_nu_order}, "
                f"{order} requested"
            )


class SplineLaw(MaterialLaw):
    """Piecewise cubic law on ``[0, s_end]`` with linear continuation beyond.

    ``curve`` must be a C^1 :class:`~scipy.interpolate.PPoly` (cubic, except
    possibly on the first piece) whose first breakpoint is 0 and which
    vanishes there. Only ``nu`` and ``nu'`` are available since ``f`` is
    merely C^1.
    """

    kind = "spline"
    max_nu_order = 1

    def __init__(self, curve: PPoly, *, check: bool = True):
        if curve.x[0] != 0.0:
            raise ValueError("spline law must start at s = 0")
        c = np.asarray(curve.c, dtype=float)
        if c.shape[0] < 4:
            c = np.vstack([np.zeros((4 - c.shape[0], c.shape[1])), c])
        self.curve = PPoly(c, np.asarray(curve.x, dtype=float), extrapolate=False)
        self._dcurve = self.curve.derivative()
        if abs(c[-1, 0]) > 1e-12 * max(1.0, np.abs(c).max()):
            raise ValueError(f"spline law must satisfy f(0) = 0, got {c[-1, 0]!r}")
        self.s_end = float(self.curve.x[-1])
        self.f_end = float(self.curve(self.s_end))
        lo, hi = ppoly_derivative_range(self.curve)
        self.end_slope = float(np.clip(self._dcurve(self.s_end), lo, hi))
        self.alpha = lo
        self.beta = hi
        if check and self.alpha < -ADMISSION_TOL * max(1.0, abs(self.beta)):
            raise NonMonotoneError(f"spline law has negative slope {self.alpha!r}")

    @classmethod
    def from_spline(cls, spline: MonotoneCubicSpline) -> SplineLaw:
        """Wrap a monotone interpolant, prepending the origin knot if needed."""
        x, y = spline.knots, spline.values
        if x[0] > 0:
            return cls.from_points(np.r_[0.0, x], np.r_[0.0, y])
        return cls(spline.ppoly())

    @classmethod
    def from_points(cls, x: ArrayLike, y: ArrayLike) -> SplineLaw:
        """Monotone interpolant of ``(x, y)``; the origin is prepended if absent."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x[0] > 0:
            x, y = np.r_[0.0, x], np.r_[0.0, y]
        return cls(MonotoneCubicSpline.fit(x, y).ppoly())

    @classmethod
    def from_table(cls, table: MeasuredBHTable, column: int = 0) -> SplineLaw:
        return cls.from_points(table.points, table.samples[:, column])

    def f(self, s: ArrayLike) -> FloatArray:
        s = _as_nonneg(s)
        inside = s <= self.s_end
        out = np.empty_like(s)
        out[inside] = self.curve(s[inside])
        out[~inside] = self.f_end + self.end_slope * (s[~inside] - self.s_end)
        return out

    def df(self, s: ArrayLike) -> FloatArray:
        s = _as_nonneg(s)
        inside = s <= self.s_end
        out = np.full_like(s, self.end_slope)
        out[inside] = self._dcurve(s[inside])
        return out

    def nu_derivatives(self, s: ArrayLike, order: int) -> list[FloatArray]:
        self._require_order(order)
        s = _as_nonneg(s)
        x1 = self.curve.x[1]
        first = s <= x1
        nu = np.empty_like(s)
        dnu = np.empty_like(s)
        # the first piece starts at the origin with zero constant term, so nu
        # is a polynomial there and the division by s is avoided
        nu_poly = self.curve.c[:-1, 0]
        sf = s[first]
        nu[first] = np.polyval(nu_poly, sf)
        dnu[first] = np.polyval(np.polyder(nu_poly), sf)
        rest = ~first
        sr = s[rest]
        fr = self.f(sr)
        nu[rest] = fr / sr
        dnu[rest] = (self.df(sr) * sr - fr) / sr**2
        return [nu, dnu][: order + 1]


@dataclasses.dataclass(frozen=True)
class RationalLaw(MaterialLaw):
    """``nu(s) = d + c s^(2b) / (a^b + s^(2b))``.

    Defaults are the unperturbed parameters of the L-shape experiment.
    """

    a: float = 1.78
    b: float = 14.0
    c: float = 6000.0
    d: float = 245.0

    kind = "rational"

    def __post_init__(self) -> None:
        if min(self.a, self.b, self.d) <= 0 or self.c < 0:
            raise ValueError(f"invalid rational law parameters {self}")

    @property
    def alpha(self) -> float:
        # nu >= d and nu' >= 0, so f' = nu + s nu' >= d, attained at s = 0
        return self.d

    @functools.cached_property
    def beta(self) -> float:
        return _rational_slope_max(self.a, self.b, self.c, self.d)

    def _ratio(self, s: FloatArray) -> tuple[FloatArray, FloatArray]:
        # r = x / (1 + x), q = 1 / (1 + x) with x = (s^2 / a)^b, overflow-safe
        with np.errstate(divide="ignore", over="ignore"):
            logx = self.b * (2 * np.log(s) - math.log(self.a))
        logx = np.clip(logx, -745.0, 700.0)
        x = np.exp(logx)
        q = 1.0 / (1.0 + x)
        r = x * q
        r = np.where(s == 0, 0.0, r)
        q = np.where(s == 0, 1.0, q)
        return r, q

    def nu_derivatives(self, s: ArrayLike, order: int) -> list[FloatArray]:
        self._require_order(order)
        s = _as_nonneg(s)
        r, q = self._ratio(s)
        out = [self.d + self.c * r]
        if order == 0:
            return out
        m = 2 * self.b
        pos = s > 0
        ss = np.where(pos, s, 1.0)
        rq = r * q
        d1 = self.c * m * rq / ss
        out.append(np.where(pos, d1, 0.0))
        if order >= 2:
            d2 = self.c * (-2 * m * m * r * rq + m * (m - 1) * rq) / ss**2
            out.append(np.where(pos, d2, 0.0))
        if order >= 3:
            d3 = self.c * (
                6 * m**3 * r * r * rq - 6 * m * m * (m - 1) * r * rq + m * (m - 1) * (m - 2) * rq
            ) / ss**3
            out.append(np.where(pos, d3, 0.0))
        return out

    def f(self, s: ArrayLike) -> FloatArray:
        s = _as_nonneg(s)
        return s * self.nu(s)

    def df(self, s: ArrayLike) -> FloatArray:
        s = _as_nonneg(s)
        nu, dnu = self.nu_derivatives(s, 1)
        return nu + s * dnu


def _rational_slope_max(a: float, b: float, c: float, d: float) -> float:
    # f' = d + c phi(x), phi(x) = x/(1+x) + 2b x/(1+x)^2 with x = (s^2/a)^b;
    # phi peaks at x = (2b+1)/(2b-1) when b > 1/2 and tends to 1 otherwise
    peak = 1.0
    if b > 0.5:
        x = (2 * b + 1) / (2 * b - 1)
        peak = max(1.0, x / (1 + x) + 2 * b * x / (1 + x) ** 2)
    return d + c * peak


@dataclasses.dataclass(frozen=True)
class PowerLaw(MaterialLaw):
    """``nu(s) = s^(p - 2)``; not uniformly monotone for p != 2."""

    p: float = 4.0

    kind = "power"
    alpha = 0.0
    beta = math.inf

    def __post_init__(self) -> None:
        if self.p <= 1:
            raise ValueError(f"power law needs p > 1, got {self.p}")

    def nu_derivatives(self, s: ArrayLike, order: int) -> list[FloatArray]:
        self._require_order(order)
        s = _as_nonneg(s)
        e = self.p - 2.0
        out = []
        coef = 1.0
        with np.errstate(divide="ignore", invalid="ignore"):
            for k in range(order + 1):
                if coef == 0.0:
                    out.append(np.zeros_like(s))
                else:
                    out.append(coef * np.power(s, e - k))
                coef *= e - k
        return out

    def f(self, s: ArrayLike) -> FloatArray:
        s = _as_nonneg(s)
        return np.power(s, self.p - 1.0)

    def df(self, s: ArrayLike) -> FloatArray:
        s = _as_nonneg(s)
        return (self.p - 1.0) * np.power(s, self.p - 2.0)


def eval_f(law: MaterialLaw, s: float) -> float:
    if s < 0:
        raise ValueError("material law evaluated at negative field magnitude")
    return float(law.f(np.array([s]))[0])


def eval_nu(law: MaterialLaw, s: float) -> float:
    if s < 0:
        raise ValueError("material law evaluated at negative field magnitude")
    return float(law.nu(np.array([s]))[0])


def diff_reluctivity(law: MaterialLaw, r: ArrayLike) -> FloatArray:
    """Differential reluctivity tensor ``nu I + nu'/|r| r r^T`` (``nu(0) I`` at 0)."""
    r = np.asarray(r, dtype=float)
    return diff_reluctivity_batch(law, r[None, :])[0]


def diff_reluctivity_batch(law: MaterialLaw, r: FloatArray, floor: float = 0.0) -> FloatArray:
    """Vectorized :func:`diff_reluctivity` for an ``(n, d)`` array of vectors.

    ``floor`` clamps ``|r|`` from below when evaluating ``nu`` and ``nu'``.
    """
    r = np.asarray(r, dtype=float)
    n, dim = r.shape
    norm = np.linalg.norm(r, axis=1)
    s = np.maximum(norm, floor)
    nu, dnu = law.nu_derivatives(s, 1)
    out = nu[:, None, None] * np.eye(dim)[None]
    pos = norm > 0
    g = np.zeros(n)
    g[pos] = dnu[pos] / norm[pos]
    out += g[:, None, None] * r[:, :, None] * r[:, None, :]
    return out


def flux(law: MaterialLaw, r: ArrayLike) -> FloatArray:
    """``h(r) = nu(|r|) r`` for a single vector or an ``(n, d)`` array."""
    r = np.asarray(r, dtype=float)
    norm = np.linalg.norm(r, axis=-1)
    return law.nu(np.atleast_1d(norm)).reshape(norm.shape)[..., None] * r


def flux_jacobians(law: MaterialLaw, r: ArrayLike, *directions: ArrayLike) -> FloatArray:
    """k-th derivative of ``h(r) = nu(|r|) r`` applied to ``k = len(directions)`` vectors."""
    k = len(directions)
    if k not in (1, 2, 3):
        raise ValueError("between one and three directions are supported")
    law._require_order(k)
    r = np.asarray(r, dtype=float)
    s1, s2, s3 = (list(map(np.asarray, directions)) + [None, None])[:3]
    rho = float(np.linalg.norm(r))
    nus = [float(v[0]) for v in law.nu_derivatives(np.array([rho]), k)]

    if rho == 0.0:
        if k == 1:
            return nus[0] * s1
        if nus[1] != 0.0:
            raise CapabilityError("flux is not twice differentiable at r = 0 when nu'(0) != 0")
        if k == 2:
            return np.zeros_like(r)
        return nus[2] * (np.dot(s1, s2) * s3 + np.dot(s1, s3) * s2 + np.dot(s2, s3) * s1)

    g1 = nus[1] / rho
    if k == 1:
        return g1 * r * np.dot(r, s1) + nus[0] * s1
    g2 = nus[2] / rho**2 - nus[1] / rho**3
    rs1, rs2 = np.dot(r, s1), np.dot(r, s2)
    sym12 = rs1 * s2 + rs2 * s1 + r * np.dot(s1, s2)
    if k == 2:
        return g2 * r * rs1 * rs2 + g1 * sym12
    g3 = nus[3] / rho**3 - 3 * nus[2] / rho**4 + 3 * nus[1] / rho**5
    rs3 = np.dot(r, s3)
    return (
        g3 * r * rs1 * rs2 * rs3
        + g2 * (s3 * rs1 * rs2 + r * np.dot(s3, s1) * rs2 + r * rs1 * np.dot(s3, s2))
        + g2 * sym12 * rs3
        + g1 * (np.dot(s3, s1) * s2 + np.dot(s3, s2) * s1 + s3 * np.dot(s1, s2))
    )
