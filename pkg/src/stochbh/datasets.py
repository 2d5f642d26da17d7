"""Synthetic B-H measurement tables.

Curves follow the Brauer form ``f(s) = s (k1 exp(k2 s^2) + k3)`` with
log-normally perturbed coefficients per sample, which keeps every sample
strictly increasing. Used in place of proprietary measurement data.
"""

from __future__ import annotations

import numpy as np

from .material_law import MeasuredBHTable

BRAUER_K = (3.8, 2.17, 396.2)


def brauer_f(s, k1: float, k2: float, k3: float):
    s = np.asarray(s, dtype=float)
    return s * (k1 * np.exp(k2 * s**2) + k3)


def synthetic_bh_table(
    n_points: int = 14,
    n_samples: int = 28,
    interval: tuple[float, float] = (1.0, 1.55),
    spread: tuple[float, float, float] = (0.10, 0.03, 0.08),
    seed: int = 2015,
) -> MeasuredBHTable:
    """Table of ``n_samples`` perturbed Brauer curves at equidistant points."""
    rng = np.random.default_rng(seed)
    points = np.linspace(interval[0], interval[1], n_points)
    k = np.asarray(BRAUER_K)[:, None] * np.exp(np.asarray(spread)[:, None] * rng.standard_normal((3, n_samples)))
    samples = brauer_f(points[:, None], k[0], k[1], k[2])
    return MeasuredBHTable(points, samples)
