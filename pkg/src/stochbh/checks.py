"""Fast invariant checks behind ``stochbh check``."""

from __future__ import annotations

import math

import numpy as np

from . import fem2d
from . import stochastic_grids as sg
from .datasets import synthetic_bh_table
from .karhunen_loeve import KLExpansion
from .material_law import PowerLaw, RationalLaw, flux, flux_jacobians


def _gauss_exactness() -> tuple[bool, str]:
    worst = 0.0
    for n in range(1, 12):
        rule = sg.gauss_rule_uniform(n, (-1.0, 1.0))
        for k in range(2 * n):
            exact = 0.0 if k % 2 else 1.0 / (k + 1)
            worst = max(worst, abs(rule.weights @ rule.nodes**k - exact))
    return worst < 1e-12, f"max error {worst:.1e}"


def _smolyak_weights() -> tuple[bool, str]:
    worst = max(abs(sg.smolyak_grid(q, M).weights.sum() - 1) for q in range(6) for M in range(1, 5))
    return worst < 1e-12, f"max |sum w - 1| {worst:.1e}"


def _kl_orthonormal() -> tuple[bool, str]:
    kl = KLExpansion.from_table(synthetic_bh_table(), M=3)
    G = kl.space.gram()
    b = kl.eigenvectors[:, :10]
    err = float(np.max(np.abs(b.T @ G @ b - np.eye(10))))
    return err < 1e-8, f"max deviation {err:.1e}"


def _flux_jacobians() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for law in (PowerLaw(4.0), RationalLaw()):
        scale = 1.0 if isinstance(law, PowerLaw) else 1.3
        r = scale * rng.uniform(0.5, 1.0, 3)
        d = rng.standard_normal(3)
        h = 1e-5 * scale
        fd = (flux(law, r + h * d) - flux(law, r - h * d)) / (2 * h)
        exact = flux_jacobians(law, r, d)
        worst = max(worst, float(np.linalg.norm(fd - exact) / np.linalg.norm(exact)))
    return worst < 1e-6, f"max relative error {worst:.1e}"


def _linear_fem_rate() -> tuple[bool, str]:
    def exact(x, y):
        return np.sin(math.pi * x) * np.sin(math.pi * y)

    def grad(x, y):
        return math.pi * np.column_stack(
            [np.cos(math.pi * x) * np.sin(math.pi * y), np.sin(math.pi * x) * np.cos(math.pi * y)]
        )

    errs = []
    for n in (8, 16):
        mesh = fem2d.mesh_unit_square(n)
        system = fem2d.LinearSystem(
            fem2d.stiffness(mesh),
            fem2d.load_vector(mesh, lambda x, y: 2 * math.pi**2 * exact(x, y)),
            np.arange(mesh.n_vertices),
            np.zeros(mesh.n_vertices),
        )
        u = fem2d.solve_linear(fem2d.apply_dirichlet(system, mesh, 0.0))
        errs.append(fem2d.norms(mesh, u, exact, grad).h1_semi)
    ratio = errs[0] / errs[1]
    return 1.8 <= ratio <= 2.2, f"H1 ratio {ratio:.3f}"


CHECKS = {
    "gauss exactness": _gauss_exactness,
    "smolyak weight sums": _smolyak_weights,
    "KL Gram-orthonormality": _kl_orthonormal,
    "flux Jacobian vs FD": _flux_jacobians,
    "P1 linear rate": _linear_fem_rate,
}


def run_checks() -> list[tuple[str, bool, str]]:
    out = []
    for name, check in CHECKS.items():
        ok, detail = check()
        out.append((name, bool(ok), detail))
    return out
