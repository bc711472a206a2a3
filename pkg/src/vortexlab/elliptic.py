"""Linear screened-Poisson solves (-lap + W)u = f and a damped Newton loop.

The linear solver is matrix-free preconditioned conjugate gradient on the
Dirichlet subspace: the operator is symmetric positive definite there, so CG
is the natural dependency-light choice and scales unchanged to 3D.  Two
stencils are available for the Laplacian: the standard compact one, and the
composition of centered first differences ("wide").  The wide variant is the
exact transpose-square of the centered gradient, which lets gauge-fixing
residuals cancel to solver tolerance instead of to O(h^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (Field, Grid, laplacian_values, wide_laplacian_values)


class EllipticError(Exception):
    pass


class LineSearchError(EllipticError):
    pass


@dataclass
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    message: str = ""

    def __post_init__(self):
        if self.converged and not np.isfinite(self.residual):
            raise ValueError("converged report with non-finite residual")


@dataclass
class ScreenedProblem:
    """(-lap + W)u = f with Dirichlet boundary values.

    W must be nonnegative; if ``core_radius`` is given, W must additionally
    stay above ``w0`` outside that radius (screening keeps the far field
    massive, which is what the decay estimates rely on).
    """

    weight: Field
    rhs: Field
    boundary: object = 0.0      # scalar, or array giving boundary-ring values
    tolerance: float = 1e-10
    max_iterations: int = 20000
    stencil: str = "five_point"
    core_radius: float = None
    w0: float = 1e-3

    def __post_init__(self):
        if self.weight.grid != self.rhs.grid:
            raise ValueError("weight and rhs on different grids")
        if self.stencil not in ("five_point", "wide"):
            raise ValueError(f"unknown stencil {self.stencil!r}")
        w = self.weight.values
        if np.min(w) < -1e-14:
            raise EllipticError(f"weight must be >= 0, min {np.min(w):.3e}")
        if self.core_radius is not None:
            coords = self.weight.grid.meshgrid()
            r2 = sum(c * c for c in coords)
            outside = r2 > self.core_radius ** 2
            if outside.any() and np.min(w[outside]) < self.w0:
                raise EllipticError(
                    f"weight drops below w0={self.w0} outside core radius "
                    f"{self.core_radius}")

    @property
    def grid(self) -> Grid:
        return self.rhs.grid


def _apply_operator(u, weight, grid, stencil):
    lap = laplacian_values if stencil == "five_point" else wide_laplacian_values
    return -lap(u, grid) + weight * u


def _interior_mask(grid):
    mask = np.zeros(grid.shape, dtype=bool)
    mask[grid.interior()] = True
    return mask


def _diagonal(weight, grid, stencil):
    diag = weight.copy()
    for h in grid.spacing:
        diag += (2.0 / (h * h)) if stencil == "five_point" else (0.5 / (h * h))
    return diag


def solve_screened(problem: ScreenedProblem):
    """Preconditioned CG for the screened problem; returns (Field, SolveReport)."""
    grid = problem.grid
    w = problem.weight.values
    mask = _interior_mask(grid)
    stencil = problem.stencil

    # lift inhomogeneous boundary data, then solve on the zero-boundary space
    if np.isscalar(problem.boundary):
        lift = np.full(grid.shape, float(problem.boundary))
    else:
        lift = np.array(problem.boundary, dtype=float)
        if lift.shape != grid.shape:
            raise ValueError("boundary array shape mismatch")
    lift[mask] = 0.0
    b = problem.rhs.values - _apply_operator(lift, w, grid, stencil)
    b = np.where(mask, b, 0.0)

    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return Field(grid, lift), SolveReport(0, 0.0, True)

    diag = _diagonal(w, grid, stencil)
    x = np.zeros(grid.shape)
    r = b.copy()
    z = r / diag
    z[~mask] = 0.0
    p = z.copy()
    rz = float(np.sum(r * z))
    res = np.linalg.norm(r) / bnorm
    it = 0
    while res > problem.tolerance and it < problem.max_iterations:
        ap = _apply_operator(p, w, grid, stencil)
        ap[~mask] = 0.0
        pap = float(np.sum(p * ap))
        if pap <= 0.0:
            return (Field(grid, x + lift),
                    SolveReport(it, res, False, "indefinite direction"))
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        res = np.linalg.norm(r) / bnorm
        z = r / diag
        z[~mask] = 0.0
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    u = x + lift
    if not np.all(np.isfinite(u)):
        return Field(grid, np.zeros(grid.shape)), SolveReport(
            it, np.inf, False, "non-finite iterate")
    return Field(grid, u), SolveReport(it, res, res <= problem.tolerance)


def newton_screened(residual_fn, jacobian_weight_fn, v0: Field,
                    tolerance=1e-10, max_newton=50, functional_fn=None,
                    inner_tolerance=None, min_step=1e-12):
    """Damped Newton for a scalar equation with screened-Poisson linearization.

    residual_fn(values) -> residual array (zero on the boundary ring);
    jacobian_weight_fn(values) -> nonnegative diagonal weight of the
    linearized operator -lap + W.  If ``functional_fn`` is given, steps
    backtrack (factor 1/2) until the functional decreases (Armijo with the
    residual as its exact gradient), which for a convex functional makes the
    iteration globally convergent.
    """
    grid = v0.grid
    v = v0.values.copy()
    inner_tol = inner_tolerance if inner_tolerance is not None else tolerance * 1e-2
    total_inner = 0
    for it in range(max_newton):
        r = residual_fn(v)
        rnorm = float(np.max(np.abs(r)))
        if not np.isfinite(rnorm):
            return Field(grid, v), SolveReport(it, rnorm, False,
                                               "non-finite residual")
        if rnorm <= tolerance:
            return Field(grid, v), SolveReport(it, rnorm, True,
                                               f"inner iterations {total_inner}")
        weight = jacobian_weight_fn(v)
        prob = ScreenedProblem(Field(grid, weight), Field(grid, -r),
                               tolerance=min(inner_tol, 1e-3 * rnorm + 1e-14),
                               max_iterations=20000)
        delta, rep = solve_screened(prob)
        total_inner += rep.iterations
        if not rep.converged:
            return Field(grid, v), SolveReport(it, rnorm, False,
                                               f"inner solve stalled: {rep.message}")
        step = 1.0
        if functional_fn is not None:
            f0 = functional_fn(v)
            slope = float(np.sum(r * delta.values))  # directional derivative
            while step >= min_step:
                f1 = functional_fn(v + step * delta.values)
                if f1 <= f0 + 1e-4 * step * slope or f1 <= f0:
                    break
                step *= 0.5
            else:
                raise LineSearchError(
                    f"backtracking fell below {min_step} at Newton step {it}")
        v = v + step * delta.values
    r = residual_fn(v)
    return Field(grid, v), SolveReport(max_newton, float(np.max(np.abs(r))),
                                       False, "newton budget exhausted")
