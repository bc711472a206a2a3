"""N-vortex construction at critical coupling and static diagnostics.

The solver follows the classical scalar reduction: with u = log|phi|^2 the
Bogomolny system collapses to -lap u + e^u - 1 = -4 pi sum delta(z - z_k).
Splitting off the regular part u0 = -sum log(1 + mu |z-z_k|^-2) leaves a
smooth unknown v with a strictly convex variational functional, solved here
by damped Newton with screened-Poisson inner solves.  Reconstruction uses
s = v + s0 with s0 = -sum log(|z-z_k|^2 + mu), for which

    phi = prod_k (z - z_k) * exp(s/2),   alpha = (d2 s, -d1 s) / 2

is algebraically identical to the textbook formula phi = exp((u + i Theta)/2)
but has no singular factors: the log and Theta singularities cancel against
the polynomial prefactor exactly.

The source term fed to the solver is the discrete Laplacian of the sampled
s0 rather than the closed-form g0.  Both agree to O(h^2); the discrete choice
makes the solved s (hence phi, alpha) independent of the regularization mu
to solver tolerance, which is the invariant that matters: mu is a gauge of
the substitution, not of the solution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_bvp

from .elliptic import Field, ScreenedProblem, SolveReport, newton_screened
from .grid import (GaugePotential, Grid, centered_diff, complex_field,
                   covariant_derivative, field_strength, integrate,
                   laplacian_values, norm_linf, scalar_field)

TWO_PI = 2.0 * np.pi


class VortexError(Exception):
    pass


class FitRejected(VortexError):
    """Raised when a tail fit has nothing to fit (identically zero data)."""


@dataclass(frozen=True)
class VortexCenters:
    """Vortex centers as complex points; multiplicity by repetition."""

    points: tuple

    def __post_init__(self):
        pts = tuple(complex(p) for p in self.points)
        if any(not np.isfinite(p.real) or not np.isfinite(p.imag) for p in pts):
            raise ValueError("centers must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def n(self):
        return len(self.points)

    def as_array(self):
        return np.array(self.points, dtype=complex)


def snap_centers(centers, grid) -> VortexCenters:
    """Snap each center to the nearest half-cell point (offset h/2).

    Keeps every log singularity of the substitution at cell centers, never on
    a node; the placement error is at most h/2 per axis.
    """
    snapped = []
    for p in VortexCenters(tuple(centers)).points:
        q = []
        for axis, c in enumerate((p.real, p.imag)):
            h, o = grid.spacing[axis], grid.origin[axis]
            k = np.round((c - o) / h - 0.5)
            q.append(o + (k + 0.5) * h)
        snapped.append(complex(q[0], q[1]))
    return VortexCenters(tuple(snapped))


def _center_distances_sq(centers: VortexCenters, grid):
    xx, yy = grid.meshgrid()
    z = xx + 1j * yy
    return [np.abs(z - p) ** 2 for p in centers.points]


def theta_derivatives(centers: VortexCenters, grid):
    """Spatial gradient of Theta = 2 sum arg(z - z_k), evaluated pointwise."""
    xx, yy = grid.meshgrid()
    d1 = np.zeros(grid.shape)
    d2 = np.zeros(grid.shape)
    for p in centers.points:
        dx, dy = xx - p.real, yy - p.imag
        r2 = dx * dx + dy * dy
        if np.min(r2) < 1e-20:
            raise VortexError("grid node coincides with a center after snapping")
        d1 += -2.0 * dy / r2
        d2 += 2.0 * dx / r2
    return scalar_field(grid, d1), scalar_field(grid, d2)


def theta_moduli_derivative(centers: VortexCenters, velocities, grid):
    """d Theta / d tau for centers moving with the given complex velocities."""
    xx, yy = grid.meshgrid()
    out = np.zeros(grid.shape)
    for p, w in zip(centers.points, velocities):
        dx, dy = xx - p.real, yy - p.imag
        r2 = dx * dx + dy * dy
        out += 2.0 * (w.real * dy - w.imag * dx) / r2
    return scalar_field(grid, out)


@dataclass(frozen=True)
class TaubesData:
    """Regularized substitution data for the scalar vortex equation."""

    centers: VortexCenters
    mu: float
    u0: Field
    g0: Field
    s0: Field
    g0_disc: np.ndarray

    @property
    def grid(self):
        return self.u0.grid


def taubes_data(centers: VortexCenters, mu, grid) -> TaubesData:
    n = centers.n
    if mu <= 4 * n:
        raise VortexError(f"regularization mu={mu} must exceed 4N={4 * n}")
    u0 = np.zeros(grid.shape)
    g0 = np.zeros(grid.shape)
    s0 = np.zeros(grid.shape)
    for r2 in _center_distances_sq(centers, grid):
        u0 += -np.log1p(mu / r2)
        g0 += 4.0 * mu / (r2 + mu) ** 2
        s0 += -np.log(r2 + mu)
    g0_disc = -laplacian_values(s0, grid)
    return TaubesData(centers, float(mu), scalar_field(grid, u0),
                      scalar_field(grid, g0), scalar_field(grid, s0), g0_disc)


@dataclass(frozen=True)
class VortexConfig:
    """An N-vortex configuration realized as fields on a 2D grid."""

    phi: Field
    alpha: GaugePotential
    centers: VortexCenters
    v: Field
    s: Field
    mu: float
    report: SolveReport

    @property
    def grid(self):
        return self.phi.grid

    @property
    def n(self):
        return self.centers.n


def _centered_diff_filled(values, axis, h):
    """Centered difference with 2nd-order one-sided values on the boundary."""
    out = centered_diff(values, axis, h)
    lo = [slice(None)] * values.ndim
    lo[axis] = 0
    lo1 = list(lo); lo1[axis] = 1
    lo2 = list(lo); lo2[axis] = 2
    out[tuple(lo)] = (-3.0 * values[tuple(lo)] + 4.0 * values[tuple(lo1)]
                      - values[tuple(lo2)]) / (2.0 * h)
    hi = [slice(None)] * values.ndim
    hi[axis] = -1
    hi1 = list(hi); hi1[axis] = -2
    hi2 = list(hi); hi2[axis] = -3
    out[tuple(hi)] = (3.0 * values[tuple(hi)] - 4.0 * values[tuple(hi1)]
                      + values[tuple(hi2)]) / (2.0 * h)
    return out


def reconstruct(centers: VortexCenters, s_values, grid):
    """Fields (phi, alpha) from the smooth log-density s = v + s0."""
    xx, yy = grid.meshgrid()
    z = xx + 1j * yy
    poly = np.ones(grid.shape, dtype=complex)
    for p in centers.points:
        poly *= z - p
    phi = poly * np.exp(0.5 * s_values)
    a1 = 0.5 * _centered_diff_filled(s_values, 1, grid.spacing[1])
    a2 = -0.5 * _centered_diff_filled(s_values, 0, grid.spacing[0])
    return (complex_field(grid, phi),
            GaugePotential(grid, (a1, a2)))


def _boundary_ring(shape):
    mask = np.zeros(shape, dtype=bool)
    for axis in range(len(shape)):
        lo = [slice(None)] * len(shape)
        lo[axis] = 0
        mask[tuple(lo)] = True
        lo[axis] = -1
        mask[tuple(lo)] = True
    return mask


def solve_vortex(centers, grid, mu=None, tolerance=1e-10, snap=True,
                 v_init=None) -> VortexConfig:
    """Construct the N-vortex configuration with the given centers.

    Boundary condition: log|phi|^2 = 0 on the outermost ring (|phi| = 1),
    i.e. v = -u0 there; exponential decay justifies the truncation.
    """
    if not isinstance(centers, VortexCenters):
        centers = VortexCenters(tuple(centers))
    if snap and centers.n:
        centers = snap_centers(centers.points, grid)
    n = centers.n
    if mu is None:
        mu = 4 * n + 1
    half = [0.5 * (grid.dims[a] - 1) * grid.spacing[a] for a in range(2)]
    for p in centers.points:
        xy = np.array([p.real - (grid.origin[0] + half[0]),
                       p.imag - (grid.origin[1] + half[1])])
        if np.any(np.abs(xy) > 0.5 * np.array(half)):
            raise VortexError(f"center {p} outside the inner half of the domain")
        if np.any(np.array(half) - np.abs(xy) < 2.0):
            raise VortexError(f"center {p} closer than 2 units to the boundary")

    if n == 0:
        zeros = np.zeros(grid.shape)
        return VortexConfig(complex_field(grid, np.ones(grid.shape)),
                            GaugePotential.zero(grid), centers,
                            scalar_field(grid, zeros), scalar_field(grid, zeros),
                            float(mu), SolveReport(0, 0.0, True))

    data = taubes_data(centers, mu, grid)
    u0 = data.u0.values
    src = data.g0_disc - 1.0
    ring = _boundary_ring(grid.shape)

    def residual(v):
        r = -laplacian_values(v, grid) + np.exp(v + u0) + src
        r[ring] = 0.0
        return r

    def weight(v):
        return np.exp(v + u0)

    def functional(v):
        # discrete counterpart of the convex functional behind the equation;
        # forward-difference gradient energy so its exact gradient is the
        # compact Laplacian used in `residual`
        e = 0.0
        for axis in range(2):
            sl_p = [slice(None)] * 2
            sl_p[axis] = slice(1, None)
            sl_m = [slice(None)] * 2
            sl_m[axis] = slice(None, -1)
            d = (v[tuple(sl_p)] - v[tuple(sl_m)]) / grid.spacing[axis]
            e += 0.5 * np.sum(d * d)
        e += np.sum(src * v + np.exp(u0) * np.expm1(v))
        return e * grid.cell_volume()

    if v_init is None:
        # smooth guess with the right log behavior at the centers
        guess = np.zeros(grid.shape)
        c = 4.0
        for r2 in _center_distances_sq(centers, grid):
            guess += np.log((r2 + c) / (r2 + mu))
        v0 = guess
    else:
        v0 = v_init.copy()
    v0[ring] = -u0[ring]

    v, report = newton_screened(residual, weight, scalar_field(grid, v0),
                                tolerance=tolerance, functional_fn=functional)
    if not report.converged:
        warnings.warn(f"vortex solve did not converge: {report.message}")
    s = v.values + data.s0.values
    phi, alpha = reconstruct(centers, s, grid)
    phi.check_finite()
    return VortexConfig(phi, alpha, centers, v, scalar_field(grid, s),
                        float(mu), report)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def _interior_mask(grid):
    m = np.zeros(grid.shape, dtype=bool)
    m[grid.interior()] = True
    return m


def magnetic_field(alpha: GaugePotential):
    """F_12 samples with the boundary ring zeroed (one-sided curl there is
    meaningless; the physical tail it drops is exponentially small)."""
    f12 = field_strength(alpha).values
    f12[~_interior_mask(alpha.grid)] = 0.0
    return f12


def flux(config: VortexConfig) -> float:
    return integrate(magnetic_field(config.alpha), config.grid)


def boundary_phase_winding(phi: Field, inset=1) -> int:
    """Total phase winding of phi around the rectangular loop ``inset`` nodes
    in from the boundary."""
    ph = np.angle(phi.values)
    i0, i1 = inset, phi.grid.dims[0] - 1 - inset
    j0, j1 = inset, phi.grid.dims[1] - 1 - inset
    loop = np.concatenate([
        ph[i0:i1, j0],           # bottom, increasing i
        ph[i1, j0:j1],           # right, increasing j
        ph[i1:i0:-1, j1],        # top, decreasing i
        ph[i0, j1:j0:-1],        # left, decreasing j
    ])
    d = np.diff(np.concatenate([loop, loop[:1]]))
    d = (d + np.pi) % TWO_PI - np.pi
    return int(np.round(np.sum(d) / TWO_PI))


def winding(config: VortexConfig) -> int:
    from_flux = int(np.round(flux(config) / TWO_PI))
    from_phase = boundary_phase_winding(config.phi)
    if from_flux != from_phase:
        raise VortexError(
            f"flux winding {from_flux} disagrees with boundary phase winding "
            f"{from_phase}; domain under-resolved")
    return from_flux


def energy_density(phi: Field, alpha: GaugePotential, lam=1.0):
    """Static energy density sum|D phi|^2 + F12^2 + (lam/4)(1-|phi|^2)^2,
    zeroed on the boundary ring where centered stencils are one-sided."""
    grid = phi.grid
    dens = np.zeros(grid.shape)
    for axis in range(2):
        d = covariant_derivative(phi, alpha, axis).values
        dens += np.abs(d) ** 2
    f12 = field_strength(alpha).values
    dens += f12 ** 2
    dens += 0.25 * lam * (1.0 - np.abs(phi.values) ** 2) ** 2
    dens[~_interior_mask(grid)] = 0.0
    return dens


def energy(config: VortexConfig, lam=1.0) -> float:
    return integrate(energy_density(config.phi, config.alpha, lam), config.grid)


def bogomolny_squares(phi: Field, alpha: GaugePotential):
    """Pointwise completion squares: |(D1+iD2)phi|^2 and (F12+(|phi|^2-1)/2)^2."""
    grid = phi.grid
    b1 = (covariant_derivative(phi, alpha, 0).values
          + 1j * covariant_derivative(phi, alpha, 1).values)
    b3 = field_strength(alpha).values + 0.5 * (np.abs(phi.values) ** 2 - 1.0)
    mask = _interior_mask(grid)
    sq1 = np.where(mask, np.abs(b1) ** 2, 0.0)
    sq3 = np.where(mask, b3 ** 2, 0.0)
    return sq1, sq3


def bogomolny_residual(config: VortexConfig) -> float:
    sq1, sq3 = bogomolny_squares(config.phi, config.alpha)
    return float(np.sqrt(integrate(sq1 + sq3, config.grid)))


def completion_identity(phi: Field, alpha: GaugePotential):
    """Pieces of the Bogomolny completion of the energy, all evaluated with
    the same discrete operators:

        energy - flux = sum of completion squares + remainder

    where the remainder is the integral of the cross term
    -[2 Im(D1 phi conj(D2 phi)) + F12 |phi|^2].  In the continuum this term
    is a pure divergence whose integral vanishes for decaying fields; on the
    lattice the identity above is exact algebra (to roundoff) for arbitrary
    fields, and the remainder itself is an O(h^2)-small diagnostic of the
    integration-by-parts defect.

    Returns a dict with energy, flux, squares, remainder.
    """
    grid = phi.grid
    e = integrate(energy_density(phi, alpha), grid)
    fl = integrate(magnetic_field(alpha), grid)
    sq1, sq3 = bogomolny_squares(phi, alpha)
    d1 = covariant_derivative(phi, alpha, 0).values
    d2 = covariant_derivative(phi, alpha, 1).values
    cross = 2.0 * np.imag(d1 * np.conj(d2)) + \
        field_strength(alpha).values * np.abs(phi.values) ** 2
    cross[~_interior_mask(grid)] = 0.0
    return {
        "energy": e,
        "flux": fl,
        "squares": integrate(sq1 + sq3, grid),
        "remainder": -integrate(cross, grid),
    }


def interp_bilinear(values, grid, x, y):
    """Bilinear interpolation of a 2D sample array at points (x, y)."""
    hx, hy = grid.spacing
    fx = (np.asarray(x) - grid.origin[0]) / hx
    fy = (np.asarray(y) - grid.origin[1]) / hy
    i = np.clip(np.floor(fx).astype(int), 0, grid.dims[0] - 2)
    j = np.clip(np.floor(fy).astype(int), 0, grid.dims[1] - 2)
    tx = fx - i
    ty = fy - j
    return ((1 - tx) * (1 - ty) * values[i, j]
            + tx * (1 - ty) * values[i + 1, j]
            + (1 - tx) * ty * values[i, j + 1]
            + tx * ty * values[i + 1, j + 1])


def radial_profile(values, grid, radii, center=(0.0, 0.0), n_angles=128):
    """Azimuthal mean of a 2D sample array on circles around ``center``."""
    ang = np.linspace(0.0, TWO_PI, n_angles, endpoint=False)
    out = np.empty(len(radii))
    for k, r in enumerate(radii):
        xs = center[0] + r * np.cos(ang)
        ys = center[1] + r * np.sin(ang)
        out[k] = np.mean(interp_bilinear(values, grid, xs, ys))
    return out


def fit_decay_rate(values, grid, r_lo, r_hi, center=(0.0, 0.0), n_radii=24,
                   floor=1e-13):
    """Least-squares slope of log(profile) vs r over [r_lo, r_hi]."""
    radii = np.linspace(r_lo, r_hi, n_radii)
    prof = radial_profile(values, grid, radii, center)
    if np.max(np.abs(prof)) == 0.0:
        raise FitRejected("quantity is identically zero on the fit window")
    if np.min(prof) < floor:
        raise FitRejected(f"profile reaches the noise floor {floor}")
    slope = np.polyfit(radii, np.log(prof), 1)[0]
    return -float(slope)


def decay_fit(config: VortexConfig):
    """Fitted tail rates of 1-|phi|^2 and |D phi| on [0.4 L, 0.75 L]."""
    grid = config.grid
    half = 0.5 * (grid.dims[0] - 1) * grid.spacing[0]
    r_lo, r_hi = 0.4 * half, 0.75 * half
    pts = config.centers.as_array()
    c = (float(np.mean(pts.real)), float(np.mean(pts.imag))) if config.n else (0.0, 0.0)
    one_minus = 1.0 - np.abs(config.phi.values) ** 2
    dmag = np.zeros(grid.shape)
    for axis in range(2):
        dmag += np.abs(covariant_derivative(config.phi, config.alpha, axis).values)
    return {
        "one_minus_phi_sq": fit_decay_rate(one_minus, grid, r_lo, r_hi, c),
        "dphi": fit_decay_rate(dmag, grid, r_lo, r_hi, c),
    }


def higgs_zeros(phi: Field):
    """Locate zeros of phi by plaquette phase winding, one entry per unit.

    Each entry is (x, y, sign); multiplicity-k cells contribute k entries.
    Sub-cell position from the linear model of (Re phi, Im phi) on the cell.
    """
    grid = phi.grid
    ph = np.angle(phi.values)

    def wrap(d):
        return (d + np.pi) % TWO_PI - np.pi

    w = (wrap(ph[1:, :-1] - ph[:-1, :-1])
         + wrap(ph[1:, 1:] - ph[1:, :-1])
         + wrap(ph[:-1, 1:] - ph[1:, 1:])
         + wrap(ph[:-1, :-1] - ph[:-1, 1:]))
    cells = np.argwhere(np.abs(w) > np.pi)
    out = []
    hx, hy = grid.spacing
    for i, j in cells:
        mult = int(np.round(w[i, j] / TWO_PI))
        f = phi.values[i:i + 2, j:j + 2]
        # linear model f ~ f00 + gx dx + gy dy on the cell, dx, dy in [0, 1]
        gx = 0.5 * (f[1, 0] - f[0, 0] + f[1, 1] - f[0, 1])
        gy = 0.5 * (f[0, 1] - f[0, 0] + f[1, 1] - f[1, 0])
        f0 = 0.25 * np.sum(f)
        mat = np.array([[gx.real, gy.real], [gx.imag, gy.imag]])
        rhs = -np.array([f0.real, f0.imag])
        try:
            d = np.linalg.solve(mat, rhs)
        except np.linalg.LinAlgError:
            d = np.zeros(2)
        d = np.clip(d + 0.5, 0.0, 1.0)
        x = grid.origin[0] + (i + d[0]) * hx
        y = grid.origin[1] + (j + d[1]) * hy
        for _ in range(abs(mult)):
            out.append((x, y, int(np.sign(mult))))
    return out


# ---------------------------------------------------------------------------
# radial one-vortex oracle
# ---------------------------------------------------------------------------

@dataclass
class RadialProfileSolution:
    """Rotationally symmetric n-vortex profile (rho, a) with rho = |phi|."""

    n: int
    r: np.ndarray
    rho: np.ndarray
    a: np.ndarray
    amplitude: float
    sol: object
    report: SolveReport

    def rho_at(self, r):
        r = np.asarray(r, dtype=float)
        out = self.sol(np.clip(r, self.r[0], self.r[-1]))[0]
        return np.where(r >= self.r[0], out,
                        self.amplitude * np.maximum(r, 0.0) ** self.n)

    def a_at(self, r):
        r = np.asarray(r, dtype=float)
        out = self.sol(np.clip(r, self.r[0], self.r[-1]))[1]
        return np.where(r >= self.r[0], out, r * r / (4.0 * self.n))


def radial_vortex(n, r_max=16.0, nodes=400, tolerance=1e-10):
    """Solve the radial profile equations

        r rho' = n (1 - a) rho,    (2n / r) a' = 1 - rho^2

    with rho(0) = a(0) = 0 and rho, a -> 1, by damped-Newton collocation on
    a stretched mesh.  The r -> 0 behavior rho ~ A r^n enters through the
    boundary conditions at the first node, with A an unknown parameter.
    """
    if n < 1:
        raise VortexError("radial winding must be >= 1")
    r0 = 1e-3
    # mesh refined near the origin
    xi = np.linspace(0.0, 1.0, nodes)
    r = r0 + (r_max - r0) * xi ** 2

    def rhs(rr, y, p):
        rho, a = y
        return np.vstack([n * (1.0 - a) * rho / rr,
                          rr * (1.0 - rho ** 2) / (2.0 * n)])

    def bc(y0, y1, p):
        A = p[0]
        return np.array([y0[0] - A * r0 ** n,
                         y0[1] - r0 ** 2 / (4.0 * n),
                         y1[0] - 1.0])

    rho_guess = (r ** 2 / (r ** 2 + 2.0 * n)) ** (0.5 * n)
    a_guess = r ** 2 / (r ** 2 + 2.0 * n)
    res = solve_bvp(rhs, bc, r, np.vstack([rho_guess, a_guess]), p=[0.5],
                    tol=tolerance, max_nodes=200000)
    if res.status != 0:
        raise VortexError(f"radial relaxation failed: {res.message}")
    report = SolveReport(res.niter, float(np.max(res.rms_residuals)), True)
    rr = res.x
    rho, a = res.y
    return RadialProfileSolution(n, rr, rho, a, float(res.p[0]), res.sol, report)
