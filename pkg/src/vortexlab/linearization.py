"""Linearized operators about a vortex configuration, gauge fixing, zero
modes, the moduli-space metric, and coercivity spectra.

Operator conventions (t = (phi~, a~) a tangent vector, G the gauge functional
div a~ - (i phi, phi~)):

  L t      second-order elliptic block operator; its Higgs block uses a
           link-variable covariant Laplacian so the discrete operator is
           exactly symmetric under the real L2 pairing.  The quadratic form
           <L t, t> IS the corrected Hessian: it equals the second variation
           of the static energy plus ||G_t||^2 (the gauge penalty hides in
           the mass term via (phi,phi~)^2 + (i phi,phi~)^2 = |phi|^2|phi~|^2),
           so its kernel is exactly the 2N gauge-orthogonal zero modes.
  calL t   L plus the gauge column +(i phi G, grad G); this is the operator
           that annihilates infinitesimal gauge transformations.  Pairing the
           gauge column against t integrates by parts to -||G_t||^2, so
           <calL t, t> = <L t, t> - ||G_t||^2 = Hess(E)(t, t).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .elliptic import EllipticError, Field, ScreenedProblem, solve_screened
from .grid import (GaugePotential, centered_diff, complex_field,
                   covariant_derivative, inner_l2, integrate,
                   laplacian_values, norm_l2, scalar_field)
from .vortex import VortexCenters, VortexConfig, solve_vortex


class LinearizationError(Exception):
    pass


@dataclass(frozen=True)
class TangentVector:
    """Perturbation (phi~, a~1, a~2) on the grid of its base configuration."""

    phi: Field
    a: GaugePotential

    def __post_init__(self):
        if self.phi.grid != self.a.grid:
            raise ValueError("tangent components on different grids")

    @property
    def grid(self):
        return self.phi.grid

    @classmethod
    def zero(cls, grid):
        return cls(complex_field(grid), GaugePotential.zero(grid))

    def scaled(self, c):
        return TangentVector(Field(self.grid, c * self.phi.values),
                             GaugePotential(self.grid, tuple(
                                 c * comp for comp in self.a.components)))

    def plus(self, other, factor=1.0):
        return TangentVector(
            Field(self.grid, self.phi.values + factor * other.phi.values),
            GaugePotential(self.grid, tuple(
                a + factor * b for a, b in
                zip(self.a.components, other.a.components))))


def tangent_inner(s: TangentVector, t: TangentVector) -> float:
    val = inner_l2(s.phi, t.phi)
    for a, b in zip(s.a.components, t.a.components):
        val += integrate(a * b, s.grid)
    return val


def tangent_norm(t: TangentVector) -> float:
    return np.sqrt(max(tangent_inner(t, t), 0.0))


def tangent_norm_h1(t: TangentVector) -> float:
    s = tangent_inner(t, t)
    for comp in (t.phi.values,) + t.a.components:
        for axis in range(t.grid.ndim):
            g = centered_diff(comp, axis, t.grid.spacing[axis])
            s += integrate(np.abs(g) ** 2, t.grid)
    return np.sqrt(max(s, 0.0))


def _interior(grid):
    mask = np.zeros(grid.shape, dtype=bool)
    mask[grid.interior()] = True
    return mask


def gauge_functional(base: VortexConfig, t: TangentVector) -> np.ndarray:
    """G = div a~ - (i phi, phi~), centered divergence, zero on the boundary
    ring (the centered divergence is one-sided there and the gauge condition
    is an interior statement)."""
    g = np.zeros(base.grid.shape)
    for axis in range(2):
        g += centered_diff(t.a.components[axis], axis, base.grid.spacing[axis])
    g -= (1j * base.phi.values * np.conj(t.phi.values)).real
    g[~_interior(base.grid)] = 0.0
    return g


def gauge_functional_unmasked(base: VortexConfig, t: TangentVector) -> np.ndarray:
    """Gauge functional with one-sided divergence on the boundary ring; used
    where honest boundary values are needed (gauge-fix Dirichlet data)."""
    from .vortex import _centered_diff_filled
    g = np.zeros(base.grid.shape)
    for axis in range(2):
        g += _centered_diff_filled(t.a.components[axis], axis,
                                   base.grid.spacing[axis])
    g -= (1j * base.phi.values * np.conj(t.phi.values)).real
    return g


def gauge_residual(base: VortexConfig, t: TangentVector) -> float:
    return np.sqrt(integrate(gauge_functional(base, t) ** 2, base.grid))


def _link_covariant_laplacian(phi_t, alpha, grid):
    """Hermitian covariant Laplacian sum_i D_i^2 via link variables.

    Links carry exp(-i h alpha) at midpoints, which reproduces
    (d - i alpha)^2 to O(h^2) and is exactly symmetric under the real
    pairing.  Boundary layers of the result are zero.
    """
    out = np.zeros_like(phi_t)
    for axis in range(2):
        h = grid.spacing[axis]
        a = alpha.components[axis]
        sl = [slice(None)] * 2
        sl[axis] = slice(1, -1)
        sl = tuple(sl)
        sp = [slice(None)] * 2
        sp[axis] = slice(2, None)
        sp = tuple(sp)
        sm = [slice(None)] * 2
        sm[axis] = slice(None, -2)
        sm = tuple(sm)
        a_ph = 0.5 * (a[sl] + a[sp])    # alpha at +h/2
        a_mh = 0.5 * (a[sl] + a[sm])    # alpha at -h/2
        up = np.exp(-1j * h * a_ph)
        um = np.exp(1j * h * a_mh)
        out[sl] += (up * phi_t[sp] - 2.0 * phi_t[sl] + um * phi_t[sm]) / (h * h)
    mask = np.zeros(grid.shape, dtype=bool)
    mask[grid.interior()] = True
    out[~mask] = 0.0
    return out


def _d_phi(base: VortexConfig):
    return [covariant_derivative(base.phi, base.alpha, axis).values
            for axis in range(2)]


def apply_L(base: VortexConfig, t: TangentVector) -> TangentVector:
    """Elliptic block operator of the linearized static equations in the
    gauge-orthogonal sector."""
    if t.grid != base.grid:
        raise ValueError("tangent vector on a different grid")
    grid = base.grid
    phi = base.phi.values
    dphi = _d_phi(base)
    higgs = -_link_covariant_laplacian(t.phi.values, base.alpha, grid)
    for axis in range(2):
        higgs += 2j * t.a.components[axis] * dphi[axis]
    higgs += 0.5 * (3.0 * np.abs(phi) ** 2 - 1.0) * t.phi.values
    rows = []
    for axis in range(2):
        row = (-laplacian_values(t.a.components[axis], grid)
               + np.abs(phi) ** 2 * t.a.components[axis]
               - 2.0 * (1j * t.phi.values * np.conj(dphi[axis])).real)
        rows.append(row)
    mask = np.zeros(grid.shape, dtype=bool)
    mask[grid.interior()] = True
    higgs[~mask] = 0.0
    for row in rows:
        row[~mask] = 0.0
    return TangentVector(Field(grid, higgs), GaugePotential(grid, tuple(rows)))


def _gauge_column(base: VortexConfig, g_values):
    grid = base.grid
    mask = np.zeros(grid.shape, dtype=bool)
    mask[grid.interior()] = True
    higgs = 1j * base.phi.values * g_values
    higgs[~mask] = 0.0
    comps = []
    for axis in range(2):
        c = centered_diff(g_values, axis, grid.spacing[axis])
        c[~mask] = 0.0
        comps.append(c)
    return TangentVector(Field(grid, higgs), GaugePotential(grid, tuple(comps)))


def apply_calL(base: VortexConfig, t: TangentVector) -> TangentVector:
    """L plus the gauge column: annihilates pure gauge directions."""
    g = gauge_functional(base, t)
    return apply_L(base, t).plus(_gauge_column(base, g))


def energy_hessian_form(base: VortexConfig, t: TangentVector) -> float:
    """Second variation of the static energy at the base configuration,
    assembled with centered stencils (no operator application)."""
    grid = base.grid
    phi = base.phi.values
    dphi = _d_phi(base)
    dens = np.zeros(grid.shape)
    for axis in range(2):
        dt = (centered_diff(t.phi.values, axis, grid.spacing[axis])
              - 1j * base.alpha.components[axis] * t.phi.values
              - 1j * t.a.components[axis] * phi)
        dens += np.abs(dt) ** 2
        dens -= 2.0 * t.a.components[axis] * \
            (1j * t.phi.values * np.conj(dphi[axis])).real
    curl = (centered_diff(t.a.components[1], 0, grid.spacing[0])
            - centered_diff(t.a.components[0], 1, grid.spacing[1]))
    dens += curl ** 2
    pair = (phi * np.conj(t.phi.values)).real
    dens += pair ** 2 - 0.5 * (1.0 - np.abs(phi) ** 2) * np.abs(t.phi.values) ** 2
    dens[~_interior(grid)] = 0.0
    return integrate(dens, grid)


def corrected_hessian_form(base: VortexConfig, t: TangentVector) -> float:
    """Energy Hessian plus the squared gauge functional.

    Equal to <L t, t> up to O(h^2) stencil differences; positive on pure
    gauge directions (where it reduces to the active penalty ||G||^2) and
    coercive on the complement of the zero modes.
    """
    return energy_hessian_form(base, t) + \
        integrate(gauge_functional(base, t) ** 2, base.grid)


def apply_D(base: VortexConfig, t: TangentVector):
    """First-order operator of the linearized Bogomolny system joined with
    the gauge condition, in complexified form.

    Returns (row1, row2) as complex Fields:
      row1 = dbar phi~ - i conj(a) phi~ - i conj(a~) phi
      row2 = d conj(a~) + (i/4) conj(phi) phi~
    with a = (alpha_1 - i alpha_2)/2, d = (d_1 - i d_2)/2.  Row weights for
    the quadratic form are supplied by `bogomolny_quadratic_form`.
    """
    grid = base.grid
    phi = base.phi.values
    a_bar = 0.5 * (base.alpha.components[0] + 1j * base.alpha.components[1])
    at_bar = 0.5 * (t.a.components[0] + 1j * t.a.components[1])
    d1t = centered_diff(t.phi.values, 0, grid.spacing[0])
    d2t = centered_diff(t.phi.values, 1, grid.spacing[1])
    row1 = 0.5 * (d1t + 1j * d2t) - 1j * a_bar * t.phi.values \
        - 1j * at_bar * phi
    da1 = centered_diff(at_bar, 0, grid.spacing[0])
    da2 = centered_diff(at_bar, 1, grid.spacing[1])
    row2 = 0.5 * (da1 - 1j * da2) + 0.25j * np.conj(phi) * t.phi.values
    mask = np.zeros(grid.shape, dtype=bool)
    mask[grid.interior()] = True
    row1[~mask] = 0.0
    row2[~mask] = 0.0
    return Field(grid, row1), Field(grid, row2)


def bogomolny_quadratic_form(base: VortexConfig, t: TangentVector) -> float:
    """Squared first-order form 4||row1||^2 + 16||row2||^2.

    The row weights put both blocks on the normalization in which the value
    coincides with the corrected-Hessian quadratic form (row1 carries half
    the linearized Bogomolny operator, row2 a quarter of gauge + curl).
    """
    r1, r2 = apply_D(base, t)
    return 4.0 * inner_l2(r1, r1) + 16.0 * inner_l2(r2, r2)


# ---------------------------------------------------------------------------
# gauge fixing and zero modes
# ---------------------------------------------------------------------------

def gauge_fix(base: VortexConfig, raw: TangentVector, tolerance=1e-10):
    """Project a raw tangent onto the gauge-orthogonal slice.

    Returns (fixed, chi) with fixed = raw + (i phi chi, d chi) and chi the
    solution of (lap - |phi|^2) chi = -G_raw.  The solve uses the
    centered-composition Laplacian so the output gauge residual cancels to
    solver tolerance rather than to stencil accuracy.

    chi generally carries a power-law tail (for moduli tangents it approaches
    a harmonic multipole), so the Dirichlet data comes from the zeroth-order
    balance chi = G_raw / |phi|^2 of the screened equation, which is exact at
    the boundary up to exponentially small terms.
    """
    grid = base.grid
    w = np.abs(base.phi.values) ** 2
    kappa = 0.2
    reg = w / (w * w + kappa * kappa)   # regularized 1/w, finite at zeros

    # Moduli tangents make G_raw fall off only like a power of r, so chi
    # inherits a harmonic-multipole tail.  Subtract it algebraically first
    # (chi ~ G/|phi|^2 where the Laplacian is subdominant), inserting with
    # one-sided ring derivatives so the tangent stays smooth through the
    # ring; each pass gains two powers of 1/r in the leftover source.
    chi_total = np.zeros(grid.shape)
    cur = raw
    for _ in range(2):
        g = gauge_functional_unmasked(base, cur)
        chi_k = g * reg
        cur = cur.plus(_gauge_column_chi_filled(base, chi_k))
        chi_total += chi_k

    # compact-stencil solve for the now fast-decaying remainder (the wide
    # operator's decoupled sublattices would imprint a grid-scale ripple
    # that later Laplacian applications amplify by 1/h^2) ...
    r1 = gauge_functional(base, cur)
    prob1 = ScreenedProblem(Field(grid, w), Field(grid, r1),
                            tolerance=tolerance, stencil="five_point")
    zeta1, rep1 = solve_screened(prob1)
    if not rep1.converged:
        raise EllipticError(f"gauge-fix solve stalled: {rep1.message}")
    cur = cur.plus(_gauge_column_chi(base, zeta1.values))
    chi_total += zeta1.values

    # ... then a wide-stencil correction of the tiny stencil-mismatch defect,
    # whose centered-gradient insertion cancels the residual to CG tolerance
    r2 = gauge_functional(base, cur)
    prob2 = ScreenedProblem(Field(grid, w), Field(grid, r2),
                            tolerance=tolerance, stencil="wide")
    zeta2, rep2 = solve_screened(prob2)
    if not rep2.converged:
        raise EllipticError(f"gauge-fix correction stalled: {rep2.message}")
    fixed = cur.plus(_gauge_column_chi(base, zeta2.values))
    chi_total += zeta2.values
    return fixed, Field(grid, chi_total)


def _gauge_column_chi(base: VortexConfig, chi_values):
    # centered gradient: its divergence reproduces the wide Laplacian of the
    # gauge-fix solve exactly, so the fixed tangent's gauge residual cancels
    # to solver tolerance
    grid = base.grid
    comps = tuple(centered_diff(chi_values, axis, grid.spacing[axis])
                  for axis in range(2))
    return TangentVector(Field(grid, 1j * base.phi.values * chi_values),
                         GaugePotential(grid, comps))


def _gauge_column_chi_filled(base: VortexConfig, chi_values):
    # one-sided ring gradient: used for the smooth algebraic tail pieces of
    # chi, which must not imprint a kink on the boundary ring
    from .vortex import _centered_diff_filled
    grid = base.grid
    comps = tuple(_centered_diff_filled(chi_values, axis, grid.spacing[axis])
                  for axis in range(2))
    return TangentVector(Field(grid, 1j * base.phi.values * chi_values),
                         GaugePotential(grid, comps))


@dataclass
class ZeroModeBasis:
    """Gauge-orthogonal tangent basis at a vortex configuration.

    ``raw_modes`` are the gauge-fixed moduli-coordinate derivatives in chart
    order; ``gram`` is their L2 Gram matrix (the moduli metric sample,
    recorded before orthonormalization); ``modes`` are the orthonormalized
    versions used for projections and deflation.
    """

    base: VortexConfig
    chart: str
    raw_modes: list
    modes: list
    gram: np.ndarray
    gauge_residuals: np.ndarray
    delta: float

    @property
    def count(self):
        return len(self.modes)

    def project_coefficients(self, t: TangentVector):
        return np.array([tangent_inner(t, m) for m in self.modes])

    def deflate(self, t: TangentVector) -> TangentVector:
        out = t
        for m in self.modes:
            out = out.plus(m, factor=-tangent_inner(out, m))
        return out


def _config_tangent(cfg_p: VortexConfig, cfg_m: VortexConfig, delta):
    grid = cfg_p.grid
    dphi = (cfg_p.phi.values - cfg_m.phi.values) / (2.0 * delta)
    da = tuple((p - m) / (2.0 * delta) for p, m in
               zip(cfg_p.alpha.components, cfg_m.alpha.components))
    return TangentVector(Field(grid, dphi), GaugePotential(grid, da))


def _perturbed_centers_chart(points, k, delta):
    """Centers displaced by +-delta along real/imag part of center k//2."""
    plus = list(points)
    minus = list(points)
    idx, axis = divmod(k, 2)
    step = delta if axis == 0 else 1j * delta
    plus[idx] = plus[idx] + step
    minus[idx] = minus[idx] - step
    return plus, minus


def _perturbed_centers_spoly(points, k, delta):
    """Centers displaced by +-delta along Re/Im of a symmetric-polynomial
    coefficient; the smooth chart through coincident centers."""
    coeffs = np.poly(np.array(points, dtype=complex))  # leading 1 first
    idx, axis = divmod(k, 2)
    step = delta if axis == 0 else 1j * delta
    cp = coeffs.copy()
    cm = coeffs.copy()
    cp[idx + 1] += step       # skip the leading coefficient
    cm[idx + 1] -= step
    return list(np.roots(cp)), list(np.roots(cm))


def zero_modes(base: VortexConfig, delta=None, chart=None, tolerance=1e-10,
               mode_tolerance=1e-6) -> ZeroModeBasis:
    """Central-difference moduli derivatives, gauge-fixed and orthonormalized.

    Chart: raw center coordinates, except within 2h of a center coincidence
    where the symmetric-polynomial coefficients are used (centers stop being
    smooth coordinates there).  Ordering is lexicographic in (center, axis)
    resp. (coefficient, Re/Im) for reproducibility.
    """
    grid = base.grid
    n = base.n
    if n == 0:
        raise LinearizationError("vacuum has no zero modes")
    pts = list(base.centers.points)
    if chart is None:
        min_sep = np.inf
        for i in range(n):
            for j in range(i + 1, n):
                min_sep = min(min_sep, abs(pts[i] - pts[j]))
        chart = "spoly" if (n > 1 and min_sep < 2.0 * grid.spacing[0]) else "centers"
    if delta is None:
        delta = 0.5 * grid.spacing[0]

    perturb = (_perturbed_centers_chart if chart == "centers"
               else _perturbed_centers_spoly)
    raw_modes = []
    residuals = []
    for k in range(2 * n):
        plus, minus = perturb(pts, k, delta)
        cfg_p = solve_vortex(plus, grid, mu=base.mu, tolerance=tolerance,
                             snap=False, v_init=base.v.values)
        cfg_m = solve_vortex(minus, grid, mu=base.mu, tolerance=tolerance,
                             snap=False, v_init=base.v.values)
        raw = _config_tangent(cfg_p, cfg_m, delta)
        fixed, _ = gauge_fix(base, raw, tolerance=tolerance)
        res = gauge_residual(base, fixed)
        scale = tangent_norm(fixed)
        if scale > 0 and res > mode_tolerance * max(scale, 1.0) * 10:
            raise LinearizationError(
                f"mode {k} gauge residual {res:.2e} above tolerance")
        raw_modes.append(fixed)
        residuals.append(res)

    m = 2 * n
    gram = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            gram[i, j] = gram[j, i] = tangent_inner(raw_modes[i], raw_modes[j])
    try:
        np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        raise LinearizationError(
            "rank-deficient mode Gram matrix (degenerate chart)") from None

    # modified Gram-Schmidt in the L2 inner product
    modes = []
    for i in range(m):
        v = raw_modes[i]
        for u in modes:
            v = v.plus(u, factor=-tangent_inner(v, u))
        nv = tangent_norm(v)
        if nv <= 0:
            raise LinearizationError("Gram-Schmidt breakdown")
        modes.append(v.scaled(1.0 / nv))
    return ZeroModeBasis(base, chart, raw_modes, modes, gram,
                         np.array(residuals), delta)


# ---------------------------------------------------------------------------
# coercivity spectra
# ---------------------------------------------------------------------------

def _as_vec(t: TangentVector):
    return np.concatenate([t.phi.values.real.ravel(),
                           t.phi.values.imag.ravel(),
                           t.a.components[0].ravel(),
                           t.a.components[1].ravel()])


def _from_vec(vec, grid):
    n = int(np.prod(grid.dims))
    re, im, a1, a2 = (vec[:n], vec[n:2 * n], vec[2 * n:3 * n], vec[3 * n:])
    return TangentVector(
        Field(grid, (re + 1j * im).reshape(grid.shape)),
        GaugePotential(grid, (a1.reshape(grid.shape).copy(),
                              a2.reshape(grid.shape).copy())))


def _flat_machinery(base: VortexConfig):
    """Precompiled flat-array versions of L, the H1 metric, and the L2 weight
    for the eigensolver hot loop (no Field wrappers, no validation)."""
    grid = base.grid
    shape = grid.shape
    nn = int(np.prod(shape))
    wq = grid.quad_weights().ravel()
    weights = np.concatenate([wq, wq, wq, wq])
    phi = base.phi.values
    dphi = _d_phi(base)
    mass = 0.5 * (3.0 * np.abs(phi) ** 2 - 1.0)
    absphi2 = np.abs(phi) ** 2
    alpha = base.alpha.components
    hx, hy = grid.spacing
    mask = _interior(grid)

    # link factors for the covariant Laplacian, per axis
    links = []
    for axis, h in enumerate(grid.spacing):
        a = alpha[axis]
        sl = [slice(None)] * 2
        sl[axis] = slice(1, -1)
        sp = [slice(None)] * 2
        sp[axis] = slice(2, None)
        sm = [slice(None)] * 2
        sm[axis] = slice(None, -2)
        up = np.exp(-1j * h * 0.5 * (a[tuple(sl)] + a[tuple(sp)]))
        um = np.exp(1j * h * 0.5 * (a[tuple(sl)] + a[tuple(sm)]))
        links.append((tuple(sl), tuple(sp), tuple(sm), up, um, h))

    def unpack(x):
        f = (x[:nn] + 1j * x[nn:2 * nn]).reshape(shape)
        a1 = x[2 * nn:3 * nn].reshape(shape)
        a2 = x[3 * nn:].reshape(shape)
        return f, a1, a2

    def pack(f, a1, a2):
        return np.concatenate([f.real.ravel(), f.imag.ravel(),
                               a1.ravel(), a2.ravel()])

    def apply_l_flat(x):
        f, a1, a2 = unpack(x)
        at = (a1, a2)
        higgs = mass * f
        for sl, sp, sm, up, um, h in links:
            higgs[sl] -= (up * f[sp] - 2.0 * f[sl] + um * f[sm]) / (h * h)
        for axis in range(2):
            higgs += 2j * at[axis] * dphi[axis]
        rows = []
        for axis in range(2):
            row = (-laplacian_values(at[axis], grid) + absphi2 * at[axis]
                   - 2.0 * (1j * f * np.conj(dphi[axis])).real)
            row[~mask] = 0.0
            rows.append(row)
        higgs[~mask] = 0.0
        return pack(higgs, rows[0], rows[1])

    from .grid import wide_laplacian_values

    def apply_h1_flat(x):
        f, a1, a2 = unpack(x)
        return pack(f - wide_laplacian_values(f, grid),
                    a1 - wide_laplacian_values(a1, grid),
                    a2 - wide_laplacian_values(a2, grid))

    return apply_l_flat, apply_h1_flat, weights, nn


def coercivity(base: VortexConfig, basis: ZeroModeBasis, n_extra=2,
               eig_tol=1e-6, max_outer=40, cg_tol=1e-6):
    """Spectral head of the corrected-Hessian operator L.

    Returns (gamma_min, near_zero_eigs, info):
      near_zero_eigs -- the 2N smallest L2 Rayleigh-quotient eigenvalues of L
                        (the numerical kernel spanned by the zero modes);
      gamma_min      -- smallest Rayleigh quotient <L t, t> / ||t||_H1^2 over
                        the subspace L2-orthogonal to all modes, by inverse
                        power iteration with CG inner solves and deflation of
                        the mode subspace.
    """
    grid = base.grid
    m = basis.count
    apply_l, apply_h1_raw, wts, nn = _flat_machinery(base)
    diag = np.full(4 * nn, sum(2.0 / h ** 2 for h in grid.spacing) + 1.0)

    # the whole eigenproblem lives on interior-supported vectors: the ring,
    # where operator outputs are masked, would otherwise contribute spurious
    # null directions to the pencil
    imask = np.tile(_interior(grid).ravel(), 4)

    def apply_h1(x):
        y = apply_h1_raw(x)
        y[~imask] = 0.0
        return y

    def dotw(x, y):
        return float(np.sum(x * wts * y))

    modes = [_as_vec(t) for t in basis.modes]
    # L2-orthonormalize in the weighted inner product (they nearly are)
    onb = []
    for v in modes:
        v = np.where(imask, v, 0.0)
        for u in onb:
            v = v - dotw(v, u) * u
        onb.append(v / np.sqrt(dotw(v, v)))

    def deflate(x):
        x = np.where(imask, x, 0.0)
        for u in onb:
            x = x - dotw(x, u) * u
        return x

    def cg(apply_op, b, tol, max_iter, project=None):
        # projected preconditioned CG: when a deflation projector is given,
        # re-project after preconditioning so iterates stay in its range
        prep = (lambda r: deflate(r / diag)) if project else (lambda r: r / diag)
        x = np.zeros_like(b)
        r = b.copy()
        z = prep(r)
        p = z.copy()
        rz = float(np.sum(r * wts * z))
        bn = np.sqrt(dotw(b, b))
        if bn == 0:
            return x, 0
        for it in range(max_iter):
            ap = apply_op(p)
            pap = float(np.sum(p * wts * ap))
            if pap <= 0:
                break
            a = rz / pap
            x += a * p
            r -= a * ap
            if np.sqrt(dotw(r, r)) <= tol * bn:
                return x, it + 1
            z = prep(r)
            rz_new = float(np.sum(r * wts * z))
            p = z + (rz_new / rz) * p
            rz = rz_new
        return x, max_iter

    # --- near-kernel eigenvalues: Rayleigh-Ritz on modes + smoothed extras --
    rng = np.random.default_rng(1234)
    space = list(onb)
    for _ in range(n_extra):
        t = rng.standard_normal(4 * nn)
        y, _ = cg(lambda p: apply_l(p) + 0.5 * p, deflate(t), 1e-2, 150)
        y = deflate(y)
        for u in space:
            y = y - dotw(y, u) * u
        nrm = np.sqrt(dotw(y, y))
        if nrm > 1e-12:
            space.append(y / nrm)
    k = len(space)
    a_mat = np.empty((k, k))
    b_mat = np.empty((k, k))
    images = [apply_l(s) for s in space]
    for i in range(k):
        for j in range(i, k):
            a_mat[i, j] = a_mat[j, i] = dotw(images[i], space[j])
            b_mat[i, j] = b_mat[j, i] = dotw(space[i], space[j])
    from scipy.linalg import eigh
    evals = eigh(a_mat, b_mat, eigvals_only=True)
    near_zero = np.sort(np.abs(evals))[:m]

    # --- deflated minimum, H1-normalized ------------------------------------
    def defl_op(x):
        return deflate(apply_l(deflate(x)))

    def h1_norm2(x):
        return dotw(x, apply_h1(x))

    x = deflate(space[-1] if k > m else rng.standard_normal(4 * nn))
    x /= np.sqrt(h1_norm2(x))
    lam_old = np.inf
    lam = np.inf
    iters_used = 0
    total_inner = 0
    for it in range(max_outer):
        rhs = deflate(apply_h1(x))
        y, inner = cg(defl_op, rhs, cg_tol, 3000, project=True)
        total_inner += inner
        y = deflate(y)
        ny = np.sqrt(h1_norm2(y))
        if ny == 0:
            raise LinearizationError("inverse iteration collapsed")
        x = y / ny
        lam = dotw(apply_l(x), x) / h1_norm2(x)
        iters_used = it + 1
        if abs(lam - lam_old) <= eig_tol * max(abs(lam), 1e-30):
            break
        lam_old = lam
    else:
        raise LinearizationError("eigen-iteration stagnation")
    info = {"outer_iterations": iters_used, "inner_iterations": total_inner,
            "raw_eigs": np.sort(evals), "minimizer": _from_vec(x, grid)}
    return float(lam), near_zero, info
