"""Reduced dynamics on the two-vortex moduli space.

The symmetric sector (centers at +-r e^{i theta}) carries the metric
ds^2 = F(r)^2 dr^2 + G(r)^2 dtheta^2, sampled from zero-mode Gram matrices
and normalized by twice the single-vortex mass so that F -> 1, G -> r at
large separation.  Near coincidence the polar chart degenerates; there the
dynamics runs in the smooth chart w = r^2 e^{2i theta}, in which the cone
metric (cr)^2(dr^2 + r^2 dtheta^2) becomes flat, so head-on geodesics pass
straight through the tip (right-angle scattering in physical space).

The potential table u(r) = (1/8) int (1-|phi|^2)^2 drives the near-critical
Hamiltonian flow: coupling 1 + l eps^2 adds the force -l u'(r) (repulsive
for l = +1, attractive for l = -1) after the same mass normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .grid import integrate, square_grid_2d
from .linearization import zero_modes
from .vortex import solve_vortex

TWO_PI = 2.0 * np.pi


class ModuliError(Exception):
    pass


@dataclass
class ReducedMetric:
    """Radial metric and potential tables for the symmetric two-vortex sector.

    r is the half-separation (centers at +-r).  F, G are normalized by
    sqrt(2 m1) with m1 the single-vortex mass; u is the potential divided by
    the same 2 m1, which keeps the Hamiltonian flow in physical slow time.
    """

    r: np.ndarray
    F: np.ndarray
    G: np.ndarray
    u: np.ndarray
    mass_scale: float            # 2 m1, the normalization applied
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        order = np.argsort(self.r)
        self.r = self.r[order]
        self.F = np.asarray(self.F, dtype=float)[order]
        self.G = np.asarray(self.G, dtype=float)[order]
        self.u = np.asarray(self.u, dtype=float)[order]
        if np.any(self.F <= 0) or np.any(self.G <= 0):
            raise ModuliError("metric coefficients must be positive")
        r0 = self.r[0]
        # C1 cone extension below the smallest resolved sample: F/r and G/r^2
        # approach a common tip constant (smoothness of the metric at the
        # coincidence point), matching value and slope at r0
        a0, b0 = self.F[0] / r0, self.G[0] / r0 ** 2
        self._tip = 0.5 * (a0 + b0)
        self._r0 = r0
        fp = PchipInterpolator(self.r, self.F)
        gp = PchipInterpolator(self.r, self.G)
        self._a_slope = (fp(r0, 1) - a0) / r0          # d(F/r)/dr at r0
        self._b_slope = (gp(r0, 1) - 2.0 * b0 * r0) / r0 ** 2
        self._interp_F = fp
        self._interp_G = gp
        self._interp_u = PchipInterpolator(self.r, self.u)
        self._du = self._interp_u.derivative()

    def _tip_coeff(self, r, v0, s0):
        # cubic in r/r0 from the tip constant to (v0, s0) at r0, flat at 0
        x = r / self._r0
        val0 = self._tip
        d = v0 - val0
        return val0 + (3.0 * d - s0 * self._r0) * x ** 2 + \
            (s0 * self._r0 - 2.0 * d) * x ** 3

    def F_at(self, r):
        r = np.asarray(r, dtype=float)
        out = np.where(r >= self.r[-1], self._interp_F(self.r[-1]) +
                       0.0 * r, np.nan)
        mid = (r >= self._r0) & (r < self.r[-1])
        out = np.where(mid, self._interp_F(np.clip(r, self._r0, self.r[-1])), out)
        lo = r < self._r0
        if np.any(lo):
            a = self._tip_coeff(np.where(lo, r, self._r0),
                                self.F[0] / self._r0, self._a_slope)
            out = np.where(lo, a * r, out)
        return out if out.shape else float(out)

    def G_at(self, r):
        r = np.asarray(r, dtype=float)
        hi = r >= self.r[-1]
        out = np.where(hi, self._interp_G(self.r[-1]) * r /
                       self.r[-1], np.nan)
        mid = (r >= self._r0) & ~hi
        out = np.where(mid, self._interp_G(np.clip(r, self._r0, self.r[-1])), out)
        lo = r < self._r0
        if np.any(lo):
            b = self._tip_coeff(np.where(lo, r, self._r0),
                                self.G[0] / self._r0 ** 2, self._b_slope)
            out = np.where(lo, b * r * r, out)
        return out if out.shape else float(out)

    def u_at(self, r):
        r = np.asarray(r, dtype=float)
        rc = np.clip(r, self.r[0], self.r[-1])
        out = self._interp_u(rc)
        # below the first sample freeze the value (unresolved core region);
        # beyond the last, freeze as well (force -> 0)
        return out if out.shape else float(out)

    def du_at(self, r):
        r = np.asarray(r, dtype=float)
        inside = (r > self.r[0]) & (r < self.r[-1])
        out = np.where(inside, self._du(np.clip(r, self.r[0], self.r[-1])), 0.0)
        return out if out.shape else float(out)


def _symmetric_pair_metric_entry(r, grid, mu=None, tolerance=1e-10):
    """Solve the (+-r, 0) pair and return (g_rr, g_thth, u4) raw (unnormalized)."""
    cfg = solve_vortex([complex(r, 0.0), complex(-r, 0.0)], grid, mu=mu,
                       tolerance=tolerance, snap=False)
    basis = zero_modes(cfg, tolerance=tolerance)
    gram = basis.gram
    if basis.chart == "centers":
        # curve r -> (+-r, 0): velocity (1,0,-1,0); theta-curve at theta=0:
        # velocity r*(0,1,0,-1); chart order (z1x, z1y, z2x, z2y)
        vr = np.array([1.0, 0.0, -1.0, 0.0])
        vt = np.array([0.0, r, 0.0, -r])
    else:
        # spoly chart (c1_re, c1_im, c0_re, c0_im) with p = z^2 + c1 z + c0;
        # c1 = 0, c0 = -r^2 e^{2i theta}: d/dr = (0,0,-2r,0),
        # d/dtheta = (0,0,0,-2r^2)
        vr = np.array([0.0, 0.0, -2.0 * r, 0.0])
        vt = np.array([0.0, 0.0, 0.0, -2.0 * r * r])
    g_rr = float(vr @ gram @ vr)
    g_tt = float(vt @ gram @ vt)
    one_minus = 1.0 - np.abs(cfg.phi.values) ** 2
    u4 = 0.125 * integrate(one_minus ** 2, grid)
    return g_rr, g_tt, u4, cfg, basis


def single_vortex_mass(grid, tolerance=1e-10):
    """L2 norm squared of one translation zero mode of the 1-vortex."""
    cfg = solve_vortex([0j], grid, tolerance=tolerance)
    basis = zero_modes(cfg, tolerance=tolerance)
    return 0.5 * float(np.trace(basis.gram))


def sample_reduced_metric(r_values, half_width=9.0, spacing=0.15,
                          tolerance=1e-10, progress=None) -> ReducedMetric:
    """Build the reduced metric and potential tables by solving the
    symmetric pair at each half-separation."""
    grid = square_grid_2d(half_width, spacing)
    mass = 2.0 * single_vortex_mass(grid, tolerance=tolerance)
    rs, Fs, Gs, us = [], [], [], []
    for r in sorted(r_values):
        if r < spacing:
            raise ModuliError(f"half-separation {r} below grid resolution")
        g_rr, g_tt, u4, _, _ = _symmetric_pair_metric_entry(
            r, grid, tolerance=tolerance)
        rs.append(r)
        Fs.append(np.sqrt(g_rr / mass))
        Gs.append(np.sqrt(g_tt / mass))
        us.append(u4 / mass)
        if progress:
            progress(r, Fs[-1], Gs[-1], us[-1])
    return ReducedMetric(np.array(rs), np.array(Fs), np.array(Gs),
                         np.array(us), mass,
                         {"half_width": half_width, "spacing": spacing})


# ---------------------------------------------------------------------------
# geodesic / Hamiltonian flow
# ---------------------------------------------------------------------------

@dataclass
class GeodesicState:
    r: float
    theta: float
    p_r: float
    p_theta: float
    tau: float = 0.0


def _hamiltonian_polar(metric: ReducedMetric, r, p_r, p_theta, sign_l, eps2):
    F = metric.F_at(r)
    G = metric.G_at(r)
    h = 0.5 * (p_r ** 2 / F ** 2 + p_theta ** 2 / G ** 2)
    if sign_l:
        h += sign_l * metric.u_at(r)
    return h


def _polar_rhs(metric, y, sign_l, fd_step):
    r, th, pr, pt = y
    F = metric.F_at(r)
    G = metric.G_at(r)
    # dH/dr by centered difference of the interpolated coefficients
    d = fd_step
    hp = _hamiltonian_polar(metric, r + d, pr, pt, 0, 0)
    hm = _hamiltonian_polar(metric, r - d, pr, pt, 0, 0)
    dhdr = (hp - hm) / (2 * d)
    if sign_l:
        dhdr += sign_l * metric.du_at(r)
    return np.array([pr / F ** 2, pt / G ** 2, -dhdr, 0.0])


def _w_metric(metric: ReducedMetric, w1, w2):
    """Metric components in the smooth chart w = r^2 e^{2 i theta}."""
    rho = np.hypot(w1, w2)
    r = np.sqrt(max(rho, 1e-300))
    F = metric.F_at(r)
    G = metric.G_at(r)
    if rho < 1e-14:
        a = metric._tip
        g = 0.25 * a * a
        return np.array([[g, 0.0], [0.0, g]])
    c2, s2 = w1 / rho, w2 / rho
    # J = d(w1,w2)/d(r,theta); g_w = J^{-T} diag(F^2, G^2) J^{-1}
    jinv = np.array([[c2 / (2 * r), s2 / (2 * r)],
                     [-s2 / (2 * r * r), c2 / (2 * r * r)]])
    return jinv.T @ np.diag([F * F, G * G]) @ jinv


def _hamiltonian_w(metric, w, pw, sign_l):
    g = _w_metric(metric, w[0], w[1])
    ginv = np.linalg.inv(g)
    h = 0.5 * pw @ ginv @ pw
    if sign_l:
        h += sign_l * metric.u_at(np.sqrt(np.hypot(w[0], w[1])))
    return h


def _w_rhs(metric, y, sign_l, fd_step):
    w = y[:2]
    pw = y[2:]
    g = _w_metric(metric, w[0], w[1])
    ginv = np.linalg.inv(g)
    dw = ginv @ pw
    dp = np.empty(2)
    for k in range(2):
        e = np.zeros(2)
        e[k] = fd_step
        hp = _hamiltonian_w(metric, w + e, pw, sign_l)
        hm = _hamiltonian_w(metric, w - e, pw, sign_l)
        dp[k] = -(hp - hm) / (2 * fd_step)
    return np.concatenate([dw, dp])


def _polar_to_w(y):
    r, th, pr, pt = y
    w1, w2 = r * r * np.cos(2 * th), r * r * np.sin(2 * th)
    c2, s2 = np.cos(2 * th), np.sin(2 * th)
    jinv = np.array([[c2 / (2 * r), s2 / (2 * r)],
                     [-s2 / (2 * r * r), c2 / (2 * r * r)]])
    pw = jinv.T @ np.array([pr, pt])
    return np.array([w1, w2, pw[0], pw[1]])


def _w_to_polar(y, theta_ref=None):
    w1, w2, pw1, pw2 = y
    rho = np.hypot(w1, w2)
    r = np.sqrt(rho)
    th = 0.5 * np.arctan2(w2, w1)
    if theta_ref is not None:
        # choose the branch (theta vs theta + pi) closest to the reference
        while th - theta_ref > np.pi / 2:
            th -= np.pi
        while th - theta_ref < -np.pi / 2:
            th += np.pi
    c2, s2 = np.cos(2 * th), np.sin(2 * th)
    jac = np.array([[2 * r * c2, -2 * r * r * s2],
                    [2 * r * s2, 2 * r * r * c2]])
    p = jac.T @ np.array([pw1, pw2])
    return np.array([r, th, p[0], p[1]])


def _rk4(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_reduced(metric: ReducedMetric, state: GeodesicState, tau_span,
                      dtau=1e-3, sign_l=0, eps=0.0, r_switch=0.5,
                      record_every=10):
    """RK4 flow of H = (p_r^2/F^2 + p_theta^2/G^2)/2 [+ l u(r)].

    Inside r < r_switch the state moves through the smooth chart
    w = r^2 e^{2 i theta}, where the cone tip is regular; the polar chart is
    singular exactly where right-angle scattering happens.

    Returns a trajectory dict of arrays (tau, r, theta, p_r, p_theta, H).
    """
    if state.r > metric.r[-1]:
        raise ModuliError("initial separation outside the metric table")
    fd = 1e-3 * (metric.r[-1] - metric.r[0])
    y = np.array([state.r, state.theta, state.p_r, state.p_theta])
    tau = state.tau
    tau_end = state.tau + tau_span
    rows = [(tau, *y, _hamiltonian_polar(metric, y[0], y[2], y[3],
                                         sign_l, eps))]
    in_w = state.r < r_switch
    yw = _polar_to_w(y) if in_w else None
    theta_ref = y[1]
    steps = 0
    n_steps = int(np.ceil(tau_span / dtau))
    dtau = tau_span / max(n_steps, 1)
    while steps < n_steps:
        if in_w:
            yw = _rk4(lambda s: _w_rhs(metric, s, sign_l, fd * fd), yw, dtau)
            rho = np.hypot(yw[0], yw[1])
            if rho > (1.15 * r_switch) ** 2:
                y = _w_to_polar(yw, theta_ref)
                in_w = False
            else:
                y = _w_to_polar(yw, theta_ref)
        else:
            y = _rk4(lambda s: _polar_rhs(metric, s, sign_l, fd), y, dtau)
            if y[0] < r_switch:
                yw = _polar_to_w(y)
                in_w = True
        theta_ref = y[1]
        if y[0] > metric.r[-1]:
            # leaving the table: freeze at the boundary and stop
            rows.append((tau + dtau, *y,
                         _hamiltonian_polar(metric, min(y[0], metric.r[-1]),
                                            y[2], y[3], sign_l, eps)))
            break
        tau += dtau
        steps += 1
        if steps % record_every == 0 or steps == n_steps:
            rows.append((tau, *y, _hamiltonian_polar(metric, y[0], y[2],
                                                     y[3], sign_l, eps)))
    arr = np.array(rows)
    return {"tau": arr[:, 0], "r": arr[:, 1], "theta": arr[:, 2],
            "p_r": arr[:, 3], "p_theta": arr[:, 4], "H": arr[:, 5]}


def geodesic_integrate(metric, state, tau_span, dtau=1e-3, **kw):
    return integrate_reduced(metric, state, tau_span, dtau, sign_l=0, **kw)


def hamiltonian_integrate(metric, state, sign_l, eps=0.0, tau_span=1.0,
                          dtau=1e-3, **kw):
    """Near-critical flow: coupling 1 + l eps^2 contributes the potential
    force -l u'(r) in slow time (the eps^2 scale is already divided out)."""
    if sign_l not in (-1, 1):
        raise ModuliError("sign must be +1 or -1")
    return integrate_reduced(metric, state, tau_span, dtau, sign_l=sign_l,
                             eps=eps, **kw)


def scattering_angles(traj):
    """Incoming and outgoing pair-axis angles of a scattering trajectory."""
    th_in = traj["theta"][0]
    th_out = traj["theta"][-1]
    return th_in, th_out


# ---------------------------------------------------------------------------
# 1+1D wave map into the reduced moduli space
# ---------------------------------------------------------------------------

@dataclass
class WaveMapState:
    """Wave map q(zeta) into the w-chart of the reduced moduli space.

    q has shape (n, 2) (w-chart components per zeta node), qdot likewise.
    Boundary nodes stay pinned at their initial (constant) values.
    """

    zeta: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    tau: float = 0.0

    def __post_init__(self):
        self.zeta = np.asarray(self.zeta, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.qdot = np.asarray(self.qdot, dtype=float)
        if self.q.shape != (len(self.zeta), 2):
            raise ModuliError("q must have shape (n_zeta, 2)")

    @classmethod
    def from_polar(cls, zeta, r, theta, rdot=None, thetadot=None, tau=0.0):
        r = np.asarray(r, dtype=float)
        theta = np.asarray(theta, dtype=float)
        q = np.stack([r ** 2 * np.cos(2 * theta),
                      r ** 2 * np.sin(2 * theta)], axis=1)
        qdot = np.zeros_like(q)
        if rdot is not None:
            c2, s2 = np.cos(2 * theta), np.sin(2 * theta)
            qdot[:, 0] = 2 * r * rdot * c2
            qdot[:, 1] = 2 * r * rdot * s2
            if thetadot is not None:
                qdot[:, 0] += -2 * r ** 2 * s2 * thetadot
                qdot[:, 1] += 2 * r ** 2 * c2 * thetadot
        return cls(np.asarray(zeta, dtype=float), q, qdot, tau)

    def polar(self):
        rho = np.hypot(self.q[:, 0], self.q[:, 1])
        return np.sqrt(rho), 0.5 * np.arctan2(self.q[:, 1], self.q[:, 0])


def _christoffel_w(metric, w, fd):
    """Christoffel symbols in the w-chart by centered differences of g_w."""
    g0 = _w_metric(metric, w[0], w[1])
    dg = np.empty((2, 2, 2))
    for k in range(2):
        e = np.zeros(2)
        e[k] = fd
        gp = _w_metric(metric, *(w + e))
        gm = _w_metric(metric, *(w - e))
        dg[k] = (gp - gm) / (2 * fd)
    ginv = np.linalg.inv(g0)
    gamma = np.empty((2, 2, 2))
    for a in range(2):
        for m in range(2):
            for l in range(2):
                s = 0.0
                for b in range(2):
                    s += ginv[a, b] * (dg[m][l, b] + dg[l][m, b] - dg[b][m, l])
                gamma[a, m, l] = 0.5 * s
    return gamma


def wave_map_accel(metric: ReducedMetric, state: WaveMapState, fd=None):
    """Acceleration d^2 q/d tau^2 of the wave map equation at each node."""
    z = state.zeta
    dz = z[1] - z[0]
    q = state.q
    qd = state.qdot
    if fd is None:
        fd = 1e-3 * (metric.r[-1] - metric.r[0])
    acc = np.zeros_like(q)
    qzz = np.zeros_like(q)
    qz = np.zeros_like(q)
    qzz[1:-1] = (q[2:] - 2 * q[1:-1] + q[:-2]) / dz ** 2
    qz[1:-1] = (q[2:] - q[:-2]) / (2 * dz)
    for i in range(1, len(z) - 1):
        gamma = _christoffel_w(metric, q[i], fd * fd)
        quad = np.einsum("aml,m,l->a", gamma, qd[i], qd[i]) - \
            np.einsum("aml,m,l->a", gamma, qz[i], qz[i])
        acc[i] = qzz[i] - quad
    return acc


def wave_map_step(metric: ReducedMetric, state: WaveMapState, dtau):
    """One leapfrog step of the wave map; boundary nodes pinned; CFL
    requires dtau <= dzeta."""
    dz = state.zeta[1] - state.zeta[0]
    if dtau > dz + 1e-15:
        raise ModuliError(f"CFL violation: dtau={dtau} > dzeta={dz}")
    # velocity-dependent force handled by one predictor/corrector pass
    a0 = wave_map_accel(metric, state)
    q_new = state.q + dtau * state.qdot + 0.5 * dtau ** 2 * a0
    q_new[0] = state.q[0]
    q_new[-1] = state.q[-1]
    qd_pred = state.qdot + dtau * a0
    trial = WaveMapState(state.zeta, q_new, qd_pred, state.tau + dtau)
    a1 = wave_map_accel(metric, trial)
    qd_new = state.qdot + 0.5 * dtau * (a0 + a1)
    qd_new[0] = 0.0
    qd_new[-1] = 0.0
    return WaveMapState(state.zeta, q_new, qd_new, state.tau + dtau)


def wave_map_energy(metric: ReducedMetric, state: WaveMapState):
    """int g(q_tau, q_tau) + g(q_zeta, q_zeta) dzeta (conserved quantity)."""
    z = state.zeta
    dz = z[1] - z[0]
    qz = np.zeros_like(state.q)
    qz[1:-1] = (state.q[2:] - state.q[:-2]) / (2 * dz)
    total = 0.0
    for i in range(len(z)):
        g = _w_metric(metric, state.q[i, 0], state.q[i, 1])
        w = dz * (0.5 if i in (0, len(z) - 1) else 1.0)
        total += w * (state.qdot[i] @ g @ state.qdot[i] +
                      qz[i] @ g @ qz[i])
    return total


# ---------------------------------------------------------------------------
# d'Alembert source utility
# ---------------------------------------------------------------------------

def dalembert_source(w_fn, t, z, n_quad=200):
    """Solution at (t, z) of f_tt - f_zz = d_t w with zero initial data:

        f = -1/2 int_{z-t}^{z+t} w(0,s) ds
            + 1/2 int_0^t w(s, z-t+s) ds + 1/2 int_0^t w(s, z+t-s) ds

    i.e. the time derivative on the source is traded for line integrals
    along the initial slice and the two characteristics.  ``w_fn(t, z)``
    must cover the dependence cone; quadrature is trapezoid.
    """
    t = float(t)
    z = float(z)
    if t < 0:
        raise ModuliError("needs t >= 0")
    if t == 0:
        return 0.0
    s = np.linspace(z - t, z + t, 2 * n_quad + 1)
    base = np.trapz(w_fn(np.zeros_like(s), s), s)
    sig = np.linspace(0.0, t, n_quad + 1)
    left = np.trapz(w_fn(sig, z - t + sig), sig)
    right = np.trapz(w_fn(sig, z + t - sig), sig)
    return -0.5 * base + 0.5 * left + 0.5 * right


def dalembert_source_from_samples(w_samples, t_grid, z_grid, t, z,
                                  n_quad=200):
    """Same as `dalembert_source` with w given by samples on a (t, z) grid,
    interpolated bilinearly; raises if the dependence cone leaves the
    sampled domain."""
    t_grid = np.asarray(t_grid)
    z_grid = np.asarray(z_grid)
    if t > t_grid[-1] or t < t_grid[0] or z - t < z_grid[0] or \
            z + t > z_grid[-1]:
        raise ModuliError("dependence cone exceeds the sampled domain")

    def w_fn(tt, zz):
        tt = np.clip(tt, t_grid[0], t_grid[-1])
        zz = np.clip(zz, z_grid[0], z_grid[-1])
        it = np.clip(np.searchsorted(t_grid, tt) - 1, 0, len(t_grid) - 2)
        iz = np.clip(np.searchsorted(z_grid, zz) - 1, 0, len(z_grid) - 2)
        ft = (tt - t_grid[it]) / (t_grid[it + 1] - t_grid[it])
        fz = (zz - z_grid[iz]) / (z_grid[iz + 1] - z_grid[iz])
        return ((1 - ft) * (1 - fz) * w_samples[it, iz]
                + ft * (1 - fz) * w_samples[it + 1, iz]
                + (1 - ft) * fz * w_samples[it, iz + 1]
                + ft * fz * w_samples[it + 1, iz + 1])

    return dalembert_source(w_fn, t, z, n_quad)
