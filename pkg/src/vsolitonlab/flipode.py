"""Radial flip model: power-series seed, adaptive integration, and descent.

The weighted circle action on C^{1+m} with potential u = rho * h(r),
r = |z_1|^2, rho = |z_2|^2 + ... + |z_{m+1}|^2, is a soliton metric iff

    (r h h'' - r (h')^2 + h h') h^{m-1} = r^2 h'' - r h' + h,

equivalent to the displayed determinant identity det(u_ij) = RHS checked by
``flip_residual``.  The ODE is singular at r = 0 (the h'' coefficient
r(h^m - r) vanishes); a power series h = 1 + r + a_2 r^2 + ... bridges it and
the solution continues by adaptive integration.  Everything downstream of the
integrator evaluates h through a Chebyshev refit, so residuals never reuse the
ODE's own h'' formula.

Quotient-side closed forms used by the descent (worked out once from the
block reduction at a radially symmetric point):

    moment value        tau        = (1/4) rho (h - r h')
    fiber norm          |V|_u^2    = (1/4) rho (h - r h' + r^2 h'')
    sphere eigenvalue   psi / e^y  with  psi = dPhi/dy = rho h,  y = log|zeta|^2
    radial eigenvalue   (d psi/dy) / e^y,
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from numpy.polynomial.chebyshev import Chebyshev
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .errors import CriticalValueError, DegenerateFiberError
from .flow import FlowTrajectory
from .grids import derivative_matrix


def _series_mul(a, b, K):
    out = [Fraction(0)] * (K + 1)
    for i, ai in enumerate(a):
        if ai == 0:
            continue
        for j, bj in enumerate(b):
            if i + j > K:
                break
            out[i + j] += ai * bj
    return out


def _series_pow(a, p, K):
    out = [Fraction(1)] + [Fraction(0)] * K
    for _ in range(p):
        out = _series_mul(out, a, K)
    return out


def _ode_series_defect(coeffs, m, K):
    """Coefficients of LHS - RHS of the flip ODE for a truncated series."""
    h = list(coeffs) + [Fraction(0)] * (K + 1 - len(coeffs))
    dh = [Fraction(k + 1) * h[k + 1] for k in range(K)] + [Fraction(0)]
    d2h = [Fraction(k + 1) * dh[k + 1] for k in range(K)] + [Fraction(0)]

    def shift(s):  # multiply by r
        return [Fraction(0)] + s[:K]

    lhs_core = [x - y + z for x, y, z in zip(
        shift(_series_mul(h, d2h, K)),
        shift(_series_mul(dh, dh, K)),
        _series_mul(h, dh, K),
    )]
    lhs = _series_mul(lhs_core, _series_pow(h, m - 1, K), K)
    rhs = [x - y + z for x, y, z in zip(
        shift(shift(d2h)), shift(dh), h)]
    return [x - y for x, y in zip(lhs, rhs)]


@dataclass(frozen=True)
class SeriesSolution:
    """Exact rational series coefficients of the local flip solution."""

    m: int
    coefficients: tuple

    def __post_init__(self):
        if self.coefficients[0] != 1 or self.coefficients[1] != 1:
            raise ValueError("the local solution is seeded by a0 = a1 = 1")

    @property
    def floats(self):
        return np.array([float(c) for c in self.coefficients])

    @property
    def order(self):
        return len(self.coefficients) - 1

    def trust_radius(self):
        vals = [abs(c) ** (-1.0 / k) for k, c in enumerate(self.coefficients)
                if k >= 2 and c != 0]
        return 0.5 * min(vals) if vals else np.inf

    def eval(self, r, deriv=0):
        c = np.polynomial.polynomial.Polynomial(self.floats)
        return c.deriv(deriv)(np.asarray(r, dtype=float)) if deriv else c(np.asarray(r, dtype=float))


def ode_series_seed(m, order):
    """Series coefficients a_0..a_order by order matching (exact rationals)."""
    if m < 1 or order < 2:
        raise ValueError("need m >= 1 and order >= 2")
    coeffs = [Fraction(1), Fraction(1)]
    for j in range(1, order):
        K = j + 1
        c0 = _ode_series_defect(coeffs + [Fraction(0)], m, K)[j]
        c1 = _ode_series_defect(coeffs + [Fraction(1)], m, K)[j]
        slope = c1 - c0
        if slope == 0:
            raise ValueError(f"series recursion singular at order {j + 1}")
        coeffs.append(-c0 / slope)
    return SeriesSolution(m=m, coefficients=tuple(coeffs))


def ode_second_derivative(m, r, h, dh):
    """The ODE solved for h'' (valid away from r = 0)."""
    denom = r * (h**m - r)
    return (h - r * dh) * (1.0 - dh * h ** (m - 1)) / denom


@dataclass(frozen=True)
class RadialProfile:
    """Piecewise representation of the flip profile: series near 0, Chebyshev refit beyond."""

    m: int
    series: SeriesSolution
    r_switch: float
    r_max: float
    cheb: Chebyshev
    ode_residual: float
    termination: str = "completed"

    def eval(self, r, deriv=0):
        scalar = np.isscalar(r) or np.ndim(r) == 0
        rr = np.atleast_1d(np.asarray(r, dtype=float))
        out = np.empty_like(rr)
        near = rr < self.r_switch
        if np.any(near):
            out[near] = self.series.eval(rr[near], deriv)
        if np.any(~near):
            fn = self.cheb.deriv(deriv) if deriv else self.cheb
            out[~near] = fn(rr[~near])
        return float(out[0]) if scalar else out

    def defect(self, rs):
        """Pointwise flip-ODE defect using refit derivatives (independent of the RHS)."""
        rs = np.asarray(rs, dtype=float)
        h = self.eval(rs)
        dh = self.eval(rs, 1)
        d2h = self.eval(rs, 2)
        lhs = (rs * h * d2h - rs * dh**2 + h * dh) * h ** (self.m - 1)
        rhs = rs**2 * d2h - rs * dh + h
        return lhs - rhs


def ode_integrate(m, r_max, seed=None, r_switch=0.1, tol=1e-12, cheb_degree=140):
    """Integrate the flip ODE from the series seed out to r_max."""
    if seed is None:
        seed = ode_series_seed(m, 12)
    if seed.m != m:
        raise ValueError("seed was computed for a different fiber dimension")
    r0 = min(r_switch, 0.5 * seed.trust_radius())
    y0 = [float(seed.eval(r0)), float(seed.eval(r0, 1))]

    def rhs(r, y):
        return [y[1], ode_second_derivative(m, r, y[0], y[1])]

    def ev_denominator(r, y):
        return y[0] ** m - r

    def ev_positive(r, y):
        return y[0]

    ev_denominator.terminal = True
    ev_positive.terminal = True
    sol = solve_ivp(rhs, (r0, r_max), y0, method="DOP853", rtol=tol, atol=tol,
                    dense_output=True, events=[ev_denominator, ev_positive])
    termination = "completed"
    reached = sol.t[-1]
    if sol.status == 1:
        if len(sol.t_events[0]):
            termination = f"h^m - r vanished at r={sol.t_events[0][0]:.6g}"
        else:
            termination = f"h vanished at r={sol.t_events[1][0]:.6g}"
    elif not sol.success:
        raise RuntimeError(f"flip ODE integration failed: {sol.message}")
    lo = 0.8 * r0
    samples = np.linspace(lo, reached, 6 * (cheb_degree + 1))
    values = np.where(samples < r0, seed.eval(samples), 0.0)
    inside = samples >= r0
    values[inside] = sol.sol(samples[inside])[0]
    cheb = Chebyshev.fit(samples, values, deg=cheb_degree, domain=[lo, reached])
    prof = RadialProfile(m=m, series=seed, r_switch=r0, r_max=float(reached),
                         cheb=cheb, ode_residual=0.0, termination=termination)
    rs = np.linspace(r0, reached, 400)
    resid = float(np.max(np.abs(prof.defect(rs))))
    return RadialProfile(m=m, series=seed, r_switch=r0, r_max=float(reached),
                         cheb=cheb, ode_residual=resid, termination=termination)


def flip_residual(profile, m, r_grid, rho_grid):
    """Sup defect of the determinant identity assembled from the full Hessian matrix."""
    phases = np.exp(2j * np.pi * np.arange(m) / max(m, 1) / 3.0)
    sup = 0.0
    field = np.empty((len(r_grid), len(rho_grid)))
    for i, r in enumerate(r_grid):
        h = float(profile.eval(r))
        dh = float(profile.eval(r, 1))
        d2h = float(profile.eval(r, 2))
        for j, rho in enumerate(rho_grid):
            z1 = np.sqrt(r)
            zs = np.sqrt(rho / m) * phases
            U = np.zeros((m + 1, m + 1), dtype=complex)
            U[0, 0] = rho * (r * d2h + dh)
            for k in range(m):
                U[0, k + 1] = dh * np.conj(z1) * zs[k]
                U[k + 1, 0] = dh * z1 * np.conj(zs[k])
                U[k + 1, k + 1] = h
            if np.min(np.linalg.eigvalsh(U)) <= 0:
                raise DegenerateFiberError(
                    f"degenerate Hessian block at r={r:.6g}, rho={rho:.6g}")
            det = np.linalg.det(U).real
            rhs = (U[0, 0].real * r
                   - sum((U[0, k + 1] * z1 * np.conj(zs[k])).real * 2 for k in range(m))
                   + h * rho)
            field[i, j] = det - rhs
            sup = max(sup, abs(field[i, j]))
    return sup, field


def _moment_factor(profile, r):
    # G = h - r h' (so tau = rho G / 4)
    return profile.eval(r) - np.asarray(r) * profile.eval(r, 1)


@dataclass(frozen=True)
class FlipDescentResult:
    trajectory: FlowTrajectory
    c: float
    c_spread: float
    krf_residual_sphere: float
    krf_residual_radial: float
    tau_values: np.ndarray
    y_nodes: np.ndarray


def flip_descend(profile, m, tau_range, n_tau=9, y_range=(-1.5, 0.2), n_y=41):
    """Reduced quotient metrics on the regular side, with the flow-time constant.

    tau_range must avoid the critical value 0; needs at least 3 tau samples
    for the time derivative.  Returns the descended trajectory (radial-plane
    profiles psi(y) = dPhi/dy) and the discrete flow residual.
    """
    t_lo, t_hi = tau_range
    if n_tau < 3:
        raise ValueError("need at least 3 tau samples for the flow derivative")
    if t_lo <= 0.0 <= t_hi or t_lo == 0.0 or t_hi == 0.0:
        raise CriticalValueError("tau range touches the critical value 0")
    if t_lo < 0:
        raise CriticalValueError("the descended flow lives on the tau > 0 side")
    taus = np.linspace(t_lo, t_hi, n_tau)
    ys = np.linspace(y_range[0], y_range[1], n_y)
    ey = np.exp(ys)
    r_hi = 0.999 * profile.r_max

    psi = np.empty((n_y, n_tau))
    vu2 = np.empty_like(psi)
    for j, tau in enumerate(taus):
        for i, y in enumerate(ys):
            f = lambda r: 4.0 * tau * r / _moment_factor(profile, r) - ey[i]
            if f(r_hi) < 0:
                raise ValueError("y range exceeds the integrated profile domain")
            r = brentq(f, 1e-14, r_hi, xtol=1e-15, rtol=8.9e-16)
            h = float(profile.eval(r))
            dh = float(profile.eval(r, 1))
            d2h = float(profile.eval(r, 2))
            G = h - r * dh
            D = h - r * dh + r**2 * d2h
            rho = 4.0 * tau / G
            psi[i, j] = rho * h
            vu2[i, j] = 0.25 * rho * D

    Dy = derivative_matrix(ys, 1)
    Dtau = derivative_matrix(taus, 1)
    lam_sph = psi / ey[:, None]
    dpsi = Dy @ psi
    if np.any(dpsi <= 0):
        raise DegenerateFiberError("descended radial metric is not positive")
    lam_rad = dpsi / ey[:, None]
    Lam = np.log(dpsi) + (m - 1) * np.log(psi) - m * ys[:, None]
    dLam = Dy @ Lam
    d2Lam = Dy @ dLam

    c_field = -0.25 * vu2 * (Lam @ Dtau.T)
    c = float(np.mean(c_field))
    c_spread = float(np.max(c_field) - np.min(c_field))

    res_sph = c * (lam_sph @ Dtau.T) - dLam / ey[:, None]
    res_rad = c * (lam_rad @ Dtau.T) - d2Lam / ey[:, None]

    times = taus / c
    order = np.argsort(times)
    R_cols = np.empty_like(psi)
    for j in range(n_tau):
        R_cols[:, j] = -2.0 * ((Dy @ dLam[:, j]) / dpsi[:, j]
                               + (m - 1) * dLam[:, j] / psi[:, j])
    traj = FlowTrajectory(
        model="radial-plane", nodes=ys, times=times[order],
        profiles=psi[:, order], scalar_curvature_history=R_cols[:, order],
        lam=0.0, n_q=m,
    )
    return FlipDescentResult(
        trajectory=traj, c=c, c_spread=c_spread,
        krf_residual_sphere=float(np.max(np.abs(res_sph))),
        krf_residual_radial=float(np.max(np.abs(res_rad))),
        tau_values=taus, y_nodes=ys,
    )
