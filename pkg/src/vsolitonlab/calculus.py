"""Discrete invariant calculus in moment-map coordinates (torus rank 1).

Every identity of the invariant Kahler calculus is exposed as a residual
operator: a correct metric chart drives each residual to zero at second order
under grid refinement, and exact model charts give exact zeros.

Sign conventions (fixed once, validated by the oracle tests):

* omega = (i/2) h dz^dzbar - dtau^theta, with theta(V) = 1 and W := w^{-1}
  = |V|^2 the squared field norm.
* For an invariant phi, with q := W dphi/dtau (= JV(phi)),

    ddbar(phi) = [phi_zzbar + (1/4) q h_tau] dz^dzbar
               + (1/2) dq/dz   dz^(w dtau + i theta)
               - (1/2) dq/dzbar dzbar^(w dtau - i theta)
               + (i/2) dq/dtau dtau^theta.

  (The mixed-term sign is pinned by i_V omega_u = d(mu + q/4).)
* d(theta) = i { -(1/2) h_tau dz^dzbar - w_z dtau^dz + w_zbar dtau^dzbar }.
* Laplacian (real convention): lap(phi) = h^{-1}(4 phi_zzbar + W phi_tau h_tau)
  + (W phi_tau)_tau.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline, PchipInterpolator

from .charts import FormComponents, InvariantMetricChart, InvariantScalar, tau_scalar
from .errors import DegenerateFiberError, GridMismatchError
from .grids import ChartGrid, require_finite


def interior_sup(values, grid):
    """Sup-norm over tau rows that are not fixed-point endpoints."""
    keep = np.ones(grid.nt, dtype=bool)
    for r in grid.fixed_point_rows():
        keep[r] = False
    return float(np.max(np.abs(np.asarray(values)[:, keep])))


def _jv_field(metric, phi):
    # q = JV(phi) = W dphi/dtau
    return metric.w_inv * metric.grid.d_tau(phi.values)


def hessian_invariant(metric, phi):
    """Component decomposition of ddbar(phi) for an invariant phi."""
    metric.check_scalar(phi)
    g = metric.grid
    q = _jv_field(metric, phi)
    require_finite(q, "JV(phi)")
    c4 = 0.5j * g.d_tau(q)
    if g.n_base == 0:
        return FormComponents(grid=g, dtau_theta=c4)
    w, mask = metric.w(extrapolated=True)
    dqz = g.dz(q)
    c1 = g.dz_dzbar(phi.values) + 0.25 * q * g.d_tau(metric.h)
    c2 = -0.5 * w * dqz
    c3 = 0.5 * w * dqz
    c5 = 0.5j * dqz
    c6 = 0.5j * dqz
    for c in (c1, c2, c3, c5):
        require_finite(c, "hessian component")
    return FormComponents(
        grid=g,
        dz_dzbar=c1.astype(complex),
        dtau_dz=c2.astype(complex),
        dtau_dzbar=c3.astype(complex),
        dtau_theta=c4,
        dz_theta=c5,
        dzbar_theta=c6,
        boundary_extrapolated=mask,
    )


def laplacian_invariant(metric, phi):
    """Invariant Laplacian of phi with respect to the chart metric."""
    metric.check_scalar(phi)
    g = metric.grid
    pt = g.d_tau(phi.values)
    vals = g.d_tau(metric.w_inv * pt)
    if g.n_base == 1:
        vals = vals + (4.0 * g.dz_dzbar(phi.values) + metric.w_inv * pt * g.d_tau(metric.h)) / metric.h
    require_finite(vals, "laplacian")
    return InvariantScalar(g, vals)


def trace_of_form(metric, form):
    """Metric trace of a hessian-type form; equals the Laplacian on ddbar(phi)."""
    g = metric.grid
    tr = 2.0 * np.imag(form.dtau_theta)
    if g.n_base == 1 and form.dz_dzbar is not None:
        tr = tr + 4.0 * np.real(form.dz_dzbar) / metric.h
    return InvariantScalar(g, tr)


def dtheta_components(metric):
    """The curvature 2-form d(theta) of the connection coframe."""
    g = metric.grid
    if np.any((metric.w_inv == 0.0) & ~_fixed_mask(g)):
        raise DegenerateFiberError("w_inv vanishes at an interior node")
    if g.n_base == 0:
        return FormComponents(grid=g)
    w, mask = metric.w(extrapolated=True)
    dwz = g.dz(w)
    out = FormComponents(
        grid=g,
        dz_dzbar=-0.5j * g.d_tau(metric.h).astype(complex),
        dtau_dz=-1j * dwz.astype(complex),
        dtau_dzbar=1j * dwz.astype(complex),
        boundary_extrapolated=mask,
    )
    out.check_reality()
    return out


def _fixed_mask(grid):
    m = np.zeros(grid.shape, dtype=bool)
    for r in grid.fixed_point_rows():
        m[:, r] = True
    return m


def exterior_derivative(form):
    """Coefficient of dtau^dz^dzbar in d(form) for a (c1, c2, c3)-type 2-form."""
    g = form.grid
    if form.dz_dzbar is None:
        return np.zeros(g.shape, dtype=complex)
    e = g.d_tau(form.dz_dzbar)
    if form.dtau_dz is not None:
        e = e + g.dzbar_of_dz_phased(form.dtau_dz)
    if form.dtau_dzbar is not None:
        e = e - g.dzbar_of_dz_phased(form.dtau_dzbar)
    return e


def integrability_residuals(metric):
    """Residuals of the three frame-integrability conditions (rank 1).

    The first two reduce to self-symmetries for one torus factor and are
    returned as exact zeros; the third is 4 w_zzbar + h_tautau.
    """
    g = metric.grid
    zero = InvariantScalar(g, np.zeros(g.shape))
    if g.n_base == 0:
        return zero, zero, zero
    w, _ = metric.w(extrapolated=True)
    r3 = 4.0 * g.dz_dzbar(w) + g.d_tau2(metric.h)
    return zero, zero, InvariantScalar(g, r3)


def hamiltonian_laplacian_residual(metric):
    """Residual of W d(log det h)/dtau - lap(tau) + dW/dtau."""
    g = metric.grid
    logdet = np.zeros(g.shape) if metric.h is None else np.log(metric.h)
    lap_tau = laplacian_invariant(metric, tau_scalar(g))
    res = metric.w_inv * g.d_tau(logdet) - lap_tau.values + g.d_tau(metric.w_inv)
    return InvariantScalar(g, res)


@dataclass(frozen=True)
class MeanCurvatureResult:
    """Level mean curvature in the display scaling H = |V|^2 * (unit-normal H)."""

    tau: float
    values: np.ndarray        # -|V| (W dlogdet(h)/dtau + dW/dtau / 2)
    alt_values: np.ndarray    # |V| (Hess_tau(nu,nu) - lap(tau)), the level-set route
    residual: np.ndarray


def mean_curvature(metric, tau_index):
    """Mean curvature of the moment level set, by two independent routes."""
    g = metric.grid
    j = int(tau_index)
    if j in g.fixed_point_rows():
        raise DegenerateFiberError("mean curvature is undefined at a fixed-point level")
    W = metric.w_inv
    V = np.sqrt(W[:, j])
    Wt = g.d_tau(W)[:, j]
    logdet = np.zeros(g.shape) if metric.h is None else np.log(metric.h)
    Lt = g.d_tau(logdet)[:, j]
    values = -V * (W[:, j] * Lt + 0.5 * Wt)
    lap_tau = laplacian_invariant(metric, tau_scalar(g)).values[:, j]
    alt = V * (0.5 * Wt - lap_tau)
    return MeanCurvatureResult(tau=float(g.tau_nodes[j]), values=values, alt_values=alt,
                               residual=values - alt)


def hamiltonian_shift(u, metric0, mu):
    """Hamiltonian of the action for omega_u = omega_0 + (i/2) ddbar(u)."""
    metric0.check_scalar(u)
    metric0.check_scalar(mu)
    shifted = mu.values + 0.25 * _jv_field(metric0, u)
    return InvariantScalar(metric0.grid, shifted)


def volume_ratio(metric):
    """det(h) * det(w)^{-1} = det(h) * w_inv, the log-volume density driver."""
    vals = metric.w_inv if metric.h is None else metric.h * metric.w_inv
    return InvariantScalar(metric.grid, np.array(vals))


def shifted_metric_chart(metric0, u, tau_margin=0.0):
    """Chart of omega_u in its own moment coordinates (monotone reindexing).

    Returns the new chart together with the shifted moment field.  Requires a
    fixed-point-free chart; the new tau grid is the largest interval of
    shifted moment values common to all base points, shrunk by tau_margin.
    """
    g = metric0.grid
    if g.fixed_point_rows():
        raise DegenerateFiberError("reindexing across fixed points is not supported")
    metric0.check_scalar(u)
    q = _jv_field(metric0, u)
    b = 0.25 * g.d_tau(q)
    Wu = metric0.w_inv * (1.0 + b)
    if np.any(Wu <= 0):
        raise DegenerateFiberError("shifted metric is degenerate (1 + JV(JV u)/4 <= 0)")
    mu_new = g.tau_nodes[None, :] + 0.25 * q
    if np.any(g.d_tau(mu_new) <= 0):
        raise ValueError("shifted moment map is not monotone in tau")
    if g.n_base == 1:
        A = g.dz_dzbar(u.values) + 0.25 * q * g.d_tau(metric0.h)
        w0, _ = metric0.w(extrapolated=True)
        p = np.sqrt(w0) * g.dz(q) / 2.0
        h_full = metric0.h + A
        if np.any(h_full <= 0) or np.any(h_full * (1.0 + b) - p**2 <= 0):
            raise ValueError("shifted metric is not positive")
        h_new = h_full - p**2 / (1.0 + b)
    else:
        h_new = None
    lo = float(np.max(mu_new[:, 0])) + tau_margin
    hi = float(np.min(mu_new[:, -1])) - tau_margin
    tau_new = np.linspace(lo, hi, g.nt)
    grid_new = ChartGrid(g.base_kind, g.base_nodes, tau_new)
    W_re = np.empty(grid_new.shape)
    h_re = np.empty(grid_new.shape) if h_new is not None else None
    for i in range(g.nx):
        W_re[i] = PchipInterpolator(mu_new[i], Wu[i])(tau_new)
        if h_re is not None:
            h_re[i] = PchipInterpolator(mu_new[i], h_new[i])(tau_new)
    chart = InvariantMetricChart(grid_new, h_re, W_re, lam=metric0.lam)
    return chart, InvariantScalar(g, mu_new)


@dataclass(frozen=True)
class FlowMapResult:
    starts: np.ndarray      # (k, 2) pairs (x, tau)
    ends: np.ndarray        # (k, 2)
    delta_tau: float
    mu_defect: float        # sup |tau_end - tau_start - delta_tau|


def moment_flow(metric, starts, delta_tau, rtol=1e-12):
    """Integrate the moment-normalized flow U = JV/|V|^2 from chart points.

    The flow raises the moment value at unit rate and keeps the base point
    fixed; hitting a degenerate fiber (|V|^2 -> 0) raises an error.
    """
    g = metric.grid
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    ends = np.empty_like(starts)
    lo, hi = g.tau_nodes[0], g.tau_nodes[-1]
    floor = 0.0
    rows = [r for r in range(g.nt) if r not in g.fixed_point_rows()]
    for k, (x0, t0) in enumerate(starts):
        band_lo, band_hi = sorted((t0, t0 + delta_tau))
        if band_lo < lo - 1e-12 or band_hi > hi + 1e-12:
            raise ValueError("flow leaves the chart's moment interval")
        ix = int(np.argmin(np.abs(g.base_nodes - x0)))
        Wrow = metric.w_inv[ix, :]
        sel = [r for r in rows if band_lo - 1e-9 <= g.tau_nodes[r] <= band_hi + 1e-9]
        if any(Wrow[r] <= floor for r in sel) or any(
            r in g.fixed_point_rows() and band_lo - 1e-12 <= g.tau_nodes[r] <= band_hi + 1e-12
            for r in range(g.nt)
        ):
            raise DegenerateFiberError("moment flow would cross a fixed-point level")
        Wspl = CubicSpline(g.tau_nodes[rows], Wrow[rows])
        wspl = CubicSpline(g.tau_nodes[rows], 1.0 / Wrow[rows])

        def rhs(t, y):
            Wv = Wspl(y[1])
            if Wv <= 0:
                raise DegenerateFiberError("moment flow hit a degenerate fiber")
            return [0.0, Wv * wspl(y[1])]

        if delta_tau == 0.0:
            ends[k] = (x0, t0)
            continue
        sol = solve_ivp(rhs, (0.0, delta_tau), [x0, t0], rtol=rtol, atol=1e-14,
                        method="DOP853", dense_output=False)
        if not sol.success:
            raise RuntimeError(f"moment flow integration failed: {sol.message}")
        ends[k] = sol.y[:, -1]
    defect = float(np.max(np.abs(ends[:, 1] - starts[:, 1] - delta_tau)))
    return FlowMapResult(starts=starts, ends=ends, delta_tau=float(delta_tau), mu_defect=defect)
