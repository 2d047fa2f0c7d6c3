"""Lift flow trajectories to soliton metrics on the circle bundle and back.

The lift direction builds, over a normalized-flow trajectory h(x, t) with
constant lambda, the invariant chart

    tau(t) = c (e^{lambda t} - 1) / lambda,      (c t when lambda = 0)
    w(x, tau(t)) = e^{-2 lambda t} (R(x,t) - n lambda + df/dt) / (4 c^2),

for any f = f(tau) with R - n lambda + df/dt > 0, and the descent direction
recovers the trajectory from the chart together with the level-set constant

    c = (-1/4 lap(tau) + 1/4 dW/dtau + 1/4 W df/dtau) |_{level a}.

R here is the trace-normalized scalar curvature R_ma = (flow module R)/2,
the quantity obeying d(log det h)/dt = -R_ma + n lambda along the flow.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import calculus
from .charts import InvariantMetricChart, InvariantScalar, tau_scalar
from .errors import ConstraintViolationError, DegenerateFiberError
from .flow import FlowTrajectory, QuotientMetricProfile, ke_residual
from .grids import ChartGrid, derivative_matrix

# flow-module scalar curvature (Gauss convention) -> moment-map trace convention
MA_CURVATURE_FACTOR = 0.5

_BASE_KIND_OF_MODEL = {"flat-circle": "circle", "round-sphere": "radial-sphere-chart"}


def tau_reparam(c, lam, t):
    """Moment value reached at flow time t; lambda -> 0 limit taken analytically."""
    t = np.asarray(t, dtype=float)
    if lam == 0.0:
        out = c * t
    else:
        out = c * np.expm1(lam * t) / lam
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class FTable:
    """Twist function along a trajectory: f and df/dt sampled at the flow times."""

    times: np.ndarray
    values: np.ndarray
    dvalues_dt: np.ndarray


def _ma_curvature(trajectory):
    return MA_CURVATURE_FACTOR * np.asarray(trajectory.scalar_curvature_history)


def choose_f(trajectory, lam, strategy):
    """Pick f(tau) with R - n lambda + df/dt > 0 along the whole trajectory.

    'fano-default' uses the positive-lambda recipe f = (n - inf R) log(1+tau)
    + 2 (1+tau)^2 in the normalization tau = e^{lambda t} - 1; 'margin(d)'
    integrates the minimal-growth df/dt giving pointwise margin d.
    """
    t = np.asarray(trajectory.times)
    R = _ma_curvature(trajectory)
    n = trajectory.n_q
    if strategy == "fano-default":
        if lam <= 0:
            raise ValueError("fano-default requires lambda > 0")
        c_low = float(np.min(R))
        f = (n - c_low) * lam * t + 2.0 * np.exp(2.0 * lam * t)
        df = (n - c_low) * lam + 4.0 * lam * np.exp(2.0 * lam * t)
    else:
        m = re.fullmatch(r"margin\(([^)]+)\)", strategy)
        if not m:
            raise ValueError(f"unknown f strategy {strategy!r}")
        delta = float(m.group(1))
        if delta <= 0:
            raise ValueError("margin must be positive")
        df = delta + n * lam - np.min(R, axis=0)
        f = np.concatenate([[0.0], np.cumsum(0.5 * (df[1:] + df[:-1]) * np.diff(t))])
    table = FTable(times=t, values=f, dvalues_dt=df)
    _check_constraint(trajectory, lam, table)
    return table


def _check_constraint(trajectory, lam, f):
    margin = _ma_curvature(trajectory) - trajectory.n_q * lam + f.dvalues_dt[None, :]
    if np.min(margin) <= 0.0:
        ix, it = np.unravel_index(np.argmin(margin), margin.shape)
        raise ConstraintViolationError(
            "-R + n*lambda - df/dt < 0 fails at "
            f"x={trajectory.nodes[ix]:.6g}, t={trajectory.times[it]:.6g} "
            f"(margin {margin[ix, it]:.3e})"
        )
    return margin


@dataclass(frozen=True)
class LiftedMetric:
    """Invariant chart of a soliton metric over a flow trajectory."""

    chart: InvariantMetricChart
    f: np.ndarray          # f sampled on chart.grid.tau_nodes
    f_tau: np.ndarray      # df/dtau on the same nodes
    lam: float
    c: float
    static: bool = False
    times: np.ndarray | None = None   # t_k aligned with tau_nodes (flowing lifts)
    closedness_residual: float = 0.0

    def tau_of_t(self, t):
        if self.static:
            raise ValueError("static lift carries no time parametrization")
        return tau_reparam(self.c, self.lam, t)

    def dtau_dt(self, t):
        if self.static:
            raise ValueError("static lift carries no time parametrization")
        return self.c * np.exp(self.lam * np.asarray(t))

    def to_dict(self):
        d = self.chart.to_dict()
        d["schema"] = "vsolitonlab/lifted-metric-v1"
        d["f"] = np.asarray(self.f).tolist()
        d["f_tau"] = np.asarray(self.f_tau).tolist()
        d["c"] = self.c
        d["static"] = self.static
        d["times"] = None if self.times is None else np.asarray(self.times).tolist()
        d["closedness_residual"] = self.closedness_residual
        return d


def closedness_residual(chart):
    """Sup of h_tautau + 4 w_zzbar, the discrete closedness of the lift 2-form."""
    if chart.grid.n_base == 0:
        return 0.0
    _, _, r3 = calculus.integrability_residuals(chart)
    return calculus.interior_sup(r3.values, chart.grid)


def lift(trajectory, lam, f, c):
    """Lift a flowing trajectory to an invariant soliton chart."""
    if c <= 0:
        raise ValueError("the lift constant c must be positive (monotone tau(t))")
    if trajectory.model not in _BASE_KIND_OF_MODEL:
        raise ValueError(f"cannot lift trajectories of model {trajectory.model!r}")
    t = np.asarray(trajectory.times)
    if not np.array_equal(t, np.asarray(f.times)):
        raise ValueError("f table is not aligned with the trajectory times")
    margin = _check_constraint(trajectory, lam, f)
    tau = tau_reparam(c, lam, t)
    w = np.exp(-2.0 * lam * t)[None, :] * margin / (4.0 * c**2)
    grid = ChartGrid(_BASE_KIND_OF_MODEL[trajectory.model], trajectory.nodes, tau)
    chart = InvariantMetricChart(grid, np.asarray(trajectory.profiles), 1.0 / w, lam=lam)
    f_tau = f.dvalues_dt / (c * np.exp(lam * t))
    lifted = LiftedMetric(
        chart=chart, f=np.asarray(f.values), f_tau=f_tau, lam=lam, c=float(c),
        times=t, closedness_residual=closedness_residual(chart),
    )
    assert np.max(np.abs(tau - tau_reparam(c, lam, t))) <= 1e-12
    return lifted


def ke_product_lift(ke_profile, lam, tau_max=1.0, nt=65, tol=None):
    """Product lift of a Kahler-Einstein quotient: w^{-1} = 2 tau, f = 2 lambda tau."""
    res = ke_residual(ke_profile, lam)
    if tol is None:
        dx = float(np.min(np.diff(ke_profile.nodes)))
        tol = 25.0 * dx**2 * float(np.max(ke_profile.values)) * (1.0 + abs(lam)) + 1e-12
    if res > tol:
        raise ConstraintViolationError(
            f"profile is not Kahler-Einstein at lambda={lam}: residual {res:.3e} > {tol:.3e}"
        )
    tau = np.linspace(0.0, tau_max, nt)
    grid = ChartGrid(
        _BASE_KIND_OF_MODEL[ke_profile.model], ke_profile.nodes, tau,
        boundary_flags=("fixed-point", "free"),
    )
    h = np.repeat(ke_profile.values[:, None], nt, axis=1)
    w_inv = np.broadcast_to(2.0 * tau, grid.shape).copy()
    chart = InvariantMetricChart(grid, h, w_inv, lam=lam)
    return LiftedMetric(
        chart=chart, f=2.0 * lam * tau, f_tau=np.full(nt, 2.0 * lam), lam=lam,
        c=0.0, static=True, closedness_residual=closedness_residual(chart),
    )


@dataclass(frozen=True)
class VsolitonResidualReport:
    part_i: float
    part_ii: float
    part_iii: float
    part_iv: float
    integrability: float
    fields: dict = field(default_factory=dict)

    def parts(self):
        return {"i": self.part_i, "ii": self.part_ii, "iii": self.part_iii, "iv": self.part_iv}


def _twist_field(lifted):
    # S = W (dlogdet(h)/dtau - df/dtau)
    chart = lifted.chart
    g = chart.grid
    logdet = np.zeros(g.shape) if chart.h is None else np.log(chart.h)
    return chart.w_inv * (g.d_tau(logdet) - lifted.f_tau[None, :])


def vsoliton_residual(lifted):
    """Discrete residual of the four-part equivalent system of the soliton equation."""
    chart = lifted.chart
    g = chart.grid
    if np.any((chart.w_inv == 0.0) & ~np.isin(np.arange(g.nt), g.fixed_point_rows())[None, :]):
        raise DegenerateFiberError("degenerate fiber in the chart interior")
    S = _twist_field(lifted)
    part_iv = g.d_tau(S) + 4.0 * lifted.lam
    fields = {"iv": part_iv}
    if g.n_base == 1:
        ric = -g.dz_dzbar(np.log(chart.h))
        part_i = 4.0 * ric - S * g.d_tau(chart.h) - 4.0 * lifted.lam * chart.h
        dSz = g.dz(S)
        fields.update({"i": part_i, "ii": dSz, "iii": dSz})
        sup_i = float(np.max(np.abs(part_i)))
        sup_ii = float(np.max(np.abs(dSz)))
    else:
        sup_i = sup_ii = 0.0
    return VsolitonResidualReport(
        part_i=sup_i, part_ii=sup_ii, part_iii=sup_ii,
        part_iv=float(np.max(np.abs(part_iv))),
        integrability=closedness_residual(chart),
        fields=fields,
    )


@dataclass(frozen=True)
class DescentResult:
    trajectory: FlowTrajectory
    c: float
    constancy_spread: float
    residual_report: dict
    static: bool
    anchor: float
    anchor_index: int
    lifted: LiftedMetric


def descend(lifted, a=None, static_tol=1e-8):
    """Recover the flow trajectory and the level constant c from a lifted chart."""
    chart = lifted.chart
    g = chart.grid
    if g.n_base == 0:
        raise ValueError("descent needs a base block; point-base charts carry no quotient flow")
    fixed = g.fixed_point_rows()
    free_rows = [j for j in range(g.nt) if j not in fixed]
    if a is None:
        ja = free_rows[0]
    else:
        ja = int(np.argmin(np.abs(g.tau_nodes - a)))
        if ja in fixed:
            raise DegenerateFiberError("anchor level is a fixed-point locus")
    a = float(g.tau_nodes[ja])
    if any(j in fixed for j in range(ja, g.nt)):
        raise DegenerateFiberError("[a, tau_max] contains a fixed-point level")

    lap_tau = calculus.laplacian_invariant(chart, tau_scalar(g)).values
    Wt = g.d_tau(chart.w_inv)
    c_level = (-0.25 * lap_tau + 0.25 * Wt + 0.25 * chart.w_inv * lifted.f_tau[None, :])[:, ja]
    c = float(np.mean(c_level))
    spread = float(np.max(c_level) - np.min(c_level))

    S = _twist_field(lifted)
    tau_rel = g.tau_nodes[None, ja:] - a
    dtau_formula = float(np.max(np.abs(
        0.25 * S[:, ja:] + lifted.lam * tau_rel + c
    )))

    report = {
        "c_constancy_spread": spread,
        "dtau_formula": dtau_formula,
    }
    vr = vsoliton_residual(lifted)
    report.update({f"system_{k}": v for k, v in vr.parts().items()})
    report["closedness"] = vr.integrability

    scale = max(1.0, abs(lifted.lam) * float(np.max(np.abs(g.tau_nodes))))
    static = abs(c) <= static_tol * scale
    nodes = g.base_nodes
    model = {v: k for k, v in _BASE_KIND_OF_MODEL.items()}[g.base_kind]
    dxx = derivative_matrix(nodes, 2, periodic=g.periodic_base)
    fac = np.exp(-2.0 * nodes) if g.base_kind == "radial-sphere-chart" else np.ones_like(nodes)

    def curvature_cols(hcols):
        return -0.5 * fac[:, None] * (dxx @ np.log(hcols)) / hcols

    if static:
        h0 = chart.h[:, ja]
        times = np.array([0.0, 1.0])
        profiles = np.repeat(h0[:, None], 2, axis=1)
        traj = FlowTrajectory(model, nodes, times, profiles, curvature_cols(profiles),
                              lam=lifted.lam, n_q=1)
        prof = QuotientMetricProfile(model, nodes, h0)
        report["flow_equation"] = ke_residual(prof, lifted.lam)
        report["branch"] = "static"
    else:
        if c <= 0:
            raise ValueError("descended c is non-positive; trajectory is not a forward lift")
        rel = g.tau_nodes[ja:] - a
        if lifted.lam == 0.0:
            times = rel / c
        else:
            times = np.log1p(lifted.lam * rel / c) / lifted.lam
        hcols = np.asarray(chart.h[:, ja:])
        Rcols = curvature_cols(hcols)
        traj = FlowTrajectory(model, nodes, times, hcols, Rcols, lam=lifted.lam, n_q=1)
        dt_mat = derivative_matrix(times, 1)
        dhdt = (dt_mat @ hcols.T).T
        ric = -0.25 * fac[:, None] * (dxx @ np.log(hcols))
        report["flow_equation"] = float(np.max(np.abs(dhdt + ric - lifted.lam * hcols)))
        report["branch"] = "flowing"
    return DescentResult(trajectory=traj, c=c, constancy_spread=spread,
                         residual_report=report, static=static, anchor=a,
                         anchor_index=ja, lifted=lifted)


@dataclass(frozen=True)
class MarginReport:
    min_margin: float
    identity_sup: float
    equality_times: list
    ke_at_equality: list
    margin: np.ndarray
    sum_of_squares: np.ndarray


def positivity_check(descent, eq_tol=1e-8):
    """Margin R - n*lambda + df/dt along the descended flow, against its square form."""
    lifted = descent.lifted
    chart = lifted.chart
    g = chart.grid
    ja = descent.anchor_index
    lam = lifted.lam
    n = descent.trajectory.n_q
    cols = slice(ja, g.nt)
    tau = g.tau_nodes[cols]
    s = descent.c + lam * (tau - descent.anchor)          # dtau/dt on each level
    if g.n_base == 1:
        fac = np.exp(-2.0 * g.base_nodes) if g.base_kind == "radial-sphere-chart" \
            else np.ones_like(g.base_nodes)
        d2 = derivative_matrix(g.base_nodes, 2, periodic=g.periodic_base)
        hcols = chart.h[:, cols]
        R_ma = -0.25 * fac[:, None] * (d2 @ np.log(hcols)) / hcols
        logdet = np.log(chart.h)
    else:
        R_ma = np.zeros((1, tau.size))
        logdet = np.zeros(g.shape)
    f_t = lifted.f_tau[cols] * s
    margin = R_ma - n * lam + f_t[None, :]
    L_tau = g.d_tau(logdet)[:, cols]
    sos = 0.25 * chart.w_inv[:, cols] * (lifted.f_tau[None, cols] - L_tau) ** 2
    eq_times, ke_vals = [], []
    col_min = np.min(margin, axis=0)
    for k, mval in enumerate(col_min):
        if mval <= eq_tol:
            eq_times.append(float(tau[k]))
            if g.n_base == 1:
                prof = QuotientMetricProfile(descent.trajectory.model, g.base_nodes,
                                             chart.h[:, ja + k])
                ke_vals.append(ke_residual(prof, lam))
            else:
                ke_vals.append(0.0)
    return MarginReport(
        min_margin=float(np.min(margin)),
        identity_sup=float(np.max(np.abs(margin - sos))),
        equality_times=eq_times,
        ke_at_equality=ke_vals,
        margin=margin,
        sum_of_squares=sos,
    )


@dataclass(frozen=True)
class MeanFlowReport:
    table_residual: float       # |dtau/dt - bracket| with the Laplacian-route H
    timechange_residual: float  # |bracket - (-1/4) W (dlogdet h/dtau - df/dtau)|


def mean_flow_check(lifted):
    """Residual of the mean-curvature form of dtau/dt on a lifted chart."""
    chart = lifted.chart
    g = chart.grid
    W = chart.w_inv
    Wt = g.d_tau(W)
    S = _twist_field(lifted)
    rows = [j for j in range(g.nt) if j not in g.fixed_point_rows()]
    sup_table = 0.0
    sup_tc = 0.0
    for j in rows:
        mc = calculus.mean_curvature(chart, j)
        V = np.sqrt(W[:, j])
        bracket = mc.alt_values / (4.0 * V) + 0.125 * Wt[:, j] \
            + 0.25 * W[:, j] * lifted.f_tau[j]
        if lifted.static:
            lhs = -0.25 * S[:, j]
        else:
            lhs = lifted.dtau_dt(lifted.times[j])
        sup_table = max(sup_table, float(np.max(np.abs(lhs - bracket))))
        sup_tc = max(sup_tc, float(np.max(np.abs(bracket + 0.25 * S[:, j]))))
    return MeanFlowReport(table_residual=sup_table, timechange_residual=sup_tc)


def product_lift_dual_reading(ke_profile, lam, tau_lo=0.2, tau_hi=1.2, nt=33):
    """Residuals of the two fiber-norm readings |V|^2 = 2 tau vs 2 tau^2.

    Both use the linear twist f = 2 lambda tau fixed by d f/d tau = 4 lambda
    tau w under the 2 tau reading; the quadratic reading then fails the
    tau-part of the system, and it also fails the fixed-point smoothness
    slope d(w^{-1})/dtau -> 2.
    """
    out = {}
    lifted = ke_product_lift(ke_profile, lam)
    vr = vsoliton_residual(lifted)
    Wt0 = lifted.chart.grid.d_tau(lifted.chart.w_inv)[0, 0]
    out["2tau"] = {
        "system_sup": max(vr.parts().values()),
        "fixed_point_slope_error": abs(float(Wt0) - 2.0),
    }
    tau = np.linspace(tau_lo, tau_hi, nt)
    grid = ChartGrid(_BASE_KIND_OF_MODEL[ke_profile.model], ke_profile.nodes, tau)
    h = np.repeat(ke_profile.values[:, None], nt, axis=1)
    chart = InvariantMetricChart(grid, h, np.broadcast_to(2.0 * tau**2, grid.shape).copy(),
                                 lam=lam)
    alt = LiftedMetric(chart=chart, f=2.0 * lam * tau, f_tau=np.full(nt, 2.0 * lam),
                       lam=lam, c=0.0, static=True)
    vr_alt = vsoliton_residual(alt)
    out["2tau^2"] = {
        "system_sup": max(vr_alt.parts().values()),
        "fixed_point_slope_error": abs(4.0 * tau_lo - 2.0),
    }
    return out
