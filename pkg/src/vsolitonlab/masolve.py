"""Damped Newton and continuity solver for the perturbed scalar soliton equation.

The equation solved, in log form on invariant potentials u with zero mean, is

    log(omega_u^n / omega_0^n) - log(eps + |V|_u^2) + lambda u = target,

with |V|_u^2 = |V|_0^2 (1 + JV(JV u)/4) and the volume ratio reduced to the
chart blocks: 1 + (1/4)(W0 u_tau)_tau for a point base, and the 2x2 block
determinant (with the base cross term) for a one-dimensional base.  lambda = 0
is the supported path (lambda = -1 accepted behind a flag, +1 rejected).

At lambda = 0 the linearization annihilates constants, so Newton solves in the
zero-mean slice with residuals projected off the omega_u-weighted mean; the
projected-out constant (the solvability offset) is reported, never hidden.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.sparse.linalg import spsolve

from .charts import InvariantMetricChart, InvariantScalar
from .errors import (
    AdmissibilityError,
    ConstraintViolationError,
    ContinuationStall,
    DegenerateFiberError,
    NewtonNonconvergence,
    NoSolutionError,
)
from .grids import derivative_matrix

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 50


def normalize_c_eps(chart, F, epsilon):
    """Constant c with integral((eps + |V|^2) e^{F+c} - 1) vol = 0; c = log(B/A)."""
    w = chart.volume_weights()
    A = float(np.sum(w * (epsilon + chart.w_inv) * np.exp(F.values)))
    B = float(np.sum(w))
    if A <= 0.0:
        raise ValueError("quadrature produced a non-positive normalization integral")
    return float(np.log(B / A))


@dataclass(frozen=True)
class MAProblem:
    """Data (g0, F, eps, lambda) of the perturbed scalar soliton equation."""

    chart: InvariantMetricChart
    F: InvariantScalar
    epsilon: float
    lam: float = 0.0
    allow_lambda_minus_one: bool = False
    c_eps: float = field(default=None)

    def __post_init__(self):
        self.chart.check_scalar(self.F)
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.lam > 0:
            raise ValueError("lambda = +1 path is not supported")
        if self.lam < 0 and not self.allow_lambda_minus_one:
            raise ValueError("lambda < 0 requires allow_lambda_minus_one=True")
        if self.chart.grid.periodic_base or self.chart.grid.n_base == 0:
            pass
        else:
            raise ValueError("the solver supports point or periodic base charts")
        if self.c_eps is None:
            object.__setattr__(self, "c_eps", normalize_c_eps(self.chart, self.F, self.epsilon))

    @property
    def target(self):
        """F_eps = F + c_eps, the normalized right-hand side."""
        return self.F.values + self.c_eps

    def with_F(self, F):
        return MAProblem(self.chart, F, self.epsilon, self.lam,
                         self.allow_lambda_minus_one)


@dataclass(frozen=True)
class PotentialField:
    """Zero-mean invariant potential; the candidate unknown of the equation."""

    u: InvariantScalar

    @classmethod
    def create(cls, chart, values):
        w = chart.volume_weights()
        vals = np.asarray(values, dtype=float)
        vals = vals - np.sum(w * vals) / np.sum(w)
        return cls(u=InvariantScalar(chart.grid, vals))

    @property
    def values(self):
        return self.u.values


def _vol0(chart):
    return chart.volume_weights()


def _sqrt_w0(chart):
    W0 = chart.w_inv
    return np.where(W0 > 0, 1.0 / np.sqrt(np.where(W0 > 0, W0, 1.0)), 0.0)


def _fiber_sl_block(tau, W_row, D1_row0, D1_rowN, D2_row0, D2_rowN, Wt_row):
    """Compact conservative matrix for v -> (W v_tau)_tau along one x-row.

    Interior rows use the flux form with midpoint-averaged W (no checkerboard
    null space); the two endpoint rows use the product rule W_tau v_tau +
    W v_tautau with one-sided second-order stencils.
    """
    nt = tau.size
    mat = sp.lil_matrix((nt, nt))
    h = np.diff(tau)
    for j in range(1, nt - 1):
        wm = 0.5 * (W_row[j - 1] + W_row[j])
        wp = 0.5 * (W_row[j] + W_row[j + 1])
        havg = 0.5 * (h[j - 1] + h[j])
        cl = wm / (h[j - 1] * havg)
        cr = wp / (h[j] * havg)
        mat[j, j - 1] = cl
        mat[j, j + 1] = cr
        mat[j, j] = -(cl + cr)
    mat[0, :] = Wt_row[0] * D1_row0 + W_row[0] * D2_row0
    mat[-1, :] = Wt_row[-1] * D1_rowN + W_row[-1] * D2_rowN
    return mat.tocsr()


def _fiber_sl_matrix(chart):
    """Block-diagonal (over x) conservative fiber operator; cached on the chart."""
    cached = getattr(chart, "_fiber_sl_cache", None)
    if cached is not None:
        return cached
    g = chart.grid
    D1 = derivative_matrix(g.tau_nodes, 1).toarray()
    D2 = derivative_matrix(g.tau_nodes, 2).toarray()
    Wt = g.d_tau(chart.w_inv)
    blocks = [
        _fiber_sl_block(g.tau_nodes, chart.w_inv[i], D1[0], D1[-1], D2[0], D2[-1], Wt[i])
        for i in range(g.nx)
    ]
    mat = sp.block_diag(blocks, format="csr")
    object.__setattr__(chart, "_fiber_sl_cache", mat)
    return mat


def fiber_second_derivative(chart, values):
    """(W0 v_tau)_tau by the solver's compact conservative scheme."""
    mat = _fiber_sl_matrix(chart)
    v = np.asarray(values)
    out = mat @ (v - v.flat[0]).ravel()
    return out.reshape(chart.grid.shape)


def _geometry(problem, u_values):
    """Pointwise block data of omega_u over the reference chart."""
    return _block_geometry(problem.chart, problem.epsilon, u_values)


def _block_geometry(chart, epsilon, u_values):
    g = chart.grid
    W0 = chart.w_inv
    q = W0 * g.d_tau(u_values)
    b = 0.25 * fiber_second_derivative(chart, u_values)
    Wu = W0 * (1.0 + b)
    geo = {"q": q, "b": b, "Wu": Wu, "eps_Vu": epsilon + Wu}
    if g.n_base == 1:
        A = g.dz_dzbar(u_values) + 0.25 * q * g.d_tau(chart.h)
        p = 0.25 * _sqrt_w0(chart) * g.d_x(q)
        hfull = chart.h + A
        det2 = hfull * (1.0 + b) - p**2
        geo.update({"A": A, "p": p, "hfull": hfull, "det2": det2,
                    "ratio": det2 / chart.h, "pos_margin": min(float(np.min(hfull)),
                                                               float(np.min(det2)))})
    else:
        geo.update({"ratio": 1.0 + b, "pos_margin": float(np.min(1.0 + b))})
    return geo


def _admissible(geo):
    return geo["pos_margin"] > 0.0 and float(np.min(geo["eps_Vu"])) > 0.0


def _require_admissible(geo, grid):
    if geo["pos_margin"] <= 0.0:
        key = "det2" if "det2" in geo else "ratio"
        idx = np.unravel_index(np.argmin(geo[key]), grid.shape)
        raise AdmissibilityError(
            f"omega_u is not positive at node {tuple(int(i) for i in idx)} "
            f"(margin {geo['pos_margin']:.3e})"
        )
    if float(np.min(geo["eps_Vu"])) <= 0.0:
        idx = np.unravel_index(np.argmin(geo["eps_Vu"]), grid.shape)
        raise DegenerateFiberError(
            f"eps + |V|_u^2 <= 0 at node {tuple(int(i) for i in idx)}"
        )


def phi_eps(u, problem):
    """The log Monge-Ampere operator at u (admissibility enforced)."""
    problem.chart.check_scalar(u.u if isinstance(u, PotentialField) else u)
    vals = u.values if isinstance(u, PotentialField) else u.values
    geo = _geometry(problem, vals)
    _require_admissible(geo, problem.chart.grid)
    return InvariantScalar(problem.chart.grid,
                           np.log(geo["ratio"]) - np.log(geo["eps_Vu"]))


def dphi_eps(u, udot, problem):
    """Directional derivative of phi_eps at u (excludes the lambda*u term)."""
    vals = u.values if isinstance(u, PotentialField) else u.values
    geo = _geometry(problem, vals)
    _require_admissible(geo, problem.chart.grid)
    chart = problem.chart
    g = chart.grid
    vdot = udot.values
    qv = chart.w_inv * g.d_tau(vdot)
    bv = 0.25 * fiber_second_derivative(chart, vdot)
    lap_term = chart.w_inv * bv / geo["eps_Vu"]
    if g.n_base == 1:
        Av = g.dz_dzbar(vdot) + 0.25 * qv * g.d_tau(chart.h)
        pv = 0.25 * _sqrt_w0(chart) * g.d_x(qv)
        lap = ((1.0 + geo["b"]) * Av - 2.0 * geo["p"] * pv
               + geo["hfull"] * bv) / geo["det2"]
    else:
        lap = bv / (1.0 + geo["b"])
    return InvariantScalar(g, lap - lap_term)


def _flat_ops(chart):
    g = chart.grid
    nx, nt = g.shape
    Dt = sp.kron(sp.identity(nx), derivative_matrix(g.tau_nodes, 1), format="csr")
    if g.n_base == 1:
        Dx = sp.kron(derivative_matrix(g.base_nodes, 1, periodic=g.periodic_base),
                     sp.identity(nt), format="csr")
        Dxx = sp.kron(derivative_matrix(g.base_nodes, 2, periodic=g.periodic_base),
                      sp.identity(nt), format="csr")
    else:
        Dx = Dxx = None
    return Dt, Dx, Dxx


def _dphi_matrix(problem, geo):
    chart = problem.chart
    g = chart.grid
    Dt, Dx, Dxx = _flat_ops(chart)
    W0 = chart.w_inv.ravel()
    Bop = 0.25 * _fiber_sl_matrix(chart)
    mat = -sp.diags((chart.w_inv / geo["eps_Vu"]).ravel()) @ Bop
    if g.n_base == 1:
        Aop = 0.25 * Dxx + sp.diags((0.25 * chart.w_inv * g.d_tau(chart.h)).ravel()) @ Dt
        Pop = sp.diags(0.25 * _sqrt_w0(chart).ravel()) @ (Dx @ sp.diags(W0) @ Dt)
        mat = mat + sp.diags(((1.0 + geo["b"]) / geo["det2"]).ravel()) @ Aop \
            - sp.diags((2.0 * geo["p"] / geo["det2"]).ravel()) @ Pop \
            + sp.diags((geo["hfull"] / geo["det2"]).ravel()) @ Bop
    else:
        mat = mat + sp.diags((1.0 / (1.0 + geo["b"])).ravel()) @ Bop
    if problem.lam != 0.0:
        mat = mat + problem.lam * sp.identity(mat.shape[0])
    return mat.tocsc()


@dataclass(frozen=True)
class IterationRecord:
    residual: float
    damping: float
    positivity_margin: float
    jv_sup: float
    offset: float


@dataclass(frozen=True)
class NewtonReport:
    iterations: tuple
    converged: bool
    final_residual: float
    final_raw_residual: float
    offset: float
    jv_bound_value: float
    jv_bound_limit: float
    hessian_bound_slack: float
    message: str = ""

    def residual_history(self):
        return [it.residual for it in self.iterations]

    def rows(self):
        return [
            {"iter": k, "residual": it.residual, "damping": it.damping,
             "margin": it.positivity_margin, "jv_sup": it.jv_sup, "offset": it.offset}
            for k, it in enumerate(self.iterations)
        ]


def _residual(problem, u_values, target, geo):
    r = np.log(geo["ratio"]) - np.log(geo["eps_Vu"]) + problem.lam * u_values - target
    return r


def _project(problem, r, geo):
    """Split residual into (projected residual, offset) w.r.t. omega_u mean."""
    if problem.lam != 0.0:
        return r, 0.0
    w = _vol0(problem.chart) * geo["ratio"]
    off = float(np.sum(w * r) / np.sum(w))
    return r - off, off


def newton_solve(problem, target, u0=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                 min_damping=2.0**-20):
    """Damped Newton in the zero-mean slice; raises NewtonNonconvergence on failure."""
    chart = problem.chart
    g = chart.grid
    target = target.values if isinstance(target, InvariantScalar) else np.asarray(target)
    vol0 = _vol0(chart)
    u = np.zeros(g.shape) if u0 is None else np.array(
        u0.values if isinstance(u0, (PotentialField, InvariantScalar)) else u0, dtype=float)
    u = u - np.sum(vol0 * u) / np.sum(vol0)
    geo = _geometry(problem, u)
    _require_admissible(geo, g)
    records = []
    damping = 1.0
    span = float(g.tau_nodes[-1] - g.tau_nodes[0])
    for it in range(max_iter + 1):
        r_raw = _residual(problem, u, target, geo)
        r, off = _project(problem, r_raw, geo)
        res = float(np.max(np.abs(r)))
        records.append(IterationRecord(
            residual=res, damping=damping, positivity_margin=geo["pos_margin"],
            jv_sup=float(np.max(np.abs(geo["q"]))), offset=off))
        if res <= tol:
            field_u = PotentialField.create(chart, u)
            jv_sup, jv_limit = jv_bound(field_u, chart)
            slack = hessian_bound_check(field_u, chart)
            return field_u, NewtonReport(
                iterations=tuple(records), converged=True, final_residual=res,
                final_raw_residual=float(np.max(np.abs(r_raw))), offset=off,
                jv_bound_value=jv_sup, jv_bound_limit=jv_limit,
                hessian_bound_slack=slack, message="converged")
        if it == max_iter:
            break
        mat = _dphi_matrix(problem, geo)
        n = mat.shape[0]
        if problem.lam == 0.0:
            K = sp.bmat([[mat, np.ones((n, 1))],
                         [vol0.reshape(1, -1), None]], format="csc")
            rhs = np.concatenate([-r.ravel(), [0.0]])
            delta = spsolve(K, rhs)[:n].reshape(g.shape)
        else:
            delta = spsolve(mat, -r_raw.ravel()).reshape(g.shape)
        damping = 1.0
        accepted = False
        while damping >= min_damping:
            u_try = u + damping * delta
            u_try = u_try - np.sum(vol0 * u_try) / np.sum(vol0)
            geo_try = _geometry(problem, u_try)
            if _admissible(geo_try):
                r_try, _ = _project(problem, _residual(problem, u_try, target, geo_try),
                                    geo_try)
                if float(np.max(np.abs(r_try))) <= (1.0 - 1e-4 * damping) * res:
                    u, geo = u_try, geo_try
                    accepted = True
                    break
            damping *= 0.5
        if not accepted:
            report = NewtonReport(
                iterations=tuple(records), converged=False, final_residual=res,
                final_raw_residual=float(np.max(np.abs(r_raw))), offset=off,
                jv_bound_value=float(np.max(np.abs(geo["q"]))), jv_bound_limit=4.0 * span,
                hessian_bound_slack=float("nan"),
                message="line search exhausted damping")
            raise NewtonNonconvergence("Newton line search stalled", report)
    report = NewtonReport(
        iterations=tuple(records), converged=False, final_residual=records[-1].residual,
        final_raw_residual=float("nan"), offset=records[-1].offset,
        jv_bound_value=records[-1].jv_sup, jv_bound_limit=4.0 * span,
        hessian_bound_slack=float("nan"), message="max_iter reached")
    raise NewtonNonconvergence("Newton did not converge in max_iter", report)


@dataclass(frozen=True)
class ContinuityReport:
    steps: tuple      # (s, newton_iterations, residual)
    completed: bool


def continuity_path_target(problem, s):
    """Normalized target F_{eps,s} along the default linear path."""
    F0 = -np.log(problem.epsilon + problem.chart.w_inv)
    Fs = (1.0 - s) * F0 + s * problem.target
    c_s = normalize_c_eps(problem.chart, InvariantScalar(problem.chart.grid, Fs),
                          problem.epsilon)
    return Fs + c_s


def continuity_solve(problem, s_steps=6, tol=DEFAULT_TOL, max_halvings=14, u0=None):
    """March s: 0 -> 1 along the linear path, warm-starting Newton at each s."""
    if problem.epsilon <= 0:
        raise ValueError("continuity solver requires eps > 0")
    chart = problem.chart
    u = PotentialField.create(chart, np.zeros(chart.grid.shape) if u0 is None else u0.values)
    t0 = continuity_path_target(problem, 0.0)
    geo0 = _geometry(problem, u.values)
    r0, _ = _project(problem, _residual(problem, u.values, t0, geo0), geo0)
    if u0 is None and float(np.max(np.abs(r0))) > 1e-12:
        raise AssertionError("u = 0 must solve the s = 0 member exactly")
    steps = []
    s = 0.0
    ds = 1.0 / s_steps
    halvings = 0
    while s < 1.0 - 1e-14:
        s_next = min(1.0, s + ds)
        target = continuity_path_target(problem, s_next)
        try:
            u_next, rep = newton_solve(problem, target, u0=u, tol=tol)
        except (NewtonNonconvergence, AdmissibilityError) as exc:
            halvings += 1
            ds *= 0.5
            if halvings > max_halvings:
                raise ContinuationStall(
                    f"continuation stalled at s={s:.6g}", s_reached=s,
                    report=getattr(exc, "report", None)) from exc
            continue
        u = u_next
        s = s_next
        steps.append((s, len(rep.iterations), rep.final_residual))
    return u, ContinuityReport(steps=tuple(steps), completed=True)


@dataclass(frozen=True)
class EpsilonStep:
    epsilon: float
    u: PotentialField
    sup_u: float
    min_eps_Vu: float
    newton_iterations: int
    offset: float


def epsilon_continuation(problem, eps_schedule, tol=DEFAULT_TOL):
    """Solve along a decreasing eps schedule, warm-starting; truncates on failure."""
    eps_schedule = list(eps_schedule)
    if any(e <= 0 for e in eps_schedule) or any(
            b >= a for a, b in zip(eps_schedule, eps_schedule[1:])):
        raise ValueError("eps schedule must be positive and strictly decreasing")
    out = []
    u_warm = None
    truncated_at = None
    for eps in eps_schedule:
        prob_eps = MAProblem(problem.chart, problem.F, eps, problem.lam,
                             problem.allow_lambda_minus_one)
        try:
            u, rep = newton_solve(prob_eps, InvariantScalar(problem.chart.grid,
                                                            prob_eps.target),
                                  u0=u_warm, tol=tol)
        except (NewtonNonconvergence, AdmissibilityError):
            truncated_at = eps
            break
        geo = _geometry(prob_eps, u.values)
        out.append(EpsilonStep(
            epsilon=eps, u=u, sup_u=float(np.max(np.abs(u.values))),
            min_eps_Vu=float(np.min(geo["eps_Vu"])),
            newton_iterations=len(rep.iterations), offset=rep.offset))
        u_warm = u
    return out, truncated_at


def jv_bound(u, chart, tol=None):
    """sup|JV(u)| against the moment-span bound 4 (tau_max - tau_min)."""
    g = chart.grid
    q = chart.w_inv * g.d_tau(u.values)
    sup = float(np.max(np.abs(q)))
    span = float(g.tau_nodes[-1] - g.tau_nodes[0])
    bound = 4.0 * span
    if tol is None:
        tol = 1e-8 + 25.0 * float(np.max(np.diff(g.tau_nodes))) ** 2 * bound
    if sup > bound + tol:
        raise ConstraintViolationError(
            f"|JV(u)| = {sup:.6g} exceeds the admissible bound {bound:.6g}")
    return sup, bound


def hessian_eigenvalues(u, chart):
    """Relative eigenvalues of (i/2) ddbar(u) against omega_0, per node."""
    geo = _block_geometry(chart, 1.0, u.values)
    if chart.grid.n_base == 0:
        mu = geo["b"]
        return mu[..., None]
    h0 = chart.h
    tr = geo["A"] + h0 * geo["b"]
    det = geo["A"] * geo["b"] - geo["p"] ** 2
    disc = np.sqrt(np.maximum(tr**2 - 4.0 * h0 * det, 0.0))
    mu1 = (tr + disc) / (2.0 * h0)
    mu2 = (tr - disc) / (2.0 * h0)
    return np.stack([mu1, mu2], axis=-1)


def hessian_bound_check(u, chart):
    """Slack of ||ddbar u|| <= max(n + lap_0 u, n); nonnegative for admissible u."""
    mus = hessian_eigenvalues(u, chart)
    n_m = chart.grid.n_base + 1
    norm = np.max(np.abs(mus), axis=-1)
    trace = np.sum(mus, axis=-1)
    slack = np.maximum(n_m + trace, n_m) - norm
    return float(np.min(slack))


@dataclass(frozen=True)
class CP1Solution:
    u: PotentialField
    offset: float
    phi: InvariantScalar


def cp1_closed_form(problem):
    """Algebraic solution of the point-base reduced equation (the solver oracle).

    Solves (1 + phi)(1 - W0 e^{F_eps + b}) = eps e^{F_eps + b} node by node,
    with the constant b fixed by discrete solvability of phi = (W0 u')'/4, then
    recovers u by one linear solve.  Raises NoSolutionError when the
    denominator loses positivity for every admissible b.
    """
    chart = problem.chart
    g = chart.grid
    if g.n_base != 0:
        raise ValueError("the closed form applies to point-base charts only")
    if problem.lam != 0.0:
        raise ValueError("the closed form applies to lambda = 0")
    W0 = chart.w_inv
    Feps = problem.target
    vol0 = _vol0(chart)
    Aop = 0.25 * _fiber_sl_matrix(chart)
    n = Aop.shape[0]
    K = sp.bmat([[Aop, np.ones((n, 1))], [vol0.reshape(1, -1), None]], format="csc")

    def phi_of(b):
        with np.errstate(over="ignore"):
            ef = np.exp(Feps + b)
        den = 1.0 - W0 * ef
        if not np.all(np.isfinite(ef)) or np.min(den) <= 0.0:
            return None
        return problem.epsilon * ef / den - 1.0

    def nu_of(b):
        phi = phi_of(b)
        if phi is None:
            return None
        sol = spsolve(K, np.concatenate([phi.ravel(), [0.0]]))
        return sol[n], sol[:n]

    # bracket the solvability constant b; the denominator caps b from above
    v0 = nu_of(0.0)
    if v0 is None:
        raise NoSolutionError("denominator 1 - W0 e^{F_eps} is not positive")
    if v0[0] > 0:
        b_hi, b_lo, step = 0.0, 0.0, 0.25
        while True:
            b_lo -= step
            if nu_of(b_lo)[0] <= 0:
                b_hi = b_lo + step
                break
    else:
        prev, step = 0.0, 0.25
        while True:
            cand = prev + step
            v = nu_of(cand)
            if v is None:
                step *= 0.5
                if step < 1e-12:
                    raise NoSolutionError(
                        "no solvable constant before the denominator obstruction")
                continue
            if v[0] >= 0:
                b_lo, b_hi = prev, cand
                break
            prev = cand

    b_star = brentq(lambda b: nu_of(b)[0], b_lo, b_hi, xtol=1e-15, rtol=8.9e-16)
    phi = phi_of(b_star)
    u_vals = nu_of(b_star)[1].reshape(g.shape)
    u = PotentialField.create(chart, u_vals)
    return CP1Solution(u=u, offset=float(b_star),
                       phi=InvariantScalar(g, phi))


def manufactured_target(problem, u_star):
    """Target for which u_star is the exact discrete solution (test/driver helper)."""
    vals = phi_eps(u_star, problem).values + problem.lam * u_star.values
    return InvariantScalar(problem.chart.grid, vals)
