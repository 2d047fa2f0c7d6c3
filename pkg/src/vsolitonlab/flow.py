"""Normalized Kahler-Ricci flow on reduced one-dimensional model quotients.

Quotient metrics are stored by a single 1D coefficient:

* ``flat-circle``:  g = h(x) dz dzbar on a periodic chart (z = x + iy);
* ``round-sphere``: g = h(x) dz dzbar in the log-radial chart x = log|z|;
* ``radial-plane``: U(m)-radial metric on C^m stored by psi(y) = dPhi/dy of a
  radial Kahler potential Phi(y), y = log|zeta|^2 (produced by descents, not
  integrated here).

Curvature convention: R is the Gauss curvature of the surface models,
R = -(2/h) d^2(log h)/dz dzbar, so the unit Fubini-Study metric
h = (1+|z|^2)^{-2} has R = 4 and the normalized flow is conformal,
dh/dt = (lambda - R/2) h.  The moment-map-side machinery uses the trace
normalization R/2 (see lift_descent.MA_CURVATURE_FACTOR).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StabilityError
from .grids import derivative_matrix, quadrature_weights, require_finite

MODELS = ("round-sphere", "flat-circle", "radial-plane")


@dataclass(frozen=True)
class QuotientMetricProfile:
    """1D profile of a reduced quotient metric."""

    model: str
    nodes: np.ndarray
    values: np.ndarray
    n_q: int = 1

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        nodes = np.array(self.nodes, dtype=float)
        vals = np.array(self.values, dtype=float)
        nodes.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "values", vals)
        require_finite(vals, "profile")
        if np.any(vals <= 0.0):
            raise ValueError("profile must be positive")
        if self.model == "radial-plane" and self.n_q < 2:
            raise ValueError("radial-plane profiles have fiber dimension >= 2")

    @property
    def periodic(self):
        return self.model == "flat-circle"


def _surface_ops(profile):
    d1 = derivative_matrix(profile.nodes, 1, periodic=profile.periodic)
    d2 = derivative_matrix(profile.nodes, 2, periodic=profile.periodic)
    if profile.model == "round-sphere":
        fac = np.exp(-2.0 * profile.nodes)
    else:
        fac = np.ones_like(profile.nodes)
    return d1, d2, fac


def scalar_curvature(profile):
    """Discrete scalar curvature samples of the profile (R = Gauss curvature)."""
    if np.any(profile.values <= 0.0):
        raise ValueError("profile must be positive")
    if profile.model == "radial-plane":
        return _radial_plane_R(profile)
    _, d2, fac = _surface_ops(profile)
    logh = np.log(profile.values)
    return -0.5 * fac * (d2 @ logh) / profile.values


def _radial_plane_R(profile):
    m = profile.n_q
    d1 = derivative_matrix(profile.nodes, 1)
    psi = profile.values
    dpsi = d1 @ psi
    if np.any(dpsi <= 0):
        raise ValueError("radial profile is not a metric (dpsi/dy <= 0)")
    Lam = np.log(dpsi) + (m - 1) * np.log(psi) - m * profile.nodes
    dLam = d1 @ Lam
    d2Lam = d1 @ dLam
    return -2.0 * (d2Lam / dpsi + (m - 1) * dLam / psi)


def ricci_coefficient(profile):
    """Component Ric(h) = -(log h)_zzbar for surface models."""
    _, d2, fac = _surface_ops(profile)
    return -0.25 * fac * (d2 @ np.log(profile.values))


def ke_residual(profile, lam):
    """Sup-norm of Ric - lambda * g in the reduced chart."""
    if profile.model == "radial-plane":
        m = profile.n_q
        d1 = derivative_matrix(profile.nodes, 1)
        psi = profile.values
        dpsi = d1 @ psi
        Lam = np.log(dpsi) + (m - 1) * np.log(psi) - m * profile.nodes
        dLam = d1 @ Lam
        d2Lam = d1 @ dLam
        ey = np.exp(profile.nodes)
        res_rad = -d2Lam / ey - lam * dpsi / ey
        res_sph = -dLam / ey - lam * psi / ey
        return float(max(np.max(np.abs(res_rad)), np.max(np.abs(res_sph))))
    ric = ricci_coefficient(profile)
    return float(np.max(np.abs(ric - lam * profile.values)))


@dataclass(frozen=True)
class FlowTrajectory:
    """Time-indexed family of quotient profiles with curvature history."""

    model: str
    nodes: np.ndarray
    times: np.ndarray           # (k,)
    profiles: np.ndarray        # (nx, k)
    scalar_curvature_history: np.ndarray  # (nx, k)
    lam: float
    n_q: int = 1
    step_report: dict = field(default_factory=dict)
    termination: str = "completed"

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        require_finite(self.profiles, "trajectory profiles")
        require_finite(self.scalar_curvature_history, "trajectory curvature")
        if np.any(np.asarray(self.profiles) <= 0):
            raise ValueError("trajectory profiles must be positive")

    def profile_at(self, k):
        return QuotientMetricProfile(self.model, self.nodes, self.profiles[:, k], n_q=self.n_q)

    def window(self, t_lo, t_hi=None):
        """Sub-trajectory on [t_lo, t_hi], re-gauged to start at time zero.

        The flow is autonomous, so a time translation is again a solution;
        windowing past an initial transient keeps tau-direction stencils on
        well-resolved data.
        """
        t = np.asarray(self.times)
        t_hi = t[-1] if t_hi is None else t_hi
        sel = (t >= t_lo - 1e-14) & (t <= t_hi + 1e-14)
        if np.count_nonzero(sel) < 4:
            raise ValueError("window keeps fewer than 4 samples")
        return FlowTrajectory(
            model=self.model, nodes=self.nodes, times=t[sel] - t[sel][0],
            profiles=np.asarray(self.profiles)[:, sel],
            scalar_curvature_history=np.asarray(self.scalar_curvature_history)[:, sel],
            lam=self.lam, n_q=self.n_q, step_report=self.step_report,
            termination=self.termination,
        )

    @property
    def dt_sample(self):
        return float(np.max(np.diff(self.times)))

    def to_dict(self):
        return {
            "schema": "vsolitonlab/trajectory-v1",
            "model": self.model,
            "nodes": self.nodes.tolist(),
            "times": np.asarray(self.times).tolist(),
            "profiles": np.asarray(self.profiles).tolist(),
            "scalar_curvature": np.asarray(self.scalar_curvature_history).tolist(),
            "lambda": self.lam,
            "n_q": self.n_q,
            "termination": self.termination,
        }


def stability_dt(profile):
    """Explicit-stepper stability bound for the conformal flow."""
    _, _, fac = _surface_ops(profile)
    if profile.periodic:
        dx = profile.nodes[1] - profile.nodes[0]
    else:
        dx = float(np.min(np.diff(profile.nodes)))
    diffusivity = float(np.max(fac / profile.values)) / 4.0
    return 0.5 * dx**2 / diffusivity


def krf_integrate(initial, lam, t_end, dt, save_every=1, progress=None,
                  blowup_low=1e-8, blowup_high=1e8):
    """Integrate dh/dt = (lambda - R/2) h by RK4 from the initial profile.

    The step dt must respect the explicit stability bound (checked).  Returns
    a trajectory sampled every ``save_every`` accepted steps; blow-up
    truncates the trajectory with a flagged termination reason.
    """
    if initial.model == "radial-plane":
        raise NotImplementedError("radial-plane profiles arise from descents and are not flowed")
    bound = stability_dt(initial)
    if dt > bound:
        raise StabilityError(f"dt={dt:.3e} exceeds the stability bound {bound:.3e}")
    d1, d2, fac = _surface_ops(initial)
    weights = quadrature_weights(initial.nodes, periodic=initial.periodic)

    def curvature(h):
        return -0.5 * fac * (d2 @ np.log(h)) / h

    def rhs(h):
        return (lam - 0.5 * curvature(h)) * h

    n_steps = int(round(t_end / dt))
    h = np.array(initial.values)
    times = [0.0]
    profs = [h.copy()]
    curvs = [curvature(h)]
    volumes = [float(np.sum(weights * h))]
    min_R = [float(np.min(curvs[0]))]
    termination = "completed"
    t = 0.0
    for step in range(1, n_steps + 1):
        k1 = rhs(h)
        k2 = rhs(h + 0.5 * dt * k1)
        k3 = rhs(h + 0.5 * dt * k2)
        k4 = rhs(h + dt * k3)
        h = h + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        t = step * dt
        if not np.all(np.isfinite(h)) or np.min(h) < blowup_low or np.max(h) > blowup_high:
            termination = f"blow-up at t={t:.6g}"
            break
        if step % save_every == 0 or step == n_steps:
            R = curvature(h)
            times.append(t)
            profs.append(h.copy())
            curvs.append(R)
            volumes.append(float(np.sum(weights * h)))
            min_R.append(float(np.min(R)))
            if progress is not None:
                gap = float(np.max(np.abs(0.5 * R - lam * initial.n_q)))
                progress(f"t={t:.6g} sup|R-lambda*n|={gap:.6g}")
    return FlowTrajectory(
        model=initial.model,
        nodes=initial.nodes,
        times=np.asarray(times),
        profiles=np.stack(profs, axis=1),
        scalar_curvature_history=np.stack(curvs, axis=1),
        lam=lam,
        n_q=initial.n_q,
        step_report={"volume": volumes, "min_R": min_R, "stability_bound": bound},
        termination=termination,
    )
