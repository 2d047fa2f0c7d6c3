"""Standard charts, profiles and problem instances shared by tests and the CLI."""

from __future__ import annotations

import numpy as np

from .charts import InvariantMetricChart, InvariantScalar
from .flow import QuotientMetricProfile, krf_integrate, stability_dt
from .grids import ChartGrid
from .lift_descent import choose_f, lift
from .masolve import MAProblem, PotentialField


def flat_chart(nx=16, nt=17):
    """Flat product: periodic base, h = 1, |V|^2 = 1; every residual is exactly zero."""
    grid = ChartGrid("circle", np.linspace(0.0, 1.0, nx, endpoint=False),
                     np.linspace(0.0, 1.0, nt))
    return InvariantMetricChart(grid, np.ones(grid.shape), np.ones(grid.shape))


def round_interval_chart(nt=65):
    """Point-base round model: |V|^2 = 2 tau (1 - tau) on [0, 1], both ends fixed."""
    tau = np.linspace(0.0, 1.0, nt)
    grid = ChartGrid("point", np.array([0.0]), tau,
                     boundary_flags=("fixed-point", "fixed-point"))
    return InvariantMetricChart(grid, None, (2.0 * tau * (1.0 - tau))[None, :])


def unit_fs_profile(nx=65, x_max=1.2):
    """Unit Fubini-Study metric in the log-radial chart: h = (1+e^{2x})^{-2}, R = 4."""
    x = np.linspace(-x_max, x_max, nx)
    return QuotientMetricProfile("round-sphere", x, (1.0 + np.exp(2.0 * x)) ** -2)


def sphere_ke_profile(nx=65, x_max=1.2, lam=1.0):
    """Kahler-Einstein sphere for Ric(h) = lam h: h = 2/(lam (1+e^{2x})^2)."""
    if lam <= 0:
        raise ValueError("the sphere model needs lam > 0")
    x = np.linspace(-x_max, x_max, nx)
    return QuotientMetricProfile("round-sphere", x, 2.0 / (lam * (1.0 + np.exp(2.0 * x)) ** 2))


def flat_torus_profile(nx=64, amplitude=0.0, length=1.0):
    """Flat-circle conformal factor h = 1 + amplitude*cos(2 pi x / L)."""
    x = np.linspace(0.0, length, nx, endpoint=False)
    return QuotientMetricProfile("flat-circle", x,
                                 1.0 + amplitude * np.cos(2.0 * np.pi * x / length))


def corrupted_chart(chart, amplitude=0.01):
    """Chart with |V|^2 perturbed off the integrable cone (negative control)."""
    g = chart.grid
    bump = amplitude * np.outer(np.sin(3.0 * np.pi * (g.base_nodes - g.base_nodes[0] + 0.1)),
                                g.tau_nodes)
    return InvariantMetricChart(g, chart.h, chart.w_inv * (1.0 + bump) + amplitude * bump**2,
                                lam=chart.lam)


def flowing_lift(lam=0.0, nx=64, amplitude=0.3, t_end=0.25, burn_in=0.08,
                 margin=1.0, c=1.0):
    """Flow a wavy torus profile and lift the post-transient window.

    Saves every step (the stability-limited step resolves every active mode)
    and discards the initial burn_in, where harmonics above the resolved
    band still dominate the higher time derivatives.
    """
    prof = flat_torus_profile(nx, amplitude)
    dt_max = 0.4 * stability_dt(prof)
    total = burn_in + t_end
    n = int(np.ceil(total / dt_max))
    dt = total / n
    full = krf_integrate(prof, lam, total, dt, save_every=1)
    traj = full.window(burn_in)
    f = choose_f(traj, lam, f"margin({margin})")
    return lift(traj, lam, f, c), traj, f


def solver_chart_n0(nt=65):
    return round_interval_chart(nt)


def solver_chart_n1(nx=24, nt=33):
    """Periodic base times the round fiber; the genuine 2D solver testbed."""
    x = np.linspace(0.0, 1.0, nx, endpoint=False)
    tau = np.linspace(0.0, 1.0, nt)
    grid = ChartGrid("circle", x, tau, boundary_flags=("fixed-point", "fixed-point"))
    w_inv = np.broadcast_to(2.0 * tau * (1.0 - tau), grid.shape).copy()
    return InvariantMetricChart(grid, np.ones(grid.shape), w_inv)


def smooth_potential(chart, amplitude=0.05, mode=1):
    """Admissible manufactured potential, flat at fixed-point endpoints."""
    g = chart.grid
    t = (g.tau_nodes - g.tau_nodes[0]) / (g.tau_nodes[-1] - g.tau_nodes[0])
    bump = t**2 * (1.0 - t) ** 2
    if g.n_base == 1:
        xs = np.cos(2.0 * np.pi * mode * g.base_nodes)
        vals = amplitude * np.outer(xs, bump) + 0.5 * amplitude * bump[None, :]
    else:
        vals = amplitude * (bump + 0.3 * np.sin(2.0 * np.pi * t) * bump)[None, :]
    return PotentialField.create(chart, vals)


def solver_problem(chart, epsilon=0.1, f_amplitude=0.0):
    """MA problem with a smooth F (normalized); F = 0 gives the path start itself."""
    g = chart.grid
    t = (g.tau_nodes - g.tau_nodes[0]) / (g.tau_nodes[-1] - g.tau_nodes[0])
    F = f_amplitude * np.sin(np.pi * t)[None, :] * np.ones(g.shape)
    return MAProblem(chart, InvariantScalar(g, F), epsilon)
