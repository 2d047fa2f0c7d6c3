"""Numerical laboratory for circle-invariant soliton metrics and the
normalized Kahler-Ricci flow on symplectic quotients.

Subpackages:
    grids        structured grids, stencils, quadrature
    charts       invariant metric charts, scalars, 2-form components
    calculus     the invariant-calculus identity suite (residual operators)
    flow         normalized Kahler-Ricci flow on reduced model quotients
    lift_descent trajectory <-> soliton-metric correspondence and its checks
    masolve      Newton/continuity solver for the perturbed scalar equation
    flipode      radial flip model: series seed, integration, descent
    cli          reproducible experiment front end
"""

from . import calculus, charts, flipode, flow, grids, lift_descent, masolve
from .charts import FormComponents, InvariantMetricChart, InvariantScalar
from .flow import FlowTrajectory, QuotientMetricProfile, krf_integrate
from .grids import ChartGrid
from .lift_descent import LiftedMetric, descend, ke_product_lift, lift, tau_reparam
from .masolve import MAProblem, PotentialField, continuity_solve, newton_solve

__version__ = "0.1.0"
