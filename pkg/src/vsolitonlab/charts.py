"""Invariant metric charts, invariant scalars and 2-form component containers.

An invariant Kahler metric on the circle bundle is stored in the moment-map
frame as g = h dz dzbar + w dtau^2 + w^{-1} theta^2 with one torus factor.
The chart carries the base block h (absent when the base is a point) and
w_inv = w^{-1} = |V|^2, which vanishes exactly at flagged fixed-point
endpoints.  theta itself is never stored; only d(theta) is ever needed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFiberError, GridMismatchError
from .grids import ChartGrid, require_finite

CHART_SCHEMA = "vsolitonlab/chart-v1"
SCALAR_SCHEMA = "vsolitonlab/scalar-v1"


def _freeze(arr):
    a = np.array(arr, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class InvariantScalar:
    """A circle-invariant function sampled on a chart grid."""

    grid: ChartGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise GridMismatchError(
                f"scalar shape {v.shape} does not match grid shape {self.grid.shape}"
            )
        require_finite(v, "invariant scalar")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def to_dict(self):
        return {"schema": SCALAR_SCHEMA, "grid": self.grid.to_dict(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(grid=ChartGrid.from_dict(d["grid"]), values=np.asarray(d["values"], dtype=float))


def constant_scalar(grid, value):
    return InvariantScalar(grid, np.full(grid.shape, float(value)))


def tau_scalar(grid):
    """The moment coordinate itself as an invariant scalar."""
    return InvariantScalar(grid, np.broadcast_to(grid.tau_nodes, grid.shape).copy())


@dataclass(frozen=True)
class InvariantMetricChart:
    """Metric data (h, w^{-1}) of an invariant Kahler metric on a chart grid.

    w_inv = |V|^2 must be positive in the interior and exactly zero at
    flagged fixed-point endpoints.  h > 0 everywhere (n_base = 1) or None
    (n_base = 0).  N (torus rank) is fixed at 1.
    """

    grid: ChartGrid
    h: np.ndarray | None
    w_inv: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        w = _freeze(self.w_inv)
        if w.shape != self.grid.shape:
            raise GridMismatchError("w_inv shape does not match grid")
        require_finite(w, "w_inv")
        interior = np.ones(self.grid.nt, dtype=bool)
        for r in self.grid.fixed_point_rows():
            interior[r] = False
            if np.any(w[:, r] != 0.0):
                raise ValueError("w_inv must vanish exactly at fixed-point endpoints")
        if np.any(w[:, interior] <= 0.0):
            j = np.argwhere(w[:, interior] <= 0.0)[0]
            raise DegenerateFiberError(f"w_inv <= 0 off the fixed-point locus near node {tuple(j)}")
        object.__setattr__(self, "w_inv", w)
        if self.grid.n_base == 0:
            if self.h is not None:
                raise ValueError("point-base charts carry no h block")
        else:
            h = _freeze(self.h)
            if h.shape != self.grid.shape:
                raise GridMismatchError("h shape does not match grid")
            require_finite(h, "h")
            if np.any(h <= 0.0):
                raise ValueError("h must be positive")
            object.__setattr__(self, "h", h)

    @property
    def n_base(self):
        return self.grid.n_base

    @property
    def N_torus(self):
        return 1

    def w(self, extrapolated=False):
        """The dtau^2 coefficient w = 1/w_inv.

        Fixed-point rows hold w = inf; with extrapolated=True they are filled
        by quadratic extrapolation from the interior and the returned mask
        marks them as boundary-extrapolated.
        """
        w = np.where(self.w_inv > 0.0, 1.0 / np.where(self.w_inv > 0.0, self.w_inv, 1.0), np.inf)
        mask = np.zeros(self.grid.nt, dtype=bool)
        rows = self.grid.fixed_point_rows()
        for r in rows:
            mask[r] = True
        if extrapolated and rows:
            t = self.grid.tau_nodes
            for r in rows:
                src = (1, 2, 3) if r == 0 else (self.grid.nt - 4, self.grid.nt - 3, self.grid.nt - 2)
                for ix in range(self.grid.nx):
                    w[ix, r] = _quad_extrap(t[list(src)], w[ix, list(src)], t[r])
        return w, mask

    def check_scalar(self, phi):
        if not self.grid.same_grid(phi.grid):
            raise GridMismatchError("scalar sampled on a different grid than the metric")

    def volume_weights(self):
        """Quadrature weights for the invariant volume (constant factors dropped)."""
        dens = np.ones(self.grid.shape) if self.h is None else np.array(self.h)
        return dens * np.outer(self.grid.base_weights, self.grid.tau_weights)

    def to_dict(self):
        return {
            "schema": CHART_SCHEMA,
            "grid": self.grid.to_dict(),
            "h": None if self.h is None else self.h.tolist(),
            "w_inv": self.w_inv.tolist(),
            "lambda": self.lam,
            "n_base": self.n_base,
            "N_torus": 1,
        }

    @classmethod
    def from_dict(cls, d):
        h = d["h"]
        return cls(
            grid=ChartGrid.from_dict(d["grid"]),
            h=None if h is None else np.asarray(h, dtype=float),
            w_inv=np.asarray(d["w_inv"], dtype=float),
            lam=float(d.get("lambda", 0.0)),
        )


def _quad_extrap(xs, ys, x0):
    # Lagrange through three points, evaluated at x0
    x1, x2, x3 = xs
    y1, y2, y3 = ys
    l1 = (x0 - x2) * (x0 - x3) / ((x1 - x2) * (x1 - x3))
    l2 = (x0 - x1) * (x0 - x3) / ((x2 - x1) * (x2 - x3))
    l3 = (x0 - x1) * (x0 - x2) / ((x3 - x1) * (x3 - x2))
    return y1 * l1 + y2 * l2 + y3 * l3


_FRAMES = ("dz_dzbar", "dtau_dz", "dtau_dzbar", "dtau_theta", "dz_theta", "dzbar_theta")


@dataclass(frozen=True)
class FormComponents:
    """Component arrays of a 2-form in the moment-map coframe.

    The represented form is sum(component * frame 2-form) over the frame list
    {dz^dzbar, dtau^dz, dtau^dzbar, dtau^theta, dz^theta, dzbar^theta}.
    Components from single z-derivatives on log-radial charts are stored as
    radial parts (phases implied, see grids module).  boundary_extrapolated
    marks tau rows whose values were filled by extrapolation across a
    fixed-point endpoint.
    """

    grid: ChartGrid
    dz_dzbar: np.ndarray | None = None
    dtau_dz: np.ndarray | None = None
    dtau_dzbar: np.ndarray | None = None
    dtau_theta: np.ndarray | None = None
    dz_theta: np.ndarray | None = None
    dzbar_theta: np.ndarray | None = None
    boundary_extrapolated: np.ndarray | None = None

    def components(self):
        return {name: getattr(self, name) for name in _FRAMES if getattr(self, name) is not None}

    def check_reality(self, atol=1e-12):
        """For a real 2-form: dz^dzbar component imaginary, dtau^dz/dzbar conjugate."""
        scale = 1.0
        if self.dz_dzbar is not None:
            scale = max(scale, np.max(np.abs(self.dz_dzbar)))
            if np.max(np.abs(np.real(self.dz_dzbar))) > atol * scale:
                raise ValueError("dz^dzbar component of a real form must be purely imaginary")
        if self.dtau_dz is not None and self.dtau_dzbar is not None:
            scale = max(scale, np.max(np.abs(self.dtau_dz)))
            if np.max(np.abs(np.conj(self.dtau_dz) - self.dtau_dzbar)) > atol * scale:
                raise ValueError("dtau^dz and dtau^dzbar components must be conjugate")

    def max_abs(self):
        vals = [np.max(np.abs(c)) for c in self.components().values()]
        return max(vals) if vals else 0.0


def scalar_csv(path, scalar, value_label="value"):
    """Emit an invariant scalar as CSV rows (x, tau, value)."""
    grid = scalar.grid
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "tau", value_label])
        for i, x in enumerate(grid.base_nodes):
            for j, t in enumerate(grid.tau_nodes):
                w.writerow([f"{x:.17g}", f"{t:.17g}", f"{scalar.values[i, j]:.17g}"])


def save_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj.to_dict() if hasattr(obj, "to_dict") else obj, fh, indent=1)


def load_chart(path):
    with open(path) as fh:
        return InvariantMetricChart.from_dict(json.load(fh))


def load_scalar(path):
    with open(path) as fh:
        return InvariantScalar.from_dict(json.load(fh))
