"""Structured (base x moment) grids and second-order finite-difference machinery.

Conventions used throughout the package:

* Fields live on a tensor grid (base coordinate x) x (moment coordinate tau)
  and are stored as real arrays of shape ``(nx, nt)``.  Charts with no base
  coordinate (``base_kind == "point"``) use ``nx == 1``.
* Base kinds:
    - ``point``:              no base coordinate (pure moment interval);
    - ``circle`` / ``flat-torus-slice``: periodic base coordinate, z = x + iy
      with fields independent of y, so d/dz = (1/2) d/dx;
    - ``radial-sphere-chart``: log-radial coordinate x = log|z|, so
      d/dz = (1/2) e^{-x} e^{-i arg z} d/dx on invariant fields.  Components
      produced by single z-derivatives are stored as their radial parts; the
      phases cancel in every product the package forms, and mixed second
      derivatives obey 4 d2/dz dzbar = e^{-2x} d2/dx2.
* All stencils are 3-point centered in the interior and one-sided
  second-order at non-periodic boundaries; tau grids may be non-uniform
  (stencil weights from Fornberg's algorithm).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import NonFiniteFieldError

BASE_KINDS = ("point", "circle", "flat-torus-slice", "radial-sphere-chart")
BOUNDARY_FLAGS = ("fixed-point", "free")


def fornberg_weights(nodes, x0, order):
    """Finite-difference weights for the ``order``-th derivative at ``x0``.

    Classic Fornberg recursion; ``nodes`` need not be uniform.
    """
    nodes = np.asarray(nodes, dtype=float)
    n = nodes.size
    c = np.zeros((n, order + 1))
    c[0, 0] = 1.0
    c1 = 1.0
    c4 = nodes[0] - x0
    for i in range(1, n):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = nodes[i] - x0
        for j in range(i):
            c3 = nodes[i] - nodes[j]
            c2 = c2 * c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, order]


def derivative_matrix(nodes, order, periodic=False):
    """Sparse differentiation matrix on ``nodes`` (second-order accurate).

    Interior rows use 3-point stencils; boundary rows use one-sided stencils
    with 3 points for first and 4 points for second derivatives.  Periodic
    grids must be uniform; the implied period is nodes[-1]-nodes[0]+dx.
    """
    nodes = np.asarray(nodes, dtype=float)
    n = nodes.size
    mat = sp.lil_matrix((n, n))
    if periodic:
        dx = nodes[1] - nodes[0]
        if not np.allclose(np.diff(nodes), dx):
            raise ValueError("periodic axis requires uniform spacing")
        if order == 1:
            w = np.array([-0.5, 0.0, 0.5]) / dx
        elif order == 2:
            w = np.array([1.0, -2.0, 1.0]) / dx**2
        else:
            raise ValueError(f"order {order} not supported")
        for i in range(n):
            for k, off in enumerate((-1, 0, 1)):
                mat[i, (i + off) % n] += w[k]
        return mat.tocsr()

    width = 3 if order == 1 else 4
    d = np.diff(nodes)
    uniform = np.allclose(d, d[0], rtol=1e-12, atol=0.0)
    h = d[0]
    # closed-form stencils on uniform grids keep exact-zero row sums
    closed = {
        1: {"int": np.array([-0.5, 0.0, 0.5]) / h,
            "lo": np.array([-1.5, 2.0, -0.5]) / h,
            "hi": np.array([0.5, -2.0, 1.5]) / h},
        2: {"int": np.array([1.0, -2.0, 1.0]) / h**2,
            "lo": np.array([2.0, -5.0, 4.0, -1.0]) / h**2,
            "hi": np.array([-1.0, 4.0, -5.0, 2.0]) / h**2},
    }
    for i in range(n):
        if 1 <= i <= n - 2:
            sl = slice(i - 1, i + 2)
            kind = "int"
        elif i == 0:
            sl = slice(0, min(width, n))
            kind = "lo"
        else:
            sl = slice(max(0, n - width), n)
            kind = "hi"
        if uniform and (sl.stop - sl.start) == len(closed[order][kind]):
            w = closed[order][kind].copy()
        else:
            w = fornberg_weights(nodes[sl], nodes[i], order)
        # derivative rows annihilate constants; pin the rounding so they do exactly
        j = int(np.argmax(np.abs(w)))
        w[j] = -(np.sum(w[:j]) + np.sum(w[j + 1:]))
        mat[i, sl] = w
    return mat.tocsr()


def quadrature_weights(nodes, periodic=False):
    """Integration weights: Simpson on uniform odd-count grids, else trapezoid.

    Periodic axes use equal weights dx (exact for smooth periodic data).
    """
    nodes = np.asarray(nodes, dtype=float)
    n = nodes.size
    if periodic:
        dx = nodes[1] - nodes[0]
        return np.full(n, dx)
    w = np.zeros(n)
    d = np.diff(nodes)
    uniform = np.allclose(d, d[0])
    if uniform and n >= 3 and n % 2 == 1:
        h = d[0]
        w[0::2] = 2.0
        w[1::2] = 4.0
        w[0] = w[-1] = 1.0
        return w * h / 3.0
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w


def require_finite(values, label):
    """Raise NonFiniteFieldError naming the first bad node."""
    values = np.asarray(values)
    if np.all(np.isfinite(values)):
        return
    idx = np.argwhere(~np.isfinite(values))[0]
    raise NonFiniteFieldError(f"{label} is not finite at node index {tuple(int(i) for i in idx)}")


@dataclass(frozen=True)
class ChartGrid:
    """Discretized (base x moment) domain with fixed-point markers.

    boundary_flags marks the two tau endpoints: 'fixed-point' where |V|^2
    vanishes, 'free' otherwise.
    """

    base_kind: str
    base_nodes: np.ndarray
    tau_nodes: np.ndarray
    boundary_flags: tuple = ("free", "free")

    def __post_init__(self):
        if self.base_kind not in BASE_KINDS:
            raise ValueError(f"unknown base_kind {self.base_kind!r}")
        bn = np.array(self.base_nodes, dtype=float)
        tn = np.array(self.tau_nodes, dtype=float)
        bn.setflags(write=False)
        tn.setflags(write=False)
        object.__setattr__(self, "base_nodes", bn)
        object.__setattr__(self, "tau_nodes", tn)
        if self.base_kind == "point":
            if bn.size != 1:
                raise ValueError("point base must have a single base node")
        else:
            if bn.size < 4 or np.any(np.diff(bn) <= 0):
                raise ValueError("base_nodes must be strictly increasing with >= 4 nodes")
        if tn.size < 4 or np.any(np.diff(tn) <= 0):
            raise ValueError("tau_nodes must be strictly increasing with >= 4 nodes")
        for f in self.boundary_flags:
            if f not in BOUNDARY_FLAGS:
                raise ValueError(f"unknown boundary flag {f!r}")

    # -- shape helpers -------------------------------------------------
    @property
    def n_base(self):
        return 0 if self.base_kind == "point" else 1

    @property
    def periodic_base(self):
        return self.base_kind in ("circle", "flat-torus-slice")

    @property
    def shape(self):
        return (self.base_nodes.size, self.tau_nodes.size)

    @property
    def nx(self):
        return self.base_nodes.size

    @property
    def nt(self):
        return self.tau_nodes.size

    def fixed_point_rows(self):
        """Indices of tau rows flagged as fixed-point loci."""
        rows = []
        if self.boundary_flags[0] == "fixed-point":
            rows.append(0)
        if self.boundary_flags[1] == "fixed-point":
            rows.append(self.nt - 1)
        return rows

    # -- differentiation -----------------------------------------------
    @cached_property
    def _dx1(self):
        if self.n_base == 0:
            return None
        return derivative_matrix(self.base_nodes, 1, periodic=self.periodic_base)

    @cached_property
    def _dx2(self):
        if self.n_base == 0:
            return None
        return derivative_matrix(self.base_nodes, 2, periodic=self.periodic_base)

    @cached_property
    def _dt1(self):
        return derivative_matrix(self.tau_nodes, 1)

    @cached_property
    def _dt2(self):
        return derivative_matrix(self.tau_nodes, 2)

    @staticmethod
    def _shifted(f):
        # subtracting a global pivot keeps derivatives of constants exactly zero
        f = np.asarray(f)
        return f - f.flat[0]

    def d_tau(self, f):
        return np.asarray((self._dt1 @ self._shifted(f).T).T)

    def d_tau2(self, f):
        return np.asarray((self._dt2 @ self._shifted(f).T).T)

    def d_x(self, f):
        if self.n_base == 0:
            return np.zeros(np.asarray(f).shape, dtype=np.asarray(f).dtype)
        return np.asarray(self._dx1 @ self._shifted(f))

    def d_x2(self, f):
        if self.n_base == 0:
            return np.zeros(np.asarray(f).shape, dtype=np.asarray(f).dtype)
        return np.asarray(self._dx2 @ self._shifted(f))

    # -- complex-coordinate derivatives on invariant fields -------------
    def _radial_factor(self):
        # e^{-x} column for log-radial charts, 1 otherwise
        if self.base_kind == "radial-sphere-chart":
            return np.exp(-self.base_nodes)[:, None]
        return 1.0

    def dz(self, f):
        """Radial part of d f/dz (phase e^{-i arg z} implied on log-radial charts)."""
        return 0.5 * self._radial_factor() * self.d_x(f)

    def dz_dzbar(self, f):
        """d^2 f / dz dzbar on invariant fields (real)."""
        if self.base_kind == "radial-sphere-chart":
            return 0.25 * np.exp(-2.0 * self.base_nodes)[:, None] * self.d_x2(f)
        return 0.25 * self.d_x2(f)

    def dzbar_of_dz_phased(self, c):
        """d/dzbar of a component carrying the e^{-i arg z} phase of a prior d/dz.

        On periodic charts this is (1/2) d/dx; on log-radial charts the phase
        derivative contributes an extra +c term: (1/2) e^{-x} (d/dx + 1) c.
        """
        if self.base_kind == "radial-sphere-chart":
            return 0.5 * np.exp(-self.base_nodes)[:, None] * (self.d_x(c) + np.asarray(c))
        return 0.5 * self.d_x(c)

    # -- quadrature ------------------------------------------------------
    @cached_property
    def tau_weights(self):
        w = quadrature_weights(self.tau_nodes)
        w.setflags(write=False)
        return w

    @cached_property
    def base_weights(self):
        if self.n_base == 0:
            w = np.ones(1)
        else:
            w = quadrature_weights(self.base_nodes, periodic=self.periodic_base)
            if self.base_kind == "radial-sphere-chart":
                # (i/2) dz^dzbar = e^{2x} dx ^ d(arg z)
                w = w * np.exp(2.0 * self.base_nodes)
        w.setflags(write=False)
        return w

    def same_grid(self, other):
        return (
            self.base_kind == other.base_kind
            and self.base_nodes.shape == other.base_nodes.shape
            and np.array_equal(self.base_nodes, other.base_nodes)
            and np.array_equal(self.tau_nodes, other.tau_nodes)
            and self.boundary_flags == other.boundary_flags
        )

    def to_dict(self):
        return {
            "base_kind": self.base_kind,
            "base_nodes": self.base_nodes.tolist(),
            "tau_nodes": self.tau_nodes.tolist(),
            "boundary_flags": list(self.boundary_flags),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            base_kind=d["base_kind"],
            base_nodes=np.asarray(d["base_nodes"], dtype=float),
            tau_nodes=np.asarray(d["tau_nodes"], dtype=float),
            boundary_flags=tuple(d["boundary_flags"]),
        )
