"""Differentiable finite-difference building blocks on uniform grids.

Derivative operators are materialized once per (scheme, size, spacing) as
dense matrices and applied along the requested axis through the tape, so a
single operation records one node and the adjoint is the transposed matrix.

First-derivative schemes:
  upwind3        explicit 3rd-order upwind-biased stencil, direction set by
                 the sign of the advection speed
  compact_oucs2  implicit 4th-order tridiagonal (Pade) interior resolved with
                 the Thomas algorithm at build time
  central2/4     standard symmetric stencils

Boundary rows use one-sided 2nd-order closures; periodic variants wrap the
interior stencil instead. Second derivatives are the 3-point central stencil.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "GridField",
    "StencilScheme",
    "ddx",
    "d2dx",
    "thomas_solve",
    "rk4_step",
    "jacobi_sweep",
    "first_derivative_matrix",
    "second_derivative_matrix",
]

FIRST_DERIVATIVE_KINDS = ("upwind3", "compact_oucs2", "central2", "central4")


@dataclass(frozen=True)
class StencilScheme:
    """Selects a first-derivative discretization.

    ``bias`` carries the sign of the advection velocity for upwind kinds;
    zero falls back to central differencing. ``periodic`` wraps the stencil
    instead of applying one-sided closures.
    """

    kind: str = "upwind3"
    axis: int = 0
    bias: float = 1.0
    periodic: bool = False

    def __post_init__(self):
        if self.kind not in FIRST_DERIVATIVE_KINDS:
            raise ValueError(f"unknown scheme kind '{self.kind}'")


@dataclass
class GridField:
    """Field sampled on a uniform structured grid.

    ``values`` holds the data with spatial axes trailing: any leading axes
    (batch, channels) are carried along untouched. ``extents`` is one
    (min, max) pair per spatial axis; spacing is (max - min)/(n - 1).
    Extents are immutable through arithmetic; operations return new fields
    with the same extents.
    """

    values: Tensor
    extents: tuple = field(default=((0.0, 1.0),))

    def __post_init__(self):
        if not isinstance(self.values, Tensor):
            self.values = Tensor(self.values)
        self.extents = tuple((float(a), float(b)) for a, b in self.extents)
        if self.values.ndim < len(self.extents):
            raise ValueError("fewer value axes than extents")
        for (a, b), n in zip(self.extents, self.spatial_shape):
            if n < 1 or b <= a:
                raise ValueError("each spatial axis needs at least 1 point and max > min")

    @property
    def n_axes(self) -> int:
        return len(self.extents)

    @property
    def spatial_shape(self) -> tuple:
        return self.values.shape[self.values.ndim - self.n_axes:]

    @property
    def spacing(self) -> tuple:
        # A size-1 axis (fully collapsed) keeps its physical extent as spacing.
        return tuple((b - a) / (n - 1) if n > 1 else (b - a)
                     for (a, b), n in zip(self.extents, self.spatial_shape))

    def axis_index(self, spatial_axis: int) -> int:
        """Absolute values-array axis for spatial axis k (0 = first extent)."""
        if not 0 <= spatial_axis < self.n_axes:
            raise ValueError(f"axis {spatial_axis} out of range for {self.n_axes} spatial axes")
        return self.values.ndim - self.n_axes + spatial_axis

    def coords(self, spatial_axis: int) -> np.ndarray:
        (a, b) = self.extents[spatial_axis]
        return np.linspace(a, b, self.spatial_shape[spatial_axis])

    def with_values(self, values: Tensor) -> "GridField":
        return GridField(values, self.extents)


def _fd_weights(offsets, order: int) -> np.ndarray:
    """Finite-difference weights for d^order/dx^order on unit-spaced offsets
    (Vandermonde solve; exact for polynomials up to len(offsets)-1)."""
    offsets = np.asarray(offsets, dtype=float)
    k = len(offsets)
    a = np.vander(offsets, k, increasing=True).T
    b = np.zeros(k)
    b[order] = math.factorial(order)
    return np.linalg.solve(a, b)


def _one_sided_rows(mat: np.ndarray, dx: float, order: int):
    """Overwrite the first and last rows with 2nd-order one-sided closures."""
    n = mat.shape[0]
    if order == 1:
        fwd = _fd_weights([0, 1, 2], 1) / dx
        bwd = _fd_weights([-2, -1, 0], 1) / dx
        mat[0, :3] = fwd
        mat[-1, -3:] = bwd
    else:
        fwd = _fd_weights([0, 1, 2, 3], 2) / dx ** 2
        bwd = _fd_weights([-3, -2, -1, 0], 2) / dx ** 2
        mat[0, :4] = fwd
        mat[-1, -4:] = bwd


def _band_matrix(n: int, offsets, weights, periodic: bool) -> np.ndarray:
    mat = np.zeros((n, n))
    for off, w in zip(offsets, weights):
        for i in range(n):
            j = i + off
            if periodic:
                mat[i, j % n] += w
            elif 0 <= j < n:
                mat[i, j] += w
            else:
                mat[i, :] = np.nan  # row invalid; replaced by a closure below
    return mat


def _explicit_first(kind: str, n: int, dx: float, bias: float, periodic: bool) -> np.ndarray:
    if kind == "central2" or (kind == "upwind3" and bias == 0.0):
        offsets, weights = (-1, 1), np.array([-0.5, 0.5]) / dx
    elif kind == "central4":
        offsets = (-2, -1, 1, 2)
        weights = np.array([1.0, -8.0, 8.0, -1.0]) / (12.0 * dx)
    elif kind == "upwind3":
        if bias > 0:
            offsets = (-2, -1, 0, 1)
            weights = np.array([1.0, -6.0, 3.0, 2.0]) / (6.0 * dx)
        else:
            offsets = (-1, 0, 1, 2)
            weights = np.array([-2.0, -3.0, 6.0, -1.0]) / (6.0 * dx)
    else:
        raise ValueError(kind)

    mat = _band_matrix(n, offsets, weights, periodic)
    if not periodic:
        bad = np.isnan(mat).any(axis=1)
        central = np.array([-0.5, 0.5]) / dx
        for i in np.where(bad)[0]:
            mat[i] = 0.0
            if 1 <= i <= n - 2:
                mat[i, i - 1], mat[i, i + 1] = central
        _one_sided_rows(mat, dx, order=1)
    return mat


def _compact_first(n: int, dx: float, periodic: bool) -> np.ndarray:
    """4th-order Pade interior: (1/4) f'_{i-1} + f'_i + (1/4) f'_{i+1}
    = (3/2)(f_{i+1} - f_{i-1})/(2 dx). Returns the dense resolved operator."""
    alpha, b = 0.25, 1.5
    rhs = _band_matrix(n, (-1, 1), np.array([-b, b]) / (2 * dx), periodic)
    if periodic:
        lhs = np.eye(n)
        for i in range(n):
            lhs[i, (i - 1) % n] += alpha
            lhs[i, (i + 1) % n] += alpha
        return np.linalg.solve(lhs, rhs)
    rhs[0] = 0.0
    rhs[-1] = 0.0
    _one_sided_rows(rhs, dx, order=1)
    lower = np.full(n - 1, alpha)
    upper = np.full(n - 1, alpha)
    lower[-1] = 0.0  # boundary rows are explicit
    upper[0] = 0.0
    diag = np.ones(n)
    solved = ad.thomas_solve(lower, diag, upper, Tensor(rhs), axis=0)
    return solved.data


_FIRST_CACHE: dict = {}
_SECOND_CACHE: dict = {}


def first_derivative_matrix(kind: str, n: int, dx: float, bias: float = 1.0,
                            periodic: bool = False) -> np.ndarray:
    key = (kind, n, float(dx), float(np.sign(bias)), periodic)
    mat = _FIRST_CACHE.get(key)
    if mat is None:
        if n < 3:
            raise ValueError("need at least 3 points for a first derivative")
        if kind in ("upwind3", "central4") and n < 5 and not periodic:
            raise ValueError(f"{kind} needs at least 5 points")
        if kind == "compact_oucs2":
            mat = _compact_first(n, dx, periodic)
        else:
            mat = _explicit_first(kind, n, dx, bias, periodic)
        _FIRST_CACHE[key] = mat
    return mat


def second_derivative_matrix(n: int, dx: float, periodic: bool = False) -> np.ndarray:
    key = (n, float(dx), periodic)
    mat = _SECOND_CACHE.get(key)
    if mat is None:
        if n < 3:
            raise ValueError("need at least 3 points for a second derivative")
        mat = _band_matrix(n, (-1, 0, 1), np.array([1.0, -2.0, 1.0]) / dx ** 2, periodic)
        if not periodic:
            mat[0] = 0.0
            mat[-1] = 0.0
            _one_sided_rows(mat, dx, order=2)
        _SECOND_CACHE[key] = mat
    return mat


def ddx(f: GridField, scheme: StencilScheme) -> GridField:
    """First derivative along ``scheme.axis`` (a spatial-axis index)."""
    n = f.spatial_shape[scheme.axis]
    dx = f.spacing[scheme.axis]
    mat = first_derivative_matrix(scheme.kind, n, dx, scheme.bias, scheme.periodic)
    mat = mat.astype(f.values.dtype, copy=False)  # keep field precision
    out = ad.axis_matmul(f.values, mat, axis=f.axis_index(scheme.axis))
    return f.with_values(out)


def d2dx(f: GridField, axis: int, periodic: bool = False) -> GridField:
    """Second derivative along spatial axis ``axis`` (3-point central)."""
    n = f.spatial_shape[axis]
    dx = f.spacing[axis]
    mat = second_derivative_matrix(n, dx, periodic)
    mat = mat.astype(f.values.dtype, copy=False)
    out = ad.axis_matmul(f.values, mat, axis=f.axis_index(axis))
    return f.with_values(out)


def thomas_solve(lower, diag, upper, rhs, axis: int = 0) -> Tensor:
    """Tridiagonal solve on the tape; see autodiff.thomas_solve."""
    if not isinstance(rhs, Tensor):
        rhs = Tensor(rhs)
    return ad.thomas_solve(lower, diag, upper, rhs, axis=axis)


def rk4_step(rhs_fn, state: GridField, dt: float) -> GridField:
    """Classical four-stage explicit Runge-Kutta update, fully on tape."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    y = state.values
    k1 = rhs_fn(state).values
    k2 = rhs_fn(state.with_values(y + k1 * (dt / 2.0))).values
    k3 = rhs_fn(state.with_values(y + k2 * (dt / 2.0))).values
    k4 = rhs_fn(state.with_values(y + k3 * dt)).values
    incr = (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
    return state.with_values(y + incr)


def jacobi_sweep(p: GridField, rhs: GridField, mask: GridField):
    """One simultaneous-update sweep of the masked discrete Poisson system
    lap(p) = rhs with zero values outside the grid and at mask-0 points.

    Returns the updated field and the L-inf residual of the update over
    masked-in points. The residual is computed off-tape: it steers the
    iteration but is never differentiated.
    """
    mask_data = mask.values.data
    if not np.any(mask_data):
        raise ValueError("mask is all zero")
    if p.spatial_shape != rhs.spatial_shape or p.spatial_shape != mask.spatial_shape:
        raise ValueError("p, rhs, mask must share a grid")
    if p.extents != rhs.extents or p.extents != mask.extents:
        raise ValueError("p, rhs, mask must share extents")
    spac = p.spacing
    d = sum(2.0 / h ** 2 for h in spac)

    neigh = ad.neighbor_sum(p.values, spac, p.n_axes)
    p_new = ad.mul(ad.sub(neigh, rhs.values) * (1.0 / d), mask.values)

    res = _poisson_residual(p_new.data, rhs.values.data, mask_data, spac, p.n_axes)
    return p.with_values(p_new), res


def _poisson_residual(p, rhs, mask, spacings, n_axes) -> float:
    """L-inf of (rhs - lap(p)) over masked-in points, zero-BC Laplacian."""
    lap = np.zeros_like(p)
    for k, h in enumerate(spacings):
        ax = p.ndim - n_axes + k
        w = 1.0 / (h * h)
        lo = [slice(None)] * p.ndim
        hi = [slice(None)] * p.ndim
        lo[ax] = slice(1, None)
        hi[ax] = slice(None, -1)
        lap[tuple(lo)] += w * p[tuple(hi)]
        lap[tuple(hi)] += w * p[tuple(lo)]
        lap -= 2.0 * w * p
    r = (rhs - lap) * mask
    return float(np.abs(r).max())
