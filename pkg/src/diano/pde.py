"""PDE operators solved on latent grids.

Six models share one config: the full nonlinear vorticity transport equation,
four linearized/reduced VTE variants, and the 3D pressure-Poisson equation.
Every operator is differentiable end to end; nu, V, and rho may be scalar
Tensors so they can be estimated by gradient descent.

Advection uses the upwind-biased first-derivative scheme with the bias taken
from the sign of the advection velocity; diffusion uses the central second
derivative. Time marching is explicit RK4. The Poisson solve iterates masked
Point-Jacobi sweeps entirely on the tape; only the stopping test reads the
off-tape residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fdm import GridField, StencilScheme, d2dx, ddx, jacobi_sweep, rk4_step

__all__ = [
    "VTE_MODELS",
    "PDE_MODELS",
    "PdeConfig",
    "GeometryMask",
    "PdeInstabilityError",
    "vte_rhs",
    "advance_vte",
    "solve_ppe",
    "ppe_rhs_only",
    "downsample_mask",
]

VTE_MODELS = (
    "vte_nonlinear",
    "vte_linear_2d",
    "vte_stokes_2d",
    "vte_inviscid_2d",
    "vte_linear_1d_x",
    "vte_linear_1d_y",
)
PDE_MODELS = VTE_MODELS + ("ppe_3d",)

_TWO_D_MODELS = ("vte_nonlinear", "vte_linear_2d", "vte_stokes_2d", "vte_inviscid_2d")


class PdeInstabilityError(RuntimeError):
    """Explicit time step blew up (state magnitude grew past the guard)."""


def _scalar(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


@dataclass
class PdeConfig:
    """Physics and solver settings for one latent PDE.

    nu, V, rho accept plain floats or scalar Tensors; Tensor coefficients
    stay on the tape so their gradients are available.
    """

    model: str = "vte_linear_2d"
    nu: object = 0.01
    V: object = 1.0
    rho: object = 1.06
    dt: float = 0.01
    n_steps: int = 1
    jacobi_tol: float = 1e-6
    jacobi_max_iter: int = 150

    def __post_init__(self):
        if self.model not in PDE_MODELS:
            raise ValueError(f"unknown PDE model '{self.model}'")
        if _scalar(self.nu) < 0:
            raise ValueError("nu must be non-negative")
        if self.model in VTE_MODELS and self.dt <= 0:
            raise ValueError("dt must be positive for VTE models")
        if self.model == "ppe_3d":
            if self.jacobi_tol <= 0:
                raise ValueError("jacobi_tol must be positive")
            if self.jacobi_max_iter < 1:
                raise ValueError("jacobi_max_iter must be at least 1")
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be at least 1")
        self.n_steps = int(self.n_steps)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "nu": _scalar(self.nu),
            "V": _scalar(self.V),
            "rho": _scalar(self.rho),
            "dt": float(self.dt),
            "n_steps": int(self.n_steps),
            "jacobi_tol": float(self.jacobi_tol),
            "jacobi_max_iter": int(self.jacobi_max_iter),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PdeConfig":
        return cls(**d)


@dataclass
class GeometryMask:
    """Binary fluid/ghost marker on the same grid as the field it masks."""

    values: GridField

    def __post_init__(self):
        v = self.values.values.data
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("mask must be binary")

    @property
    def tensor(self) -> Tensor:
        return self.values.values


def _advect_term(omega: GridField, axis: int, speed, periodic: bool) -> Tensor:
    """speed * d(omega)/dx_axis with upwind bias from sign(speed)."""
    scheme = StencilScheme("upwind3", axis, bias=np.sign(_scalar(speed)),
                           periodic=periodic)
    return ad.mul(ddx(omega, scheme).values, speed)


def _nonlinear_advect(omega: GridField, axis: int, vel: GridField,
                      periodic: bool) -> Tensor:
    # Pointwise velocity field: bias from the sign of its spatial mean.
    bias = float(np.sign(vel.values.data.mean()))
    scheme = StencilScheme("upwind3", axis, bias=bias, periodic=periodic)
    return ad.mul(vel.values, ddx(omega, scheme).values)


def _axes_for_model(model: str, n_axes: int) -> tuple:
    """Spatial axes the model advects/diffuses along (axis 0 = x)."""
    if model in _TWO_D_MODELS:
        if n_axes != 2:
            raise ValueError(f"{model} needs a 2D field, got {n_axes}D")
        return (0, 1)
    if model == "vte_linear_1d_x":
        if n_axes not in (1, 2):
            raise ValueError(f"{model} needs a 1D or 2D field")
        return (0,)
    if model == "vte_linear_1d_y":
        if n_axes == 1:
            return (0,)
        if n_axes == 2:
            return (1,)
        raise ValueError(f"{model} needs a 1D or 2D field")
    raise ValueError(f"'{model}' is not a VTE model")


def vte_rhs(omega: GridField, cfg: PdeConfig, vel=None,
            periodic: bool = False) -> GridField:
    """d(omega)/dt for the configured VTE variant.

    ``vel`` is the (u, v) GridField pair, required exactly for the nonlinear
    model. ``periodic`` switches the stencils to their wrap-around variants
    (used by the reference data generator; latent marching stays free).
    """
    model = cfg.model
    axes = _axes_for_model(model, omega.n_axes)

    if model == "vte_nonlinear":
        if vel is None:
            raise ValueError("vte_nonlinear requires the (u, v) velocity pair")
        u, v = vel
        if u.spatial_shape != omega.spatial_shape or v.spatial_shape != omega.spatial_shape:
            raise ValueError("velocity grids must match omega")
        rhs = ad.neg(_nonlinear_advect(omega, 0, u, periodic))
        rhs = ad.sub(rhs, _nonlinear_advect(omega, 1, v, periodic))
    elif vel is not None:
        raise ValueError(f"{model} does not take a velocity field")
    elif model in ("vte_linear_2d", "vte_inviscid_2d",
                   "vte_linear_1d_x", "vte_linear_1d_y"):
        rhs = None
        for ax in axes:
            term = _advect_term(omega, ax, cfg.V, periodic)
            rhs = ad.neg(term) if rhs is None else ad.sub(rhs, term)
    else:  # vte_stokes_2d: diffusion only
        rhs = omega.values * 0.0

    if model != "vte_inviscid_2d":
        lap = None
        for ax in axes:
            term = d2dx(omega, ax, periodic=periodic).values
            lap = term if lap is None else ad.add(lap, term)
        rhs = ad.add(rhs, ad.mul(lap, cfg.nu))
    return omega.with_values(rhs)


def advance_vte(omega: GridField, cfg: PdeConfig, vel=None,
                periodic: bool = False, instability_factor: float = 1e3) -> GridField:
    """March omega forward n_steps RK4 steps of size dt, fully on tape.

    Raises if max |omega| grows by more than ``instability_factor`` over the
    whole advance, the blow-up signature of an unstable explicit step.
    """
    if cfg.model not in VTE_MODELS:
        raise ValueError(f"'{cfg.model}' is not a VTE model")
    ref = max(float(np.abs(omega.values.data).max()), 1e-12)
    out = omega
    for _ in range(cfg.n_steps):
        out = rk4_step(lambda s: vte_rhs(s, cfg, vel=vel, periodic=periodic),
                       out, cfg.dt)
        if float(np.abs(out.values.data).max()) > instability_factor * ref:
            raise PdeInstabilityError(
                "unstable VTE advance: |omega| grew beyond "
                f"{instability_factor:g}x the initial magnitude")
    return out


def _mask_as(mask: GeometryMask, dtype) -> GeometryMask:
    """Mask with values cast to the working dtype (masks are constants)."""
    if mask.tensor.dtype == dtype:
        return mask
    cast = GridField(Tensor(mask.tensor.data.astype(dtype)), mask.values.extents)
    return GeometryMask(cast)


def _ppe_rhs_tensor(u: GridField, v: GridField, w: GridField,
                    cfg: PdeConfig) -> Tensor:
    bias = np.sign(_scalar(cfg.V))

    def d(f, ax):
        return ddx(f, StencilScheme("upwind3", ax, bias=bias)).values

    ux, uy, uz = d(u, 0), d(u, 1), d(u, 2)
    vx, vy, vz = d(v, 0), d(v, 1), d(v, 2)
    wx, wy, wz = d(w, 0), d(w, 1), d(w, 2)
    sq = ad.add(ad.add(ad.mul(ux, ux), ad.mul(vy, vy)), ad.mul(wz, wz))
    cross = ad.add(ad.add(ad.mul(uy, vx), ad.mul(uz, wx)), ad.mul(vz, wy))
    total = ad.add(sq, cross * 2.0)
    return ad.neg(ad.mul(total, cfg.rho))


def _check_ppe_inputs(u, v, w, mask, cfg):
    if cfg.model != "ppe_3d":
        raise ValueError("config model must be ppe_3d")
    for f in (v, w):
        if f.spatial_shape != u.spatial_shape or f.extents != u.extents:
            raise ValueError("u, v, w must share a grid")
    if u.n_axes != 3:
        raise ValueError("PPE needs 3D fields")
    if (mask.values.spatial_shape != u.spatial_shape
            or mask.values.extents != u.extents):
        raise ValueError("mask grid must match the velocity grid")
    if not np.any(mask.tensor.data):
        raise ValueError("mask is all zero")


def ppe_rhs_only(u: GridField, v: GridField, w: GridField,
                 mask: GeometryMask, cfg: PdeConfig) -> GridField:
    """Masked pressure-Poisson source term without the elliptic solve."""
    _check_ppe_inputs(u, v, w, mask, cfg)
    rhs = _ppe_rhs_tensor(u, v, w, cfg)
    return u.with_values(ad.mul(rhs, _mask_as(mask, u.values.dtype).tensor))


def solve_ppe(u: GridField, v: GridField, w: GridField, mask: GeometryMask,
              cfg: PdeConfig, residuals: list | None = None) -> GridField:
    """Pressure from velocity gradients: build the source term, then iterate
    masked Jacobi sweeps until the residual drops below jacobi_tol or the
    sweep cap is hit. Masked-out points stay exactly zero (they act as the
    Dirichlet anchor fixing the pressure constant).

    ``residuals``, if given, collects the per-sweep residual norms.
    """
    _check_ppe_inputs(u, v, w, mask, cfg)
    rhs_field = u.with_values(_ppe_rhs_tensor(u, v, w, cfg))
    p = u.with_values(Tensor(np.zeros_like(u.values.data)))
    mask_field = _mask_as(mask, u.values.dtype).values
    for _ in range(cfg.jacobi_max_iter):
        p, res = jacobi_sweep(p, rhs_field, mask_field)
        if residuals is not None:
            residuals.append(res)
        if res < cfg.jacobi_tol:
            break
    return p


def downsample_mask(mask: GeometryMask, factor) -> GeometryMask:
    """Coarsen a binary mask: block-average, then threshold at 0.5."""
    f = mask.values
    n_axes = f.n_axes
    factors = (int(factor),) * n_axes if np.isscalar(factor) else tuple(int(x) for x in factor)
    if len(factors) != n_axes:
        raise ValueError("one factor per spatial axis required")
    v = f.values.data
    for n, k in zip(f.spatial_shape, factors):
        if k < 1 or n % k:
            raise ValueError(f"factor {k} does not divide axis of size {n}")
    lead = v.shape[:v.ndim - n_axes]
    block = lead + tuple(x for n, k in zip(f.spatial_shape, factors)
                         for x in (n // k, k))
    mean_axes = tuple(len(lead) + 2 * i + 1 for i in range(n_axes))
    pooled = v.reshape(block).mean(axis=mean_axes)
    coarse = (pooled >= 0.5).astype(v.dtype)
    return GeometryMask(GridField(Tensor(coarse), f.extents))
