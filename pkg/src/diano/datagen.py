"""Synthetic dataset generators: manufactured flows written as DIAF
snapshot series with manifests and normalization sidecars.

Three cases mirror the training corpora the models expect. An advecting
street of counter-rotating Gaussian vortices is integrated with the full
nonlinear vorticity transport solver on a periodic box. A pulsatile
two-lobe vorticity pattern follows a sampled inflow waveform. A circular
3D channel with a spherical obstruction carries a Poiseuille-like profile
whose pressure comes from the masked Poisson solver at full resolution.

All generators are deterministic given their arguments; the seed is only
recorded in the manifest to pin the downstream train/test split.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

from . import snapio as sio
from .fdm import GridField
from .pde import PdeConfig, GeometryMask, advance_vte, solve_ppe

__all__ = [
    "default_waveform",
    "gen_vortex_street",
    "gen_stenosis_like",
    "gen_channel3d",
]

ADVECTION_SPEED = 1.0  # bulk speed of the manufactured vortex street


def default_waveform(period: int = 100) -> np.ndarray:
    """One cycle of a strictly positive two-harmonic inflow waveform."""
    if period < 1:
        raise ValueError("period must be at least 1")
    t = np.arange(period) / period
    return 1.0 + 0.5 * np.sin(2 * np.pi * t) + 0.25 * np.sin(4 * np.pi * t)


def _amplitudes(waveform, period: int, n_snapshots: int):
    """Per-snapshot amplitude series from one sampled waveform cycle.

    A user-supplied waveform is treated as one period and tiled; a large
    first-to-last jump suggests it is not actually one period and warns.
    """
    if waveform is None:
        wf = default_waveform(period)
    else:
        wf = np.asarray(waveform, dtype=np.float64)
        if wf.ndim != 1 or wf.size < 1:
            raise ValueError("waveform must be a non-empty 1D sample series")
        # periodic sequences wrap with a step comparable to interior steps
        if wf.size > 2:
            step = float(np.abs(np.diff(wf)).max())
            if abs(wf[0] - wf[-1]) > 2.0 * step:
                warnings.warn("waveform endpoints differ; it does not look "
                              "like one sampled period", stacklevel=3)
    amps = [float(wf[k % wf.size]) for k in range(n_snapshots)]
    return amps, int(wf.size)


def _sidecar(constants, dt: float, provenance: dict) -> dict:
    return {"normalization": constants, "dt": dt, "provenance": provenance}


def _finish(out_dir, entries, split_seed, dt, waveform) -> sio.DatasetManifest:
    manifest = sio.DatasetManifest(entries, split_seed=split_seed, dt=dt,
                                   waveform=waveform)
    sio.save_manifest(manifest, out_dir)
    return manifest


# ---------------------------------------------------------------------------
# Advecting vortex street (2D, nonlinear VTE reference integration)


def _periodic_axes(n: int, domain):
    """Node coordinates and extents for a seam-free periodic box.

    Points sit at spacing L/n and the duplicate endpoint is excluded, so the
    wrap-around stencils see an exactly L-periodic signal.
    """
    axes, extents, spacings = [], [], []
    for lo, hi in domain:
        h = (hi - lo) / n
        axes.append(lo + h * np.arange(n))
        extents.append((lo, lo + h * (n - 1)))
        spacings.append(h)
    return axes, tuple(extents), spacings


def _wrapped(d: np.ndarray, length: float) -> np.ndarray:
    return (d + 0.5 * length) % length - 0.5 * length


def _vortex_street_fields(n: int, domain, k_vortices: int = 4):
    """Initial vorticity and the steady perturbed advection velocity."""
    (x0, x1), (y0, y1) = domain
    lx, ly = x1 - x0, y1 - y0
    (x, y), extents, _ = _periodic_axes(n, domain)
    xg, yg = np.meshgrid(x, y, indexing="ij")
    yc = y0 + 0.5 * ly

    sigma = 0.08 * ly
    omega = np.zeros((n, n))
    for i in range(k_vortices):
        cx = x0 + (i + 0.5) * lx / k_vortices
        cy = yc + (-1.0) ** i * 0.15 * ly
        r2 = _wrapped(xg - cx, lx) ** 2 + _wrapped(yg - cy, ly) ** 2
        omega += (-1.0) ** i * np.exp(-r2 / (2.0 * sigma * sigma))

    # Divergence-free wake perturbation from a periodic streamfunction.
    kx = 2.0 * np.pi * 2.0 / lx
    ky = 2.0 * np.pi / ly
    amp = 0.15 * ADVECTION_SPEED / ky
    u = ADVECTION_SPEED + amp * ky * np.sin(kx * (xg - x0)) * np.cos(ky * (yg - yc))
    v = -amp * kx * np.cos(kx * (xg - x0)) * np.sin(ky * (yg - yc))
    return omega, u, v, extents


def gen_vortex_street(out_dir, n: int = 64,
                      domain=((0.0, 2.0), (0.0, 2.0)),
                      reynolds: float = 100.0, n_snapshots: int = 100,
                      dt: float = 0.01, dtype="float32",
                      seed: int = 0) -> sio.DatasetManifest:
    """Integrate a street of counter-rotating Gaussian vortices.

    The full nonlinear vorticity transport equation marches the initial
    street through a prescribed steady velocity (bulk speed 1 plus an
    oscillatory wake perturbation) on a periodic box, one snapshot per dt.
    Snapshots are scaled by the global max |vorticity| into [-1, 1].
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dx = (domain[0][1] - domain[0][0]) / n
    cfl = dt * ADVECTION_SPEED / dx
    if cfl > 0.8:
        raise ValueError(f"CFL violation: dt*V/dx = {cfl:.3f} > 0.8")
    np_dtype = np.dtype(dtype)

    if n_snapshots == 0:
        return _finish(out, [], seed, dt, None)

    om0, u, v, extents = _vortex_street_fields(n, domain)
    vel = (GridField(u, extents), GridField(v, extents))
    cfg = PdeConfig(model="vte_nonlinear", nu=1.0 / reynolds,
                    V=ADVECTION_SPEED, dt=dt, n_steps=1)
    state = GridField(om0, extents)
    raw = [om0]
    for _ in range(n_snapshots - 1):
        state = advance_vte(state, cfg, vel=vel, periodic=True)
        raw.append(state.values.data.copy())

    fields = [GridField(a, extents) for a in raw]
    normed, constants = sio.normalize(fields, "maxabs")
    prov = {"generator": "gen_vortex_street", "n": n,
            "domain": [list(p) for p in domain], "reynolds": reynolds,
            "dt": dt, "seed": seed}
    entries = []
    for k, f in enumerate(normed):
        name = f"vorticity_{k:04d}.diaf"
        sio.save_snapshot(GridField(f.values.data.astype(np_dtype), extents),
                          out / name, meta=_sidecar(constants, dt, prov))
        entries.append({"file": name, "role": "vorticity"})
    return _finish(out, entries, seed, dt, None)


# ---------------------------------------------------------------------------
# Pulsatile two-lobe pattern (2D, closed form)


def gen_stenosis_like(out_dir, n: int = 64, waveform=None,
                      n_snapshots: int = 100, period: int = 100,
                      dtype="float32", seed: int = 0) -> sio.DatasetManifest:
    """Two counter-rotating vorticity lobes driven by an inflow waveform.

    The waveform is one sampled cycle (default: two positive harmonics,
    ``period`` samples per cycle) tiled across the snapshot series; the
    lobe amplitude tracks it exactly. Snapshots are scaled by the global
    max |vorticity| into [-1, 1].
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np_dtype = np.dtype(dtype)
    amps, cycle = _amplitudes(waveform, period, n_snapshots)
    dt = 1.0 / cycle  # one waveform cycle spans one time unit

    if n_snapshots == 0:
        return _finish(out, [], seed, dt, [])

    x = np.linspace(0.0, 1.0, n)[:, None]
    y = np.linspace(0.0, 1.0, n)[None, :]
    extents = ((0.0, 1.0), (0.0, 1.0))
    sigma = 0.08
    lobe = lambda cx, cy: np.exp(-((x - cx) ** 2 + (y - cy) ** 2)
                                 / (2.0 * sigma * sigma))
    base = lobe(0.55, 0.65) - lobe(0.55, 0.35)

    fields = [GridField(a * base, extents) for a in amps]
    normed, constants = sio.normalize(fields, "maxabs")
    prov = {"generator": "gen_stenosis_like", "n": n, "period": cycle,
            "seed": seed}
    entries = []
    for k, f in enumerate(normed):
        name = f"vorticity_{k:04d}.diaf"
        sio.save_snapshot(GridField(f.values.data.astype(np_dtype), extents),
                          out / name, meta=_sidecar(constants, dt, prov))
        entries.append({"file": name, "role": "vorticity"})
    return _finish(out, entries, seed, dt, amps)


# ---------------------------------------------------------------------------
# Pulsatile 3D channel with a spherical obstruction


def _channel_geometry(n: int, channel_radius: float, obstruction_radius: float):
    """Fluid mask and unit-amplitude (u, v, w) on the unit cube."""
    c = np.linspace(0.0, 1.0, n)
    xg, yg, zg = np.meshgrid(c, c, c, indexing="ij")
    s2 = (yg - 0.5) ** 2 + (zg - 0.5) ** 2
    d2 = (xg - 0.5) ** 2 + s2
    mask = ((s2 <= channel_radius ** 2)
            & (d2 > obstruction_radius ** 2)).astype(np.float64)

    # Poiseuille profile, slowed near the obstruction so du/dx is nonzero.
    ell = 0.15
    blocking = 1.0 - np.exp(-d2 / (2.0 * ell * ell))
    u = (1.0 - s2 / channel_radius ** 2) * blocking * mask
    swirl = 0.3
    v = swirl * u * (-(zg - 0.5) / channel_radius)
    w = swirl * u * ((yg - 0.5) / channel_radius)
    return mask, u, v, w


def gen_channel3d(out_dir, n: int = 16, waveform=None, n_snapshots: int = 20,
                  period: int = 100, channel_radius: float = 0.35,
                  obstruction_radius: float = 0.15, rho: float = 1.06,
                  dtype="float32", seed: int = 0) -> sio.DatasetManifest:
    """Pulsatile Poiseuille-like flow in a circular channel, 3D.

    A binary mask marks fluid cells inside the channel and outside a
    spherical obstruction. Velocities scale with the inflow waveform;
    pressure comes from one tight full-resolution Poisson solve scaled by
    amplitude squared (the source term is quadratic in velocity and the
    masked Jacobi iteration is linear in the source, so the scaling is
    exact). Each component is min-max scaled to [0, 1] across the series
    and ghost points are re-zeroed after scaling.
    """
    if obstruction_radius >= channel_radius:
        raise ValueError("obstruction radius must be smaller than the "
                         "channel radius")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np_dtype = np.dtype(dtype)
    amps, cycle = _amplitudes(waveform, period, n_snapshots)
    dt = 1.0 / cycle

    if n_snapshots == 0:
        return _finish(out, [], seed, dt, [])

    mask_arr, u1, v1, w1 = _channel_geometry(n, channel_radius,
                                             obstruction_radius)
    extents = ((0.0, 1.0),) * 3
    mask = GeometryMask(GridField(mask_arr, extents))

    a2_max = max((a * a for a in amps), default=0.0)
    cfg = PdeConfig(model="ppe_3d", rho=rho,
                    jacobi_tol=1e-7 / max(1.0, a2_max),
                    jacobi_max_iter=100_000)
    residuals: list = []
    p1 = solve_ppe(GridField(u1, extents), GridField(v1, extents),
                   GridField(w1, extents), mask, cfg, residuals=residuals)
    if residuals[-1] >= cfg.jacobi_tol:
        raise RuntimeError("pressure solve did not converge: residual "
                           f"{residuals[-1]:.3e} after {len(residuals)} sweeps")
    p1 = p1.values.data

    series = {
        "u": [GridField(a * u1, extents) for a in amps],
        "v": [GridField(a * v1, extents) for a in amps],
        "w": [GridField(a * w1, extents) for a in amps],
        "pressure": [GridField(a * a * p1, extents) for a in amps],
    }
    prov = {"generator": "gen_channel3d", "n": n, "period": cycle,
            "channel_radius": channel_radius,
            "obstruction_radius": obstruction_radius, "rho": rho, "seed": seed}

    entries = [{"file": "mask.diaf", "role": "mask"}]
    sio.save_snapshot(GridField(mask_arr.astype(np_dtype), extents),
                      out / "mask.diaf",
                      meta=_sidecar(None, dt, prov))
    normed, consts = {}, {}
    for role, fs in series.items():
        normed[role], consts[role] = sio.normalize(fs, "minmax")
    for k in range(n_snapshots):
        for role in ("u", "v", "w", "pressure"):
            name = f"{role}_{k:04d}.diaf"
            vals = (normed[role][k].values.data * mask_arr).astype(np_dtype)
            sio.save_snapshot(GridField(vals, extents), out / name,
                              meta=_sidecar(consts[role], dt, prov))
            entries.append({"file": name, "role": role})
    return _finish(out, entries, seed, dt, amps)
