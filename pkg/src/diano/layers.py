"""Neural-operator building blocks on GridFields.

Layers accept fields with or without a leading batch axis: values are either
(channels, *spatial) or (batch, channels, *spatial). Parameters are plain
dicts of Tensors so optimizers can walk them generically; complex spectral
weights are stored as separate real/imaginary leaves and packed on the tape.

Spectral convolutions retain the lowest frequencies per axis. On full FFT
axes the retained set includes the negative-frequency mirror, giving one
weight block per low/high corner combination (1 block in 1D, 2 in 2D, 4 in
3D); the half-spectrum last axis keeps a single low block.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fdm import GridField

__all__ = [
    "ACTIVATIONS",
    "SpectralWeights",
    "activation_fn",
    "make_mlp_params",
    "lift",
    "project",
    "make_skip_params",
    "spectral_conv",
    "fourier_block",
    "downsample_avg",
    "make_tconv_params",
    "upsample_tconv",
    "pointwise_linear",
]

_SPATIAL_LETTERS = "xyz"

ACTIVATIONS = {
    "gelu": ad.gelu,
    "relu": ad.relu,
    "silu": ad.silu,
    "tanh": ad.tanh,
    "identity": lambda t: t,
}


def activation_fn(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation '{name}'") from None


def _ensure_batched(f: GridField):
    """Values as (batch, channels, *spatial), plus whether batch was added."""
    v = f.values
    extra = v.ndim - f.n_axes
    if extra == 2:
        return v, False
    if extra == 1:
        return ad.reshape(v, (1,) + v.shape), True
    raise ValueError("field must be (channels, *spatial) or (batch, channels, *spatial)")


def _restore(f: GridField, out: Tensor, squeeze: bool) -> GridField:
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    return GridField(out, f.extents)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=np.float64) -> Tensor:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-s, s, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# Pointwise networks


def pointwise_linear(vals: Tensor, w: Tensor, b: Tensor | None, n_axes: int) -> Tensor:
    """Per-point channel mixing: (batch, cin, *sp) x (cin, cout) -> (batch, cout, *sp)."""
    sp = _SPATIAL_LETTERS[:n_axes]
    out = ad.einsum2(f"bi{sp},io->bo{sp}", vals, w)
    if b is not None:
        out = ad.add(out, ad.reshape(b, (1, b.shape[0]) + (1,) * n_axes))
    return out


def make_mlp_params(rng, c_in: int, hidden: int, c_out: int, dtype=np.float64) -> dict:
    return {
        "w1": glorot_uniform(rng, (c_in, hidden), c_in, hidden, dtype),
        "b1": _zeros((hidden,), dtype),
        "w2": glorot_uniform(rng, (hidden, c_out), hidden, c_out, dtype),
        "b2": _zeros((c_out,), dtype),
    }


def _pointwise_mlp(f: GridField, params: dict, act: str) -> GridField:
    vals, squeeze = _ensure_batched(f)
    if vals.shape[1] != params["w1"].shape[0]:
        raise ValueError(f"expected {params['w1'].shape[0]} channels, got {vals.shape[1]}")
    h = pointwise_linear(vals, params["w1"], params["b1"], f.n_axes)
    h = activation_fn(act)(h)
    out = pointwise_linear(h, params["w2"], params["b2"], f.n_axes)
    return _restore(f, out, squeeze)


def lift(x: GridField, params: dict, act: str = "gelu") -> GridField:
    """Raise channel count with a per-point 2-layer MLP."""
    return _pointwise_mlp(x, params, act)


def project(x: GridField, params: dict, act: str = "gelu") -> GridField:
    """Lower channel count with a per-point 2-layer MLP."""
    return _pointwise_mlp(x, params, act)


# ---------------------------------------------------------------------------
# Spectral convolution


@dataclass
class SpectralWeights:
    """Complex mode multipliers, one block per retained spectrum corner.

    ``modes`` is the requested per-axis retention (clamped to the build grid);
    ``blocks`` maps each corner signature (e.g. ("low", "high")) over the full
    FFT axes to a (re, im) pair of real Tensors shaped (cin, cout, m1..md).
    """

    in_channels: int
    out_channels: int
    modes: tuple
    blocks: list

    @property
    def n_axes(self) -> int:
        return len(self.modes)

    def tensors(self) -> list:
        out = []
        for _, re, im in self.blocks:
            out.extend((re, im))
        return out

    @classmethod
    def create(cls, rng: np.random.Generator, c_in: int, c_out: int, modes,
               grid_sizes, dtype=np.float64) -> "SpectralWeights":
        modes = (modes,) * len(grid_sizes) if np.isscalar(modes) else tuple(modes)
        if len(modes) != len(grid_sizes):
            raise ValueError("one mode count per spatial axis required")
        d = len(grid_sizes)
        scale = 1.0 / (c_in * c_out)
        blocks = []
        for corner in itertools.product(("low", "high"), repeat=d - 1):
            sizes = []
            for kind, m, n in zip(corner, modes[:-1], grid_sizes[:-1]):
                cap = (n + 1) // 2 if kind == "low" else n // 2
                sizes.append(min(int(m), cap))
            sizes.append(min(int(modes[-1]), grid_sizes[-1] // 2 + 1))
            if any(s < 1 for s in sizes):
                continue  # a 1-point axis has no high corner
            shape = (c_in, c_out) + tuple(sizes)
            re = Tensor(rng.uniform(0.0, scale, size=shape).astype(dtype),
                        requires_grad=True)
            im = Tensor(rng.uniform(0.0, scale, size=shape).astype(dtype),
                        requires_grad=True)
            blocks.append((corner, re, im))
        return cls(c_in, c_out, modes, blocks)


def _corner_slices(corner, block_shape, spatial):
    """Spectrum slices targeted by one corner block on this grid."""
    d = len(spatial)
    half = spatial[-1] // 2 + 1
    sl = []
    for kind, m, n in zip(corner, block_shape[:-1], spatial[:-1]):
        if kind == "low":
            if m > (n + 1) // 2:
                raise ValueError(f"{m} retained modes exceed grid capacity (n={n})")
            sl.append(slice(0, m))
        else:
            if m > n // 2:
                raise ValueError(f"{m} retained modes exceed grid capacity (n={n})")
            sl.append(slice(n - m, n))
    m_last = block_shape[-1]
    if m_last > half:
        raise ValueError(f"{m_last} retained modes exceed grid capacity "
                         f"(n={spatial[-1]})")
    sl.append(slice(0, m_last))
    return tuple(sl)


def spectral_conv(x: GridField, weights: SpectralWeights) -> GridField:
    """Fourier-multiplier layer: rFFT, per-mode complex mixing over channels,
    zeroed non-retained modes, inverse rFFT."""
    vals, squeeze = _ensure_batched(x)
    d = weights.n_axes
    if x.n_axes != d:
        raise ValueError("weights dimensionality does not match the field")
    if vals.shape[1] != weights.in_channels:
        raise ValueError(f"expected {weights.in_channels} channels, got {vals.shape[1]}")
    spatial = vals.shape[2:]
    axes = tuple(range(2, 2 + d))
    spec = ad.rfftn(vals, axes=axes)
    out_shape = (vals.shape[0], weights.out_channels) + spatial[:-1] + (spatial[-1] // 2 + 1,)
    sp = _SPATIAL_LETTERS[:d]
    total = None
    for corner, re, im in weights.blocks:
        spat_sl = _corner_slices(corner, re.shape[2:], spatial)
        grab = (slice(None), slice(None)) + spat_sl
        blk = ad.slice_(spec, grab)
        w = ad.complex_pack(re, im)
        prod = ad.einsum2(f"bi{sp},io{sp}->bo{sp}", blk, w)
        emb = ad.embed(prod, out_shape, grab)
        total = emb if total is None else ad.add(total, emb)
    out = ad.irfftn(total, s=spatial, axes=axes)
    return _restore(x, out, squeeze)


def make_skip_params(rng, c_in: int, c_out: int, dtype=np.float64) -> dict:
    return {
        "w": glorot_uniform(rng, (c_in, c_out), c_in, c_out, dtype),
        "b": _zeros((c_out,), dtype),
    }


def fourier_block(x: GridField, weights: SpectralWeights, skip_params: dict,
                  act: str = "gelu") -> GridField:
    """activation(spectral_conv(x) + pointwise skip)."""
    conv = spectral_conv(x, weights)
    vals, squeeze = _ensure_batched(x)
    skip = pointwise_linear(vals, skip_params["w"], skip_params["b"], x.n_axes)
    conv_vals, _ = _ensure_batched(conv)
    out = activation_fn(act)(ad.add(conv_vals, skip))
    return _restore(x, out, squeeze)


# ---------------------------------------------------------------------------
# Resampling


def downsample_avg(x: GridField, factors) -> GridField:
    """Block-mean pooling over spatial axes; extents are preserved so the
    coarse grid keeps physical spacing (max-min)/(n-1)."""
    factors = tuple(int(f) for f in factors)
    if len(factors) != x.n_axes:
        raise ValueError("one factor per spatial axis required")
    out = ad.avg_pool(x.values, factors)
    return GridField(out, x.extents)


def make_tconv_params(rng, c_in: int, c_out: int, factors,
                      dtype=np.float64) -> dict:
    """Transposed-conv kernel sized 2*factor per upsampled axis (1 where the
    factor is 1, which leaves that axis untouched)."""
    factors = tuple(int(f) for f in factors)
    kshape = tuple(2 * f if f > 1 else 1 for f in factors)
    vol = int(np.prod(kshape))
    w = glorot_uniform(rng, (c_in, c_out) + kshape, c_in * vol, c_out * vol, dtype)
    return {"w": w, "b": _zeros((c_out,), dtype)}


def upsample_tconv(x: GridField, factors, params: dict) -> GridField:
    """Learned upsampling: stride = factor, kernel 2*factor, symmetric
    padding, target size fixed at n*factor exactly."""
    factors = tuple(int(f) for f in factors)
    vals, squeeze = _ensure_batched(x)
    w = params["w"]
    if vals.shape[1] != w.shape[0]:
        raise ValueError(f"expected {w.shape[0]} channels, got {vals.shape[1]}")
    expect_k = tuple(2 * f if f > 1 else 1 for f in factors)
    if w.shape[2:] != expect_k:
        raise ValueError("kernel shape does not match the upsampling factors")
    stride = factors
    padding = tuple((f + 1) // 2 if f > 1 else 0 for f in factors)
    out_sizes = tuple(n * f for n, f in zip(vals.shape[2:], factors))
    out = ad.conv_transpose_nd(vals, w, stride, padding, out_sizes)
    out = ad.add(out, ad.reshape(params["b"], (1, w.shape[1]) + (1,) * x.n_axes))
    return _restore(x, out, squeeze)
