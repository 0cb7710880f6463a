"""Model variants: grid-latent autoencoders with optional latent PDE coupling,
plus two dense/convolutional baselines.

The symmetric variants (static, temporal, fusion) halve every spatial axis
``n_stages`` times between Fourier blocks, collapse to a single channel, and
mirror the path on the way back up.  The geometric variant keeps full
resolution through its Fourier blocks and removes one axis entirely by a
full-axis average pool, giving a 1D latent that a 1D advection-diffusion
model can evolve.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from . import pde
from .autodiff import Tensor
from .fdm import GridField
from .layers import _ensure_batched, _restore

VARIANTS = ("static", "temporal", "geometric", "fusion", "nn_ae", "cnn_ae")
_SYMMETRIC = ("static", "temporal", "fusion")

# appendix baseline ladders, fixed regardless of input size
_NN_HIDDEN = (2048, 512, 128)
_CNN_CHANNELS = (1, 64, 128, 256)


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class ModelSpec:
    """Architecture description; everything needed to rebuild a model
    deterministically from a seed.

    ``compression_ratio`` is the per-axis spatial reduction for symmetric
    variants (a power of 2, one halving per stage).  ``latent_modes`` is the
    dense bottleneck width of the NN-AE baseline.  ``collapse_axis`` picks
    the axis the geometric variant removes.
    """

    variant: str
    fourier_modes: int = 8
    compression_ratio: int = 4
    n_stages: int | None = None
    width: int = 32
    latent_modes: int = 8
    pde: pde.PdeConfig | None = None
    collapse_axis: int | None = None
    seed: int = 0
    act: str = "gelu"
    ppe_rhs_only: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}'")
        if self.fourier_modes < 1 or self.width < 1:
            raise ValueError("fourier_modes and width must be positive")
        if self.variant in _SYMMETRIC:
            if not _is_pow2(self.compression_ratio):
                raise ValueError("compression_ratio must be a power of 2")
            stages = int(round(np.log2(self.compression_ratio)))
            if self.n_stages is None:
                self.n_stages = stages
            elif self.n_stages != stages:
                raise ValueError(
                    f"n_stages={self.n_stages} inconsistent with "
                    f"compression_ratio={self.compression_ratio}")
        elif self.n_stages is None:
            self.n_stages = 2
        if self.n_stages < 0 or (self.variant == "geometric" and self.n_stages < 1):
            raise ValueError("n_stages must be positive")

        if self.variant == "geometric":
            if self.collapse_axis not in (0, 1):
                raise ValueError("geometric variant requires collapse_axis 0 or 1")
        elif self.collapse_axis is not None:
            raise ValueError("collapse_axis only applies to the geometric variant")

        needs_pde = self.variant in ("temporal", "geometric", "fusion")
        if needs_pde and self.pde is None:
            raise ValueError(f"variant '{self.variant}' requires a pde config")
        if not needs_pde and self.pde is not None:
            raise ValueError(f"variant '{self.variant}' takes no pde config")
        if self.variant == "temporal" and self.pde.model not in pde.VTE_MODELS:
            raise ValueError("temporal variant requires a vorticity-transport model")
        if self.variant == "fusion" and self.pde.model != "ppe_3d":
            raise ValueError("fusion variant requires the ppe_3d model")
        if self.variant == "geometric":
            # the latent lives on the kept axis, so the 1D model must name it
            want = "vte_linear_1d_x" if self.collapse_axis == 1 else "vte_linear_1d_y"
            if self.pde.model != want:
                raise ValueError(
                    f"collapse_axis={self.collapse_axis} keeps axis "
                    f"{1 - self.collapse_axis}; pde model must be '{want}'")
        if self.ppe_rhs_only and self.variant != "fusion":
            raise ValueError("ppe_rhs_only only applies to the fusion variant")
        if self.variant == "nn_ae" and self.latent_modes not in (8, 16, 32):
            warnings.warn(
                f"latent_modes={self.latent_modes} is outside the benchmarked "
                "{8, 16, 32} range", stacklevel=2)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "fourier_modes": self.fourier_modes,
            "compression_ratio": self.compression_ratio,
            "n_stages": self.n_stages,
            "width": self.width,
            "latent_modes": self.latent_modes,
            "pde": None if self.pde is None else self.pde.to_dict(),
            "collapse_axis": self.collapse_axis,
            "seed": self.seed,
            "act": self.act,
            "ppe_rhs_only": self.ppe_rhs_only,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if d.get("pde") is not None:
            d["pde"] = pde.PdeConfig.from_dict(d["pde"])
        return cls(**d)


@dataclass
class LatentState:
    """A latent-grid snapshot plus the timestep index it represents.

    ``collapsed_extent`` survives the geometric 2D-to-1D collapse so the
    decoder can restore the removed axis with its physical extents.
    """

    values: GridField
    index: int = 0
    collapsed_extent: tuple | None = None


# ---------------------------------------------------------------------------
# Parameter construction


def _pointwise_1x1_params(rng, c_in: int, c_out: int, dtype) -> dict:
    return {
        "w": layers.glorot_uniform(rng, (c_in, c_out), c_in, c_out, dtype),
        "b": layers._zeros((c_out,), dtype),
    }


def _build_symmetric_encoder(rng, spec: ModelSpec, sizes: tuple, dtype) -> dict:
    w = spec.width
    blocks = []
    cur = tuple(sizes)
    for _ in range(spec.n_stages):
        blocks.append({
            "spectral": layers.SpectralWeights.create(
                rng, w, w, spec.fourier_modes, cur, dtype),
            "skip": layers.make_skip_params(rng, w, w, dtype),
        })
        cur = tuple(s // 2 for s in cur)
    return {
        "lift": layers.make_mlp_params(rng, 1, 32, w, dtype),
        "blocks": blocks,
        "collapse": _pointwise_1x1_params(rng, w, 1, dtype),
    }


def _build_symmetric_decoder(rng, spec: ModelSpec, latent_sizes: tuple, dtype) -> dict:
    w = spec.width
    d = len(latent_sizes)
    blocks, tconvs = [], []
    cur = tuple(latent_sizes)
    for _ in range(spec.n_stages):
        blocks.append({
            "spectral": layers.SpectralWeights.create(
                rng, w, w, spec.fourier_modes, cur, dtype),
            "skip": layers.make_skip_params(rng, w, w, dtype),
        })
        tconvs.append(layers.make_tconv_params(rng, w, w, (2,) * d, dtype))
        cur = tuple(s * 2 for s in cur)
    return {
        "expand": _pointwise_1x1_params(rng, 1, w, dtype),
        "blocks": blocks,
        "tconvs": tconvs,
        "project": layers.make_mlp_params(rng, w, 32, 1, dtype),
    }


def _build_geometric(rng, spec: ModelSpec, sizes: tuple, dtype) -> dict:
    w = spec.width
    enc_blocks, dec_blocks = [], []
    for _ in range(spec.n_stages):
        enc_blocks.append({
            "spectral": layers.SpectralWeights.create(
                rng, w, w, spec.fourier_modes, sizes, dtype),
            "skip": layers.make_skip_params(rng, w, w, dtype),
        })
    restored = sizes[spec.collapse_axis]
    kshape = (restored, 1) if spec.collapse_axis == 0 else (1, restored)
    # stride = kernel = restored size: each output cell sees exactly one tap
    restore_w = layers.glorot_uniform(rng, (w, w) + kshape, w, w, dtype)
    for _ in range(spec.n_stages):
        dec_blocks.append({
            "spectral": layers.SpectralWeights.create(
                rng, w, w, spec.fourier_modes, sizes, dtype),
            "skip": layers.make_skip_params(rng, w, w, dtype),
        })
    return {
        "encoder": {
            "lift": layers.make_mlp_params(rng, 1, 32, w, dtype),
            "blocks": enc_blocks,
            "collapse": _pointwise_1x1_params(rng, w, 1, dtype),
        },
        "decoder": {
            "expand": _pointwise_1x1_params(rng, 1, w, dtype),
            "restore": {"w": restore_w, "b": layers._zeros((w,), dtype)},
            "blocks": dec_blocks,
            "project": layers.make_mlp_params(rng, w, 32, 1, dtype),
        },
    }


def _build_nn_ae(rng, spec: ModelSpec, sizes: tuple, dtype) -> dict:
    flat = int(np.prod(sizes))
    dims = [flat, *_NN_HIDDEN, spec.latent_modes,
            *reversed(_NN_HIDDEN), flat]
    chain = []
    for c_in, c_out in zip(dims[:-1], dims[1:]):
        chain.append({
            "w": layers.glorot_uniform(rng, (c_in, c_out), c_in, c_out, dtype),
            "b": layers._zeros((c_out,), dtype),
        })
    return {"layers": chain}


def _conv_params(rng, c_in: int, c_out: int, dtype, transpose: bool = False) -> dict:
    shape = (c_in, c_out, 3, 3) if transpose else (c_out, c_in, 3, 3)
    return {
        "w": layers.glorot_uniform(rng, shape, c_in * 9, c_out * 9, dtype),
        "b": layers._zeros((c_out,), dtype),
    }


def _build_cnn_ae(rng, dtype) -> dict:
    ch = _CNN_CHANNELS
    enc = [_conv_params(rng, a, b, dtype) for a, b in zip(ch[:-1], ch[1:])]
    enc += [_conv_params(rng, a, b, dtype)
            for a, b in zip(ch[::-1][:-1], ch[::-1][1:])]
    dec = [_conv_params(rng, a, b, dtype) for a, b in zip(ch[:-1], ch[1:])]
    dec += [_conv_params(rng, a, b, dtype, transpose=True)
            for a, b in zip(ch[::-1][:-1], ch[::-1][1:])]
    return {"encoder": enc, "decoder": dec}


def init_params(spec: ModelSpec, spatial_sizes, dtype=np.float64) -> dict:
    """Build the full parameter tree for ``spec`` at the given input grid.

    Spectral weights are sized to the stage resolutions of this grid; they
    still apply to finer grids at evaluation time because retained modes are
    resolution-independent.
    """
    sizes = tuple(int(s) for s in spatial_sizes)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    if spec.variant in ("static", "temporal"):
        _check_divisible(sizes, spec.compression_ratio)
        latent = tuple(s // spec.compression_ratio for s in sizes)
        return {
            "encoder": _build_symmetric_encoder(rng, spec, sizes, dtype),
            "decoder": _build_symmetric_decoder(rng, spec, latent, dtype),
        }
    if spec.variant == "fusion":
        if len(sizes) != 3:
            raise ValueError("fusion variant expects a 3D grid")
        _check_divisible(sizes, spec.compression_ratio)
        latent = tuple(s // spec.compression_ratio for s in sizes)
        return {
            "enc_u": _build_symmetric_encoder(rng, spec, sizes, dtype),
            "enc_v": _build_symmetric_encoder(rng, spec, sizes, dtype),
            "enc_w": _build_symmetric_encoder(rng, spec, sizes, dtype),
            "decoder": _build_symmetric_decoder(rng, spec, latent, dtype),
        }
    if spec.variant == "geometric":
        if len(sizes) != 2:
            raise ValueError("geometric variant expects a 2D grid")
        return _build_geometric(rng, spec, sizes, dtype)
    if spec.variant == "nn_ae":
        return _build_nn_ae(rng, spec, sizes, dtype)
    if spec.variant == "cnn_ae":
        if len(sizes) != 2:
            raise ValueError("cnn_ae expects a 2D grid")
        for s in sizes:
            if s % 8:
                raise ValueError("cnn_ae input sizes must be divisible by 8")
        return _build_cnn_ae(rng, dtype)
    raise AssertionError(spec.variant)


def _check_divisible(sizes, cr: int):
    if any(s % cr for s in sizes):
        raise ValueError(f"spatial sizes {sizes} not divisible by "
                         f"compression_ratio {cr}")


def iter_tensors(tree, prefix: str = ""):
    """Yield (path, Tensor) leaves of a parameter tree in build order."""
    if isinstance(tree, Tensor):
        yield prefix, tree
    elif isinstance(tree, layers.SpectralWeights):
        for corner, re, im in tree.blocks:
            tag = "".join(c[0] for c in corner) or "all"
            yield f"{prefix}.{tag}.re", re
            yield f"{prefix}.{tag}.im", im
    elif isinstance(tree, dict):
        for k, v in tree.items():
            yield from iter_tensors(v, f"{prefix}.{k}" if prefix else k)
    elif isinstance(tree, (list, tuple)):
        for i, v in enumerate(tree):
            yield from iter_tensors(v, f"{prefix}[{i}]")
    else:
        raise TypeError(f"unexpected leaf {type(tree).__name__} at '{prefix}'")


def count_params(tree) -> int:
    return sum(t.data.size for _, t in iter_tensors(tree))


# ---------------------------------------------------------------------------
# Encode / decode


def _pointwise_1x1(f: GridField, p: dict) -> GridField:
    vals, squeeze = _ensure_batched(f)
    out = layers.pointwise_linear(vals, p["w"], p["b"], f.n_axes)
    return _restore(f, out, squeeze)


def _encode_symmetric(x: GridField, spec: ModelSpec, enc: dict) -> GridField:
    _check_divisible(x.spatial_shape, spec.compression_ratio)
    f = layers.lift(x, enc["lift"], spec.act)
    for blk in enc["blocks"]:
        f = layers.fourier_block(f, blk["spectral"], blk["skip"], spec.act)
        f = layers.downsample_avg(f, (2,) * f.n_axes)
    return _pointwise_1x1(f, enc["collapse"])


def _decode_symmetric(zf: GridField, spec: ModelSpec, dec: dict) -> GridField:
    f = _pointwise_1x1(zf, dec["expand"])
    for blk, tc in zip(dec["blocks"], dec["tconvs"]):
        f = layers.fourier_block(f, blk["spectral"], blk["skip"], spec.act)
        f = layers.upsample_tconv(f, (2,) * f.n_axes, tc)
    return layers.project(f, dec["project"], spec.act)


def _encode_geometric(x: GridField, spec: ModelSpec, enc: dict) -> LatentState:
    if x.n_axes != 2:
        raise ValueError("geometric encode expects a 2D field")
    f = layers.lift(x, enc["lift"], spec.act)
    for blk in enc["blocks"]:
        f = layers.fourier_block(f, blk["spectral"], blk["skip"], spec.act)
    factors = [1, 1]
    factors[spec.collapse_axis] = x.spatial_shape[spec.collapse_axis]
    f = layers.downsample_avg(f, tuple(factors))
    f = _pointwise_1x1(f, enc["collapse"])
    kept = 1 - spec.collapse_axis
    vals = ad.reshape(f.values, f.values.shape[:-2] + (x.spatial_shape[kept],))
    latent = GridField(vals, (x.extents[kept],))
    return LatentState(latent, 0, collapsed_extent=x.extents[spec.collapse_axis])


def _decode_geometric(z: LatentState, spec: ModelSpec, dec: dict) -> GridField:
    if z.values.n_axes != 1:
        raise ValueError("geometric decode expects a 1D latent")
    if z.collapsed_extent is None:
        raise ValueError("latent is missing the collapsed-axis extents")
    f = _pointwise_1x1(z.values, dec["expand"])
    vals, squeeze = _ensure_batched(f)
    w = dec["restore"]["w"]
    restored = w.shape[2 + spec.collapse_axis]
    n_kept = vals.shape[-1]
    if spec.collapse_axis == 0:
        newshape = vals.shape[:2] + (1, n_kept)
        stride, out_sizes = (restored, 1), (restored, n_kept)
    else:
        newshape = vals.shape[:2] + (n_kept, 1)
        stride, out_sizes = (1, restored), (n_kept, restored)
    out = ad.conv_transpose_nd(ad.reshape(vals, newshape), w, stride, (0, 0),
                               out_sizes)
    out = ad.add(out, ad.reshape(dec["restore"]["b"], (1, w.shape[1], 1, 1)))
    if squeeze:
        out = ad.reshape(out, out.shape[1:])
    ext = [None, None]
    ext[1 - spec.collapse_axis] = z.values.extents[0]
    ext[spec.collapse_axis] = z.collapsed_extent
    f2 = GridField(out, tuple(ext))
    for blk in dec["blocks"]:
        f2 = layers.fourier_block(f2, blk["spectral"], blk["skip"], spec.act)
    return layers.project(f2, dec["project"], spec.act)


def encode(x: GridField, spec: ModelSpec, params: dict,
           component: str | None = None) -> LatentState:
    """Map a full-resolution field to its latent state.

    ``component`` selects which of the fusion encoders to use ("u", "v" or
    "w"); it is rejected for single-encoder variants.
    """
    if spec.variant == "fusion":
        if component not in ("u", "v", "w"):
            raise ValueError("fusion encode requires component 'u', 'v' or 'w'")
        return LatentState(_encode_symmetric(x, spec, params[f"enc_{component}"]))
    if component is not None:
        raise ValueError("component only applies to the fusion variant")
    if spec.variant in ("static", "temporal"):
        return LatentState(_encode_symmetric(x, spec, params["encoder"]))
    if spec.variant == "geometric":
        return _encode_geometric(x, spec, params["encoder"])
    raise ValueError(f"encode is not defined for variant '{spec.variant}'")


def decode(z: LatentState, spec: ModelSpec, params: dict) -> GridField:
    if spec.variant in ("static", "temporal", "fusion"):
        return _decode_symmetric(z.values, spec, params["decoder"])
    if spec.variant == "geometric":
        return _decode_geometric(z, spec, params["decoder"])
    raise ValueError(f"decode is not defined for variant '{spec.variant}'")


# ---------------------------------------------------------------------------
# Forward passes


def forward_static(x: GridField, spec: ModelSpec, params: dict) -> GridField:
    """Reconstruction at the same time instant: decode(encode(x))."""
    if spec.variant not in ("static", "temporal"):
        raise ValueError("forward_static requires a static or temporal spec")
    z = LatentState(_encode_symmetric(x, spec, params["encoder"]))
    return _decode_symmetric(z.values, spec, params["decoder"])


def forward_temporal(x: GridField, spec: ModelSpec, params: dict) -> GridField:
    """One latent step: decode(advance(encode(x_n))) approximates x_{n+1}."""
    if spec.variant != "temporal":
        raise ValueError("forward_temporal requires a temporal spec")
    z = encode(x, spec, params)
    advanced = pde.advance_vte(z.values, spec.pde)
    return decode(LatentState(advanced, z.index + 1), spec, params)


def forward_geometric(x: GridField, spec: ModelSpec, params: dict) -> GridField:
    if spec.variant != "geometric":
        raise ValueError("forward_geometric requires a geometric spec")
    z = encode(x, spec, params)
    advanced = pde.advance_vte(z.values, spec.pde)
    z_next = LatentState(advanced, z.index + 1, z.collapsed_extent)
    return decode(z_next, spec, params)


def fusion_latents(u: GridField, v: GridField, w: GridField,
                   mask: pde.GeometryMask, spec: ModelSpec,
                   params: dict) -> tuple:
    """Encode the velocity components and solve the latent pressure problem.

    Returns (latent_pressure_field, latent_mask).
    """
    if spec.variant != "fusion":
        raise ValueError("fusion_latents requires a fusion spec")
    if mask is None:
        raise ValueError("fusion forward requires a geometry mask")
    for name, f in (("v", v), ("w", w)):
        if f.spatial_shape != u.spatial_shape or f.extents != u.extents:
            raise ValueError(f"velocity component '{name}' grid mismatch")
    zu = _encode_symmetric(u, spec, params["enc_u"])
    zv = _encode_symmetric(v, spec, params["enc_v"])
    zw = _encode_symmetric(w, spec, params["enc_w"])
    lat_mask = pde.downsample_mask(mask, spec.compression_ratio)
    if spec.ppe_rhs_only:
        p = pde.ppe_rhs_only(zu, zv, zw, lat_mask, spec.pde)
    else:
        p = pde.solve_ppe(zu, zv, zw, lat_mask, spec.pde)
    return p, lat_mask


def forward_fusion(u: GridField, v: GridField, w: GridField,
                   mask: pde.GeometryMask, spec: ModelSpec,
                   params: dict) -> GridField:
    """Three encoders, one latent pressure computation, one decoder."""
    p, _ = fusion_latents(u, v, w, mask, spec, params)
    return _decode_symmetric(p, spec, params["decoder"])


def forward_nn_ae(x: GridField, spec: ModelSpec, params: dict) -> GridField:
    """Dense autoencoder over the flattened field."""
    if spec.variant != "nn_ae":
        raise ValueError("forward_nn_ae requires an nn_ae spec")
    vals, squeeze = _ensure_batched(x)
    flat = int(np.prod(vals.shape[1:]))
    chain = params["layers"]
    if chain[0]["w"].shape[0] != flat:
        raise ValueError(f"model was built for input length "
                         f"{chain[0]['w'].shape[0]}, got {flat}")
    h = ad.reshape(vals, (vals.shape[0], flat))
    for i, layer in enumerate(chain):
        h = ad.add(ad.einsum2("bi,io->bo", h, layer["w"]),
                   ad.reshape(layer["b"], (1, layer["b"].shape[0])))
        if i < len(chain) - 1:
            h = ad.relu(h)
    out = ad.reshape(h, vals.shape)
    return _restore(x, out, squeeze)


def _conv_silu(vals: Tensor, p: dict, stride: int, last: bool) -> Tensor:
    out = ad.convnd(vals, p["w"], (stride, stride), (1, 1))
    out = ad.add(out, ad.reshape(p["b"], (1, p["b"].shape[0], 1, 1)))
    return out if last else ad.silu(out)


def _cnn_encode(vals: Tensor, params: dict) -> Tensor:
    if any(s % 8 for s in vals.shape[2:]):
        raise ValueError("cnn_ae input sizes must be divisible by 8")
    h = vals
    for i, p in enumerate(params["encoder"]):
        h = _conv_silu(h, p, stride=2 if i < 3 else 1, last=False)
    return h


def _cnn_decode(h: Tensor, params: dict) -> Tensor:
    dec = params["decoder"]
    for p in dec[:3]:
        h = _conv_silu(h, p, stride=1, last=False)
    for i, p in enumerate(dec[3:]):
        out_sizes = tuple(2 * s for s in h.shape[2:])
        h = ad.conv_transpose_nd(h, p["w"], (2, 2), (1, 1), out_sizes)
        h = ad.add(h, ad.reshape(p["b"], (1, p["b"].shape[0], 1, 1)))
        if i < 2:
            h = ad.silu(h)
    return h


def forward_cnn_ae(x: GridField, spec: ModelSpec, params: dict) -> GridField:
    """Strided convolutional autoencoder; latent is input/8 per axis."""
    if spec.variant != "cnn_ae":
        raise ValueError("forward_cnn_ae requires a cnn_ae spec")
    vals, squeeze = _ensure_batched(x)
    return _restore(x, _cnn_decode(_cnn_encode(vals, params), params), squeeze)
