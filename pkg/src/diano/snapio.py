"""Bit-exact snapshot and checkpoint files, dataset manifests, and the
array utilities around them (normalization, resampling, CSV/PGM export).

Snapshot layout (all little-endian): magic "DIAF", version u16, dtype code
u16 (1 = float32, 2 = float64), n_axes u16, then one u32 size per axis, then
one (min, max) float64 extent pair per axis, then the row-major payload.
A snapshot may carry a JSON sidecar at <path>.json holding normalization
constants, the snapshot interval dt, and generator provenance.

Checkpoints are npz archives with one entry per parameter tensor plus a JSON
metadata blob (model spec, optimizer moments, RNG state) so a training run
can resume exactly where it stopped.
"""

from __future__ import annotations

import json
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models as md
from .fdm import GridField

__all__ = [
    "DIAF_MAGIC",
    "DIAF_VERSION",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "MANIFEST_NAME",
    "ROLES",
    "FileFormatError",
    "save_snapshot",
    "load_snapshot",
    "DatasetManifest",
    "save_manifest",
    "load_manifest",
    "LoadedDataset",
    "load_dataset",
    "normalize",
    "denormalize",
    "resample",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "export_field",
]

DIAF_MAGIC = b"DIAF"
DIAF_VERSION = 1
CHECKPOINT_MAGIC = "DIANOCKPT"
CHECKPOINT_VERSION = 1
MANIFEST_NAME = "manifest.json"
ROLES = ("vorticity", "u", "v", "w", "pressure", "mask")

_HEADER = struct.Struct("<4sHHH")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class FileFormatError(ValueError):
    """A file did not parse as the expected format."""


def _spatial_array(f: GridField, what: str) -> np.ndarray:
    """Payload as a bare spatial array; leading axes must all be size 1."""
    v = f.values.data
    lead = v.shape[:v.ndim - f.n_axes]
    if int(np.prod(lead)) != 1:
        raise ValueError(f"{what} must hold one scalar field, got leading axes {lead}")
    return v.reshape(f.spatial_shape)


# ---------------------------------------------------------------------------
# Snapshot files


def save_snapshot(f: GridField, path, meta: dict | None = None) -> Path:
    """Write one scalar field as a DIAF file, plus a JSON sidecar if ``meta``."""
    path = Path(path)
    arr = _spatial_array(f, "snapshot")
    try:
        code = _CODES[arr.dtype]
    except KeyError:
        raise ValueError(f"unsupported payload dtype {arr.dtype}") from None
    n = f.n_axes
    head = _HEADER.pack(DIAF_MAGIC, DIAF_VERSION, code, n)
    sizes = struct.pack(f"<{n}I", *f.spatial_shape)
    ext = struct.pack(f"<{2 * n}d", *[x for pair in f.extents for x in pair])
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    path.write_bytes(head + sizes + ext + payload)
    if meta is not None:
        Path(str(path) + ".json").write_text(
            json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_snapshot(path):
    """Read a DIAF file; returns (field, sidecar dict or None)."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise FileFormatError(f"{path}: truncated header")
    magic, version, code, n = _HEADER.unpack_from(buf)
    if magic != DIAF_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}, expected {DIAF_MAGIC!r}")
    if version != DIAF_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise FileFormatError(f"{path}: unknown dtype code {code}")
    if not 1 <= n <= 8:
        raise FileFormatError(f"{path}: implausible axis count {n}")
    off = _HEADER.size
    if len(buf) < off + 4 * n + 16 * n:
        raise FileFormatError(f"{path}: truncated header")
    sizes = struct.unpack_from(f"<{n}I", buf, off)
    off += 4 * n
    flat = struct.unpack_from(f"<{2 * n}d", buf, off)
    off += 16 * n
    extents = tuple((flat[2 * k], flat[2 * k + 1]) for k in range(n))
    dtype = _DTYPES[code]
    count = int(np.prod(sizes))
    expect = count * dtype.itemsize
    got = len(buf) - off
    if got < expect:
        raise FileFormatError(
            f"{path}: truncated payload, expected {expect} bytes, got {got}")
    if got > expect:
        raise FileFormatError(f"{path}: {got - expect} trailing bytes after payload")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(sizes)
    arr = arr.astype(dtype.newbyteorder("="))  # native-order writable copy
    sidecar = Path(str(path) + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else None
    return GridField(arr, extents), meta


# ---------------------------------------------------------------------------
# Dataset manifests


@dataclass
class DatasetManifest:
    """Ordered snapshot file list with per-file roles and dataset metadata.

    ``waveform`` holds the per-snapshot inflow amplitude series for pulsatile
    datasets; ``dt`` is the sampling interval between snapshots.
    """

    entries: list
    split_seed: int = 0
    dt: float | None = None
    waveform: list | None = None

    def __post_init__(self):
        for e in self.entries:
            if not isinstance(e, dict) or set(e) != {"file", "role"}:
                raise ValueError(f"manifest entry needs exactly file and role: {e}")
            if e["role"] not in ROLES:
                raise ValueError(f"unknown role '{e['role']}'")
        self.split_seed = int(self.split_seed)
        if self.dt is not None:
            self.dt = float(self.dt)
        if self.waveform is not None:
            self.waveform = [float(x) for x in self.waveform]

    def files(self, role: str) -> list:
        return [e["file"] for e in self.entries if e["role"] == role]

    def to_dict(self) -> dict:
        d = {"version": 1, "entries": self.entries, "split_seed": self.split_seed}
        if self.dt is not None:
            d["dt"] = self.dt
        if self.waveform is not None:
            d["waveform"] = self.waveform
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("version", 1) != 1:
            raise FileFormatError(f"unsupported manifest version {d.get('version')}")
        return cls(entries=d["entries"], split_seed=d.get("split_seed", 0),
                   dt=d.get("dt"), waveform=d.get("waveform"))


def save_manifest(manifest: DatasetManifest, dir_path) -> Path:
    p = Path(dir_path) / MANIFEST_NAME
    p.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    return p


def load_manifest(path) -> DatasetManifest:
    """Read a manifest from a dataset directory or a direct JSON path."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise FileFormatError(f"{p}: not valid JSON: {e}") from None
    try:
        return DatasetManifest.from_dict(d)
    except FileFormatError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise FileFormatError(f"{p}: bad manifest: {e}") from None


@dataclass
class LoadedDataset:
    """A manifest plus its snapshots grouped by role, in file order."""

    manifest: DatasetManifest
    fields: dict
    sidecars: dict


def load_dataset(path) -> LoadedDataset:
    """Load every snapshot a manifest lists.

    Enforces the invariant that all snapshots in a dataset share one grid
    and payload dtype.
    """
    p = Path(path)
    base = p if p.is_dir() else p.parent
    manifest = load_manifest(p)
    fields: dict = {}
    sidecars: dict = {}
    ref = None
    for e in manifest.entries:
        f, meta = load_snapshot(base / e["file"])
        if ref is None:
            ref = f
        elif (f.spatial_shape != ref.spatial_shape or f.extents != ref.extents
              or f.values.dtype != ref.values.dtype):
            raise ValueError(
                f"{e['file']}: snapshots in a dataset must share grid and dtype")
        fields.setdefault(e["role"], []).append(f)
        sidecars.setdefault(e["role"], []).append(meta)
    return LoadedDataset(manifest, fields, sidecars)


# ---------------------------------------------------------------------------
# Normalization


def normalize(fields, kind: str):
    """Scale a field (or a sequence sharing one set of constants) into range.

    maxabs divides by the global max |value| (range [-1, 1]); minmax maps the
    global [min, max] onto [0, 1]. Returns (scaled, constants). Constants are
    Python floats (so float64) regardless of payload dtype, and an
    all-constant input degrades to a denominator of 1.
    """
    single = isinstance(fields, GridField)
    fs = [fields] if single else list(fields)
    if not fs:
        raise ValueError("no fields to normalize")
    datas = [f.values.data for f in fs]
    if kind == "maxabs":
        scale = max(float(np.abs(d).max()) for d in datas)
        if scale == 0.0:
            scale = 1.0
        constants = {"kind": "maxabs", "scale": scale}
        out = [f.with_values(f.values.data / scale) for f in fs]
    elif kind == "minmax":
        lo = min(float(d.min()) for d in datas)
        hi = max(float(d.max()) for d in datas)
        denom = hi - lo if hi > lo else 1.0
        constants = {"kind": "minmax", "min": lo, "max": hi}
        out = [f.with_values((f.values.data - lo) / denom) for f in fs]
    else:
        raise ValueError("kind must be 'maxabs' or 'minmax'")
    return (out[0] if single else out), constants


def denormalize(fields, constants: dict):
    """Invert ``normalize`` given its recorded constants."""
    single = isinstance(fields, GridField)
    fs = [fields] if single else list(fields)
    kind = constants["kind"]
    if kind == "maxabs":
        s = float(constants["scale"])
        out = [f.with_values(f.values.data * s) for f in fs]
    elif kind == "minmax":
        lo, hi = float(constants["min"]), float(constants["max"])
        denom = hi - lo if hi > lo else 1.0
        out = [f.with_values(f.values.data * denom + lo) for f in fs]
    else:
        raise ValueError(f"unknown normalization kind '{kind}'")
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Resampling


def _lerp_weights(n_old: int, n_new: int) -> np.ndarray:
    if n_new < 2:
        raise ValueError("target size must be at least 2")
    if n_old == 1:
        return np.ones((n_new, 1))
    pos = np.linspace(0.0, n_old - 1.0, n_new)
    i0 = np.minimum(pos.astype(np.int64), n_old - 2)
    frac = pos - i0
    w = np.zeros((n_new, n_old))
    rows = np.arange(n_new)
    w[rows, i0] = 1.0 - frac
    w[rows, i0 + 1] = frac
    return w


def resample(f: GridField, target_sizes) -> GridField:
    """Separable linear interpolation onto a new uniform grid, extents kept.

    Leading (batch, channel) axes pass through untouched. Interpolation runs
    in float64 and the result is cast back to the payload dtype.
    """
    n_axes = f.n_axes
    if np.isscalar(target_sizes):
        target_sizes = (int(target_sizes),) * n_axes
    target_sizes = tuple(int(s) for s in target_sizes)
    if len(target_sizes) != n_axes:
        raise ValueError("one target size per spatial axis required")
    vals = f.values.data
    out = vals.astype(np.float64)
    for k, (n_old, n_new) in enumerate(zip(f.spatial_shape, target_sizes)):
        w = _lerp_weights(n_old, n_new)
        ax = out.ndim - n_axes + k
        out = np.moveaxis(np.tensordot(w, np.moveaxis(out, ax, 0), axes=(1, 0)), 0, ax)
    return GridField(out.astype(vals.dtype), f.extents)


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    """A deserialized training checkpoint."""

    spec: md.ModelSpec
    params: dict
    spatial_sizes: tuple
    state: dict | None = None
    epoch: int = 0
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, spec: md.ModelSpec, params: dict, spatial_sizes, *,
                    state: dict | None = None, epoch: int = 0,
                    extra: dict | None = None) -> Path:
    """Write spec + parameters (+ optimizer/RNG state) as an npz archive.

    Optimizer moment lists must be aligned with iter_tensors(params) order,
    which is how the training loop builds them. Appends .npz when missing
    and returns the actual path written.
    """
    path = Path(path)
    if path.suffix != ".npz":
        path = Path(str(path) + ".npz")
    named = list(md.iter_tensors(params))
    arrays = {f"param:{n}": t.data for n, t in named}
    meta = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "spatial_sizes": [int(s) for s in spatial_sizes],
        "dtype": named[0][1].data.dtype.name if named else "float64",
        "epoch": int(epoch),
        "extra": extra or {},
    }
    if state is not None:
        if len(state["m"]) != len(named):
            raise ValueError("optimizer state does not match the parameter count")
        meta["adam_step"] = int(state["step"])
        meta["rng"] = state.get("rng")
        for (n, _), m_arr, v_arr in zip(named, state["m"], state["v"]):
            arrays[f"adam_m:{n}"] = m_arr
            arrays[f"adam_v:{n}"] = v_arr
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)
    return path


def load_checkpoint(path) -> Checkpoint:
    """Rebuild spec, parameters, and optimizer state from an npz checkpoint."""
    path = Path(path)
    try:
        archive = np.load(path)
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise FileFormatError(f"{path}: not a checkpoint archive: {e}") from None
    with archive as f:
        if "meta" not in f.files:
            raise FileFormatError(f"{path}: missing checkpoint metadata")
        meta = json.loads(bytes(f["meta"]).decode("utf-8"))
        if meta.get("magic") != CHECKPOINT_MAGIC:
            raise FileFormatError(
                f"{path}: bad checkpoint magic {meta.get('magic')!r}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise FileFormatError(
                f"{path}: unsupported checkpoint version {meta.get('version')}")
        spec = md.ModelSpec.from_dict(meta["spec"])
        sizes = tuple(int(s) for s in meta["spatial_sizes"])
        params = md.init_params(spec, sizes, dtype=np.dtype(meta["dtype"]))
        named = list(md.iter_tensors(params))
        expected = {f"param:{n}" for n, _ in named}
        for n, t in named:
            key = f"param:{n}"
            if key not in f.files:
                raise FileFormatError(f"{path}: missing parameter '{n}'")
            arr = f[key]
            if arr.shape != t.shape:
                raise FileFormatError(
                    f"{path}: parameter '{n}' has shape {arr.shape}, expected {t.shape}")
            t.data[...] = arr
        stray = [k for k in f.files if k.startswith("param:") and k not in expected]
        if stray:
            raise FileFormatError(f"{path}: unexpected parameters {stray[:3]}")
        state = None
        if "adam_step" in meta:
            m, v = [], []
            for n, _ in named:
                for tag, dest in (("adam_m", m), ("adam_v", v)):
                    key = f"{tag}:{n}"
                    if key not in f.files:
                        raise FileFormatError(f"{path}: missing optimizer moment '{key}'")
                    dest.append(np.array(f[key]))
            state = {"step": int(meta["adam_step"]), "m": m, "v": v,
                     "rng": meta.get("rng")}
        return Checkpoint(spec=spec, params=params, spatial_sizes=sizes,
                          state=state, epoch=int(meta.get("epoch", 0)),
                          extra=meta.get("extra", {}))


# ---------------------------------------------------------------------------
# Export


_CSV_HEADERS = {1: "x,value", 2: "x,y,value", 3: "x,y,z,value"}


def export_field(f: GridField, path, format: str) -> Path:
    """Write a field for external inspection.

    csv is exact (17 significant digits, one grid point per row); pgm is an
    8-bit grayscale image with the value range mapped to [0, 255], 2D only.
    """
    path = Path(path)
    arr = _spatial_array(f, "export")
    if format == "csv":
        if f.n_axes not in _CSV_HEADERS:
            raise ValueError("csv export supports 1D, 2D or 3D fields")
        coords = [f.coords(k) for k in range(f.n_axes)]
        lines = [_CSV_HEADERS[f.n_axes]]
        for idx in np.ndindex(*f.spatial_shape):
            pt = [f"{coords[k][i]:.17g}" for k, i in enumerate(idx)]
            lines.append(",".join(pt + [f"{arr[idx]:.17g}"]))
        path.write_text("\n".join(lines) + "\n")
    elif format == "pgm":
        if f.n_axes != 2:
            raise ValueError("pgm export needs a 2D field")
        a = arr.astype(np.float64)
        lo, hi = float(a.min()), float(a.max())
        if hi > lo:
            img = np.clip(np.rint((a - lo) / (hi - lo) * 255.0), 0, 255)
            img = img.astype(np.uint8)
        else:
            img = np.full(a.shape, 128, dtype=np.uint8)  # constant: mid-gray
        raster = img.T[::-1]  # image rows top to bottom = decreasing y
        header = f"P5\n{a.shape[0]} {a.shape[1]}\n255\n".encode("ascii")
        path.write_bytes(header + raster.tobytes())
    else:
        raise ValueError("format must be 'csv' or 'pgm'")
    return path
