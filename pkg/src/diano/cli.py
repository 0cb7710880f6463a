"""Command-line entry points for the dataset/training/inference pipeline.

One subcommand per stage:

``gen``
    Write a synthetic dataset (snapshot files plus manifest) to a directory.
``train``
    Fit the model described by a JSON run configuration; leaves
    ``checkpoint.npz`` and ``history.csv`` in the output directory.
``eval``
    Reload a checkpoint and report reconstruction error on the train or
    test split of a dataset.
``advance``
    Apply one latent PDE step to a stored latent snapshot.
``export-latent``
    Encode a snapshot (or, for fusion, solve the latent pressure from
    three velocity snapshots) and write the latent grid out.
``gradcheck``
    Finite-difference audit of the full training objective for a
    configuration.

The run configuration is a JSON object with a ``model`` section (the
ModelSpec fields, with the PDE parameters nested under ``pde``) and an
optional ``train`` section (the TrainConfig fields).

Exit codes: 0 on success, 1 for usage errors (bad flags or an unusable
run configuration), 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import datagen
from . import models as md
from . import pde as pde_mod
from . import snapio as sio
from . import training as tr
from .fdm import GridField


class UsageError(Exception):
    """Bad input discovered after argument parsing; exits with code 1."""


# ---------------------------------------------------------------------------
# Shared helpers


def _load_run_config(path) -> tuple:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read run config: {exc}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}")
    if not isinstance(raw, dict) or "model" not in raw:
        raise UsageError(f"{path} must be a JSON object with a 'model' section")
    try:
        spec = md.ModelSpec.from_dict(raw["model"])
        cfg = tr.TrainConfig.from_dict(raw.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad run config: {exc}")
    return spec, cfg


def _cast_field(f: GridField, dtype) -> GridField:
    return GridField(f.values.data.astype(dtype), f.extents)


def _as_model_input(f: GridField, dtype) -> GridField:
    # forward passes take channel-first fields; stored snapshots are bare
    return GridField(f.values.data.astype(dtype)[None], f.extents)


def _scalar_series(ds: sio.LoadedDataset, dtype) -> list:
    fields = ds.fields.get("vorticity")
    if not fields:
        raise ValueError("dataset has no 'vorticity' snapshots; "
                         "single-field variants train on that role")
    return [_cast_field(f, dtype) for f in fields]


def _fusion_inputs(ds: sio.LoadedDataset, dtype) -> tuple:
    missing = [r for r in ("u", "v", "w", "pressure", "mask")
               if not ds.fields.get(r)]
    if missing:
        raise ValueError("fusion training needs u/v/w/pressure/mask roles; "
                         f"dataset lacks: {', '.join(missing)}")
    data = tuple([_cast_field(f, dtype) for f in ds.fields[r]]
                 for r in ("u", "v", "w", "pressure"))
    mask = pde_mod.GeometryMask(_cast_field(ds.fields["mask"][0], dtype))
    return data, mask


def _prepare_data(spec: md.ModelSpec, ds: sio.LoadedDataset, dtype) -> tuple:
    """(data, mask, n_snapshots) in the layout train()/evaluate() expect."""
    if spec.variant == "fusion":
        data, mask = _fusion_inputs(ds, dtype)
        return data, mask, len(data[0])
    data = _scalar_series(ds, dtype)
    return data, None, len(data)


def _param_dtype(params: dict):
    return next(iter(md.iter_tensors(params)))[1].data.dtype


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    if args.case == "vortex":
        manifest = datagen.gen_vortex_street(
            args.out, n=args.grid, reynolds=args.reynolds,
            n_snapshots=args.snapshots, dt=args.dt, dtype=args.dtype,
            seed=args.seed)
    elif args.case == "stenosis":
        manifest = datagen.gen_stenosis_like(
            args.out, n=args.grid, n_snapshots=args.snapshots,
            period=args.period, dtype=args.dtype, seed=args.seed)
    else:
        manifest = datagen.gen_channel3d(
            args.out, n=args.grid, n_snapshots=args.snapshots,
            period=args.period, dtype=args.dtype, seed=args.seed)
    print(f"wrote {len(manifest.entries)} snapshot files and a manifest "
          f"to {args.out}")
    return 0


def cmd_train(args) -> int:
    spec, cfg = _load_run_config(args.config)
    ds = sio.load_dataset(args.data)
    data, mask, n = _prepare_data(spec, ds, cfg.np_dtype)
    split = tr.split_dataset(n, ds.manifest.split_seed,
                             temporal=tr._is_temporal(spec))
    sizes = (data[0][0] if spec.variant == "fusion" else data[0]).spatial_shape
    params = md.init_params(spec, sizes, dtype=cfg.np_dtype)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.npz"

    def save_epoch(epoch, p, state):
        sio.save_checkpoint(ckpt, spec, p, sizes, state=state,
                            epoch=epoch + 1, extra={"train": cfg.to_dict()})

    result = tr.train(spec, params, data, cfg, mask=mask,
                      csv_path=out / "history.csv",
                      checkpoint_fn=save_epoch, split=split)
    if result.aborted:
        # the per-epoch checkpoint on disk is the last stable one; leave it
        print(f"training aborted at epoch {result.abort_epoch}; parameters "
              "rolled back to the last completed epoch", file=sys.stderr)
        return 2
    final_test = result.history[-1]["test_loss"] if result.history else None
    sio.save_checkpoint(ckpt, spec, params, sizes, state=result.state,
                        epoch=len(result.history),
                        extra={"train": cfg.to_dict(),
                               "final_test_loss": final_test,
                               "dataset": str(args.data)})
    if result.history:
        last = result.history[-1]
        print(f"epochs completed: {len(result.history)}")
        print(f"final train mse: {last['train_loss']:.10e}")
        print(f"final test mse: {last['test_loss']:.10e}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    ck = sio.load_checkpoint(args.checkpoint)
    ds = sio.load_dataset(args.data)
    data, mask, n = _prepare_data(ck.spec, ds, _param_dtype(ck.params))
    split = tr.split_dataset(n, ds.manifest.split_seed,
                             temporal=tr._is_temporal(ck.spec))
    indices = split.test if args.split == "test" else split.train
    metrics = tr.evaluate(ck.spec, ck.params, data, indices, mask=mask)
    print(f"{args.split} samples: {len(indices)}")
    print(f"{args.split} mse: {metrics['mse']:.10e}")
    print(f"{args.split} max abs err: {metrics['max_abs_err']:.10e}")
    return 0


def cmd_advance(args) -> int:
    ck = sio.load_checkpoint(args.checkpoint)
    spec = ck.spec
    if spec.pde is None or spec.pde.model not in pde_mod.VTE_MODELS:
        raise ValueError(
            "advance needs a checkpoint whose model carries a "
            "vorticity-transport latent (temporal or geometric variants)")
    field, meta = sio.load_snapshot(args.input)
    advanced = pde_mod.advance_vte(field, spec.pde)
    sidecar = {"dt": spec.pde.dt,
               "provenance": {"generator": "advance",
                              "model": spec.pde.model,
                              "checkpoint": str(args.checkpoint)}}
    if meta and meta.get("normalization") is not None:
        sidecar["normalization"] = meta["normalization"]
    sio.save_snapshot(advanced, args.out, meta=sidecar)
    print(f"advanced one {spec.pde.model} step: {args.out}")
    return 0


def cmd_export_latent(args) -> int:
    ck = sio.load_checkpoint(args.checkpoint)
    spec, params = ck.spec, ck.params
    dtype = _param_dtype(params)
    inputs = [_as_model_input(sio.load_snapshot(p)[0], dtype)
              for p in args.input]
    if spec.variant == "fusion":
        if len(inputs) != 3:
            raise UsageError("fusion export-latent takes three inputs "
                             "(u, v and w snapshots)")
        if not args.mask:
            raise UsageError("fusion export-latent requires --mask")
        mask_field, _ = sio.load_snapshot(args.mask)
        mask = pde_mod.GeometryMask(_cast_field(mask_field, dtype))
        latent, _ = md.fusion_latents(*inputs, mask, spec, params)
    else:
        if len(inputs) != 1:
            raise UsageError(
                f"variant '{spec.variant}' takes exactly one input snapshot")
        latent = md.encode(inputs[0], spec, params).values
    if args.format == "diaf":
        sio.save_snapshot(latent, args.out)
    else:
        sio.export_field(latent, args.out, args.format)
    shape = "x".join(str(s) for s in latent.spatial_shape)
    print(f"latent grid {shape} -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    spec, _ = _load_run_config(args.config)
    n = args.grid
    sizes = (n, n, n) if spec.variant == "fusion" else (n, n)
    extents = tuple((0.0, 1.0) for _ in sizes)
    params = md.init_params(spec, sizes, dtype=np.float64)
    rng = np.random.default_rng(0)

    def gf() -> GridField:
        return GridField(0.1 * rng.standard_normal((1,) + sizes), extents)

    if spec.variant == "fusion":
        u, v, w, target = gf(), gf(), gf(), gf()
        mask = pde_mod.GeometryMask(GridField(np.ones(sizes), extents))

        def objective(*_tensors):
            return tr.mse_loss(md.forward_fusion(u, v, w, mask, spec, params),
                               target)
    else:
        forward = {"static": md.forward_static,
                   "temporal": md.forward_temporal,
                   "geometric": md.forward_geometric,
                   "nn_ae": md.forward_nn_ae,
                   "cnn_ae": md.forward_cnn_ae}[spec.variant]
        x, target = gf(), gf()

        def objective(*_tensors):
            return tr.mse_loss(forward(x, spec, params), target)

    # the probed tensors are the live parameter objects, so in-place
    # perturbation reaches the closure without threading arguments through
    tensors = [t for _, t in md.iter_tensors(params)]
    probes = args.probes if args.probes > 0 else None
    report = ad.grad_check(objective, tensors, tol=args.tol,
                           max_probes_per_tensor=probes, seed=0)
    if report.ok:
        print(f"gradcheck passed: {len(tensors)} tensors, max rel err "
              f"{report.max_rel_err:.3e} (tol {args.tol:.1e})")
        return 0
    print(f"gradcheck FAILED: max rel err {report.max_rel_err:.3e} exceeds "
          f"tol {args.tol:.1e}", file=sys.stderr)
    return 2


# ---------------------------------------------------------------------------
# Parser and entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="diano",
        description="Grid-latent autoencoders with a differentiable "
                    "finite-difference PDE core.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--case", required=True,
                   choices=("vortex", "stenosis", "channel3d"))
    g.add_argument("--grid", type=int, default=64, help="points per axis")
    g.add_argument("--snapshots", type=int, default=100)
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--reynolds", type=float, default=100.0,
                   help="vortex case only")
    g.add_argument("--dt", type=float, default=0.01, help="vortex case only")
    g.add_argument("--period", type=int, default=100,
                   help="inflow cycle length in frames (stenosis/channel3d)")
    g.add_argument("--dtype", choices=("float32", "float64"),
                   default="float32", help="snapshot payload dtype")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True, help="JSON run configuration")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True,
                   help="output directory for checkpoint and history")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="reconstruction error of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("advance",
                       help="one latent PDE step on a stored latent")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--input", required=True, help="latent snapshot file")
    a.add_argument("--out", required=True, help="output snapshot file")
    a.set_defaults(func=cmd_advance)

    x = sub.add_parser("export-latent",
                       help="encode a snapshot and write its latent grid")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--input", required=True, nargs="+",
                   help="snapshot file (three u/v/w files for fusion)")
    x.add_argument("--mask", help="mask snapshot (fusion only)")
    x.add_argument("--out", required=True)
    x.add_argument("--format", choices=("csv", "pgm", "diaf"), default="csv")
    x.set_defaults(func=cmd_export_latent)

    c = sub.add_parser("gradcheck",
                       help="finite-difference audit of the objective")
    c.add_argument("--config", required=True, help="JSON run configuration")
    c.add_argument("--grid", type=int, default=16,
                   help="points per axis of the probe field")
    c.add_argument("--probes", type=int, default=2,
                   help="probed entries per tensor (0 = every entry)")
    c.add_argument("--tol", type=float, default=1e-5,
                   help="relative error tolerance")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for flag errors; fold the
        # latter into this tool's usage-error code
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # CLI boundary: report and signal failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
