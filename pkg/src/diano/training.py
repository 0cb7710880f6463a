"""Optimization loop: Adam with a step-decay schedule, 80/20 dataset
splitting, per-epoch loss bookkeeping, and no-tape evaluation metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models as md
from . import pde as pde_mod
from .autodiff import Tensor
from .fdm import GridField

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr0: float = 1e-2
    step_epoch: int = 5
    decay_rate: float = 0.75
    seed: int = 0
    dtype: str = "float64"
    # cap on the global gradient L2 norm; None leaves gradients untouched.
    # Off by default; a guard rail for stiff latent-PDE configurations.
    grad_clip: float | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.step_epoch < 1:
            raise ValueError("step_epoch must be at least 1")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size,
            "lr0": self.lr0, "step_epoch": self.step_epoch,
            "decay_rate": self.decay_rate, "seed": self.seed,
            "dtype": self.dtype, "grad_clip": self.grad_clip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class SplitIndex:
    """Disjoint train/test sample indices covering the dataset."""

    train: tuple
    test: tuple

    def __post_init__(self):
        self.train = tuple(int(i) for i in self.train)
        self.test = tuple(int(i) for i in self.test)
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise ValueError(f"train/test overlap: {sorted(overlap)[:5]}")


def split_dataset(n_snapshots: int, seed: int = 0,
                  temporal: bool = False) -> SplitIndex:
    """Seeded 80/20 shuffle split over samples.

    For temporal datasets a sample is the consecutive pair (i, i+1), indexed
    by its first frame, so the last snapshot never starts a pair.
    """
    if n_snapshots < 5:
        raise ValueError("need at least 5 snapshots for an 80/20 split")
    n_samples = n_snapshots - 1 if temporal else n_snapshots
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_samples)
    n_train = int(round(0.8 * n_samples))
    return SplitIndex(train=tuple(order[:n_train]), test=tuple(order[n_train:]))


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay_rate ** (epoch // cfg.step_epoch)


def mse_loss(pred: GridField, target: GridField) -> Tensor:
    """Mean squared difference over every element (batch included), on tape."""
    if pred.values.shape != target.values.shape:
        raise ValueError(f"shape mismatch: {pred.values.shape} vs "
                         f"{target.values.shape}")
    diff = ad.sub(pred.values, target.values)
    return ad.mean(ad.mul(diff, diff))


# ---------------------------------------------------------------------------
# Adam


def adam_init(tensors) -> dict:
    return {
        "step": 0,
        "m": [np.zeros_like(t.data) for t in tensors],
        "v": [np.zeros_like(t.data) for t in tensors],
    }


def adam_step(tensors, grads, state, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, names=None) -> dict:
    """One bias-corrected Adam update, mutating tensor data in place.

    ``grads`` is a list of arrays aligned with ``tensors``; a non-finite
    gradient aborts before any parameter is touched.
    """
    tensors = list(tensors)
    if state is None:
        state = adam_init(tensors)
    if len(grads) != len(tensors):
        raise ValueError("one gradient per tensor required")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"tensor {i}"
            bad = int(np.sum(~np.isfinite(g)))
            raise FloatingPointError(
                f"non-finite gradient for {label}: {bad} bad entries "
                f"out of {np.size(g)}")
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(tensors, grads, state["m"], state["v"]):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.data.dtype, copy=False)
    return state


def clip_gradients(grads, max_norm: float):
    """Scale the gradient list so its global L2 norm is at most max_norm.

    Directions are preserved; gradients already inside the ball pass
    through unchanged. Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# Batch assembly and variant dispatch


def _stack_fields(snapshots, indices) -> GridField:
    ref = snapshots[indices[0]]
    data = np.stack([snapshots[i].values.data for i in indices])
    if ref.values.ndim == ref.n_axes:
        data = data[:, None]  # channel axis for bare spatial snapshots
    return GridField(Tensor(data), ref.extents)


def _is_temporal(spec: md.ModelSpec) -> bool:
    return spec.variant in ("temporal", "geometric")


def _batch_io(spec: md.ModelSpec, data, idx, mask):
    """Build the (inputs, target) pair for one batch of sample indices."""
    if spec.variant == "fusion":
        u, v, w, p = data
        return (_stack_fields(u, idx), _stack_fields(v, idx),
                _stack_fields(w, idx)), _stack_fields(p, idx)
    if _is_temporal(spec):
        return (_stack_fields(data, idx),), _stack_fields(data, [i + 1 for i in idx])
    return (_stack_fields(data, idx),), _stack_fields(data, idx)


def _forward(spec: md.ModelSpec, params, inputs, mask) -> GridField:
    if spec.variant == "static":
        return md.forward_static(inputs[0], spec, params)
    if spec.variant == "temporal":
        return md.forward_temporal(inputs[0], spec, params)
    if spec.variant == "geometric":
        return md.forward_geometric(inputs[0], spec, params)
    if spec.variant == "fusion":
        return md.forward_fusion(*inputs, mask, spec, params)
    if spec.variant == "nn_ae":
        return md.forward_nn_ae(inputs[0], spec, params)
    if spec.variant == "cnn_ae":
        return md.forward_cnn_ae(inputs[0], spec, params)
    raise AssertionError(spec.variant)


def _n_snapshots(spec: md.ModelSpec, data) -> int:
    if spec.variant == "fusion":
        lengths = {len(seq) for seq in data}
        if len(lengths) != 1:
            raise ValueError("u, v, w, p sequences must have equal length")
        return lengths.pop()
    return len(data)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    aborted: bool = False
    abort_epoch: int | None = None
    state: dict | None = None
    split: SplitIndex | None = None


def _snapshot_params(tensors) -> list:
    return [t.data.copy() for t in tensors]


def _restore_params(tensors, saved):
    for t, s in zip(tensors, saved):
        t.data[...] = s


def train(spec: md.ModelSpec, params: dict, data, cfg: TrainConfig, *,
          mask=None, csv_path=None, start_epoch: int = 0, state: dict | None = None,
          checkpoint_fn=None, track_test: bool = True,
          split: SplitIndex | None = None) -> TrainResult:
    """Gradient-descent loop over the 80/20 split of ``data``.

    ``data`` is a sequence of single-channel GridField snapshots, or for the
    fusion variant a (u, v, w, p) tuple of such sequences with ``mask`` set.
    Per-epoch rows (epoch, lr, train_loss[, test_loss]) accumulate in the
    result and stream to ``csv_path`` when given.  A non-finite loss or
    gradient aborts the run and rolls parameters back to the last completed
    epoch.  ``state`` and ``start_epoch`` resume a checkpointed run.
    ``split`` overrides the default cfg.seed-derived partition (datasets can
    pin their own split seed).
    """
    named = list(md.iter_tensors(params))
    names = [n for n, _ in named]
    tensors = [t for _, t in named]
    n = _n_snapshots(spec, data)
    if split is None:
        split = split_dataset(n, cfg.seed, temporal=_is_temporal(spec))

    if state is None:
        state = adam_init(tensors)
        state["rng"] = np.random.default_rng(cfg.seed).bit_generator.state
    rng = np.random.default_rng(cfg.seed)
    rng.bit_generator.state = state["rng"]

    result = TrainResult(state=state, split=split)
    writer = _CsvWriter(csv_path, track_test) if csv_path else None
    last_good = _snapshot_params(tensors)

    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = [int(i) for i in rng.permutation(len(split.train))]
        shuffled = [split.train[i] for i in order]
        total, seen = 0.0, 0
        ok = True
        for lo in range(0, len(shuffled), cfg.batch_size):
            idx = shuffled[lo:lo + cfg.batch_size]
            if len(idx) == 1 and cfg.batch_size > 1:
                continue  # lone leftover sample: skip rather than step on it
            inputs, target = _batch_io(spec, data, idx, mask)
            try:
                # FloatingPointError: an op produced non-finite values
                with ad.Tape() as tape:
                    pred = _forward(spec, params, inputs, mask)
                    loss = mse_loss(pred, target)
            except (pde_mod.PdeInstabilityError, FloatingPointError):
                ok = False
                break
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                ok = False
                break
            grads = ad.backward(tape, loss)
            glist = [grads[t].data if t in grads else np.zeros_like(t.data)
                     for t in tensors]
            tape.release()  # free the step's intermediates immediately
            if cfg.grad_clip is not None:
                clip_gradients(glist, cfg.grad_clip)
            try:
                adam_step(tensors, glist, state, lr, names=names)
            except FloatingPointError:
                ok = False
                break
            total += loss_val * len(idx)
            seen += len(idx)
        if not ok:
            _restore_params(tensors, last_good)
            result.aborted = True
            result.abort_epoch = epoch
            break
        train_loss = total / max(seen, 1)
        test_loss = None
        if track_test:
            test_loss = evaluate(spec, params, data, split.test, mask=mask)["mse"]
        state["rng"] = rng.bit_generator.state
        row = {"epoch": epoch, "lr": lr, "train_loss": train_loss,
               "test_loss": test_loss}
        result.history.append(row)
        if writer:
            writer.write(row)
        last_good = _snapshot_params(tensors)
        if checkpoint_fn:
            checkpoint_fn(epoch, params, state)
    if writer:
        writer.close()
    return result


class _CsvWriter:
    def __init__(self, path, track_test: bool):
        self.fh = open(path, "w", newline="")
        cols = ["epoch", "lr", "train_loss"] + (["test_loss"] if track_test else [])
        self.cols = cols
        self.out = csv.DictWriter(self.fh, fieldnames=cols, extrasaction="ignore")
        self.out.writeheader()

    def write(self, row: dict):
        self.out.writerow({k: row[k] for k in self.cols})
        self.fh.flush()

    def close(self):
        self.fh.close()


def evaluate(spec: md.ModelSpec, params: dict, data, indices=None, *,
             mask=None) -> dict:
    """No-tape metrics over the given sample indices (default: all).

    Returns overall mse, the per-sample mse list, and the largest absolute
    pointwise error.
    """
    n = _n_snapshots(spec, data)
    n_samples = n - 1 if _is_temporal(spec) else n
    if indices is None:
        indices = range(n_samples)
    indices = [int(i) for i in indices]
    per = []
    max_abs = 0.0
    for i in indices:
        inputs, target = _batch_io(spec, data, [i], mask)
        pred = _forward(spec, params, inputs, mask)
        err = pred.values.data - target.values.data
        per.append(float(np.mean(err ** 2)))
        max_abs = max(max_abs, float(np.max(np.abs(err))))
    mse = float(np.mean(per)) if per else float("nan")
    return {"mse": mse, "per_snapshot": per, "max_abs_err": max_abs}
