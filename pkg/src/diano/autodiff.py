"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tape`` records every operation whose result depends on a tensor marked
``requires_grad``. ``backward`` walks the records in reverse creation order,
which is a valid reverse topological order because operands always exist
before their results, and accumulates vector-Jacobian products additively.

Complex intermediates (FFT spectra, packed spectral weights) carry gradients
under the convention ``grad(z) = dL/dRe(z) + 1j*dL/dIm(z)``. Every leaf is
real; complex parameters enter the graph through ``complex_pack`` so that
leaf gradients are always real arrays.

Forward kernels are plain numpy. The engine performs no fusion and supports
first-order gradients only.
"""

from __future__ import annotations

import numbers

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "forward_op",
    "grad_check",
    "GradCheckReport",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "slice_",
    "embed",
    "pad",
    "concat",
    "sum_",
    "mean",
    "relu",
    "silu",
    "gelu",
    "tanh",
    "sin",
    "cos",
    "exp",
    "rfftn",
    "irfftn",
    "complex_pack",
    "einsum2",
    "axis_matmul",
    "thomas_solve",
    "neighbor_sum",
    "avg_pool",
    "convnd",
    "conv_transpose_nd",
]

# Module-level switch for the finite-value guard. Kept on by default; the
# guard doubles as the divergence detector during training.
check_finite = True

_REAL_OF = {np.dtype(np.complex64): np.float32, np.dtype(np.complex128): np.float64}


class Tensor:
    """N-dimensional array participating in reverse-mode differentiation.

    ``data`` is always a numpy array. ``requires_grad`` marks optimization
    leaves; intermediate results are attached to the active tape through
    ``node`` instead.
    """

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None  # (tape, node_index) once an op writes this tensor

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # Operator sugar; every path funnels into the op functions below.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "parents", "vjp", "kind")

    def __init__(self, out, parents, vjp, kind):
        self.out = out
        self.parents = parents
        self.vjp = vjp
        self.kind = kind


class Tape:
    """Ordered record of operations for one forward pass.

    Only one tape is active at a time; ops executed with no active tape are
    pure computations (evaluation mode).
    """

    _active = None

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        if Tape._active is not None:
            raise RuntimeError("a Tape is already active; nested tapes are not supported")
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active = None
        return False

    def __len__(self):
        return len(self.nodes)

    def release(self):
        """Drop the recorded graph so intermediates free by refcount.

        Tensors and the tape reference each other, so without this the
        arrays of a finished step linger until the cyclic collector runs;
        at field-sized tapes that is the difference between a bounded
        working set and an out-of-memory kill. The tape cannot be used
        for another backward pass afterwards.
        """
        self.nodes.clear()


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    """Convert operands to tensors; python scalars adopt the precision of
    the tensor operand so float32 lineages never upcast silently."""
    if isinstance(a, Tensor) and isinstance(b, numbers.Number):
        dt = a.data.dtype
        b = Tensor(np.asarray(b, dtype=_REAL_OF.get(dt, dt)))
    elif isinstance(b, Tensor) and isinstance(a, numbers.Number):
        dt = b.data.dtype
        a = Tensor(np.asarray(a, dtype=_REAL_OF.get(dt, dt)))
    return _as_tensor(a), _as_tensor(b)


def _attached(x: Tensor, tape: "Tape | None" = None) -> bool:
    if x.requires_grad:
        return True
    if tape is None:
        tape = Tape._active
    return tape is not None and x.node is not None and x.node[0] is tape


def _check_dtypes(*tensors: Tensor):
    # float32 and float64 lineages must not mix silently; complex dtypes are
    # paired with the matching real precision.
    precisions = set()
    for t in tensors:
        dt = t.data.dtype
        precisions.add(np.finfo(dt).bits if dt.kind == "f" else np.finfo(dt).bits // 2)
    if len(precisions) > 1:
        raise TypeError(f"mixed dtype precisions: {[t.data.dtype.name for t in tensors]}")


def _record(kind: str, out_data: np.ndarray, parents: tuple, vjp) -> Tensor:
    if check_finite and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{kind}'")
    out = Tensor(out_data)
    tape = Tape._active
    if tape is not None and any(_attached(p) for p in parents):
        node = _Node(out, parents, vjp, kind)
        out.node = (tape, len(tape.nodes))
        tape.nodes.append(node)
    return out


def _to_real_if_needed(g: np.ndarray, target: Tensor) -> np.ndarray:
    if target.data.dtype.kind != "c" and g.dtype.kind == "c":
        return np.ascontiguousarray(g.real)
    return g


def backward(tape: Tape, root: Tensor) -> dict:
    """Return ``{leaf: Tensor(dRoot/dLeaf)}`` for every requires_grad leaf.

    ``root`` must be a scalar recorded on ``tape``. Accumulation is additive:
    a tensor consumed by k operations receives the sum of k contributions.
    """
    if root.data.size != 1:
        raise ValueError("backward root must be scalar")
    if root.node is None or root.node[0] is not tape:
        raise ValueError("root is not attached to this tape")

    grads: dict[int, np.ndarray] = {}
    grads[id(root)] = np.ones_like(root.data)
    leaf_refs: dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not _attached(parent, tape):
                continue
            pg = _to_real_if_needed(np.asarray(pg), parent)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            produced_here = parent.node is not None and parent.node[0] is tape
            if parent.requires_grad and not produced_here:
                leaf_refs[key] = parent

    return {tensor: Tensor(grads[key]) for key, tensor in leaf_refs.items()}


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes introduced or stretched by broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_dtypes(a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_dtypes(a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_dtypes(a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        # For complex operands the correct cotangent uses the conjugate of
        # the other factor; conj is the identity for real arrays.
        return (_unbroadcast(g * np.conj(bd), ad.shape),
                _unbroadcast(g * np.conj(ad), bd.shape))

    return _record("mul", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product of (..., k) with a 2D (k, m) operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_dtypes(a, b)
    if b.data.ndim != 2:
        raise ValueError("matmul right operand must be 2D")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.conj(bd).T
        gb = np.tensordot(np.conj(ad), g, axes=(tuple(range(ad.ndim - 1)),) * 2)
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# Shape manipulation


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    return _record("reshape", np.ascontiguousarray(a.data.reshape(shape)), (a,),
                   lambda g: (g.reshape(old),))


def slice_(a, slices) -> Tensor:
    """Basic slicing; the cotangent scatters back into a zero array."""
    a = _as_tensor(a)
    slices = tuple(slices)
    out = np.ascontiguousarray(a.data[slices])
    shape = a.data.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[slices] = g
        return (z,)

    return _record("slice", out, (a,), vjp)


def embed(a, shape, slices) -> Tensor:
    """Place ``a`` into a zero array of ``shape`` at ``slices`` (inverse of slice_)."""
    a = _as_tensor(a)
    slices = tuple(slices)
    out = np.zeros(shape, dtype=a.data.dtype)
    out[slices] = a.data

    def vjp(g):
        return (np.ascontiguousarray(g[slices]),)

    return _record("embed", out, (a,), vjp)


def pad(a, pad_width) -> Tensor:
    a = _as_tensor(a)
    pad_width = tuple((int(l), int(r)) for l, r in pad_width)
    out = np.pad(a.data, pad_width)
    inner = tuple(slice(l, l + n) for (l, _), n in zip(pad_width, a.data.shape))

    def vjp(g):
        return (np.ascontiguousarray(g[inner]),)

    return _record("pad", out, (a,), vjp)


def concat(tensors, axis: int) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    _check_dtypes(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(pieces)

    return _record("concat", out, tensors, vjp)


# ---------------------------------------------------------------------------
# Reductions


def sum_(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        if axes is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = (axes,) if isinstance(axes, int) else tuple(axes)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (a,), vjp)


def mean(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axes, keepdims=keepdims)
    count = a.data.size if axes is None else int(np.prod(
        [a.data.shape[ax] for ax in ((axes,) if isinstance(axes, int) else axes)]))
    shape = a.data.shape

    def vjp(g):
        if axes is None:
            gg = g
        else:
            ax = (axes,) if isinstance(axes, int) else tuple(axes)
            gg = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gg, shape) / count,)

    return _record("mean", out, (a,), vjp)


# ---------------------------------------------------------------------------
# Nonlinearities and pointwise transcendental functions


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s
    d = s * (1.0 + a.data * (1.0 - s))
    return _record("silu", out, (a,), lambda g: (g * d,))


_GELU_C = float(np.sqrt(2.0 / np.pi))  # python float: keeps float32 inputs float32


def gelu(a) -> Tensor:
    """Tanh-form GELU: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    a = _as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return _record("gelu", out, (a,), lambda g: (g * d,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _record("tanh", t, (a,), lambda g: (g * (1.0 - t ** 2),))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    c = np.cos(a.data)
    return _record("sin", np.sin(a.data), (a,), lambda g: (g * c,))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    s = np.sin(a.data)
    return _record("cos", np.cos(a.data), (a,), lambda g: (g * (-s),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)
    return _record("exp", e, (a,), lambda g: (g * e,))


# ---------------------------------------------------------------------------
# Fourier transforms

# Adjoint derivations, with N = product of transformed axis lengths:
#   y = rfftn(x):  dL/dx = N * Re(ifftn(zero_pad_half_axis(g)))
#   y = irfftn(z): dL/dz = (2/n_last) * rfft(g) along the half axis, with the
#       DC bin (and Nyquist bin for even n_last) scaled by 1/n_last and their
#       imaginary parts zeroed, then a full fft / n over each leading axis.
# Both follow from writing the transforms as R-linear maps and transposing.


def rfftn(a, axes) -> Tensor:
    a = _as_tensor(a)
    if a.data.dtype.kind == "c":
        raise TypeError("rfftn input must be real")
    axes = tuple(int(ax) % a.data.ndim for ax in axes)
    out = np.fft.rfftn(a.data, axes=axes)
    in_shape = a.data.shape
    last = axes[-1]
    n_total = int(np.prod([in_shape[ax] for ax in axes]))
    real_dtype = a.data.dtype

    def vjp(g):
        padw = [(0, 0)] * g.ndim
        padw[last] = (0, in_shape[last] - g.shape[last])
        gp = np.pad(g, padw)
        grad = n_total * np.fft.ifftn(gp, axes=axes).real
        return (grad.astype(real_dtype, copy=False),)

    return _record("rfftn", out, (a,), vjp)


def irfftn(z, s, axes) -> Tensor:
    z = _as_tensor(z)
    if z.data.dtype.kind != "c":
        raise TypeError("irfftn input must be complex")
    axes = tuple(int(ax) % z.data.ndim for ax in axes)
    s = tuple(int(n) for n in s)
    last = axes[-1]
    if z.data.shape[last] != s[-1] // 2 + 1:
        raise ValueError("irfftn half-axis size mismatch")
    for ax, n in zip(axes[:-1], s[:-1]):
        if z.data.shape[ax] != n:
            raise ValueError("irfftn full-axis size mismatch")
    out = np.fft.irfftn(z.data, s=s, axes=axes)
    n_last = s[-1]
    lead = axes[:-1]
    lead_n = int(np.prod([s[i] for i in range(len(lead))])) if lead else 1
    cplx_dtype = z.data.dtype

    def vjp(g):
        t = np.fft.rfft(g, axis=last) * (2.0 / n_last)
        sl = [slice(None)] * t.ndim
        sl[last] = 0
        t[tuple(sl)] = t[tuple(sl)].real * 0.5
        if n_last % 2 == 0:
            sl[last] = -1
            t[tuple(sl)] = t[tuple(sl)].real * 0.5
        if lead:
            t = np.fft.fftn(t, axes=lead) / lead_n
        return (t.astype(cplx_dtype, copy=False),)

    return _record("irfftn", out, (z,), vjp)


def complex_pack(re, im) -> Tensor:
    """Combine two real tensors into one complex tensor re + 1j*im."""
    re, im = _as_tensor(re), _as_tensor(im)
    _check_dtypes(re, im)
    if re.data.shape != im.data.shape:
        raise ValueError("complex_pack parts must share a shape")
    out = re.data + 1j * im.data

    def vjp(g):
        return np.ascontiguousarray(g.real), np.ascontiguousarray(g.imag)

    return _record("complex_pack", out, (re, im), vjp)


# ---------------------------------------------------------------------------
# Contractions


_EINSUM_PATHS: dict = {}


def _einsum_raw(spec: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    key = (spec, a.shape, b.shape)
    path = _EINSUM_PATHS.get(key)
    if path is None:
        path = np.einsum_path(spec, a, b, optimize="optimal")[0]
        _EINSUM_PATHS[key] = path
    return np.einsum(spec, a, b, optimize=path)


def einsum2(spec: str, a, b) -> Tensor:
    """Two-operand einsum with no repeated indices inside one operand.

    Every index of each operand must appear in the output or in the other
    operand, so both cotangents are themselves single einsum calls.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _check_dtypes(a, b)
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for name, idx in (("a", ia), ("b", ib)):
        if len(set(idx)) != len(idx):
            raise ValueError(f"einsum2 operand {name} repeats an index: {spec}")
    if not (set(ia) <= set(out_idx) | set(ib) and set(ib) <= set(out_idx) | set(ia)):
        raise ValueError(f"einsum2 spec has an index summed within one operand: {spec}")
    out = _einsum_raw(spec, a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _einsum_raw(f"{out_idx},{ib}->{ia}", g, np.conj(bd))
        gb = _einsum_raw(f"{out_idx},{ia}->{ib}", g, np.conj(ad))
        return ga, gb

    return _record("einsum2", out, (a, b), vjp)


def axis_matmul(a, matrix: np.ndarray, axis: int) -> Tensor:
    """Apply a constant square matrix along one axis: out_i = sum_j M[i,j] x_j.

    The matrix is not differentiated; the cotangent applies its transpose.
    """
    a = _as_tensor(a)
    axis = int(axis) % a.data.ndim
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("axis_matmul expects a square matrix")
    if a.data.shape[axis] != m.shape[1]:
        raise ValueError("axis length does not match matrix size")

    def apply(arr, mat):
        moved = np.moveaxis(arr, axis, -1)
        res = moved @ mat.T
        return np.ascontiguousarray(np.moveaxis(res, -1, axis))

    out = apply(a.data, m)

    def vjp(g):
        return (apply(g, m.T),)

    return _record("axis_matmul", out, (a,), vjp)


# ---------------------------------------------------------------------------
# Tridiagonal solve


def _thomas_kernel(lower, diag, upper, rhs):
    """Solve T x = rhs along axis 0 of rhs, vectorized over trailing axes."""
    n = diag.shape[0]
    cp = np.empty_like(diag)
    xs = np.empty_like(rhs)
    dp = np.empty_like(rhs)
    beta = diag[0]
    if beta == 0:
        raise ZeroDivisionError("zero pivot in tridiagonal solve")
    cp[0] = upper[0] / beta if n > 1 else 0.0
    dp[0] = rhs[0] / beta
    for i in range(1, n):
        beta = diag[i] - lower[i - 1] * cp[i - 1]
        if beta == 0:
            raise ZeroDivisionError("zero pivot in tridiagonal solve")
        cp[i] = upper[i] / beta if i < n - 1 else 0.0
        dp[i] = (rhs[i] - lower[i - 1] * dp[i - 1]) / beta
    xs[n - 1] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        xs[i] = dp[i] - cp[i] * xs[i + 1]
    return xs


def thomas_solve(lower, diag, upper, rhs, axis: int = 0) -> Tensor:
    """Differentiable tridiagonal solve; the adjoint solves the transposed system.

    ``lower`` has length n-1 (subdiagonal), ``diag`` length n, ``upper``
    length n-1 (superdiagonal). Only ``rhs`` participates in differentiation.
    """
    rhs = _as_tensor(rhs)
    lower = np.asarray(lower, dtype=rhs.data.dtype)
    diag = np.asarray(diag, dtype=rhs.data.dtype)
    upper = np.asarray(upper, dtype=rhs.data.dtype)
    n = diag.shape[0]
    if lower.shape != (n - 1,) or upper.shape != (n - 1,):
        raise ValueError("off-diagonals must have length n-1")
    axis = int(axis) % rhs.data.ndim
    if rhs.data.shape[axis] != n:
        raise ValueError("rhs length does not match system size")

    upper_pad = np.concatenate([upper, [0.0]]).astype(rhs.data.dtype)

    def solve(arr, lo, dg, up):
        moved = np.moveaxis(arr, axis, 0)
        res = _thomas_kernel(lo, dg, up, moved)
        return np.ascontiguousarray(np.moveaxis(res, 0, axis))

    out = solve(rhs.data, lower, diag, upper_pad)

    def vjp(g):
        # Transpose swaps sub- and superdiagonals.
        lo_t = upper
        up_t = np.concatenate([lower, [0.0]]).astype(g.dtype)
        return (solve(g, lo_t, diag, up_t),)

    return _record("thomas_solve", out, (rhs,), vjp)


# ---------------------------------------------------------------------------
# Grid-structured ops


def neighbor_sum(a, spacings, n_axes: int) -> Tensor:
    """Sum of nearest neighbors weighted by 1/spacing^2 over the trailing
    ``n_axes`` axes, with zero values outside the grid. Symmetric, so the
    cotangent applies the same operator.
    """
    a = _as_tensor(a)
    spacings = tuple(float(h) for h in spacings)
    if len(spacings) != n_axes:
        raise ValueError("one spacing per pooled axis required")

    def apply(arr):
        out = np.zeros_like(arr)
        for k, h in enumerate(spacings):
            ax = arr.ndim - n_axes + k
            w = 1.0 / (h * h)
            lo = [slice(None)] * arr.ndim
            hi = [slice(None)] * arr.ndim
            lo[ax] = slice(1, None)
            hi[ax] = slice(None, -1)
            out[tuple(lo)] += w * arr[tuple(hi)]
            out[tuple(hi)] += w * arr[tuple(lo)]
        return out

    return _record("neighbor_sum", apply(a.data), (a,), lambda g: (apply(g),))


def avg_pool(a, factors) -> Tensor:
    """Block-mean pooling over the trailing ``len(factors)`` axes."""
    a = _as_tensor(a)
    factors = tuple(int(f) for f in factors)
    d = len(factors)
    shape = a.data.shape
    spatial = shape[-d:]
    lead = shape[:-d]
    for n, f in zip(spatial, factors):
        if f < 1 or n % f:
            raise ValueError(f"pool factor {f} does not divide axis of size {n}")
    block_shape = lead + tuple(v for n, f in zip(spatial, factors) for v in (n // f, f))
    mean_axes = tuple(len(lead) + 2 * k + 1 for k in range(d))
    out = a.data.reshape(block_shape).mean(axis=mean_axes)
    count = int(np.prod(factors))

    def vjp(g):
        gg = np.expand_dims(g, mean_axes)
        gg = np.broadcast_to(gg, block_shape) / count
        return (gg.reshape(shape).copy(),)

    return _record("avg_pool", out, (a,), vjp)


def _tap_indices(kernel_shape):
    return list(np.ndindex(*kernel_shape))


def convnd(x, w, stride=1, padding=0) -> Tensor:
    """N-dimensional cross-correlation.

    ``x`` is (batch, c_in, s1..sd) and ``w`` is (c_out, c_in, k1..kd). Strides
    and paddings may be scalars or per-axis tuples. Implemented by gathering
    kernel taps (im2col) and contracting once with BLAS.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    _check_dtypes(x, w)
    d = w.data.ndim - 2
    if x.data.ndim != d + 2:
        raise ValueError("input rank does not match kernel rank")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError("channel mismatch between input and kernel")
    stride = (stride,) * d if isinstance(stride, int) else tuple(stride)
    padding = (padding,) * d if isinstance(padding, int) else tuple(padding)
    kshape = w.data.shape[2:]
    b, cin = x.data.shape[:2]
    cout = w.data.shape[0]

    padw = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(x.data, padw)
    in_sp = xp.shape[2:]
    out_sp = tuple((n - k) // s + 1 for n, k, s in zip(in_sp, kshape, stride))
    if any(o < 1 for o in out_sp):
        raise ValueError("kernel larger than padded input")

    taps = _tap_indices(kshape)
    xcol = np.empty((b, cin, len(taps)) + out_sp, dtype=x.data.dtype)
    for t, kd in enumerate(taps):
        sl = tuple(slice(k, k + o * s, s) for k, o, s in zip(kd, out_sp, stride))
        xcol[:, :, t] = xp[(slice(None), slice(None)) + sl]

    wmat = w.data.reshape(cout, cin * len(taps))
    out = np.tensordot(xcol.reshape(b, cin * len(taps), -1), wmat, axes=([1], [1]))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1).reshape((b, cout) + out_sp))

    xp_shape = xp.shape
    inner = tuple(slice(p, p + n) for p, n in zip(padding, x.data.shape[2:]))

    def vjp(g):
        gflat = g.reshape(b, cout, -1)
        gw = np.tensordot(gflat, np.conj(xcol).reshape(b, cin * len(taps), -1),
                          axes=([0, 2], [0, 2]))
        gw = gw.reshape(w.data.shape)
        gxcol = np.tensordot(np.conj(wmat), gflat, axes=([0], [1]))
        gxcol = np.moveaxis(gxcol, 1, 0).reshape((b, cin, len(taps)) + out_sp)
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        for t, kd in enumerate(taps):
            sl = tuple(slice(k, k + o * s, s) for k, o, s in zip(kd, out_sp, stride))
            gxp[(slice(None), slice(None)) + sl] += gxcol[:, :, t]
        gx = np.ascontiguousarray(gxp[(slice(None), slice(None)) + inner])
        return gx, gw

    return _record("convnd", out, (x, w), vjp)


def conv_transpose_nd(x, w, stride, padding, out_sizes) -> Tensor:
    """N-dimensional transposed convolution.

    ``x`` is (batch, c_in, s1..sd), ``w`` is (c_in, c_out, k1..kd). Each
    output position receives out[i*s + k - p] += sum_c x[c, i] w[c, o, k];
    ``out_sizes`` fixes the spatial result explicitly (output padding is
    whatever the caller's sizes imply).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    _check_dtypes(x, w)
    d = w.data.ndim - 2
    if x.data.ndim != d + 2:
        raise ValueError("input rank does not match kernel rank")
    if x.data.shape[1] != w.data.shape[0]:
        raise ValueError("channel mismatch between input and kernel")
    stride = (stride,) * d if isinstance(stride, int) else tuple(stride)
    padding = (padding,) * d if isinstance(padding, int) else tuple(padding)
    out_sizes = tuple(int(n) for n in out_sizes)
    kshape = w.data.shape[2:]
    b, cin = x.data.shape[:2]
    cout = w.data.shape[1]
    in_sp = x.data.shape[2:]
    for n, k, s, p, o in zip(in_sp, kshape, stride, padding, out_sizes):
        lo = (n - 1) * s - 2 * p + k
        if not lo <= o <= lo + s - 1:
            raise ValueError(f"target size {o} outside [{lo}, {lo + s - 1}] "
                             "reachable by output padding")

    taps = _tap_indices(kshape)

    def tap_slices(kd):
        """Input range and strided output slice hit by kernel offset kd."""
        isl, osl = [], []
        for n, s, p, o, k in zip(in_sp, stride, padding, out_sizes, kd):
            start = k - p
            i_min = max(0, -(start // s) if start < 0 else 0)
            while i_min * s + start < 0:
                i_min += 1
            i_max = n - 1
            while i_max >= i_min and i_max * s + start > o - 1:
                i_max -= 1
            if i_max < i_min:
                return None, None
            isl.append(slice(i_min, i_max + 1))
            osl.append(slice(i_min * s + start, i_max * s + start + 1, s))
        return tuple(isl), tuple(osl)

    tap_map = [tap_slices(kd) for kd in taps]

    # One channel contraction, then disjoint strided scatter-adds per tap.
    hp = np.tensordot(x.data.reshape(b, cin, -1),
                      w.data.reshape(cin, cout * len(taps)), axes=([1], [0]))
    hp = np.moveaxis(hp, -1, 1).reshape((b, cout, len(taps)) + in_sp)
    out = np.zeros((b, cout) + out_sizes, dtype=x.data.dtype)
    for t in range(len(taps)):
        isl, osl = tap_map[t]
        if isl is None:
            continue
        out[(slice(None), slice(None)) + osl] += hp[(slice(None), slice(None), t) + isl]
    out = np.ascontiguousarray(out)

    xd, wd = x.data, w.data

    def vjp(g):
        ghp = np.zeros((b, cout, len(taps)) + in_sp, dtype=g.dtype)
        for t in range(len(taps)):
            isl, osl = tap_map[t]
            if isl is None:
                continue
            ghp[(slice(None), slice(None), t) + isl] = g[(slice(None), slice(None)) + osl]
        ghp2 = ghp.reshape(b, cout * len(taps), -1)
        gx = np.tensordot(ghp2, np.conj(wd).reshape(cin, cout * len(taps)),
                          axes=([1], [1]))
        gx = np.ascontiguousarray(np.moveaxis(gx, -1, 1).reshape((b, cin) + in_sp))
        gw = np.tensordot(np.conj(xd).reshape(b, cin, -1), ghp2, axes=([0, 2], [0, 2]))
        gw = gw.reshape(wd.shape)
        return gx, gw

    return _record("conv_transpose", out, (x, w), vjp)


# ---------------------------------------------------------------------------
# Generic dispatch and the finite-difference oracle


_OP_TABLE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "slice": slice_,
    "embed": embed,
    "pad": pad,
    "concat": concat,
    "sum": sum_,
    "mean": mean,
    "relu": relu,
    "silu": silu,
    "gelu": gelu,
    "tanh": tanh,
    "sin": sin,
    "cos": cos,
    "exp": exp,
    "rfftn": rfftn,
    "irfftn": irfftn,
    "complex_pack": complex_pack,
    "einsum2": einsum2,
    "axis_matmul": axis_matmul,
    "thomas_solve": thomas_solve,
    "neighbor_sum": neighbor_sum,
    "avg_pool": avg_pool,
    "conv1d": convnd,
    "conv2d": convnd,
    "conv3d": convnd,
    "convnd": convnd,
    "conv_transpose": conv_transpose_nd,
}


def forward_op(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Dispatch an operation by name. ``inputs`` is a sequence of tensors
    (or a single tensor); ``attrs`` carries keyword attributes."""
    fn = _OP_TABLE.get(kind)
    if fn is None:
        raise KeyError(f"unknown op kind '{kind}'")
    if isinstance(inputs, (Tensor, np.ndarray, numbers.Number)):
        inputs = (inputs,)
    if kind == "concat":
        return fn(inputs, **(attrs or {}))
    return fn(*inputs, **(attrs or {}))


class GradCheckReport:
    """Outcome of a finite-difference gradient comparison."""

    def __init__(self, ok: bool, max_rel_err: float, entries: list):
        self.ok = ok
        self.max_rel_err = max_rel_err
        self.entries = entries  # (index, tensor_pos, fd, tape, rel_err) of the worst few

    def __bool__(self):
        return self.ok

    def __repr__(self):
        state = "pass" if self.ok else "FAIL"
        return f"GradCheckReport({state}, max_rel_err={self.max_rel_err:.3e})"


def grad_check(f, xs, eps: float = 1e-6, tol: float = 1e-5,
               max_probes_per_tensor=None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of scalar-valued ``f`` against central
    finite differences.

    By default every element of every tensor in ``xs`` is perturbed.  For
    large parameter sets ``max_probes_per_tensor`` limits the check to a
    seeded random subset of entries per tensor, which keeps the cost
    proportional to the probe count instead of the parameter count.

    The per-element relative error is normalized by the largest gradient
    magnitude of the same tensor (floored at 1), so elements whose true
    gradient is tiny do not fail on finite-difference noise alone.
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    xs = list(xs)
    for x in xs:
        x.requires_grad = True

    with Tape() as tape:
        y = f(*xs)
    if y.data.size != 1:
        raise ValueError("grad_check target must be scalar-valued")
    grads = backward(tape, y)

    rng = np.random.default_rng(seed)
    worst: list = []
    max_rel = 0.0
    for pos, x in enumerate(xs):
        g_tape = grads[x].data if x in grads else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        if max_probes_per_tensor is None or flat.size <= max_probes_per_tensor:
            probe_idx = np.arange(flat.size)
        else:
            probe_idx = rng.choice(flat.size, size=max_probes_per_tensor,
                                   replace=False)
        fd_vals = np.zeros(probe_idx.size, dtype=np.float64)
        for k, i in enumerate(probe_idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(*xs).data.item()
            flat[i] = orig - eps
            fm = f(*xs).data.item()
            flat[i] = orig
            fd_vals[k] = (fp - fm) / (2 * eps)
        tape_vals = g_tape.reshape(-1)[probe_idx]
        scale = max(np.abs(fd_vals).max(initial=0.0),
                    np.abs(g_tape).max(initial=0.0), 1.0)
        rel = np.abs(fd_vals - tape_vals) / scale
        k = int(np.argmax(rel))
        max_rel = max(max_rel, float(rel[k]))
        worst.append((int(probe_idx[k]), pos, float(fd_vals[k]),
                      float(tape_vals[k]), float(rel[k])))

    worst.sort(key=lambda e: -e[4])
    return GradCheckReport(max_rel < tol, max_rel, worst[:8])
