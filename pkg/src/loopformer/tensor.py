"""Dense tensors with tape-based reverse-mode autodiff.

Storage is always a contiguous row-major numpy array. Ops record onto the
innermost active Tape; backward walks the tape in reverse creation order,
which is a topological order by construction. There is no view sharing:
slice/transpose/reshape copy, so tensors stay immutable after creation
(gradient buffers are the only mutable state).
"""

from __future__ import annotations

import itertools
import os
from contextlib import contextmanager

import numpy as np

DTYPES = {"single": np.float32, "double": np.float64}

_default_dtype = np.float32
_tape_stack: list["Tape | None"] = []
_node_counter = itertools.count()

_DEBUG_FINITE = os.environ.get("LOOPFORMER_DEBUG_NAN", "0") not in ("", "0")


def set_default_dtype(mode: str) -> None:
    global _default_dtype
    _default_dtype = DTYPES[mode]


def get_default_dtype():
    return _default_dtype


@contextmanager
def precision(mode: str):
    """Temporarily switch the default dtype ("single" or "double")."""
    global _default_dtype
    saved = _default_dtype
    _default_dtype = DTYPES[mode]
    try:
        yield
    finally:
        _default_dtype = saved


class ShapeError(ValueError):
    pass


class NumericError(RuntimeError):
    """Raised when NaN/Inf shows up where finite values are required."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # float ndarrays keep their dtype; lists/scalars/ints take the default
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=_default_dtype)
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter)
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_owned = False

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of ops; reverse iteration is reverse-topological."""

    __slots__ = ("_entries",)

    def __init__(self):
        self._entries = []

    def __len__(self):
        return len(self._entries)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False

    def record(self, out: Tensor, backward) -> None:
        self._entries.append((out, backward))

    def backward(self, root: Tensor) -> None:
        """Seed root with ones and propagate; each tape node is visited once."""
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        for out, backward_fn in reversed(self._entries):
            if out.grad is None:
                continue
            backward_fn(out.grad)


class no_grad:
    """Suppress tape recording inside the block (values still flow)."""

    def __enter__(self):
        _tape_stack.append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # first contribution aliases g (cheap); the second materializes an owned
    # buffer so further contributions can accumulate in place without touching
    # arrays shared with other nodes' gradients
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _make(out_data: np.ndarray, inputs, backward) -> Tensor:
    """Wrap an op result; record on the active tape if gradients are live."""
    if _DEBUG_FINITE and not np.all(np.isfinite(out_data)):
        raise NumericError("non-finite values in forward op output")
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # batched activations against a shared weight: one flat gemm
                lhs = a.data.reshape(-1, a.shape[-1])
                _accum(b, lhs.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        _accum(x, g * (sig + x.data * sig * (1.0 - sig)))

    return _make(x.data * sig, (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    # subgradient at 0 is 0 by convention
    mask = x.data > 0

    def backward(g):
        _accum(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        _accum(x, g * y * (1.0 - y))

    return _make(y, (x,), backward)


def detach(x: Tensor) -> Tensor:
    """Value-identical tensor that blocks gradient flow upstream."""
    return Tensor(x.data, requires_grad=False, dtype=x.data.dtype)


# ---------------------------------------------------------------------------
# reductions


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(ge, x.shape).copy())

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        count = x.shape[axis]

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g / count, x.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(ge / count, x.shape).copy())

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


# ---------------------------------------------------------------------------
# shape plumbing (copies, never views)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape

    def backward(g):
        _accum(x, g.reshape(old))

    return _make(x.data.reshape(shape).copy(), (x,), backward)


def transpose(x, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = np.argsort(axes)

    def backward(g):
        _accum(x, np.ascontiguousarray(g.transpose(inverse)))

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Copy a contiguous slice [start, start+length) along `axis`."""
    x = as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    full_shape = x.shape

    def backward(g):
        buf = np.zeros(full_shape, dtype=g.dtype)
        buf[index] = g
        _accum(x, buf)

    return _make(x.data[index].copy(), (x,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accum(t, g[tuple(index)].copy())

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def embedding(table, ids) -> Tensor:
    """Gather rows of `table` by integer ids (any id array shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {table.shape[0]})")

    def backward(g):
        if table.requires_grad:
            # scatter-add as a one-hot gemm (much faster than np.add.at here)
            flat = ids.reshape(-1)
            onehot = (flat[:, None] == np.arange(table.shape[0])[None, :])
            _accum(table, onehot.astype(g.dtype).T @ g.reshape(-1, table.shape[1]))

    return _make(table.data[ids], (table,), backward)


# ---------------------------------------------------------------------------
# fused network kernels


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(x, (g - (g * y).sum(axis=-1, keepdims=True)) * y)

    return _make(y, (x,), backward)


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    """Normalize the last dim to unit RMS, then scale by `gain`."""
    x, gain = as_tensor(x), as_tensor(gain)
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rmsnorm gain {gain.shape} vs feature dim {x.shape[-1]}")
    n = x.shape[-1]
    r = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data / r

    def backward(g):
        gg = g * gain.data
        _accum(x, gg / r - x.data * ((gg * x.data).sum(axis=-1, keepdims=True) / (n * r ** 3)))
        _accum(gain, _unbroadcast(g * xhat, gain.shape))

    return _make(xhat * gain.data, (x, gain), backward)


def dwconv1d(x, kernel, pad_left: int | None = None) -> Tensor:
    """Depthwise 1-D convolution along the token axis (axis -2).

    kernel has shape (channels, k) with kernel[:, -1] on the current token and
    kernel[:, 0] on the oldest (t-k+1); out-of-range positions read as zero, so
    the output keeps the sequence length (left zero-padding of k-1).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    m, k = kernel.shape
    if x.shape[-1] != m:
        raise ShapeError(f"dwconv1d channels disagree: input {x.shape[-1]} vs kernel {m}")
    if pad_left is None:
        pad_left = k - 1
    if pad_left != k - 1:
        raise ShapeError(f"dwconv1d requires pad_left == k-1 (got {pad_left}, k={k})")
    T = x.shape[-2]

    def tap_slices(j):
        # output position t reads input position t - (k-1) + j
        shift = (k - 1) - j
        return slice(0, T - shift), slice(shift, T)

    out = np.zeros_like(x.data)
    for j in range(k):
        src, dst = tap_slices(j)
        out[..., dst, :] += x.data[..., src, :] * kernel.data[:, j]

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(kernel.data)
        for j in range(k):
            src, dst = tap_slices(j)
            gx[..., src, :] += g[..., dst, :] * kernel.data[:, j]
            gk[:, j] = (g[..., dst, :] * x.data[..., src, :]).sum(axis=tuple(range(g.ndim - 1)))
        _accum(x, gx)
        _accum(kernel, gk)

    return _make(out, (x, kernel), backward)


def cross_entropy(logits, targets, ignore_index: int = -1) -> Tensor:
    """Mean NLL over non-ignored positions; log-sum-exp stabilized.

    logits: (..., V); targets: integer array matching the leading shape.
    All positions ignored yields 0 with zero gradient.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    tgt = targets.reshape(-1)
    keep = tgt != ignore_index
    count = int(keep.sum())
    if np.any((tgt[keep] < 0) | (tgt[keep] >= V)):
        raise ShapeError(f"targets out of range [0, {V})")

    shifted = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + flat.max(axis=-1)
    picked = flat[np.arange(flat.shape[0]), np.where(keep, tgt, 0)]
    losses = np.where(keep, lse - picked, 0.0)
    value = losses.sum() / count if count else np.asarray(0.0, dtype=flat.dtype)

    def backward(g):
        if count == 0:
            _accum(logits, np.zeros_like(logits.data))
            return
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        rows = np.arange(flat.shape[0])
        p[rows, np.where(keep, tgt, 0)] -= 1.0
        p[~keep] = 0.0
        _accum(logits, (g * p / count).reshape(logits.shape))

    return _make(np.asarray(value, dtype=flat.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f at x (double precision)."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build, arrays: dict, h: float = 1e-5) -> float:
    """FD-check a scalar graph against the tape.

    `build(tensors)` maps a dict of Tensors (same keys as `arrays`) to a
    scalar Tensor. Runs in double precision; returns the worst relative error
    across all inputs.
    """
    with precision("double"):
        tensors = {k: Tensor(v, requires_grad=True, dtype=np.float64) for k, v in arrays.items()}
        with Tape() as tape:
            out = build(tensors)
        tape.backward(out)
        worst = 0.0
        for name, t in tensors.items():
            def f(x, name=name):
                probe = {k: Tensor(v.data, dtype=np.float64) for k, v in tensors.items()}
                probe[name] = Tensor(x, dtype=np.float64)
                return build(probe).item()

            num = numeric_grad(f, t.data.copy(), h)
            ana = t.grad if t.grad is not None else np.zeros_like(t.data)
            worst = max(worst, max_rel_err(ana, num))
    return worst
