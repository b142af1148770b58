"""Minimal dense tensor type with tape-based reverse-mode differentiation.

Tensors wrap numpy arrays (float32 or float64) and are treated as immutable
once built; the only sanctioned mutation is an optimizer updating a trainable
leaf between steps. Recording happens through a `GradTape` used as a context
manager: while a tape is active, every op that touches a tensor requiring
gradients appends a node (output, parents, vjp closure) to a Wengert list.
`GradTape.backward` replays that list in reverse and deposits `.grad` arrays
on every trainable leaf that participated.

Every op validates operand shapes up front and checks its result for
non-finite values, so a NaN/Inf surfaces at the op that produced it rather
than three modules later.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "NumericError",
    "matmul",
    "add",
    "scale",
    "transpose",
    "reshape",
    "split_heads",
    "merge_heads",
    "concat_rows",
    "gather_rows",
    "scatter_add_rows",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "mse",
]

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Raised when operand shapes or ranks do not fit an op's contract."""


class NumericError(ArithmeticError):
    """Raised when an op produces or receives a non-finite value."""


class Tensor:
    """A dense float32/float64 array, optionally a trainable leaf.

    `grad` is populated by `GradTape.backward` for trainable leaves and is
    reset to None by whoever consumes it (typically the optimizer).
    """

    __slots__ = ("data", "trainable", "grad")

    def __init__(self, data, dtype=None, trainable: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
                arr = arr.astype(np.float32)
            else:
                raise TypeError(f"tensor dtype must be float32 or float64, got {arr.dtype}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.trainable = bool(trainable)
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), trainable=False)

    def __repr__(self) -> str:
        flag = ", trainable" if self.trainable else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


# --------------------------------------------------------------------------
# Tape machinery


class _TapeState(threading.local):
    def __init__(self):
        self.active = None


_STATE = _TapeState()


class GradTape:
    """Records ops on participating tensors; one backward pass per tape.

    Use as a context manager around the forward computation:

        with GradTape() as tape:
            loss = model_loss(...)
        tape.backward(loss)

    A tape is single-threaded and single-use; `backward` raises if called
    twice, and nesting tapes is not supported.
    """

    def __init__(self):
        self._nodes = []
        self._live = set()
        self._spent = False

    def __enter__(self) -> "GradTape":
        if _STATE.active is not None:
            raise RuntimeError("a GradTape is already active; tapes do not nest")
        _STATE.active = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.active = None

    def watch(self, tensor: Tensor) -> None:
        """Force gradient tracking through `tensor` even if not trainable."""
        self._live.add(id(tensor))

    def _wants(self, tensor: Tensor) -> bool:
        return tensor.trainable or id(tensor) in self._live

    def _record(self, out: Tensor, parents: tuple, vjp) -> None:
        self._live.add(id(out))
        self._nodes.append((out, parents, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into `.grad` of trainable leaves.

        `loss` must be a scalar tensor produced under this tape.
        """
        if self._spent:
            raise RuntimeError("backward() already ran on this tape; build a new tape")
        if loss.data.shape != ():
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._live:
            raise RuntimeError("loss tensor was not produced under this tape")
        self._spent = True

        grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
        touched = {}
        for out, parents, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not self._wants(parent):
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
                touched[id(parent)] = parent
        # Intermediates were popped when their producing node fired; whatever
        # survives in `grads` belongs to leaves (trainable or watched).
        for tid, tensor in touched.items():
            pg = grads.get(tid)
            if pg is None:
                continue
            pg = np.array(pg, copy=True)
            tensor.grad = pg if tensor.grad is None else tensor.grad + pg


def _active_tape():
    return _STATE.active


def _maybe_record(out: Tensor, parents: tuple, vjp) -> Tensor:
    tape = _STATE.active
    if tape is not None and any(tape._wants(p) for p in parents):
        tape._record(out, parents, vjp)
    return out


def _check_result(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")
    return arr


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# Ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy matmul rules)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = Tensor(_check_result(np.matmul(a.data, b.data), "matmul"))

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _maybe_record(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may be a trailing-shape term (bias/row table)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.shape != a.shape and b.shape != a.shape[a.ndim - b.ndim:]:
        raise ShapeError(f"add needs matching or trailing shapes: {a.shape} + {b.shape}")
    out = Tensor(_check_result(a.data + b.data, "add"))

    def vjp(g):
        return g, _unbroadcast(g, b.shape)

    return _maybe_record(out, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    x = _as_tensor(x)
    c = float(c)
    if not np.isfinite(c):
        raise NumericError("scale factor is non-finite")
    out = Tensor(_check_result(x.data * c, "scale"))
    return _maybe_record(out, (x,), lambda g: (g * c,))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {x.shape}")
    out = Tensor(np.swapaxes(x.data, -1, -2))
    return _maybe_record(out, (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape) -> Tensor:
    """View the same elements under a new shape (row-major order)."""
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} values) to {shape}")
    out = Tensor(x.data.reshape(shape))
    return _maybe_record(out, (x,), lambda g: (g.reshape(x.shape),))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., T, d] -> [..., heads, T, d/heads]; d must divide evenly."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"split_heads needs rank >= 2, got {x.shape}")
    t, d = x.shape[-2], x.shape[-1]
    if d % heads != 0:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    lead = x.shape[:-2]
    out_arr = x.data.reshape(lead + (t, heads, d // heads)).swapaxes(-3, -2)
    out = Tensor(np.ascontiguousarray(out_arr))

    def vjp(g):
        return (np.ascontiguousarray(g.swapaxes(-3, -2)).reshape(x.shape),)

    return _maybe_record(out, (x,), vjp)


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, T, hd] -> [..., T, heads*hd]; inverse of split_heads."""
    x = _as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"merge_heads needs rank >= 3, got {x.shape}")
    *lead, heads, t, hd = x.shape
    out = Tensor(np.ascontiguousarray(x.data.swapaxes(-3, -2)).reshape(tuple(lead) + (t, heads * hd)))

    def vjp(g):
        return (np.ascontiguousarray(
            g.reshape(tuple(lead) + (t, heads, hd)).swapaxes(-3, -2)),)

    return _maybe_record(out, (x,), vjp)


def concat_rows(parts) -> Tensor:
    """Concatenate along the row axis (second-to-last)."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    base = parts[0]
    for p in parts[1:]:
        if p.ndim != base.ndim or p.shape[:-2] != base.shape[:-2] or p.shape[-1] != base.shape[-1]:
            raise ShapeError(
                f"concat_rows shapes disagree outside the row axis: {base.shape} vs {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=-2))
    offsets = np.cumsum([0] + [p.shape[-2] for p in parts])

    def vjp(g):
        return tuple(g[..., offsets[i]:offsets[i + 1], :] for i in range(len(parts)))

    return _maybe_record(out, tuple(parts), vjp)


def _check_row_indices(indices: np.ndarray, num_rows: int, op: str) -> np.ndarray:
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"{op} indices must be integers, got {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise IndexError(f"{op} index out of range [0, {num_rows}) : "
                         f"saw [{idx.min()}, {idx.max()}]")
    return idx.astype(np.int64)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Pick rows by index: [T, d] with [k] indices, or [B, T, d] with [B, k].

    Gradients scatter-add back into the source rows (straight-through with
    respect to the index choice, which is treated as a constant).
    """
    x = _as_tensor(x)
    if x.ndim == 2:
        idx = _check_row_indices(indices, x.shape[0], "gather_rows")
        if idx.ndim != 1:
            raise ShapeError(f"gather_rows on rank-2 input needs 1-D indices, got {idx.shape}")
        out = Tensor(x.data[idx])

        def vjp(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            return (gx, None)

    elif x.ndim == 3:
        idx = _check_row_indices(indices, x.shape[1], "gather_rows")
        if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
            raise ShapeError(
                f"gather_rows on rank-3 input needs [batch, k] indices, got {idx.shape}")
        batch_arange = np.arange(x.shape[0])[:, None]
        out = Tensor(x.data[batch_arange, idx])

        def vjp(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (batch_arange, idx), g)
            return (gx, None)

    else:
        raise ShapeError(f"gather_rows needs rank 2 or 3 input, got {x.shape}")
    idx_const = Tensor(np.zeros(()))  # placeholder parent, carries no grad
    return _maybe_record(out, (x, idx_const), vjp)


def scatter_add_rows(rows: Tensor, indices, num_rows: int) -> Tensor:
    """Spread `rows` into a zero tensor with `num_rows` rows, adding at `indices`.

    Inverse layout of gather_rows: [k, d] + [k] -> [num_rows, d], or
    [B, k, d] + [B, k] -> [B, num_rows, d]. Duplicate indices accumulate.
    """
    rows = _as_tensor(rows)
    num_rows = int(num_rows)
    if rows.ndim == 2:
        idx = _check_row_indices(indices, num_rows, "scatter_add_rows")
        if idx.shape != (rows.shape[0],):
            raise ShapeError(f"scatter_add_rows indices {idx.shape} do not match rows {rows.shape}")
        base = np.zeros((num_rows, rows.shape[1]), dtype=rows.dtype)
        np.add.at(base, idx, rows.data)
        out = Tensor(base)

        def vjp(g):
            return (g[idx], None)

    elif rows.ndim == 3:
        idx = _check_row_indices(indices, num_rows, "scatter_add_rows")
        if idx.shape != rows.shape[:2]:
            raise ShapeError(f"scatter_add_rows indices {idx.shape} do not match rows {rows.shape}")
        base = np.zeros((rows.shape[0], num_rows, rows.shape[2]), dtype=rows.dtype)
        batch_arange = np.arange(rows.shape[0])[:, None]
        np.add.at(base, (batch_arange, idx), rows.data)
        out = Tensor(base)

        def vjp(g):
            return (g[batch_arange, idx], None)

    else:
        raise ShapeError(f"scatter_add_rows needs rank 2 or 3 rows, got {rows.shape}")
    idx_const = Tensor(np.zeros(()))
    return _maybe_record(out, (rows, idx_const), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    x = _as_tensor(x)
    if x.ndim < 1:
        raise ShapeError("softmax_rows needs rank >= 1")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(_check_result(y, "softmax_rows"))

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _maybe_record(out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must be shape ({d},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = Tensor(_check_result(xhat * gamma.data + beta.data, "layer_norm"))

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv_std * (gx_hat
                        - gx_hat.mean(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _maybe_record(out, (x, gamma, beta), vjp)


# GELU constant: d/dx of the Gaussian CDF term.
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF via erf."""
    x = _as_tensor(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(_check_result(x.data * phi, "gelu"))

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (phi + x.data * pdf),)

    return _maybe_record(out, (x,), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; labels are integer class ids.

    Accepts [B, C] logits with [B] labels or a single [C] row with a scalar
    label. Out-of-range labels raise IndexError.
    """
    logits = _as_tensor(logits)
    if logits.ndim == 1:
        logits2 = logits.data[None, :]
    elif logits.ndim == 2:
        logits2 = logits.data
    else:
        raise ShapeError(f"cross_entropy logits must be rank 1 or 2, got {logits.shape}")
    labels_arr = np.asarray(labels)
    if not np.issubdtype(labels_arr.dtype, np.integer):
        raise TypeError(f"cross_entropy labels must be integers, got {labels_arr.dtype}")
    labels_arr = labels_arr.reshape(-1).astype(np.int64)
    b, c = logits2.shape
    if labels_arr.shape != (b,):
        raise ShapeError(f"cross_entropy got {b} logit rows but {labels_arr.size} labels")
    if labels_arr.size and (labels_arr.min() < 0 or labels_arr.max() >= c):
        raise IndexError(f"cross_entropy label out of range [0, {c})")

    shifted = logits2 - logits2.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1)) - shifted[np.arange(b), labels_arr]
    out = Tensor(_check_result(np.asarray(log_z.mean(), dtype=logits.dtype), "cross_entropy"))

    def vjp(g):
        probs = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
        probs[np.arange(b), labels_arr] -= 1.0
        grad = (float(g) / b) * probs
        return (grad.reshape(logits.shape), None)

    labels_const = Tensor(np.zeros(()))
    return _maybe_record(out, (logits, labels_const), vjp)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes disagree: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = Tensor(_check_result(np.asarray(np.mean(diff * diff), dtype=pred.dtype), "mse"))
    n = max(diff.size, 1)

    def vjp(g):
        base = (2.0 * float(g) / n) * diff
        return base, -base

    return _maybe_record(out, (pred, target), vjp)
