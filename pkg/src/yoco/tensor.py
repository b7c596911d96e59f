"""Dense float tensors with an opt-in reverse-mode gradient tape.

Tensors wrap contiguous, read-only numpy arrays (float32 or float64).
Operations are module-level functions; while a GradTape is active, each
operation records enough to replay the chain rule backward from a scalar
loss. Without an active tape there is no recording overhead beyond the
forward arithmetic.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes or dimensions are incompatible with the operation."""


class NonFiniteError(ArithmeticError):
    """A computation produced (or was asked to propagate) NaN or infinity."""


class MaskError(ValueError):
    """An additive mask is malformed, e.g. a softmax row is fully masked."""


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.array(data, dtype=dtype, order="C")
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Immutable dense array. Use module functions (or + - * @) to combine."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = _as_float_array(data, dtype)
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Takes ownership: caller must not retain a writable alias.
        out = object.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        out.data = arr
        return out

    @property
    def shape(self) -> tuple:
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

    def astype(self, dtype) -> "Tensor":
        if np.dtype(dtype) not in FLOAT_DTYPES:
            raise TypeError(f"unsupported tensor dtype {dtype!r}")
        return Tensor._wrap(self.data.astype(dtype))

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float64) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=dtype))


def full(shape, value: float, dtype=np.float64) -> Tensor:
    return Tensor._wrap(np.full(shape, value, dtype=dtype))


def ensure_finite(t: Tensor, context: str = "tensor") -> Tensor:
    """Raise NonFiniteError if t contains NaN or infinity; otherwise return t."""
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"non-finite values in {context}")
    return t


# ---------------------------------------------------------------------------
# Gradient tape
# ---------------------------------------------------------------------------

_TAPES: list["GradTape"] = []


def _active_tape() -> "GradTape | None":
    return _TAPES[-1] if _TAPES else None


class GradTape:
    """Records operations so gradients can be replayed backward.

    Use as a context manager. Each record holds the operation's output
    tensors, input tensors, and a backward callable mapping output
    gradients (numpy arrays, one per output) to input gradients (one per
    input, or None for inputs that receive no gradient). The tape stack
    is module-global and single-owner: nested tapes record independently,
    and recording is not thread safe.
    """

    def __init__(self):
        self._records: list[tuple[tuple[Tensor, ...], tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        if popped is not self:
            raise RuntimeError("gradient tapes exited out of order")
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, outputs, inputs: Sequence[Tensor], backward: Callable) -> None:
        """Add one node. outputs may be a Tensor or a tuple of Tensors."""
        outs = outputs if isinstance(outputs, tuple) else (outputs,)
        self._records.append((outs, tuple(inputs), backward))

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[Tensor]:
        """Gradients of a scalar loss with respect to each source tensor.

        Sources that do not influence the loss get zero gradients. Each
        source receives exactly one gradient tensor, shaped like itself.
        """
        if loss.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("loss is non-finite; cannot differentiate")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        for outs, ins, backward in reversed(self._records):
            out_grads = [grads.get(id(o)) for o in outs]
            if all(g is None for g in out_grads):
                continue
            out_grads = [
                g if g is not None else np.zeros(o.shape, dtype=o.dtype)
                for g, o in zip(out_grads, outs)
            ]
            in_grads = backward(*out_grads)
            for src, g in zip(ins, in_grads):
                if g is None:
                    continue
                key = id(src)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = np.asarray(g)
        result = []
        for src in sources:
            g = grads.get(id(src))
            if g is None:
                g = np.zeros(src.shape, dtype=src.dtype)
            result.append(Tensor._wrap(np.asarray(g, dtype=src.dtype)))
        return result


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    out = Tensor._wrap(a.data + b.data)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    out = Tensor._wrap(a.data - b.data)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shaped tensors."""
    _require_same_shape(a, b, "mul")
    out = Tensor._wrap(a.data * b.data)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g * b.data, g * a.data))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(a.data * c)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * c,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: operands must be 2-D, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} @ {b.shape} do not align")
    out = Tensor._wrap(a.data @ b.data)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got shape {a.shape}")
    out = Tensor._wrap(a.data.T.copy())
    tape = _active_tape()
    if tape is not None:
        tape.record(out, (a,), lambda g: (g.T,))
    return out


def exp(a: Tensor) -> Tensor:
    """Elementwise exponential. -inf inputs map to 0; +inf or NaN outputs raise."""
    with np.errstate(over="ignore"):
        res = np.exp(a.data)
    if np.isnan(res).any() or np.isposinf(res).any():
        raise NonFiniteError("exp overflowed or produced NaN")
    out = Tensor._wrap(res)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * res,))
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Two-branch form: never exponentiates a positive argument.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor._wrap(s)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * s * (1.0 - s),))
    return out


def logsigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)), computed as -softplus(-x) to stay finite for large |x|."""
    x = a.data
    res = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))), x - np.log1p(np.exp(-np.abs(x))))
    out = Tensor._wrap(res)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * _sigmoid(-x),))
    return out


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x), the gate nonlinearity."""
    s = _sigmoid(a.data)
    out = Tensor._wrap(a.data * s)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))
    return out


def cumsum(a: Tensor, axis: int) -> Tensor:
    out = Tensor._wrap(np.cumsum(a.data, axis=axis))
    tape = _active_tape()
    if tape is not None:
        def backward(g, _axis=axis):
            return (np.flip(np.cumsum(np.flip(g, _axis), axis=_axis), _axis),)
        tape.record(out, (a,), backward)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(a.data.sum(), dtype=a.dtype))
    tape = _active_tape()
    if tape is not None:
        tape.record(out, (a,), lambda g: (np.full(a.shape, g.reshape(()), dtype=a.dtype),))
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"slice_rows: expected 2-D tensor, got shape {a.shape}")
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeError(f"slice_rows: range [{start}, {stop}) outside {a.shape[0]} rows")
    out = Tensor._wrap(a.data[start:stop].copy())
    tape = _active_tape()
    if tape is not None:
        def backward(g):
            full_g = np.zeros(a.shape, dtype=g.dtype)
            full_g[start:stop] = g
            return (full_g,)
        tape.record(out, (a,), backward)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"slice_cols: expected 2-D tensor, got shape {a.shape}")
    if not (0 <= start <= stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: range [{start}, {stop}) outside {a.shape[1]} columns")
    out = Tensor._wrap(a.data[:, start:stop].copy())
    tape = _active_tape()
    if tape is not None:
        def backward(g):
            full_g = np.zeros(a.shape, dtype=g.dtype)
            full_g[:, start:stop] = g
            return (full_g,)
        tape.record(out, (a,), backward)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows: need at least one tensor")
    if any(p.ndim != 2 for p in parts):
        raise ShapeError("concat_rows: all tensors must be 2-D")
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: column counts differ: {sorted(widths)}")
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=0))
    tape = _active_tape()
    if tape is not None:
        sizes = [p.shape[0] for p in parts]
        def backward(g):
            pieces, at = [], 0
            for s in sizes:
                pieces.append(g[at:at + s])
                at += s
            return tuple(pieces)
        tape.record(out, tuple(parts), backward)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols: need at least one tensor")
    if any(p.ndim != 2 for p in parts):
        raise ShapeError("concat_cols: all tensors must be 2-D")
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1:
        raise ShapeError(f"concat_cols: row counts differ: {sorted(heights)}")
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=1))
    tape = _active_tape()
    if tape is not None:
        sizes = [p.shape[1] for p in parts]
        def backward(g):
            pieces, at = [], 0
            for s in sizes:
                pieces.append(g[:, at:at + s])
                at += s
            return tuple(pieces)
        tape.record(out, tuple(parts), backward)
    return out


def take_rows(table: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D table by integer index (embedding lookup)."""
    if table.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-D table, got shape {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index outside [0, {table.shape[0]})")
    out = Tensor._wrap(table.data[idx])
    tape = _active_tape()
    if tape is not None:
        def backward(g):
            full_g = np.zeros(table.shape, dtype=g.dtype)
            np.add.at(full_g, idx, g)
            return (full_g,)
        tape.record(out, (table,), backward)
    return out


def outer_diff(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise differences out[i, j] = a[i] - b[j] for vector inputs.

    Accepts 1-D tensors or 2-D single-row/column tensors; the output is
    [len(a), len(b)].
    """
    if a.size != max(a.shape, default=0) or b.size != max(b.shape, default=0):
        raise ShapeError(f"outer_diff: inputs must be vectors, got {a.shape}, {b.shape}")
    av, bv = a.data.ravel(), b.data.ravel()
    out = Tensor._wrap(av[:, None] - bv[None, :])
    tape = _active_tape()
    if tape is not None:
        def backward(g):
            return (g.sum(axis=1).reshape(a.shape), -g.sum(axis=0).reshape(b.shape))
        tape.record(out, (a, b), backward)
    return out


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of x by s[i]."""
    if x.ndim != 2:
        raise ShapeError(f"scale_rows: x must be 2-D, got shape {x.shape}")
    if s.size != x.shape[0] or s.size != max(s.shape, default=0):
        raise ShapeError(f"scale_rows: scale shape {s.shape} does not match {x.shape[0]} rows")
    sv = s.data.ravel()
    out = Tensor._wrap(x.data * sv[:, None])
    tape = _active_tape()
    if tape is not None:
        def backward(g):
            return (g * sv[:, None], (g * x.data).sum(axis=1).reshape(s.shape))
        tape.record(out, (x, s), backward)
    return out


# ---------------------------------------------------------------------------
# Normalization and attention softmax
# ---------------------------------------------------------------------------


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Root-mean-square normalization per row with a learned gain vector."""
    if x.ndim != 2:
        raise ShapeError(f"rmsnorm: x must be 2-D, got shape {x.shape}")
    if gain.shape != (x.shape[1],):
        raise ShapeError(f"rmsnorm: gain shape {gain.shape} does not match width {x.shape[1]}")
    xd, gd = x.data, gain.data
    d = xd.shape[1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=1, keepdims=True) + eps)
    normed = xd * inv
    res = normed * gd
    if not np.isfinite(res).all():
        raise NonFiniteError("rmsnorm produced non-finite values")
    out = Tensor._wrap(res)
    tape = _active_tape()
    if tape is not None:
        def backward(g):
            gg = g * gd
            # d/dx of x * inv(x): inv * g - x * inv^3 * mean(g * x)
            dot = (gg * xd).sum(axis=1, keepdims=True)
            gx = gg * inv - xd * (inv ** 3) * dot / d
            ggain = (g * normed).sum(axis=0)
            return (gx, ggain)
        tape.record(out, (x, gain), backward)
    return out


def normalize_rows(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero-mean, unit-variance normalization per row, no affine terms."""
    if x.ndim != 2:
        raise ShapeError(f"normalize_rows: x must be 2-D, got shape {x.shape}")
    xd = x.data
    d = xd.shape[1]
    mean = xd.mean(axis=1, keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    res = centered * inv
    if not np.isfinite(res).all():
        raise NonFiniteError("normalize_rows produced non-finite values")
    out = Tensor._wrap(res)
    tape = _active_tape()
    if tape is not None:
        def backward(g):
            # Standard layer-norm backward without affine parameters.
            gm = g.mean(axis=1, keepdims=True)
            gy = (g * res).mean(axis=1, keepdims=True)
            return (inv * (g - gm - res * gy),)
        tape.record(out, (x,), backward)
    return out


def softmax_masked(logits: Tensor, mask: Tensor) -> Tensor:
    """Row softmax of logits + mask, where mask entries are 0 or -inf.

    Masked positions get probability exactly 0. A fully masked row raises
    MaskError. The mask is treated as a constant: no gradient flows to it.
    """
    _require_same_shape(logits, mask, "softmax_masked")
    md = mask.data
    if not np.all((md == 0.0) | np.isneginf(md)):
        raise MaskError("mask entries must be 0 or -inf")
    z = logits.data + md
    zmax = z.max(axis=1, keepdims=True)
    if np.isneginf(zmax).any():
        raise MaskError("softmax row is fully masked")
    with np.errstate(invalid="ignore"):
        e = np.exp(z - zmax)
    e[np.isneginf(md)] = 0.0
    total = e.sum(axis=1, keepdims=True)
    p = e / total
    if not np.isfinite(p).all():
        raise NonFiniteError("softmax produced non-finite values")
    out = Tensor._wrap(p)
    tape = _active_tape()
    if tape is not None:
        def backward(g):
            dot = (g * p).sum(axis=1, keepdims=True)
            return (p * (g - dot),)
        tape.record(out, (logits,), backward)
    return out


def causal_mask(n_q: int, n_k: int | None = None, offset: int = 0,
                dtype=np.float64) -> Tensor:
    """Additive mask: query i may attend keys j with j <= offset + i.

    Entries are 0 where allowed and -inf where disallowed. offset is the
    absolute position of query row 0 when queries start mid-sequence.
    """
    if n_k is None:
        n_k = n_q
    qpos = offset + np.arange(n_q)[:, None]
    kpos = np.arange(n_k)[None, :]
    m = np.where(kpos <= qpos, 0.0, -np.inf).astype(dtype)
    return Tensor._wrap(m)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[list[Tensor]], Tensor], points: list[Tensor],
               h: float = 1e-5) -> float:
    """Compare taped gradients of f against central finite differences.

    f maps a list of tensors to a scalar Tensor and must be pure. Returns
    the maximum relative error |analytic - fd| / (|fd| + 1e-8) over every
    element of every input. Checks run in float64 regardless of input
    dtype so that finite differences stay meaningful.
    """
    if not (1e-6 <= h <= 1e-3):
        raise ValueError(f"step size h={h} outside [1e-6, 1e-3]")
    pts = [p.astype(np.float64) for p in points]
    with GradTape() as tape:
        loss = f(pts)
        if loss.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got shape {loss.shape}")
        grads = tape.gradient(loss, pts)
    max_rel = 0.0
    for i, p in enumerate(pts):
        base = p.data
        analytic = grads[i].data
        for idx in np.ndindex(*base.shape) if base.shape else [()]:
            bumped = base.copy()
            bumped[idx] = base[idx] + h
            plus = [pts[j] if j != i else Tensor._wrap(bumped) for j in range(len(pts))]
            bumped2 = base.copy()
            bumped2[idx] = base[idx] - h
            minus = [pts[j] if j != i else Tensor._wrap(bumped2) for j in range(len(pts))]
            fd = (f(plus).item() - f(minus).item()) / (2.0 * h)
            rel = abs(float(analytic[idx]) - fd) / (abs(fd) + 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
