"""Dense arrays with tape-based reverse-mode differentiation.

Only the handful of operations the recommender needs are provided. Every op
takes and returns :class:`Tensor`; when a :class:`Tape` is active and any input
requires a gradient, the op appends a backward rule to that tape.

Arrays are numpy-backed and float64 unless stated otherwise. Shapes may carry
a leading batch axis; ops never broadcast beyond "same shape" and "scalar".
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its contract."""


class NumericError(FloatingPointError):
    """A non-finite value was produced while checking is enabled."""


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def set_nan_check(enabled: bool) -> None:
    """Turn on (or off) the per-op finiteness check for this thread."""
    _local.nan_check = bool(enabled)


def nan_check_enabled() -> bool:
    return getattr(_local, "nan_check", False)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar for the elementwise ops
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; ops executed inside it are recorded when at
    least one input requires a gradient. ``backward`` replays the log in
    reverse.
    """

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        self.records.append(_Record(op, inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            in_grads = rec.backward(g_out)
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # whatever remains are leaves (never produced by a recorded op)
        produced = {id(r.output) for r in self.records}
        leaves = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            if key in grads:
                t._accumulate(grads[key])


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Gradients accumulate across calls until :meth:`Tensor.zero_grad`.
    """
    tape = tape if tape is not None else current_tape()
    if tape is None:
        raise ContractError("backward called without an active tape")
    tape.backward(loss)


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    if nan_check_enabled() and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite value produced by {op}")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = current_tape()
    if needs and tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D ``b``; ``a`` may carry leading batch axes."""
    if b.data.ndim != 2 or a.data.ndim < 1:
        raise DimensionError(f"matmul expects (..., p) @ (p, q), got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        ga = g @ B.T
        gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit("matmul", (a, b), A @ B, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with the bias added along the last axis."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: {x.shape} @ {weight.shape}")
    X, W = x.data, weight.data
    out = X @ W
    if bias is not None:
        if bias.shape != (W.shape[1],):
            raise DimensionError(f"bias shape {bias.shape} != ({W.shape[1]},)")
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = X.reshape(-1, X.shape[-1]).T @ g2
        gx = g @ W.T
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", inputs, out, bw)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_same(a, b, "add")
    return _emit("add", (a, b), a.data + b.data, lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_same(a, b, "mul")
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (_reduce_to(g * B, a), _reduce_to(g * A, b)))


def relu(x: Tensor) -> Tensor:
    X = x.data
    gate = X > 0
    return _emit("relu", (x,), np.where(gate, X, 0.0).astype(X.dtype), lambda g: (g * gate,))


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch by name: ``add``, ``mul`` or ``relu``."""
    table = {"add": add, "mul": mul, "relu": relu}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*inputs)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape),))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(tuple(shape))
    return _emit("reshape", (x,), out, lambda g: (g.reshape(src),))


def take_rows(x: Tensor, index) -> Tensor:
    """Basic slice or integer selection along axis -2 (the time axis)."""
    src = x.shape
    out = x.data[..., index, :]

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        full[..., index, :] += g
        return (full,)

    return _emit("slice", (x,), np.ascontiguousarray(out), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    arrays = [t.data for t in tensors]
    ax = axis % arrays[0].ndim
    sizes = [a.shape[ax] for a in arrays]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(arrays)))

    return _emit("concat", tuple(tensors), np.concatenate(arrays, axis=ax), bw)


# ---------------------------------------------------------------------------
# sequence / network ops
# ---------------------------------------------------------------------------


def embedding(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table``; the backward scatters into the touched rows."""
    idx = np.asarray(indices, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"embedding index out of range [0, {n})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit("embedding", (table,), table.data[idx], bw)


def conv1d_causal(x: Tensor, kernel: Tensor, bias: Tensor | None, dilation: int = 1) -> Tensor:
    """Causal dilated convolution along the time axis.

    ``x`` is ``(..., t, C_in)``, ``kernel`` is ``(f, C_in, C_out)``. The input
    is left-padded with ``(f - 1) * dilation`` zeros and tap ``j`` reads
    ``x[h - (f - 1 - j) * dilation]``, so the last tap sits on the current
    position.
    """
    f, c_in, c_out = kernel.shape
    if x.shape[-1] != c_in:
        raise DimensionError(f"conv1d: input channels {x.shape[-1]} != kernel {c_in}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    X, K = x.data, kernel.data
    t = X.shape[-2]
    pad = (f - 1) * dilation
    pad_width = [(0, 0)] * (X.ndim - 2) + [(pad, 0), (0, 0)]
    Xp = np.pad(X, pad_width)
    out = np.zeros(X.shape[:-1] + (c_out,), dtype=X.dtype)
    for j in range(f):
        s = j * dilation
        out += Xp[..., s : s + t, :] @ K[j]
    if bias is not None:
        out += bias.data

    def bw(g):
        gxp = np.zeros_like(Xp)
        gk = np.empty_like(K)
        g2 = g.reshape(-1, c_out)
        for j in range(f):
            s = j * dilation
            win = Xp[..., s : s + t, :]
            gk[j] = win.reshape(-1, c_in).T @ g2
            gxp[..., s : s + t, :] += g @ K[j].T
        gx = gxp[..., pad:, :]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv1d", inputs, out, bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize over the last (channel) axis independently at each position."""
    X = x.data
    c = X.shape[-1]
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gain.data
    out = xhat * G + bias.data

    def bw(g):
        gxhat = g * G
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, c)
        return gx, (flat_g * xhat.reshape(-1, c)).sum(axis=0), flat_g.sum(axis=0)

    return _emit("layer_norm", (x, gain, bias), out, bw)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax_rows(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    P = np.exp(_log_softmax(x.data))

    def bw(g):
        return (P * (g - (g * P).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), P, bw)


def cross_entropy_from_logits(logits: Tensor, targets, mask=None) -> Tensor:
    """Sum over unmasked rows of ``-log softmax(logits)[row, target]``.

    ``logits`` is ``(rows, n)``; ``targets`` and ``mask`` have one entry per
    row. Masked-out rows contribute nothing, their targets are not checked.
    """
    Z = logits.data
    if Z.ndim != 2:
        raise DimensionError(f"cross entropy expects (rows, n) logits, got {logits.shape}")
    rows, n = Z.shape
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    m = np.ones(rows, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if tgt.shape[0] != rows or m.shape[0] != rows:
        raise DimensionError("targets/mask length must match logits rows")
    live = tgt[m]
    if live.size and (live.min() < 0 or live.max() >= n):
        raise IndexError(f"target index out of range [0, {n})")
    safe = np.where(m, tgt, 0)
    logp = _log_softmax(Z)
    picked = logp[np.arange(rows), safe]
    loss = -(picked * m).sum()

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(rows), safe] -= 1.0
        grad *= m[:, None]
        return (grad * g,)

    return _emit("cross_entropy", (logits,), np.asarray(loss, dtype=Z.dtype), bw)


def sampled_softmax_xent(
    hidden: Tensor,
    weight: Tensor,
    bias: Tensor,
    targets,
    negatives: np.ndarray,
    log_q: float,
    mask=None,
) -> Tensor:
    """Cross entropy over ``{target} ∪ negatives`` per row.

    ``hidden`` is ``(rows, d)``, ``weight`` is ``(d, n)``. ``negatives`` is an
    integer matrix ``(rows, s)`` of candidate columns. Every candidate logit,
    the target's included, is shifted by ``-log_q`` (log expected count under
    the sampler). Under uniform sampling the shift is common to all columns.
    """
    H, W, b = hidden.data, weight.data, bias.data
    rows = H.shape[0]
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    m = np.ones(rows, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    neg = np.asarray(negatives, dtype=np.int64).reshape(rows, -1)
    cand = np.concatenate([tgt[:, None], neg], axis=1)  # (rows, 1 + s)
    Wc = W.T[cand]  # (rows, 1 + s, d)
    z = np.einsum("rd,rsd->rs", H, Wc) + b[cand]
    z -= log_q
    logp = _log_softmax(z)
    loss = -(logp[:, 0] * m).sum()

    def bw(g):
        dz = np.exp(logp)
        dz[:, 0] -= 1.0
        dz *= m[:, None] * g
        gh = np.einsum("rs,rsd->rd", dz, Wc)
        # candidates are distinct within a row, so plain assignment scatters
        dense = np.zeros((rows, W.shape[1]), dtype=W.dtype)
        dense[np.arange(rows)[:, None], cand] = dz
        return gh, H.T @ dense, dense.sum(axis=0)

    return _emit("sampled_softmax", (hidden, weight, bias), np.asarray(loss, dtype=H.dtype), bw)
