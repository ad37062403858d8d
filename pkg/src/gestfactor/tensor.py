"""Minimal dense-tensor arithmetic with reverse-mode differentiation.

Everything is 64-bit float and numpy-backed.  The operator set is just
what the gesture autoencoder, the loss terms and the phoneme recognizer
need: elementwise arithmetic, reductions, 1-d convolution, ReLU, batch
normalization and log-softmax.  Gradients are obtained by recording ops
onto an explicit :class:`Tape` and replaying it backwards, plus a
central-finite-difference checker to verify every backward rule.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible or violate an operator precondition."""


class NumericError(ArithmeticError):
    """A value that must be finite is NaN or infinite."""


class TapeError(RuntimeError):
    """Tape misuse: double backward, nested tapes, or a stale record."""


class StateError(RuntimeError):
    """A stateful layer was used before it was initialized."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

class Tensor:
    """Immutable dense array of float64 values.

    Construction validates finiteness: any op whose result contains NaN or
    Inf raises :class:`NumericError` instead of letting the values spread.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # arithmetic sugar; scalars are promoted to constant tensors
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Record:
    """One executed operator: output slot, input slots, backward rule.

    ``backward`` maps the output adjoint to one adjoint per input (None for
    inputs that need no gradient).  Tensor references are kept so slot ids
    stay unique for the life of the tape.
    """

    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


class Gradients:
    """Adjoints produced by one backward pass, keyed by tensor identity."""

    def __init__(self, table: dict, keepalive: list):
        self._table = table
        self._keepalive = keepalive

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._table.get(id(t))
        if g is None:
            raise KeyError("tensor was not touched by the taped forward pass")
        return g

    def get(self, t: Tensor, default=None):
        return self._table.get(id(t), default)

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._table


_ACTIVE_TAPE: list["Tape"] = []


class Tape:
    """Ordered record of executed ops for one forward pass.

    Replaying the records in reverse execution order yields the adjoint of
    every tensor touched in forward.  A tape can be consumed by ``backward``
    exactly once; re-entry raises :class:`TapeError`.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False
        self._entered = False

    def __enter__(self) -> "Tape":
        if _ACTIVE_TAPE:
            raise TapeError("a tape is already active; nested tapes are not supported")
        if self._entered:
            raise TapeError("a tape cannot be re-entered")
        self._entered = True
        _ACTIVE_TAPE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.pop()
        return False

    def _append(self, record: _Record):
        self._records.append(record)

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> Gradients:
        """Accumulate adjoints of ``loss`` w.r.t. everything on the tape."""
        if self._consumed:
            raise TapeError("tape already consumed; run a new forward pass first")
        if loss.size != 1:
            raise ShapeError("backward requires a scalar loss")
        self._consumed = True
        table: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        keepalive: list[Tensor] = [loss]
        for rec in reversed(self._records):
            g_out = table.get(id(rec.out))
            if g_out is None:
                continue
            g_inputs = rec.backward(g_out)
            for t_in, g_in in zip(rec.inputs, g_inputs):
                if g_in is None:
                    continue
                slot = id(t_in)
                if slot in table:
                    table[slot] = table[slot] + g_in
                else:
                    table[slot] = g_in
                    keepalive.append(t_in)
        keepalive.extend(r.out for r in self._records)
        keepalive.extend(t for r in self._records for t in r.inputs)
        return Gradients(table, keepalive)


def _active() -> Tape | None:
    return _ACTIVE_TAPE[-1] if _ACTIVE_TAPE else None


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Create an op result with a hand-written backward rule.

    ``backward(grad_out) -> tuple`` must return one adjoint array (or None)
    per input, in order.  Used by losses with non-composable gradients
    (Hoyer rows, sparseness entropy, CTC).
    """
    out = Tensor(data)
    tape = _active()
    if tape is not None:
        tape._append(_Record(out, inputs, backward))
    return out


# ---------------------------------------------------------------------------
# Elementwise / reduction ops
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data
    return custom_op(
        out_data, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, (a,), lambda g: (-g,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return custom_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in ax]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(a.data)
    return custom_op(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    return custom_op(out_data, (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)
    return custom_op(out_data, (a,), lambda g: (g * out_data,))


def absolute(a) -> Tensor:
    # subgradient at 0 is 0, matching the ReLU convention
    a = as_tensor(a)
    return custom_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    """max(x, 0); backward passes the gradient only where x > 0."""
    a = as_tensor(a)
    return custom_op(np.maximum(a.data, 0.0), (a,),
                     lambda g: (g * (a.data > 0.0),))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = tuple(np.argsort(axes))
    return custom_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                     lambda g: (g.transpose(inv),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    a = as_tensor(a)
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {axis} "
                         f"of shape {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return custom_op(np.ascontiguousarray(a.data[index]), (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out_data) * g.sum(axis=axis, keepdims=True),)

    return custom_op(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# 1-d convolution
# ---------------------------------------------------------------------------

def same_padding(kernel: int, dilation: int = 1) -> tuple[int, int]:
    """Left/right zero padding so stride-1 conv output keeps the input length.

    The span (kernel-1)*dilation+1 is split floor on the left, ceil on the
    right, so even kernels pad asymmetrically.
    """
    span = (kernel - 1) * dilation + 1
    left = (span - 1) // 2
    return left, span - 1 - left


def _gather_windows(padded: np.ndarray, length_out: int, k: int, dilation: int) -> np.ndarray:
    """(B, Cin, Lp) -> (B, Cin, length_out, k) tap view."""
    windows = np.lib.stride_tricks.sliding_window_view(
        padded, (k - 1) * dilation + 1, axis=2)
    if dilation > 1:
        windows = windows[..., ::dilation]
    return windows[:, :, :length_out, :]


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, *,
           dilation: int = 1,
           pad_left: int | None = None, pad_right: int | None = None) -> Tensor:
    """Stride-1 cross-correlation over the last axis.

    x: (B, Cin, L); kernel: (K, Cin, Cout); bias: (Cout,) or None.
    Default padding is "same" (output length == L).  Explicit pad_left /
    pad_right override it, e.g. (K-1, 0) for a causal layout.

    out[b, co, t] = bias[co] + sum_{k, ci} kernel[k, ci, co] * x_padded[b, ci, t + k*dilation]
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError(f"conv1d expects 3-d input and kernel, got {x.shape} and {kernel.shape}")
    batch, c_in, length = x.shape
    k, kc_in, c_out = kernel.shape
    if kc_in != c_in:
        raise ShapeError(f"kernel expects {kc_in} input channels, input has {c_in}")
    if length < 1:
        raise ShapeError("conv1d input has zero length")
    if k < 1 or dilation < 1:
        raise ShapeError("kernel size and dilation must be >= 1")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")

    pl, pr = same_padding(k, dilation)
    if pad_left is not None:
        pl = pad_left
    if pad_right is not None:
        pr = pad_right
    span = (k - 1) * dilation + 1
    length_out = length + pl + pr - span + 1
    if length_out < 1:
        raise ShapeError("padding leaves no output positions")

    padded = np.zeros((batch, c_in, length + pl + pr))
    padded[:, :, pl:pl + length] = x.data
    windows = _gather_windows(padded, length_out, k, dilation)
    # (B*Lout, Cin*K) @ (Cin*K, Cout), tap index ci*K + k
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(
        batch * length_out, c_in * k)
    kmat = np.ascontiguousarray(kernel.data.transpose(1, 0, 2)).reshape(c_in * k, c_out)
    out_data = (cols @ kmat).reshape(batch, length_out, c_out).transpose(0, 2, 1)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None]
    out_data = np.ascontiguousarray(out_data)

    kernel_data = kernel.data

    def backward(g):
        g_flat = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(batch * length_out, c_out)
        g_kernel = (cols.T @ g_flat).reshape(c_in, k, c_out).transpose(1, 0, 2)
        g_padded = np.zeros_like(padded)
        for tap in range(k):
            # (Cin, Cout) @ (B, Cout, Lout) -> (B, Cin, Lout)
            g_padded[:, :, tap * dilation: tap * dilation + length_out] += \
                np.matmul(kernel_data[tap], g)
        g_x = g_padded[:, :, pl:pl + length]
        g_bias = g.sum(axis=(0, 2)) if bias is not None else None
        return (np.ascontiguousarray(g_x), np.ascontiguousarray(g_kernel), g_bias)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return custom_op(out_data, inputs, backward)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    gamma/beta are learnable tensors; running mean/var are plain arrays
    updated in training mode as running <- (1-momentum)*running + momentum*batch.
    Inference mode is a fixed affine map from the running statistics and is
    an error until at least one training update has run, unless the state
    was explicitly seeded to the identity (mean 0, var 1).
    """

    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        self.channels = channels
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Tensor(np.ones(channels))
        self.beta = Tensor(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.updates = 0
        self.seeded = False
        self.mode = "train"

    def seed_identity(self):
        """Mark mean-0 / var-1 running stats as intentional for inference."""
        self.running_mean = np.zeros(self.channels)
        self.running_var = np.ones(self.channels)
        self.seeded = True
        return self

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self


def batchnorm1d(x: Tensor, state: BatchNormState, mask: np.ndarray | None = None) -> Tensor:
    """Normalize (B, C, L) per channel over batch and length.

    ``mask`` (B, L) of {0,1} restricts the statistics to valid positions so
    zero-padded segments normalize exactly like their unpadded originals.
    Invalid positions still pass through the affine map; callers re-zero
    them downstream.
    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm expects (B, {state.channels}, L), got {x.shape}")
    gamma, beta = state.gamma, state.beta
    batch, channels, length = x.shape

    if state.mode == "eval":
        if state.updates == 0 and not state.seeded:
            raise StateError("inference before any training update; "
                             "call seed_identity() to run with identity stats")
        inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
        scale = gamma.data * inv
        out_data = x.data * scale[None, :, None] + \
            (beta.data - state.running_mean * scale)[None, :, None]

        def backward_eval(g):
            g_x = g * scale[None, :, None]
            xhat = (x.data - state.running_mean[None, :, None]) * inv[None, :, None]
            return (g_x, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2)))

        return custom_op(out_data, (x, gamma, beta), backward_eval)

    if mask is None:
        n_valid = batch * length
        mask_b = None
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (batch, length):
            raise ShapeError(f"mask shape {mask.shape} != ({batch}, {length})")
        n_valid = int(mask.sum())
        mask_b = mask[:, None, :]
    if n_valid < 2:
        raise ShapeError("training-mode batchnorm needs at least 2 positions per channel")

    if mask_b is None:
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
    else:
        mean = (x.data * mask_b).sum(axis=(0, 2)) / n_valid
        centered_sq = (x.data - mean[None, :, None]) ** 2
        var = (centered_sq * mask_b).sum(axis=(0, 2)) / n_valid

    inv = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x.data - mean[None, :, None]) * inv[None, :, None]
    out_data = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    m = state.momentum
    state.running_mean = (1.0 - m) * state.running_mean + m * mean
    state.running_var = np.maximum((1.0 - m) * state.running_var + m * var,
                                   np.finfo(np.float64).tiny)
    state.updates += 1

    gamma_data = gamma.data

    def backward_train(g):
        g_beta = (g if mask_b is None else g * mask_b).sum(axis=(0, 2))
        g_gamma = ((g * xhat) if mask_b is None else (g * xhat * mask_b)).sum(axis=(0, 2))
        # chain through xhat at every position, through mean/var at valid ones
        g_xhat = g * gamma_data[None, :, None]
        g_var = (g_xhat * (x.data - mean[None, :, None])).sum(axis=(0, 2)) * \
            (-0.5) * inv ** 3
        g_mean = (g_xhat.sum(axis=(0, 2))) * (-inv)
        g_x = g_xhat * inv[None, :, None]
        stat_term = (g_var[None, :, None] * 2.0 * (x.data - mean[None, :, None]) +
                     g_mean[None, :, None]) / n_valid
        if mask_b is None:
            g_x = g_x + stat_term
        else:
            g_x = g_x + stat_term * mask_b
        return (g_x, g_gamma, g_beta)

    return custom_op(out_data, (x, gamma, beta), backward_train)


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def finite_difference_check(fn: Callable[..., Tensor], points: Sequence[Tensor],
                            epsilon: float = 1e-5,
                            max_coords: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(*points)`` must rebuild the forward pass and return a scalar tensor.
    Every coordinate of every point is probed unless ``max_coords`` caps the
    per-point coordinate count (seeded subsample via ``rng``), which keeps
    whole-model checks affordable.  Relative error per coordinate is
    |a - n| / max(1, |a|, |n|).
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError("epsilon must lie in [1e-7, 1e-4]")
    points = [as_tensor(p) for p in points]
    with Tape() as tape:
        out = fn(*points)
    grads = tape.backward(out)

    worst = 0.0
    for idx, point in enumerate(points):
        analytic = grads.get(point)
        if analytic is None:
            analytic = np.zeros(point.shape)
        flat = point.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            values = []
            for sign in (+1.0, -1.0):
                probe = flat.copy()
                probe[c] += sign * epsilon
                bumped = [Tensor(probe.reshape(point.shape)) if j == idx else p
                          for j, p in enumerate(points)]
                values.append(fn(*bumped).item())
            numeric = (values[0] - values[1]) / (2.0 * epsilon)
            a = analytic.reshape(-1)[c]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
