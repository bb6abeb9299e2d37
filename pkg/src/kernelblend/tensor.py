"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a C-contiguous float64
ndarray, and every differentiable operation appends a backward rule to the
active GradTape. Replaying the tape in reverse yields gradients for every
parameter reachable from a scalar loss. There is no broadcasting; shape
mismatches raise instead of being silently stretched.

Float64 is used throughout so finite-difference gradient checks are decisive.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray promotes 0-d to 1-d; scalars must stay 0-d
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


class Tensor:
    """A dense N-dimensional float64 array, optionally tracked for gradients.

    Tensors are immutable after construction except through
    :meth:`apply_update`, which is the single mutation point reserved for
    optimizers. Hashing is by identity so tensors can key gradient maps.
    """

    __slots__ = ("data", "requires_grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = _contiguous(np.asarray(data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.tape: GradTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def apply_update(self, new_data: np.ndarray) -> None:
        """Replace this tensor's values in place (optimizer-only interface)."""
        arr = np.asarray(new_data, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"update shape {arr.shape} != parameter shape {self.data.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("parameter update contains NaN or Inf")
        self.data = _contiguous(arr)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class GradTape:
    """Ordered record of differentiable operations.

    Each record is (output, inputs, backward_fn) where backward_fn maps the
    output gradient to per-input gradient contributions. The tape is
    single-shot: backward() consumes it and a second call is an error.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False


_ACTIVE_TAPE: GradTape | None = None


@contextlib.contextmanager
def recording(tape: GradTape):
    """Route all differentiable ops inside the block onto ``tape``."""
    global _ACTIVE_TAPE
    if _ACTIVE_TAPE is not None:
        raise RuntimeError("a GradTape is already active; tapes do not nest")
    _ACTIVE_TAPE = tape
    try:
        yield tape
    finally:
        _ACTIVE_TAPE = None


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, enforce finiteness, and record it if a tape is live."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("forward operation produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.tape = None
    if _ACTIVE_TAPE is not None and out.requires_grad:
        out.tape = _ACTIVE_TAPE
        _ACTIVE_TAPE.records.append((out, tuple(inputs), backward))
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate gradients of ``loss`` w.r.t. every tensor that fed it.

    Returns a map from tensor to its gradient array. Tensors not reachable
    from the loss are simply absent. The tape is consumed; calling backward
    a second time on the same tape raises.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        return {}
    if tape.consumed:
        raise RuntimeError("backward already ran on this tape")
    tape.consumed = True

    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape.records):
        gout = grads.get(out)
        if gout is None:
            continue
        for tensor, contribution in backward_fn(gout):
            if not tensor.requires_grad:
                continue
            existing = grads.get(tensor)
            if existing is None:
                grads[tensor] = np.array(contribution, dtype=np.float64, copy=True)
            else:
                existing += contribution
    return grads


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g):
        return ((a, g), (b, g))

    return _result(a.data + b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product, equal shapes only."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def bwd(g):
        return ((a, g * b.data), (b, g * a.data))

    return _result(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def bwd(g):
        return ((a, g * factor),)

    return _result(a.data * factor, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        return ((a, g * mask),)

    return _result(np.where(mask, a.data, 0.0), (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return ((a, g * out * (1.0 - out)),)

    return _result(out, (a,), bwd)


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of bounds for shape {a.shape}")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / np.sum(ex, axis=axis, keepdims=True)

    def bwd(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return ((a, out * (g - inner)),)

    return _result(out, (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape

    def bwd(g):
        return ((a, g.reshape(old)),)

    return _result(a.data.reshape(shape), (a,), bwd)


def row(a: Tensor, index: int) -> Tensor:
    """Select index along the first axis (a row of a matrix, an element of a vector)."""
    if not 0 <= index < a.shape[0]:
        raise ShapeError(f"row index {index} out of range for shape {a.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return ((a, full),)

    return _result(np.array(a.data[index]), (a,), bwd)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack equal-shaped tensors along a new leading axis."""
    if not rows:
        raise ShapeError("stack_rows needs at least one tensor")
    first = rows[0].shape
    for t in rows[1:]:
        if t.shape != first:
            raise ShapeError(f"stack_rows shape mismatch: {t.shape} vs {first}")

    def bwd(g):
        return tuple((t, g[i]) for i, t in enumerate(rows))

    return _result(np.stack([t.data for t in rows]), tuple(rows), bwd)


def tile_rows(a: Tensor, count: int) -> Tensor:
    """Repeat a 1-D tensor as ``count`` identical rows."""
    if a.data.ndim != 1:
        raise ShapeError(f"tile_rows expects a 1-D tensor, got shape {a.shape}")

    def bwd(g):
        return ((a, g.sum(axis=0)),)

    return _result(np.tile(a.data, (count, 1)), (a,), bwd)


def normalize_rows(a: Tensor) -> Tensor:
    """Divide each row of a 2-D tensor by its own sum."""
    if a.data.ndim != 2:
        raise ShapeError(f"normalize_rows expects a 2-D tensor, got shape {a.shape}")
    sums = a.data.sum(axis=1, keepdims=True)
    if np.any(sums == 0.0):
        raise ShapeError("normalize_rows: a row sums to zero")
    out = a.data / sums

    def bwd(g):
        inner = np.sum(g * out, axis=1, keepdims=True)
        return ((a, (g - inner) / sums),)

    return _result(out, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    """Scalar sum of all entries."""

    def bwd(g):
        return ((a, np.full_like(a.data, float(g))),)

    return _result(np.array(np.sum(a.data)), (a,), bwd)


def sum_squares(a: Tensor) -> Tensor:
    """Scalar sum of squared entries (the L2 regularizer building block)."""

    def bwd(g):
        return ((a, 2.0 * a.data * g),)

    return _result(np.array(np.sum(a.data * a.data)), (a,), bwd)


def weighted_sum(coeffs: Tensor, tensors: Sequence[Tensor]) -> Tensor:
    """Linear combination sum_n coeffs[n] * tensors[n].

    Exactly-zero coefficients are skipped in the forward accumulation, so a
    one-hot coefficient vector returns the selected tensor's values bit for
    bit, and a zeroed-out member contributes no gradient. The gradient
    w.r.t. the coefficients themselves is computed for every position.
    """
    if coeffs.data.ndim != 1:
        raise ShapeError(f"weighted_sum coeffs must be 1-D, got shape {coeffs.shape}")
    n = coeffs.shape[0]
    if n != len(tensors):
        raise ShapeError(f"{n} coefficients for {len(tensors)} tensors")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != base:
            raise ShapeError(f"weighted_sum member shapes differ: {t.shape} vs {base}")

    c = coeffs.data
    nonzero = [i for i in range(n) if c[i] != 0.0]
    if len(nonzero) == 1 and c[nonzero[0]] == 1.0:
        out = tensors[nonzero[0]].data.copy()
    else:
        out = np.zeros(base, dtype=np.float64)
        for i in nonzero:
            out += c[i] * tensors[i].data

    def bwd(g):
        gc = np.array([np.sum(g * t.data) for t in tensors])
        contribs = [(coeffs, gc)]
        contribs.extend((tensors[i], c[i] * g) for i in nonzero)
        return tuple(contribs)

    return _result(out, (coeffs, *tensors), bwd)


# ---------------------------------------------------------------------------
# network ops


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIKK kernel.

    Output spatial size is floor((H + 2*padding - K)/stride) + 1 per side.
    Differentiable w.r.t. both the input and the kernel.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIKK kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    batch, in_c, h, w = x.shape
    out_c, k_in, kh, kw = kernel.shape
    if in_c != k_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} has {in_c} channels, kernel {kernel.shape} expects {k_in}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {kernel.shape} larger than padded input {x.shape} (padding={padding})")

    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    # windows: (B, C, oH, oW, kh, kw); plain einsum keeps a fixed per-element
    # reduction order, which the bit-determinism contract relies on.
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    out = np.einsum("bcijkl,ockl->boij", windows, kernel.data)

    out_h, out_w = out.shape[2], out.shape[3]
    ph, pw = xp.shape[2], xp.shape[3]

    def bwd(g):
        gk = np.einsum("boij,bcijkl->ockl", g, windows)
        gcols = np.einsum("boij,ockl->bcijkl", g, kernel.data)
        gxp = np.zeros((batch, in_c, ph, pw))
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, :, ki:ki + stride * out_h:stride, kj:kj + stride * out_w:stride] += gcols[:, :, :, :, ki, kj]
        if padding > 0:
            gx = gxp[:, :, padding:ph - padding, padding:pw - padding]
        else:
            gx = gxp
        return ((x, gx), (kernel, gk))

    return _result(out, (x, kernel), bwd)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to an NCHW tensor."""
    if x.data.ndim != 4 or bias.data.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError(f"channel bias {bias.shape} does not match input {x.shape}")

    def bwd(g):
        return ((x, g), (bias, g.sum(axis=(0, 2, 3))))

    return _result(x.data + bias.data[None, :, None, None], (x, bias), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of a (B, F) batch through an (F, O) weight."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias {bias.shape} does not match weight {weight.shape}")
    out = np.einsum("bf,fo->bo", x.data, weight.data)
    if bias is not None:
        out = out + bias.data[None, :]

    def bwd(g):
        contribs = [(x, np.einsum("bo,fo->bf", g, weight.data)),
                    (weight, np.einsum("bf,bo->fo", x.data, g))]
        if bias is not None:
            contribs.append((bias, g.sum(axis=0)))
        return tuple(contribs)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of each channel: NCHW -> NC."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    _, _, h, w = x.shape
    area = h * w

    def bwd(g):
        gx = np.repeat(np.repeat(g[:, :, None, None], h, axis=2), w, axis=3) / area
        return ((x, gx),)

    return _result(x.data.mean(axis=(2, 3)), (x,), bwd)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over the batch of -sum(target * log softmax(logits)).

    ``target`` is either an integer class index per batch row or a (B, C)
    array of soft distributions (rows must sum to 1); soft targets are what
    distillation feeds in.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    b, c = logits.shape
    if c < 2:
        raise ShapeError(f"cross_entropy needs at least 2 classes, got {c}")

    target = np.asarray(target)
    if target.ndim <= 1:
        idx = target.reshape(-1).astype(np.int64)
        if idx.shape[0] != b:
            raise ShapeError(f"{idx.shape[0]} targets for {b} logits rows")
        if np.any(idx < 0) or np.any(idx >= c):
            raise ShapeError(f"class index out of range [0, {c})")
        soft = np.zeros((b, c))
        soft[np.arange(b), idx] = 1.0
    else:
        soft = np.asarray(target, dtype=np.float64)
        if soft.shape != (b, c):
            raise ShapeError(f"soft target shape {soft.shape} does not match logits {logits.shape}")
        sums = soft.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ShapeError("soft target rows must sum to 1 within 1e-6")

    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -np.sum(soft * log_probs) / b

    def bwd(g):
        probs = np.exp(log_probs)
        return ((logits, g * (probs - soft) / b),)

    return _result(np.array(loss), (logits,), bwd)
