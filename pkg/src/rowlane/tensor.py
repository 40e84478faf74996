"""Dense-tensor engine with tape-based reverse-mode differentiation.

Everything trainable in the pipeline runs through the primitives in this
module (or through custom ops registered with the same tape machinery), so
each forward pass has an exact backward that can be verified against
central finite differences.

Conventions:
  * float64 is the reference dtype; float32 is an opt-in speed mode and is
    never used by gradient-check suites.
  * A Tensor's data is treated as immutable once an op has consumed it.
    Parameter updates happen between tapes, never inside one.
  * Ops record onto the innermost active Tape only when some input has
    requires_grad set; with no active tape they are plain numpy forwards.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64

LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class ConfigError(ValueError):
    """A configuration value violates a module invariant."""


class FlopTally:
    """Running count of executed matrix-product FLOPs.

    Each m-by-k @ k-by-n product adds 2*m*n*k: one multiply and one add
    per MAC (the bias add of an affine layer stands in for the final
    accumulate, so affine-with-bias costs exactly 2*n*m per position).
    Softmax, layer norm, residuals and activations add zero by convention.
    """

    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


_TALLY_STACK: list[FlopTally] = []


class count_executed_flops:
    """Context manager that tallies matrix-product FLOPs of enclosed ops."""

    def __enter__(self) -> FlopTally:
        tally = FlopTally()
        _TALLY_STACK.append(tally)
        return tally

    def __exit__(self, exc_type, exc, tb):
        _TALLY_STACK.pop()
        return False


def _tally(n):
    for t in _TALLY_STACK:
        t.add(n)


class Tensor:
    """Dense row-major array of 64-bit (or opt-in 32-bit) floats."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, order="C")
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

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

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all routing through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed primitives for one forward pass.

    backward() seeds the loss gradient with ones and replays the recorded
    closures in exact reverse execution order; each parameter's grad
    accumulates over all of its uses.
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, backward_fn):
        self._nodes.append(backward_fn)

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise FloatingPointError("backward called on a non-finite loss")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._nodes):
            fn()


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def accumulate_grad(t: Tensor, g: np.ndarray):
    """Add g into t.grad, allocating the buffer on first use."""
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def record_op(out: Tensor, inputs, backward_fn) -> Tensor:
    """Register an op on the active tape when any input needs gradients.

    backward_fn must read out.grad (skipping when it is None) and
    accumulate into the inputs' grads. Custom ops in other modules use
    this same hook.
    """
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(backward_fn)
    return out


def _as_const(x):
    """Constant operand: plain ndarray (no gradient path)."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    out = Tensor(_as_const(a) + _as_const(b))

    def bwd():
        g = out.grad
        if g is None:
            return
        if a_t is not None and a_t.requires_grad:
            accumulate_grad(a_t, _unbroadcast(g, a_t.shape))
        if b_t is not None and b_t.requires_grad:
            accumulate_grad(b_t, _unbroadcast(g, b_t.shape))

    return record_op(out, [a_t, b_t], bwd)


def sub(a, b) -> Tensor:
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    out = Tensor(_as_const(a) - _as_const(b))

    def bwd():
        g = out.grad
        if g is None:
            return
        if a_t is not None and a_t.requires_grad:
            accumulate_grad(a_t, _unbroadcast(g, a_t.shape))
        if b_t is not None and b_t.requires_grad:
            accumulate_grad(b_t, _unbroadcast(-g, b_t.shape))

    return record_op(out, [a_t, b_t], bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            accumulate_grad(a, -g)

    return record_op(out, [a], bwd)


def mul(a, b) -> Tensor:
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    a_d = _as_const(a)
    b_d = _as_const(b)
    out = Tensor(a_d * b_d)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a_t is not None and a_t.requires_grad:
            accumulate_grad(a_t, _unbroadcast(g * b_d, a_t.shape))
        if b_t is not None and b_t.requires_grad:
            accumulate_grad(b_t, _unbroadcast(g * a_d, b_t.shape))

    return record_op(out, [a_t, b_t], bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D product; backward is a.grad += g @ b.T, b.grad += a.T @ g."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes disagree: {tuple(a.shape)} @ {tuple(b.shape)}")
    m, k = a.shape
    n = b.shape[1]
    _tally(2 * m * n * k)
    out = Tensor(a.data @ b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            accumulate_grad(a, g @ b.data.T)
        if b.requires_grad:
            accumulate_grad(b, a.data.T @ g)

    return record_op(out, [a, b], bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul (B,m,k) @ (B,k,n); backs the attention score/value paths."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes disagree: {tuple(a.shape)} @ {tuple(b.shape)}")
    bs, m, k = a.shape
    n = b.shape[2]
    _tally(2 * bs * m * n * k)
    out = Tensor(a.data @ b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            accumulate_grad(a, g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            accumulate_grad(b, a.data.transpose(0, 2, 1) @ g)

    return record_op(out, [a, b], bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    return add(matmul(x, w), b)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            accumulate_grad(x, g * mask)

    return record_op(out, [x], bwd)


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax along `axis`; slices sum to 1 within 1e-12."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {tuple(x.shape)}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            accumulate_grad(x, s * (g - dot))

    return record_op(out, [x], bwd)


def clamped_log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """log(max(x, floor)); zero slope below the floor."""
    above = x.data > floor
    out = Tensor(np.log(np.maximum(x.data, floor)))

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            safe = np.where(above, x.data, 1.0)
            accumulate_grad(x, np.where(above, g / safe, 0.0))

    return record_op(out, [x], bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            accumulate_grad(x, np.full_like(x.data, g))

    return record_op(out, [x], bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            accumulate_grad(x, g.reshape(x.shape))

    return record_op(out, [x], bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            accumulate_grad(x, g.transpose(inv))

    return record_op(out, [x], bwd)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows x[indices]; backward scatter-adds (duplicate indices sum)."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(x.data[idx])

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            np.add.at(buf, idx, g)
            accumulate_grad(x, buf)

    return record_op(out, [x], bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm gain/bias must be ({x.shape[-1]},), got {tuple(gain.shape)} and {tuple(bias.shape)}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        if gain.requires_grad:
            accumulate_grad(gain, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            accumulate_grad(bias, g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            n = x.shape[-1]
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            accumulate_grad(x, inv * term)

    return record_op(out, [x, gain, bias], bwd)


def param(data, dtype=None) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def normal_param(rng: np.random.Generator, shape, std=0.02, dtype=None) -> Tensor:
    """Seeded normal(0, std) weight init; the pipeline-wide convention."""
    return param(rng.normal(0.0, std, size=shape), dtype=dtype or DEFAULT_DTYPE)


def zeros_param(shape, dtype=None) -> Tensor:
    return param(np.zeros(shape), dtype=dtype or DEFAULT_DTYPE)


def ones_param(shape, dtype=None) -> Tensor:
    return param(np.ones(shape), dtype=dtype or DEFAULT_DTYPE)
