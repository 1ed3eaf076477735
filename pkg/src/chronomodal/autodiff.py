"""Dense float64 tensors with taped reverse-mode differentiation.

Everything runs in 64-bit floats; forward ops reject non-finite outputs.
A Tape records operations in forward order on the current thread;
``backward`` replays it in reverse and accumulates gradients additively,
so fan-out graphs sum their branch gradients. Tapes are independent:
one training run per tape, multiple tapes may live on separate threads.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateMaskError, NumericError, ShapeError

Array = np.ndarray

_TLS = threading.local()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None

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
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar (delegates to module-level ops) --

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class _Record:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered forward record; topological by construction.

    Use as a context manager around the forward pass, then call
    ``backward(tape, loss)``. Single-threaded per instance.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self._records)


def _emit(inputs: Sequence[Tensor], out_data: Array,
          backward_fn: Callable[[Array], Sequence[Optional[Array]]]) -> Tensor:
    """Wrap an op result, recording it when gradients are being traced."""
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._records.append(_Record(tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad for every requires_grad tensor reachable from loss.

    Gradients accumulate additively both across fan-out within the graph
    and into pre-existing .grad buffers.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    acc: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    for rec in reversed(tape._records):
        entry = acc.get(id(rec.output))
        if entry is None:
            continue
        for tin, gin in zip(rec.inputs, rec.backward_fn(entry[1])):
            if gin is None or not tin.requires_grad:
                continue
            prev = acc.get(id(tin))
            if prev is None:
                acc[id(tin)] = [tin, gin]
            else:
                prev[1] = prev[1] + gin
    for tensor, grad in acc.values():
        if tensor.requires_grad:
            if not np.all(np.isfinite(grad)):
                raise NumericError("non-finite gradient")
            tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum grad over axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _emit((a, b), out, lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _emit((a, b), out, lambda g: (_unbroadcast(g, a.data.shape),
                                         _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _emit((a, b), out, lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                         _unbroadcast(g * a.data, b.data.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit((a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit((a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return _emit((a,), out, lambda g: (g / a.data,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _emit((a,), np.abs(a.data), lambda g: (g * sign,))


def sigmoid(a: Tensor) -> Tensor:
    # stable both tails
    out = np.where(a.data >= 0,
                   1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _emit((a,), out, lambda g: (g * out * (1.0 - out),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _emit((a,), out, bwd)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) == 0
                    else np.full(a.data.shape, g.reshape(())),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _emit((a,), out, bwd)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.full(a.data.shape, np.asarray(g).reshape(()) / n),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _emit((a,), out, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _emit((a,), a.data.reshape(shape), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit((a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(tuple(tensors), out, bwd)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/int/tuple) indexing with scatter-add backward."""
    out = a.data[key]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _emit((a,), out, bwd)


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator],
            training: bool) -> Tensor:
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs a generator")
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    return _emit((a,), a.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _emit((a, b), out, bwd)


def _resolve_mask(x: Array, mask) -> Optional[Array]:
    if mask is None:
        return None
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = np.broadcast_to(m.astype(bool), x.shape)
    return m


def softmax_last(x: Tensor, mask=None) -> Tensor:
    """Row softmax over the last axis; masked-out entries are exactly 0.

    Numerically stabilized by max-subtraction over the surviving entries.
    A row with every entry masked has no valid distribution and raises.
    """
    m = _resolve_mask(x.data, mask)
    if m is None:
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        z = np.exp(shifted)
    else:
        if not m.any(axis=-1).all():
            raise DegenerateMaskError("softmax row fully masked")
        neg_inf = np.where(m, x.data, -np.inf)
        shifted = neg_inf - neg_inf.max(axis=-1, keepdims=True)
        z = np.where(m, np.exp(np.where(m, shifted, 0.0)), 0.0)
    out = z / z.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _emit((x,), out, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},), "
                         f"got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data

    def bwd(g):
        dxhat = g * gamma.data
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        return (dx, dgamma, dbeta)

    return _emit((x, gamma, beta), out, bwd)


def rotate_pairs(x: Tensor, angles: Array) -> Tensor:
    """Rotate each (2j, 2j+1) feature pair of x by angles[..., j].

    angles is a constant array broadcastable to x's pair layout; the
    backward pass is the inverse rotation (rotations are orthonormal).
    """
    d = x.data.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"pair rotation needs an even last axis, got {d}")
    ang = np.asarray(angles, dtype=np.float64)
    cos = np.cos(ang)
    sin = np.sin(ang)
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    if np.broadcast_shapes(cos.shape, xe.shape) != xe.shape:
        raise ShapeError(f"angle shape {cos.shape} does not broadcast to pairs {xe.shape}")
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def bwd(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _emit((x,), out, bwd)


def bce_with_logits(logits: Tensor, targets: Tensor,
                    pos_weight: Optional[float] = None) -> Tensor:
    """Mean binary cross-entropy from logits, in the stable softplus form.

    pos_weight scales the positive-class term (off by default).
    """
    if logits.data.shape != targets.data.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    y = targets.data
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ContractError("targets must be exactly 0 or 1")
    z = logits.data
    softplus_neg = np.maximum(-z, 0.0) + np.log1p(np.exp(-np.abs(z)))  # -log sigmoid(z)
    softplus_pos = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))   # -log sigmoid(-z)
    w = 1.0 if pos_weight is None else float(pos_weight)
    per = w * y * softplus_neg + (1.0 - y) * softplus_pos
    out = per.mean()
    n = per.size

    def bwd(g):
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)),
                     np.exp(z) / (1.0 + np.exp(z)))
        dz = s * (1.0 - y) - w * y * (1.0 - s)
        return (dz * (np.asarray(g).reshape(()) / n), None)

    return _emit((logits, targets), out, bwd)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative disagreement between taped and central-difference grads.

    Relative error per coordinate is |analytic - numeric| divided by
    max(1e-8, |analytic| + |numeric|).
    """
    if step <= 0:
        raise ContractError("step must be positive")
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            out = f(x)
            backward(tape, out)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    finally:
        x.requires_grad = saved_flag
        x.grad = saved_grad

    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x).item()
        flat[i] = orig - step
        fm = f(x).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2.0 * step)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
