"""Tape-based reverse-mode differentiation over numpy arrays.

Only the handful of primitives needed by the toy vision-language model and the
baseline CNN are provided. Every primitive is a (forward, backward) pair
registered in ``_PRIMITIVES``; the tape stores each application so it can be
replayed or differentiated.

Shapes follow numpy conventions: ``(B, T, D)`` is batch, time, width.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)

_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class UnknownLeafError(KeyError):
    pass


class Tensor:
    """Immutable array node. ``tape`` is None for constants."""

    __slots__ = ("data", "tape", "id", "requires_grad")

    def __init__(self, data, tape: "Tape | None" = None, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.tape = tape
        self.id = next(_ids)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    attrs: dict
    output: Tensor
    cache: object = None


@dataclass
class Tape:
    """Ordered log of primitive applications plus the set of gradient leaves."""

    records: list[Record] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)

    def leaf(self, data) -> Tensor:
        t = Tensor(data, tape=self, requires_grad=True)
        self.leaves[t.id] = t
        return t

    def constant(self, data) -> Tensor:
        return Tensor(data, tape=self, requires_grad=False)

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded output from its recorded inputs."""
        outs = []
        for rec in self.records:
            fwd = _PRIMITIVES[rec.op][0]
            out, _ = fwd(*(t.data for t in rec.inputs), **rec.attrs)
            outs.append(out)
        return outs


class Index:
    """Non-differentiable array input (integer indices, masks, targets)."""

    requires_grad = False

    def __init__(self, data):
        self.data = np.asarray(data)
        self.id = -1


def _as_tensor(x, tape: Tape | None) -> Tensor:
    if isinstance(x, (Tensor, Index)):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), tape=tape)


def _apply(op: str, *inputs, **attrs) -> Tensor:
    tape = next((t.tape for t in inputs if isinstance(t, Tensor) and t.tape is not None), None)
    tensors = tuple(_as_tensor(x, tape) for x in inputs)
    fwd = _PRIMITIVES[op][0]
    # overflow surfaces as NonFiniteError below, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        out, cache = fwd(*(t.data for t in tensors), **attrs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values")
    needs_grad = any(t.requires_grad for t in tensors)
    result = Tensor(out, tape=tape, requires_grad=needs_grad)
    if tape is not None:
        tape.records.append(Record(op, tensors, attrs, result, cache if needs_grad else None))
    return result


def grads(tape: Tape, loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` for each of ``leaves``."""
    for lf in leaves:
        if lf.id not in tape.leaves:
            raise UnknownLeafError(f"tensor {lf.id} is not a registered leaf")
    if loss.data.size != 1:
        raise ValueError("loss must be a scalar")
    acc: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        acc[loss.id] = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = acc.pop(rec.output.id, None)
        if g is None:
            continue
        bwd = _PRIMITIVES[rec.op][1]
        wanted = tuple(t.requires_grad for t in rec.inputs)
        in_grads = bwd(g, rec.cache, *(t.data for t in rec.inputs), wanted=wanted, **rec.attrs)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.id in acc:
                acc[t.id] = acc[t.id] + gi
            else:
                acc[t.id] = gi
    return [acc.get(lf.id, np.zeros_like(lf.data)) for lf in leaves]


def grad_wrt_leaf(tape: Tape, loss: Tensor, leaf: Tensor) -> np.ndarray:
    return grads(tape, loss, [leaf])[0]


# ---------------------------------------------------------------- primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _add_f(a, b):
    return a + b, None


def _add_b(g, _, a, b, wanted):
    return (_unbroadcast(g, a.shape) if wanted[0] else None,
            _unbroadcast(g, b.shape) if wanted[1] else None)


def _sub_f(a, b):
    return a - b, None


def _sub_b(g, _, a, b, wanted):
    return (_unbroadcast(g, a.shape) if wanted[0] else None,
            _unbroadcast(-g, b.shape) if wanted[1] else None)


def _mul_f(a, b):
    return a * b, None


def _mul_b(g, _, a, b, wanted):
    return (_unbroadcast(g * b, a.shape) if wanted[0] else None,
            _unbroadcast(g * a, b.shape) if wanted[1] else None)


def _matmul_f(a, b):
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b, None


def _matmul_b(g, _, a, b, wanted):
    ga = gb = None
    if wanted[0]:
        ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
    if wanted[1]:
        gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
    return ga, gb


def _reshape_f(a, shape):
    return a.reshape(shape), None


def _reshape_b(g, _, a, wanted, shape):
    return (g.reshape(a.shape),)


def _transpose_f(a, axes):
    return np.transpose(a, axes), None


def _transpose_b(g, _, a, wanted, axes):
    return (np.transpose(g, np.argsort(axes)),)


def _sum_f(a, axis=None):
    return np.sum(a, axis=axis), None


def _sum_b(g, _, a, wanted, axis=None):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _concat_f(*xs, axis):
    return np.concatenate(xs, axis=axis), [x.shape[axis] for x in xs]


def _concat_b(g, sizes, *xs, wanted, axis):
    splits = np.cumsum(sizes)[:-1]
    parts = np.split(g, splits, axis=axis)
    return tuple(p if w else None for p, w in zip(parts, wanted))


def _take_f(table, idx):
    return table[idx], None


def _take_b(g, _, table, idx, wanted):
    if not wanted[0]:
        return (None, None)
    out = np.zeros_like(table)
    np.add.at(out, idx, g)
    return (out, None)


def _softmax_f(x):
    if x.shape[-1] == 0:
        raise ValueError("softmax of empty vector")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return s, s


def _softmax_b(g, s, x, wanted):
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _xent_f(logits, targets, mask):
    v = logits.shape[-1]
    if not mask.any():
        raise ValueError("cross_entropy: every position is masked")
    sel = targets[mask]
    if sel.min() < 0 or sel.max() >= v:
        raise IndexError("cross_entropy: target index out of range")
    logp = _log_softmax(logits)
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    n = mask.sum()
    loss = -(picked * mask).sum() / n
    return np.asarray(loss, dtype=logits.dtype), (logp, safe_t, n)


def _xent_b(g, cache, logits, targets, mask, wanted):
    logp, safe_t, n = cache
    grad = np.exp(logp)
    np.put_along_axis(grad, safe_t[..., None],
                      np.take_along_axis(grad, safe_t[..., None], axis=-1) - 1.0, axis=-1)
    grad *= (mask[..., None] / n) * g
    return (grad, None, None)


def _layer_norm_f(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd)


def _layer_norm_b(g, cache, x, gain, bias, wanted):
    xhat, rstd = cache
    gx = ggain = gbias = None
    if wanted[0]:
        gh = g * gain
        n = x.shape[-1]
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
    if wanted[1]:
        ggain = _unbroadcast(g * xhat, gain.shape)
    if wanted[2]:
        gbias = _unbroadcast(g, bias.shape)
    return gx, ggain, gbias


def _gelu_f(x):
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def _gelu_b(g, t, x, wanted):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
    return (g * d,)


def _relu_f(x):
    return np.maximum(x, 0.0), None


def _relu_b(g, _, x, wanted):
    return (g * (x > 0),)


def _bce_logits_f(z, y):
    # mean of log(1 + e^z) - y z, computed stably
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    return np.asarray(loss, dtype=z.dtype), None


def _bce_logits_b(g, _, z, y, wanted):
    p = 1.0 / (1.0 + np.exp(-z))
    return (g * (p - y) / z.size, None)


def _im2col(x, k, stride):
    b, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (b, c, oh, ow, k, k), (s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]))
    # (b, oh, ow, c*k*k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh, ow, c * k * k), (oh, ow)


def _conv2d_f(x, w, stride):
    out_c, in_c, k, _ = w.shape
    cols, (oh, ow) = _im2col(x, k, stride)
    out = cols @ w.reshape(out_c, -1).T  # (b, oh, ow, out_c)
    return out.transpose(0, 3, 1, 2), cols


def _conv2d_b(g, cols, x, w, wanted, stride):
    out_c, in_c, k, _ = w.shape
    gt = g.transpose(0, 2, 3, 1)  # (b, oh, ow, out_c)
    gx = gw = None
    if wanted[1]:
        gw = np.tensordot(gt, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(w.shape)
    if wanted[0]:
        gcols = (gt @ w.reshape(out_c, -1)).reshape(*gt.shape[:3], in_c, k, k)
        gx = np.zeros_like(x)
        oh, ow = gt.shape[1], gt.shape[2]
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gx, gw


_PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_f, _add_b),
    "sub": (_sub_f, _sub_b),
    "mul": (_mul_f, _mul_b),
    "matmul": (_matmul_f, _matmul_b),
    "reshape": (_reshape_f, _reshape_b),
    "transpose": (_transpose_f, _transpose_b),
    "sum": (_sum_f, _sum_b),
    "concat": (_concat_f, _concat_b),
    "take": (_take_f, _take_b),
    "softmax": (_softmax_f, _softmax_b),
    "cross_entropy": (_xent_f, _xent_b),
    "layer_norm": (_layer_norm_f, _layer_norm_b),
    "gelu": (_gelu_f, _gelu_b),
    "relu": (_relu_f, _relu_b),
    "bce_logits": (_bce_logits_f, _bce_logits_b),
    "conv2d": (_conv2d_f, _conv2d_b),
}


# ---------------------------------------------------------------- public ops


def add(a, b) -> Tensor:
    return _apply("add", a, b)


def sub(a, b) -> Tensor:
    return _apply("sub", a, b)


def mul(a, b) -> Tensor:
    return _apply("mul", a, b)


def matmul(a, b) -> Tensor:
    return _apply("matmul", a, b)


def reshape(a, shape) -> Tensor:
    return _apply("reshape", a, shape=tuple(shape))


def transpose(a, axes) -> Tensor:
    return _apply("transpose", a, axes=tuple(axes))


def sum(a, axis=None) -> Tensor:  # noqa: A001
    return _apply("sum", a, axis=axis)


def mean(a, axis=None) -> Tensor:
    a_shape = a.shape if isinstance(a, Tensor) else np.shape(a)
    n = np.prod(a_shape) if axis is None else a_shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def concat(xs: Sequence, axis: int) -> Tensor:
    return _apply("concat", *xs, axis=axis)


def take(table, idx) -> Tensor:
    """Row gather ``table[idx]``; ``idx`` is an integer array (not differentiated)."""
    return _apply("take", table, Index(idx))


def softmax(x) -> Tensor:
    return _apply("softmax", x)


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean of -log softmax(logits)[target] over unmasked positions."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    lshape = logits.shape if isinstance(logits, Tensor) else np.shape(logits)
    if targets.shape != tuple(lshape[:-1]) or mask.shape != targets.shape:
        raise ValueError("targets/mask shape must match logits minus the class axis")
    return _apply("cross_entropy", logits, Index(targets), Index(mask))


def layer_norm(x, gain, bias) -> Tensor:
    return _apply("layer_norm", x, gain, bias)


def gelu(x) -> Tensor:
    return _apply("gelu", x)


def relu(x) -> Tensor:
    return _apply("relu", x)


def bce_with_logits(z, y) -> Tensor:
    """Mean binary cross-entropy of sigmoid(z) against 0/1 targets ``y``."""
    return _apply("bce_logits", z, Index(np.asarray(y, dtype=np.float64)))


def conv2d(x, w, stride: int = 1) -> Tensor:
    """Valid (no padding) 2-D convolution; x is (B, C, H, W), w is (O, C, k, k)."""
    return _apply("conv2d", x, w, stride=stride)
