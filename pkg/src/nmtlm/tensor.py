"""Small dense-tensor library with tape-based reverse-mode autodiff.

Values are numpy arrays. Operations record themselves on the innermost
active :class:`Tape` whenever one of their inputs requires a gradient;
outside a tape everything runs as plain numpy (inference mode).
"""
from __future__ import annotations

import zlib

import numpy as np

NEG_INF_SURROGATE = -1e9
LAYER_NORM_EPS = 1e-6


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(value, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.value = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records primitive operations for one forward pass.

    ``backward`` replays the records in exact reverse order. The tape is
    emptied afterwards, so calling ``backward`` again before a new forward
    pass raises :class:`TapeError`.
    """

    def __init__(self):
        self._records = []
        self._spent = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, inputs, backward):
        self._spent = False
        self._records.append((out, inputs, backward))

    def backward(self, loss):
        if self._spent:
            raise TapeError("backward called twice without a new forward pass")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.value)
        for out, inputs, fn in reversed(self._records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=inp.value.dtype, copy=True)
                else:
                    inp.grad += g
        self._records = []
        self._spent = True


_TAPES: list[Tape] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, inputs, backward):
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def rng_stream(seed, purpose, step=0):
    """Independent numpy Generator keyed by (seed, purpose, step)."""
    key = zlib.crc32(str(purpose).encode("utf-8"))
    return np.random.default_rng([int(seed), key, int(step)])


# --------------------------------------------------------------- primitives


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _result(av @ bv, (a, b), backward)


def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.value + b.value, (a, b), backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.value - b.value, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value

    def backward(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _result(av * bv, (a, b), backward)


def scale(a, c):
    a = _wrap(a)
    c = a.value.dtype.type(c)
    return _result(a.value * c, (a,), lambda g: (g * c,))


def relu(a):
    a = _wrap(a)
    pos = a.value > 0
    return _result(np.where(pos, a.value, 0).astype(a.dtype), (a,),
                   lambda g: (g * pos,))


def reshape(a, shape):
    a = _wrap(a)
    old = a.shape
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = _wrap(a)
    inv = np.argsort(axes)
    return _result(np.transpose(a.value, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def concat(tensors, axis):
    tensors = [_wrap(t) for t in tensors]
    axis = axis % tensors[0].value.ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return _result(np.concatenate([t.value for t in tensors], axis=axis),
                   tuple(tensors), backward)


def gather_rows(a, index):
    """Select ``a[b, index[b, k]]`` for a batched ``a`` of shape [B, T, ...]."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])[:, None]

    def backward(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, (np.broadcast_to(rows, index.shape), index), g)
        return (ga,)

    return _result(a.value[rows, index], (a,), backward)


def embedding(table, ids):
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _result(table.value[ids], (table,), backward)


def total(a):
    a = _wrap(a)
    shape = a.shape
    return _result(np.asarray(a.value.sum(dtype=np.float64), dtype=a.dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).astype(a.dtype),))


def softmax_masked(logits, mask):
    """Softmax over the last axis restricted to ``mask``-allowed entries.

    Masked entries come out exactly 0. A row with no allowed entry raises.
    """
    logits = _wrap(logits)
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ValueError("softmax_masked: a row has every entry masked")
    x = np.where(mask, logits.value, logits.dtype.type(NEG_INF_SURROGATE))
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x) * mask
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (logits,), backward)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def backward(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        if x.requires_grad:
            gh = g * gain.value
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, gg, gb

    return _result(out.astype(x.dtype, copy=False), (x, gain, bias), backward)


def dropout(x, rate, rng, training):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = _wrap(x)
    if not training or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate) * x.dtype.type(1.0 / (1.0 - rate))
    keep = keep.astype(x.dtype)
    return _result(x.value * keep, (x,), lambda g: (g * keep,))


def log_softmax_np(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_label_smoothed(logits, targets, epsilon, pad_id=0):
    """Mean smoothed cross-entropy over non-pad rows of ``logits`` [..., V].

    The target distribution puts ``1 - epsilon`` on the true class and
    spreads ``epsilon`` uniformly over all V classes.
    """
    if not 0 <= epsilon < 1:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    logits = _wrap(logits)
    V = logits.shape[-1]
    flat = logits.value.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"{flat.shape[0]} logit rows but {t.shape[0]} targets")
    keep = t != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy_label_smoothed: every position is padding")
    if np.any((t < 0) | (t >= V)):
        raise ValueError("target id outside [0, V)")
    logp = log_softmax_np(flat.astype(np.float64))
    q = np.full(logp.shape, epsilon / V)
    q[np.arange(len(t)), t] += 1.0 - epsilon
    per_row = -(q * logp).sum(axis=-1)
    loss = float(per_row[keep].sum() / n)

    def backward(g):
        grad = (np.exp(logp) - q) * keep[:, None] / n
        return ((grad * g).astype(logits.dtype).reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
