"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Just enough machinery for two small transformer encoders: batched matmul,
broadcasting elementwise ops, softmax, layer normalization, GELU, embedding
gather, masked multi-head attention, and softmax cross-entropy. Arrays are
numpy; gradients are computed by replaying an execution tape in reverse.

Arithmetic runs in float32 by default. Tests switch to float64 through the
``precision`` context manager so finite-difference checks can be tight.

Recording is opt-in: ops only land on a tape inside a ``record()`` block, so
evaluation code pays no autodiff overhead. One tape belongs to one execution
context; concurrent threads get independent thread-local tapes.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

MASKED_LOGIT_BIAS = -1e9  # added to attention logits at masked positions

_local = threading.local()


def _state():
    if not hasattr(_local, "dtype"):
        _local.dtype = np.dtype(np.float32)
        _local.tape = None
    return _local


def default_dtype() -> np.dtype:
    return _state().dtype


@contextmanager
def precision(dtype):
    """Run the enclosed computation in the given float dtype ("float64" for checks)."""
    st = _state()
    old = st.dtype
    st.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        st.dtype = old


class ComputationTape:
    """Ordered record of executed ops; replaying it in reverse yields gradients."""

    def __init__(self):
        self._nodes = []        # (out, inputs, backward_fn)
        self._leaf_ids = set()
        self._leaves = []       # grad-requiring inputs, for zero-fill after backward

    def __len__(self):
        return len(self._nodes)

    def _append(self, out, inputs, backward_fn):
        self._nodes.append((out, inputs, backward_fn))
        for t in inputs:
            if isinstance(t, Tensor) and t.requires_grad and id(t) not in self._leaf_ids:
                self._leaf_ids.add(id(t))
                self._leaves.append(t)

    def _clear(self):
        self._nodes.clear()
        self._leaf_ids.clear()
        self._leaves.clear()


@contextmanager
def record():
    """Activate a fresh tape for this thread; ops executed inside are recorded."""
    st = _state()
    if st.tape is not None:
        raise ContractError("a computation tape is already active in this thread")
    st.tape = ComputationTape()
    try:
        yield st.tape
    finally:
        st.tape = None


class Tensor:
    """Dense numeric array, optionally participating in differentiation.

    ``grad`` is populated by ``backward`` for every requires_grad tensor that
    was consumed on the active tape; it always matches ``values`` in shape.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        dt = np.dtype(dtype) if dtype is not None else default_dtype()
        self.values = np.asarray(values, dtype=dt)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _result(cls, values: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.values = values
        t.requires_grad = False
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _finish(values: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor._result(values)
    tape = _state().tape
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._append(out, inputs, backward_fn)
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor):
    """Populate gradients for every requires_grad tensor consumed on the tape.

    The root must be scalar, and the tape is cleared afterwards, so a second
    call without a new forward pass is an error.
    """
    tape = _state().tape
    if tape is None:
        raise ContractError("backward called outside a record() block")
    if len(tape) == 0:
        raise ContractError("backward called on an empty tape; run a forward pass first")
    if loss.values.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.values)
    for out, inputs, fn in reversed(tape._nodes):
        g = out.grad
        if g is None:
            continue
        for t, tg in zip(inputs, fn(g)):
            if tg is not None and isinstance(t, Tensor) and t.requires_grad:
                _accumulate(t, tg)
    # tensors on the tape but disconnected from the root get an exact zero
    for t in tape._leaves:
        if t.grad is None:
            t.grad = np.zeros_like(t.values)
    tape._clear()


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.values + b.values

    def bwd(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)

    return _finish(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.values * b.values

    def bwd(g):
        return (_unbroadcast(g * b.values, a.values.shape),
                _unbroadcast(g * a.values, b.values.shape))

    return _finish(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _finish(-a.values, (a,), lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar without changing the array dtype."""
    a = _wrap(a)
    return _finish(a.values * s, (a,), lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with numpy broadcasting.

    Gradients: d a = g @ b^T, d b = a^T @ g, summed over broadcast axes.
    """
    a, b = _wrap(a), _wrap(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.values.shape[-1] != b.values.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def bwd(g):
        ga = g @ np.swapaxes(b.values, -1, -2)
        gb = np.swapaxes(a.values, -1, -2) @ g
        return _unbroadcast(ga, a.values.shape), _unbroadcast(gb, b.values.shape)

    return _finish(out, (a, b), bwd)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.values.reshape(shape)
    return _finish(out, (a,), lambda g: (g.reshape(a.values.shape),))


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.values, axes)
    return _finish(out, (a,), lambda g: (np.transpose(g, inverse),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish(out, tuple(parts), bwd)


def take(a, index: int, axis: int) -> Tensor:
    """Select one slice along an axis (the axis is removed)."""
    a = _wrap(a)
    out = np.take(a.values, index, axis=axis)

    def bwd(g):
        ga = np.zeros_like(a.values)
        sl = [slice(None)] * a.values.ndim
        sl[axis] = index
        ga[tuple(sl)] = g
        return (ga,)

    return _finish(out, (a,), bwd)


def gather(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; the gradient scatter-adds into the table."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.values.shape[0]):
        raise IndexError(f"gather ids out of range for table with {table.values.shape[0]} rows")
    out = table.values[ids]

    def bwd(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids, g)
        return (gt,)

    return _finish(out, (table,), bwd)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.values.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.values.shape).copy(),)

    return _finish(out, (a,), bwd)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.values.size
    else:
        n = a.values.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a) -> Tensor:
    """Stabilized softmax over the last axis."""
    a = _wrap(a)
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _finish(out, (a,), bwd)


def layernorm(a, gain, bias, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _wrap(a), _wrap(gain), _wrap(bias)
    mu = a.values.mean(axis=-1, keepdims=True)
    centered = a.values - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.values + bias.values

    def bwd(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes) if reduce_axes else (g * xhat)
        dbias = g.sum(axis=reduce_axes) if reduce_axes else g
        gh = g * gain.values
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gh - m1 - xhat * m2)
        return dx, dgain.reshape(gain.values.shape), dbias.reshape(bias.values.shape)

    return _finish(out, (a, gain, bias), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _wrap(a)
    x = a.values
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner),)

    return _finish(out, (a,), bwd)


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; p = 0 is the identity and records nothing."""
    if p <= 0.0:
        return _wrap(a)
    a = _wrap(a)
    keep = (rng.random(a.values.shape) >= p).astype(a.values.dtype)
    keep /= (1.0 - p)
    out = a.values * keep
    return _finish(out, (a,), lambda g: (g * keep,))


def softmax_cross_entropy(logits, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logit vector, max-stabilized.

    Gradient w.r.t. the logits is softmax(logits) - onehot(target).
    """
    logits = _wrap(logits)
    if logits.values.ndim != 1 or logits.values.shape[0] < 1:
        raise ContractError(f"softmax_cross_entropy expects a 1-D non-empty vector, got {logits.shape}")
    k = logits.values.shape[0]
    if not 0 <= target < k:
        raise IndexError(f"target {target} out of range for {k} classes")
    shifted = logits.values - logits.values.max()
    lse = np.log(np.exp(shifted).sum())
    out = np.asarray(lse - shifted[target], dtype=logits.values.dtype)

    def bwd(g):
        p = np.exp(shifted - lse)
        p[target] -= 1.0
        return (g * p,)

    return _finish(out, (logits,), bwd)


def mean_cross_entropy(logits, targets) -> Tensor:
    """Row-wise softmax cross-entropy averaged over the batch.

    logits: (B, K); targets: (B,) int indices into the K classes.
    """
    logits = _wrap(logits)
    targets = np.asarray(targets)
    if logits.values.ndim != 2:
        raise ContractError(f"mean_cross_entropy expects (B, K) logits, got {logits.shape}")
    b, k = logits.values.shape
    if targets.shape != (b,):
        raise ContractError(f"targets shape {targets.shape} does not match batch {b}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target out of range for {k} classes")
    shifted = logits.values - logits.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(b)
    losses = lse - shifted[rows, targets]
    out = np.asarray(losses.mean(), dtype=logits.values.dtype)

    def bwd(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, targets] -= 1.0
        return (g * p / b,)

    return _finish(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# transformer encoder layer
# ---------------------------------------------------------------------------


@dataclass
class EncoderLayerParams:
    """Weights of one encoder layer (attention + feed-forward, post-norm)."""

    q_w: Tensor
    q_b: Tensor
    k_w: Tensor
    k_b: Tensor
    v_w: Tensor
    v_b: Tensor
    out_w: Tensor
    out_b: Tensor
    attn_ln_gain: Tensor
    attn_ln_bias: Tensor
    ffn_in_w: Tensor
    ffn_in_b: Tensor
    ffn_out_w: Tensor
    ffn_out_b: Tensor
    ffn_ln_gain: Tensor
    ffn_ln_bias: Tensor


def attention_bias(mask: np.ndarray, dtype) -> np.ndarray:
    """(B, L) visibility mask -> (B, 1, 1, L) additive logit bias."""
    mask = np.asarray(mask, dtype=bool)
    bias = np.where(mask, 0.0, MASKED_LOGIT_BIAS).astype(dtype)
    return bias[:, None, None, :]


def encoder_layer_forward(x, mask, params: EncoderLayerParams, heads: int,
                          eps: float = 1e-12, dropout_p: float = 0.0,
                          rng: np.random.Generator | None = None) -> Tensor:
    """One post-norm encoder layer over ``x``.

    x: (L, d) or (B, L, d). mask: matching (L,) or (B, L) booleans, True at
    visible positions; padded positions are excluded as attention keys.
    Order: masked multi-head self-attention (scaled by 1/sqrt(d/heads)) +
    residual + layernorm, then a two-layer GELU feed-forward + residual +
    layernorm.
    """
    x = _wrap(x)
    squeeze = x.values.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.values.shape)
        mask = np.asarray(mask)[None, :]
    b, length, d = x.values.shape
    if d % heads != 0:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    hd = d // heads
    bias = attention_bias(mask, x.values.dtype)

    def split_heads(t):
        return transpose(reshape(t, (b, length, heads, hd)), (0, 2, 1, 3))

    q = split_heads(add(matmul(x, params.q_w), params.q_b))
    k = split_heads(add(matmul(x, params.k_w), params.k_b))
    v = split_heads(add(matmul(x, params.v_w), params.v_b))

    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    probs = softmax(add(scores, Tensor(bias, dtype=bias.dtype)))
    if dropout_p > 0.0:
        probs = dropout(probs, dropout_p, rng)
    ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (b, length, d))
    attn_out = add(matmul(ctx, params.out_w), params.out_b)
    x = layernorm(add(x, attn_out), params.attn_ln_gain, params.attn_ln_bias, eps)

    hidden = gelu(add(matmul(x, params.ffn_in_w), params.ffn_in_b))
    if dropout_p > 0.0:
        hidden = dropout(hidden, dropout_p, rng)
    ffn_out = add(matmul(hidden, params.ffn_out_w), params.ffn_out_b)
    x = layernorm(add(x, ffn_out), params.ffn_ln_gain, params.ffn_ln_bias, eps)

    if squeeze:
        x = reshape(x, (length, d))
    return x
