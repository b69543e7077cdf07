"""Dense f64 arrays with reverse-mode differentiation on an explicit tape.

The engine carries exactly the operations the scoring model needs:
1D convolution along a sequence axis, matrix products, softmax, GeLU,
channel L2 norms, elementwise arithmetic, top-k selection, gather/scatter,
and the clip-attention contractions. Gradients are recorded on a
thread-local :class:`Tape` and replayed in reverse registration order.

Reductions that feed the clip attention (softmax denominators and the
attention-weighted clip sum) sum their terms in sorted value order, so
permuting clips reproduces the permuted output bit for bit.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import NumericsError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_DEBUG = False


def set_debug(enabled: bool):
    """Toggle finiteness checks on every op output (off by default, slow)."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    """Rank <= 4 contiguous float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        if not np.all(np.isfinite(arr)):
            raise NumericsError("non-finite values rejected at tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal fast path for op results; construction-time checks are
        # re-run only in debug mode.
        if _DEBUG and not np.all(np.isfinite(arr)):
            raise NumericsError("non-finite op result (debug mode)")
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(arr, dtype=np.float64)
        out.grad = None
        out.requires_grad = requires_grad
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are treated as untracked constants.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ShapeError("division is supported by scalar constants only")
        return mul(self, _as_tensor(1.0 / other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of performed operations and their backward closures.

    Used as a context manager; ops executed inside record themselves when
    any input requires gradients. ``backward`` replays the closures in
    reverse registration order exactly once.
    """

    def __init__(self):
        self._entries = []
        self._used = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def __len__(self):
        return len(self._entries)

    def backward(self, loss: Tensor):
        if self._used:
            raise RuntimeError("tape already replayed; record a fresh tape per backward")
        if loss.data.size != 1:
            raise ShapeError("backward requires a scalar loss")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self._entries):
            entry()


def _tape_stack():
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


_LOCAL = threading.local()


def _record(out: Tensor, inputs, backward):
    """Attach a backward closure if a tape is active and any input is tracked.

    ``backward(gout)`` returns one gradient array (or None) per input.
    """
    stack = _tape_stack()
    if not stack:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True

    def entry():
        gout = out.grad
        if gout is None:
            return
        for t, g in zip(inputs, backward(gout)):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g

    stack[-1]._entries.append(entry)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data + b.data, False)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data - b.data, False)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data * b.data, False)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    out = Tensor._wrap(-a.data, False)
    return _record(out, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Either both operands are 2D, or ``a`` carries leading
    batch axes and ``b`` is a plain 2D weight matrix."""
    if a.data.ndim < 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects a >=2D left operand and a 2D right operand, "
                         f"got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor._wrap(a.data @ b.data, False)

    def backward(g):
        ga = g @ b.data.T
        k, n = b.shape
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _record(out, (a, b), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor._wrap(a.data.transpose(axes), False)
    inv = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor._wrap(a.data.reshape(shape), False)
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor._wrap(np.stack([t.data for t in tensors], axis=axis), False)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] for i in range(len(tensors)))

    return _record(out, tuple(tensors), backward)


def gather(a: Tensor, indices) -> Tensor:
    """Pick elements of ``a`` at flat (row-major) positions.

    ``indices`` is an integer array of any shape; the result has that shape.
    """
    idx = np.asarray(indices, dtype=np.intp)
    flat = a.data.reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
        raise ShapeError("gather index out of range")
    out = Tensor._wrap(flat[idx], False)

    def backward(g):
        buf = np.zeros_like(flat)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1))
        return (buf.reshape(a.shape),)

    return _record(out, (a,), backward)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor._wrap(np.sum(a.data, axis=axis, keepdims=keepdims), False)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    out = Tensor._wrap(np.mean(a.data, axis=axis, keepdims=keepdims), False)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities


def relu(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(a.data, 0.0), False)
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def abs_(a: Tensor) -> Tensor:
    # Subgradient at 0 fixed to 0.
    out = Tensor._wrap(np.abs(a.data), False)
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor._wrap(np.clip(a.data, lo, hi), False)
    inside = (a.data > lo) & (a.data < hi)
    return _record(out, (a,), lambda g: (g * inside,))


def sigmoid(a: Tensor) -> Tensor:
    s = special.expit(a.data)
    out = Tensor._wrap(s, False)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericsError("log of non-positive value")
    out = Tensor._wrap(np.log(a.data), False)
    return _record(out, (a,), lambda g: (g / a.data,))


def gelu(a: Tensor) -> Tensor:
    """Gaussian-CDF GeLU, x * Phi(x), with the exact erf form."""
    x = a.data
    phi = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    out = Tensor._wrap(x * phi, False)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _record(out, (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; ``rate`` is the drop probability."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    out = Tensor._wrap(a.data * mask, False)
    return _record(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Reductions with order-canonical summation


def _ordered_sum(arr: np.ndarray, axis: int) -> np.ndarray:
    # Summing in sorted value order makes the result invariant to how the
    # terms were arranged along ``axis``, which keeps the clip-attention
    # path exactly permutation-equivariant.
    return np.sum(np.sort(arr, axis=axis), axis=axis)


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    denom = np.expand_dims(_ordered_sum(e, axis % a.data.ndim), axis % a.data.ndim)
    s = e / denom
    out = Tensor._wrap(s, False)

    def backward(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (a,), backward)


def l2_norm_over_channels(a: Tensor) -> Tensor:
    """sqrt(sum of squares) over the last axis, kept as a size-1 axis.

    The zero-vector subgradient is 0.
    """
    x = a.data
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    out = Tensor._wrap(norm, False)

    def backward(g):
        safe = np.where(norm > 0.0, norm, 1.0)
        return (np.where(norm > 0.0, g * x / safe, 0.0),)

    return _record(out, (a,), backward)


def channel_boxsum(a: Tensor, window: int) -> Tensor:
    """Sliding window sum over the last (channel) axis with zero padding."""
    if window < 1 or window % 2 == 0:
        raise ShapeError(f"window must be odd and positive, got {window}")
    c = a.shape[-1]
    half = window // 2
    pad = [(0, 0)] * (a.data.ndim - 1) + [(half, half)]
    xp = np.pad(a.data, pad)
    acc = np.zeros_like(a.data)
    for j in range(window):
        acc += xp[..., j:j + c]
    out = Tensor._wrap(acc, False)

    def backward(g):
        gp = np.pad(g, pad)
        gx = np.zeros_like(a.data)
        for j in range(window):
            gx += gp[..., j:j + c]
        return (gx,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# Convolution


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int) -> Tensor:
    """Cross-correlation along the second-to-last axis.

    ``x`` is ``[..., L, Cin]``, ``kernel`` is ``[Cout, Cin, K]``, ``bias``
    ``[Cout]``; output is ``[..., L + 2*padding - K + 1, Cout]``. Stride 1,
    symmetric zero padding.
    """
    if kernel.data.ndim != 3:
        raise ShapeError(f"kernel must be [Cout, Cin, K], got shape {kernel.shape}")
    cout, cin, k = kernel.shape
    if x.data.ndim < 2:
        raise ShapeError(f"conv1d input must be at least 2D, got shape {x.shape}")
    if x.shape[-1] != cin:
        raise ShapeError(f"input channels {x.shape[-1]} do not match kernel Cin {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match Cout {cout}")
    length = x.shape[-2]
    lout = length + 2 * padding - k + 1
    if lout < 1:
        raise ShapeError(f"conv1d output length {lout} < 1 (L={length}, K={k}, pad={padding})")

    pad = [(0, 0)] * (x.data.ndim - 2) + [(padding, padding), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.broadcast_to(bias.data, x.shape[:-2] + (lout, cout)).copy()
    for j in range(k):
        out += xp[..., j:j + lout, :] @ kernel.data[:, :, j].T

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel.data)
        g2 = g.reshape(-1, lout, cout)
        for j in range(k):
            gxp[..., j:j + lout, :] += g @ kernel.data[:, :, j]
            win = xp[..., j:j + lout, :].reshape(-1, lout, cin)
            gk[:, :, j] = np.einsum("nlo,nlc->oc", g2, win)
        gx = gxp[..., padding:padding + length, :] if padding else gxp
        gb = g.reshape(-1, cout).sum(axis=0)
        return gx.copy(), gk, gb

    result = Tensor._wrap(out, False)
    return _record(result, (x, kernel, bias), backward)


# ---------------------------------------------------------------------------
# Clip attention contractions


def clip_gram(q: Tensor, k: Tensor) -> Tensor:
    """Pairwise clip dot products per crop.

    ``q``/``k`` are ``[B, T, P, D]``; the result ``[B, T, T, P]`` holds the
    channel dot product of every (query clip, key clip) pair.
    """
    if q.data.ndim != 4 or q.shape != k.shape:
        raise ShapeError(f"clip_gram expects matching [B,T,P,D] inputs, got {q.shape} and {k.shape}")
    out = Tensor._wrap(np.einsum("btpc,bspc->btsp", q.data, k.data), False)

    def backward(g):
        gq = np.einsum("btsp,bspc->btpc", g, k.data)
        gk = np.einsum("btsp,btpc->bspc", g, q.data)
        return gq, gk

    return _record(out, (q, k), backward)


def clip_mix(weights: Tensor, values: Tensor) -> Tensor:
    """Attention-weighted sum over key clips.

    ``weights`` is ``[B, T, T2, P]``, ``values`` ``[B, T2, P, D]``; returns
    ``[B, T, P, D]``. Terms are summed in sorted order (see module docs).
    """
    if weights.data.ndim != 4 or values.data.ndim != 4:
        raise ShapeError("clip_mix expects [B,T,T2,P] weights and [B,T2,P,D] values")
    b, t, t2, p = weights.shape
    if values.shape[:3] != (b, t2, p):
        raise ShapeError(f"clip_mix shapes disagree: {weights.shape} vs {values.shape}")
    prod = weights.data[:, :, :, :, None] * values.data[:, None, :, :, :]
    out = Tensor._wrap(_ordered_sum(prod, axis=2), False)

    def backward(g):
        gw = np.einsum("btpd,bspd->btsp", g, values.data)
        gv = np.einsum("btsp,btpd->bspd", weights.data, g)
        return gw, gv

    return _record(out, (weights, values), backward)


# ---------------------------------------------------------------------------
# Top-k selection


def topk(a: Tensor, k: int):
    """The k largest entries of a 1D tensor, descending, ties by lower index.

    Returns ``(values, indices)`` where ``values`` is differentiable and
    ``indices`` is a plain integer array.
    """
    if a.data.ndim != 1:
        raise ShapeError(f"topk expects a 1D tensor, got shape {a.shape}")
    n = a.data.size
    if not 1 <= k <= n:
        raise ShapeError(f"k={k} out of range for length {n}")
    order = np.lexsort((np.arange(n), -a.data))
    idx = order[:k]
    values = gather(a, idx)
    return values, idx


def topk_indices(row: np.ndarray, k: int) -> np.ndarray:
    """Index-only variant of :func:`topk` for plain arrays (same tie rule)."""
    n = row.size
    if not 1 <= k <= n:
        raise ShapeError(f"k={k} out of range for length {n}")
    return np.lexsort((np.arange(n), -row))[:k]


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error of tape vs central differences."""

    entries: list = field(default_factory=list)  # (name, max relative error)
    eps: float = 1e-5
    tol: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((e for _, e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self):
        lines = [f"{name}: {err:.3e}" for name, err in self.entries]
        lines.append(f"max relative error {self.max_rel_error:.3e} "
                     f"({'PASS' if self.passed else 'FAIL'} at tol {self.tol:g})")
        return "\n".join(lines)


def grad_check(f, params, eps: float = 1e-5, tol: float = 1e-4, names=None) -> GradCheckReport:
    """Compare tape gradients of ``f(params)`` against central differences.

    ``f`` must be a deterministic scalar-valued function of the parameter
    list. Every parameter entry is perturbed by +-eps. The relative error
    denominator is floored at 1e-3 so near-zero gradient entries are judged
    against the loss scale instead of blowing up on rounding noise.
    """
    params = list(params)
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    for p in params:
        p.zero_grad()

    with Tape() as tape:
        out = f(params)
    if out.data.size != 1:
        raise ShapeError("grad_check objective must be scalar")
    if not np.isfinite(out.data.item()):
        raise NumericsError("grad_check objective evaluated non-finite")
    tape.backward(out)

    def evaluate():
        val = f(params).data.item()
        if not math.isfinite(val):
            raise NumericsError("grad_check objective evaluated non-finite")
        return val

    report = GradCheckReport(eps=eps, tol=tol)
    for name, p in zip(names, params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        analytic = analytic.reshape(-1)
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate()
            flat[i] = orig - eps
            f_minus = evaluate()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(fd), abs(analytic[i]), 1e-3)
            worst = max(worst, abs(fd - analytic[i]) / denom)
        report.entries.append((name, worst))
    return report
