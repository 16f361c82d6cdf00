"""Dense float tensors with reverse-mode automatic differentiation.

Design notes:

* Define-by-run: ops record onto the innermost active ``Tape``; ``backward``
  replays the records in exact reverse order. With no active tape (or inside
  ``no_grad``) ops are pure numpy and produce non-differentiable tensors.
* float32 is the working precision for training; float64 tensors run the same
  kernels end to end, which is what the finite-difference test oracles use.
* Reductions (sums, means, norms, log-sum-exp, normalization statistics)
  accumulate in float64 regardless of tensor dtype, then cast back.
* All norm denominators are guarded by ``NORM_EPS`` so zero vectors are total
  inputs rather than NaN factories.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, InputError, ShapeError

DEFAULT_DTYPE = np.float32
NORM_EPS = 1e-8

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense n-dimensional float array, optionally tracked for gradients.

    ``data`` is row-major numpy storage; ``grad`` stays ``None`` until a
    backward pass accumulates into it. Tensors with ``requires_grad=False``
    never accumulate gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out._node = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Value snapshot cut off from the recorded graph."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{req})"

    # Small arithmetic conveniences; the named ops below do the real work.
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_coerce(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other, self.dtype), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class _Node:
    __slots__ = ("inputs", "out", "backward_fn", "tape")

    def __init__(self, inputs, out, backward_fn, tape):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn
        self.tape = tape


_tls = threading.local()


def _stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations for one backward pass.

    Single-threaded; independent tapes on separate threads share no state.
    A tape is consumed by ``backward`` and cannot be replayed.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        top = _stack().pop()
        if top is not self:  # pragma: no cover - misuse guard
            raise ContractError("tape stack corrupted: exiting a tape that is not innermost")
        return False

    def __len__(self) -> int:
        return len(self._nodes)


class no_grad:
    """Context manager that suspends recording inside an active tape."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False


def _make_out(arr: np.ndarray, inputs: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    tape = active_tape()
    tracked = tape is not None and not tape.consumed and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, tracked)
    if tracked:
        node = _Node(tuple(inputs), out, backward_fn, tape)
        out._node = node
        tape._nodes.append(node)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad ancestor of ``loss``.

    ``loss`` must be a scalar produced on a live tape; the tape is consumed.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise ContractError("loss was not produced by an operation recorded on a tape")
    tape = node.tape
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward pass")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape._nodes):
        g_out = rec.out.grad
        if g_out is None:
            continue
        grads = rec.backward_fn(g_out)
        for t, g in zip(rec.inputs, grads):
            if g is not None:
                _accumulate(t, g)
    tape.consumed = True
    tape._nodes.clear()


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` (64-bit accumulation)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        arr = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward_fn(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make_out(arr, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        arr = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make_out(arr, (a, b), backward_fn)


def scale(x: Tensor, s: float) -> Tensor:
    c = x.data.dtype.type(s)
    arr = x.data * c

    def backward_fn(g):
        return (g * c,)

    return _make_out(arr, (x,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ok = (a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0]) or (
        a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]
    )
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    arr = a.data @ b.data

    def backward_fn(g):
        ga = g @ b.data.swapaxes(-1, -2) if a.requires_grad else None
        gb = a.data.swapaxes(-1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make_out(arr, (a, b), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    arr = x.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _make_out(arr, (x,), backward_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    arr = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward_fn(g):
        return (g.transpose(inv),)

    return _make_out(arr, (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    try:
        arr = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}"
        ) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        grads = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                grads.append(g[tuple(idx)])
            else:
                grads.append(None)
        return grads

    return _make_out(arr, tuple(tensors), backward_fn)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} of shape {x.shape}"
        )
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    arr = np.ascontiguousarray(x.data[idx])  # snapshot, no view aliasing

    def backward_fn(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[idx] = g
        return (gx,)

    return _make_out(arr, (x,), backward_fn)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        arr = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None

    def backward_fn(g):
        return (_unbroadcast(g, x.shape),)

    return _make_out(arr, (x,), backward_fn)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    arr = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * x.ndim), x.shape).astype(g.dtype),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, x.shape),)

    return _make_out(arr, (x,), backward_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        count = x.shape[axis]
    arr = np.mean(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward_fn(g):
        gs = g / g.dtype.type(count)
        if axis is None:
            return (np.broadcast_to(gs.reshape((1,) * x.ndim), x.shape).astype(g.dtype),)
        gk = gs if keepdims else np.expand_dims(gs, axis)
        return (np.broadcast_to(gk, x.shape),)

    return _make_out(arr, (x,), backward_fn)


# ---------------------------------------------------------------------------
# nonlinear kernels
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x64 = x.data.astype(np.float64)
    m = np.max(x64, axis=axis, keepdims=True)
    e = np.exp(x64 - m)
    y64 = e / np.sum(e, axis=axis, keepdims=True)
    arr = y64.astype(x.dtype)

    def backward_fn(g):
        y = arr
        dot = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (y * (g - dot),)

    return _make_out(arr, (x,), backward_fn)


def gelu(x: Tensor) -> Tensor:
    x64 = x.data.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(x64 / np.sqrt(2.0)))
    arr = (x64 * cdf).astype(x.dtype)

    def backward_fn(g):
        pdf = np.exp(-0.5 * x64 * x64) / np.sqrt(2.0 * np.pi)
        d = (cdf + x64 * pdf).astype(g.dtype)
        return (g * d,)

    return _make_out(arr, (x,), backward_fn)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layernorm: gamma/beta shapes {gamma.shape}/{beta.shape} "
            f"do not match feature width {x.shape[-1]}"
        )
    x64 = x.data.astype(np.float64)
    mu = np.mean(x64, axis=-1, keepdims=True)
    var = np.mean((x64 - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    arr = (xhat * gamma.data.astype(np.float64) + beta.data.astype(np.float64)).astype(x.dtype)
    n = x.shape[-1]

    def backward_fn(g):
        g64 = g.astype(np.float64)
        gxhat = g64 * gamma.data.astype(np.float64)
        gx = None
        if x.requires_grad:
            s1 = np.sum(gxhat, axis=-1, keepdims=True)
            s2 = np.sum(gxhat * xhat, axis=-1, keepdims=True)
            gx = ((gxhat - s1 / n - xhat * s2 / n) * inv).astype(x.dtype)
        lead = tuple(range(x.ndim - 1))
        ggamma = np.sum(g64 * xhat, axis=lead).astype(gamma.dtype) if gamma.requires_grad else None
        gbeta = np.sum(g64, axis=lead).astype(beta.dtype) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make_out(arr, (x, gamma, beta), backward_fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax-probability of the true class.

    ``logits`` is [batch x classes]; ``labels`` an integer array in [0, C).
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    lab = np.asarray(labels)
    if lab.ndim == 0:
        lab = lab.reshape(1)
    if not np.issubdtype(lab.dtype, np.integer):
        raise InputError("cross_entropy: labels must be integers")
    b, c = logits.shape
    if lab.shape != (b,):
        raise ShapeError(f"cross_entropy: labels shape {lab.shape} does not match batch {b}")
    if lab.min() < 0 or lab.max() >= c:
        raise InputError(
            f"cross_entropy: labels must lie in [0, {c}), got range "
            f"[{int(lab.min())}, {int(lab.max())}]"
        )
    z = logits.data.astype(np.float64)
    m = np.max(z, axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(z - m), axis=1))
    rows = np.arange(b)
    nll = lse - z[rows, lab]
    arr = np.asarray(nll.mean(), dtype=logits.dtype)

    def backward_fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, lab] -= 1.0
        return ((float(g) / b * p).astype(logits.dtype),)

    return _make_out(arr, (logits,), backward_fn)


def cosine_rows(a: Tensor, b: Tensor, eps: float = NORM_EPS) -> Tensor:
    """All-pairs cosine similarity between rows of ``a`` [R x D] and ``b`` [S x D].

    Row norms below ``eps`` are clamped to ``eps``, so zero rows score 0.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_rows: expected [R x D] and [S x D], got {a.shape} and {b.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    na = np.sqrt(np.sum(a64 * a64, axis=1))
    nb = np.sqrt(np.sum(b64 * b64, axis=1))
    ca = np.maximum(na, eps)
    cb = np.maximum(nb, eps)
    c64 = (a64 @ b64.T) / (ca[:, None] * cb[None, :])
    arr = c64.astype(a.dtype if a.dtype == b.dtype else np.float64)

    def backward_fn(g):
        g64 = g.astype(np.float64)
        ga = gb = None
        if a.requires_grad:
            term = (g64 / cb[None, :]) @ b64 / ca[:, None]
            mask = na > eps
            coef = np.where(mask, np.sum(g64 * c64, axis=1) / np.where(mask, na * na, 1.0), 0.0)
            ga = (term - coef[:, None] * a64).astype(a.dtype)
        if b.requires_grad:
            term = (g64 / ca[:, None]).T @ a64 / cb[:, None]
            mask = nb > eps
            coef = np.where(mask, np.sum(g64 * c64, axis=0) / np.where(mask, nb * nb, 1.0), 0.0)
            gb = (term - coef[:, None] * b64).astype(b.dtype)
        return ga, gb

    return _make_out(arr, (a, b), backward_fn)


def cosine_sim(a: Tensor, b: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scalar cosine similarity of two vectors (shape [D] or [1 x D])."""
    a2 = reshape(a, (1, -1)) if a.ndim == 1 else a
    b2 = reshape(b, (1, -1)) if b.ndim == 1 else b
    if a2.shape[0] != 1 or b2.shape[0] != 1:
        raise ShapeError(f"cosine_sim: expected single rows, got {a.shape} and {b.shape}")
    return reshape(cosine_rows(a2, b2, eps=eps), ())


def normalize_rows(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale each row of ``x`` [R x D] to unit L2 norm (eps-guarded)."""
    if x.ndim != 2:
        raise ShapeError(f"normalize_rows: expected 2-D input, got {x.shape}")
    x64 = x.data.astype(np.float64)
    n = np.sqrt(np.sum(x64 * x64, axis=1))
    cn = np.maximum(n, eps)
    u64 = x64 / cn[:, None]
    arr = u64.astype(x.dtype)

    def backward_fn(g):
        g64 = g.astype(np.float64)
        mask = (n > eps)[:, None]
        radial = np.sum(g64 * u64, axis=1, keepdims=True)
        gx = (g64 - mask * radial * u64) / cn[:, None]
        return (gx.astype(x.dtype),)

    return _make_out(arr, (x,), backward_fn)


def argmax_rows(logits: Tensor | np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)
