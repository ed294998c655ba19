"""Dense float tensors with reverse-mode automatic differentiation.

Every primitive records itself on the thread-local active ``Tape`` when one
exists and any input requires gradients. Recording order is execution order,
so the tape is already topologically sorted and ``Tape.backward`` is a single
reverse sweep that accumulates (sums) gradients into shared inputs.

All arrays are 64-bit floats. Randomness never originates here; callers pass
explicitly seeded ``numpy.random.Generator`` objects where noise is needed.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """N-dimensional array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Small amount of operator sugar; the module-level functions do the work.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Tape:
    """Ordered record of primitive operations for one forward/backward pass."""

    __slots__ = ("_entries", "_consumed")

    def __init__(self):
        self._entries: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        """Append one primitive. ``backward(out_grad)`` returns per-input grads."""
        self._entries.append((tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from ``loss`` (a scalar), accumulating into ``.grad``."""
        if self._consumed:
            raise ValidationError("tape already consumed: one backward pass per forward pass")
        if loss.data.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones((), dtype=DTYPE)
        for inputs, output, backward_fn in reversed(self._entries):
            if output.grad is None:
                continue
            grads = backward_fn(output.grad)
            for tensor, grad in zip(inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += grad


def record_op(inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable,
              name: str | None = None) -> Tensor:
    """Wrap a forward result, registering on the active tape when needed."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, name=name)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record_op((a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return record_op((a, b), out, backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = x.data * s

    def backward(g):
        return (g * s,)

    return record_op((x,), out, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def backward(g):
        return (g * mask,)

    return record_op((x,), out, backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return record_op((x,), out, backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValidationError("log requires strictly positive inputs")
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return record_op((x,), out, backward)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return record_op((x,), out, backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.data.shape[a] for a in axes]))
    return scale(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return record_op((x,), out, backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return record_op((x,), out, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record_op(tensors, out, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            slicer[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return record_op(tensors, out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return record_op((a, b), out, backward)


def weighted_sum(tensors: Sequence[Tensor], weights: Tensor) -> Tensor:
    """sum_i weights[i] * tensors[i]; gradient reaches both sides."""
    tensors = list(tensors)
    if weights.ndim != 1 or weights.shape[0] != len(tensors):
        raise ShapeError(
            f"weights must be 1-D of length {len(tensors)}, got shape {weights.shape}")
    base = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != base:
            raise ShapeError("weighted_sum requires same-shaped tensors")
    w = weights.data
    out = np.zeros(base, dtype=DTYPE)
    for wi, t in zip(w, tensors):
        out += wi * t.data

    def backward(g):
        grads = [g * wi for wi in w]
        gw = np.array([float(np.sum(g * t.data)) for t in tensors], dtype=DTYPE)
        return (*grads, gw)

    return record_op((*tensors, weights), out, backward)


def element(vec: Tensor, index: int) -> Tensor:
    """Scalar view of one coordinate of a 1-D tensor."""
    if vec.ndim != 1:
        raise ShapeError(f"element expects a 1-D tensor, got shape {vec.shape}")
    out = np.asarray(vec.data[index], dtype=DTYPE)

    def backward(g):
        gv = np.zeros_like(vec.data)
        gv[index] = g
        return (gv,)

    return record_op((vec,), out, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record_op((x,), out, backward)


# ---------------------------------------------------------------------------
# classification losses
# ---------------------------------------------------------------------------

def xent_rows(logits: Tensor, target_dist: Tensor) -> Tensor:
    """Per-row cross-entropy -sum target*log softmax(logits), shape [B]."""
    if logits.ndim != 2 or logits.shape != target_dist.shape:
        raise ShapeError(
            f"xent_rows expects matching [B, n] operands, got {logits.shape} vs {target_dist.shape}")
    sums = target_dist.data.sum(axis=1)
    bad = np.nonzero(np.abs(sums - 1.0) > 1e-6)[0]
    if bad.size:
        raise ValidationError(
            f"target distribution row {int(bad[0])} sums to {sums[bad[0]]:.8f}, expected 1")
    m = logits.data.max(axis=1, keepdims=True)
    lse = (m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=1)))
    out = lse - (target_dist.data * logits.data).sum(axis=1)
    probs = np.exp(logits.data - m)
    probs /= probs.sum(axis=1, keepdims=True)
    log_probs = logits.data - lse[:, None]

    def backward(g):
        gl = (probs - target_dist.data) * g[:, None]
        gt = -log_probs * g[:, None]
        return gl, gt

    return record_op((logits, target_dist), out, backward)


def softmax_xent(logits: Tensor, target_dist: Tensor) -> Tensor:
    """Batch mean of -sum target*log softmax(logits); stable log-sum-exp."""
    return mean(xent_rows(logits, target_dist))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=DTYPE)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# embedding, convolution, pooling, batch normalization
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of ``table`` [V, D] for ``ids`` [B, L] -> [B, D, L]."""
    ids = np.asarray(ids)
    if table.ndim != 2 or ids.ndim != 2:
        raise ShapeError("embedding expects table [V, D] and ids [B, L]")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise ValidationError("token id out of vocabulary range")
    out = np.ascontiguousarray(table.data[ids].transpose(0, 2, 1))

    def backward(g):
        gt = np.zeros_like(table.data)
        flat = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(-1, table.shape[1])
        np.add.at(gt, ids.ravel(), flat)
        return (gt,)

    return record_op((table,), out, backward)


def _windows(padded: np.ndarray, length: int, k: int, dilation: int) -> np.ndarray:
    s0, s1, s2 = padded.strides
    return np.lib.stride_tricks.as_strided(
        padded, (padded.shape[0], padded.shape[1], length, k),
        (s0, s1, s2, s2 * dilation), writeable=False)


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """1-D cross-correlation with SAME zero padding; length is preserved."""
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError("conv1d expects input [B, C, L] and kernel [C_out, C_in, k]")
    B, C, L = x.shape
    c_out, c_in, k = kernel.shape
    if c_in != C:
        raise ShapeError(f"kernel expects {c_in} input channels, input has {C}")
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd for SAME padding, got {k}")
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    pad = (k - 1) * dilation // 2
    padded = np.zeros((B, C, L + 2 * pad), dtype=DTYPE)
    padded[:, :, pad:pad + L] = x.data
    win = _windows(padded, L, k, dilation)
    out = np.tensordot(win, kernel.data, axes=([1, 3], [1, 2]))  # [B, L, C_out]
    out = np.ascontiguousarray(out.transpose(0, 2, 1))
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
        out += bias.data[None, :, None]

    def backward(g):
        gk = np.tensordot(g, win, axes=([0, 2], [0, 2]))  # [C_out, C_in, k]
        gwin = np.tensordot(g, kernel.data, axes=([1], [0]))  # [B, L, C_in, k]
        gwin = gwin.transpose(0, 2, 1, 3)
        gpad = np.zeros_like(padded)
        for t in range(k):
            gpad[:, :, t * dilation:t * dilation + L] += gwin[:, :, :, t]
        gx = gpad[:, :, pad:pad + L]
        if bias is not None:
            return gx, gk, g.sum(axis=(0, 2))
        return gx, gk

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record_op(inputs, out, backward)


def pool1d(x: Tensor, kind: str, k: int = 3) -> Tensor:
    """Length-preserving max/avg pooling with SAME padding.

    avg divides by the count of in-bounds positions; max routes the gradient
    to the first maximal element of each window.
    """
    if x.ndim != 3:
        raise ShapeError("pool1d expects input [B, C, L]")
    if kind not in ("max", "avg"):
        raise ConfigError(f"unknown pooling kind {kind!r}")
    if k % 2 == 0:
        raise ConfigError(f"pooling kernel must be odd, got {k}")
    B, C, L = x.shape
    pad = (k - 1) // 2
    if kind == "max":
        padded = np.full((B, C, L + 2 * pad), -np.inf, dtype=DTYPE)
        padded[:, :, pad:pad + L] = x.data
        win = _windows(padded, L, k, 1)
        arg = win.argmax(axis=3)
        out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
        src = arg + np.arange(L)[None, None, :]  # index into padded axis

        def backward(g):
            gpad = np.zeros((B, C, L + 2 * pad), dtype=DTYPE)
            bi, ci, _ = np.indices(arg.shape)
            np.add.at(gpad, (bi, ci, src), g)
            return (gpad[:, :, pad:pad + L],)

        return record_op((x,), np.ascontiguousarray(out), backward)

    padded = np.zeros((B, C, L + 2 * pad), dtype=DTYPE)
    padded[:, :, pad:pad + L] = x.data
    win = _windows(padded, L, k, 1)
    positions = np.arange(L)
    counts = (np.minimum(positions + pad, L - 1) - np.maximum(positions - pad, 0) + 1).astype(DTYPE)
    out = win.sum(axis=3) / counts[None, None, :]

    def backward(g):
        gq = g / counts[None, None, :]
        gpad = np.zeros((B, C, L + 2 * pad), dtype=DTYPE)
        for t in range(k):
            gpad[:, :, t:t + L] += gq
        return (gpad[:, :, pad:pad + L],)

    return record_op((x,), np.ascontiguousarray(out), backward)


class BatchNormState:
    """Running statistics for one batchnorm site (buffers, not parameters)."""

    __slots__ = ("running_mean", "running_var", "momentum")

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM):
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)
        self.momentum = momentum

    def copy_from(self, other: "BatchNormState") -> None:
        self.running_mean = other.running_mean.copy()
        self.running_var = other.running_var.copy()
        self.momentum = other.momentum


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              mode: str) -> Tensor:
    """Per-channel normalization over batch and sequence dims, eps 1e-5."""
    if x.ndim != 3:
        raise ShapeError("batchnorm expects input [B, C, L]")
    B, C, L = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"gamma/beta must have shape ({C},)")
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown batchnorm mode {mode!r}")
    if mode == "train":
        n = B * L
        if n < 2:
            raise ValidationError(
                f"degenerate batch: batchnorm train mode needs B*L >= 2, got {n}")
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x.data - mu[None, :, None]) * inv[None, :, None]
        out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

        def backward(g):
            gxhat = g * gamma.data[None, :, None]
            sum_g = gxhat.sum(axis=(0, 2))
            sum_gx = (gxhat * xhat).sum(axis=(0, 2))
            gx = (inv[None, :, None] / n) * (
                n * gxhat - sum_g[None, :, None] - xhat * sum_gx[None, :, None])
            ggamma = (g * xhat).sum(axis=(0, 2))
            gbeta = g.sum(axis=(0, 2))
            return gx, ggamma, gbeta

        return record_op((x, gamma, beta), out, backward)

    inv = 1.0 / np.sqrt(state.running_var + BN_EPS)
    xhat = (x.data - state.running_mean[None, :, None]) * inv[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        gx = g * (gamma.data * inv)[None, :, None]
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        return gx, ggamma, gbeta

    return record_op((x, gamma, beta), out, backward)


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is |g_a - g_n| / max(1, |g_a|, |g_n|). ``f`` must be
    a deterministic scalar-valued function of ``inputs``.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    tape.backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.ravel()
        ga_flat = ga.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(*inputs).data)
            flat[i] = orig - eps
            f_minus = float(f(*inputs).data)
            flat[i] = orig
            gn = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ga_flat[i] - gn) / max(1.0, abs(ga_flat[i]), abs(gn))
            worst = max(worst, err)
    return worst
