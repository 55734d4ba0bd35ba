"""Reverse-mode autodiff over dense float64 tensors.

Everything in this package runs on the small op vocabulary below: matmul,
conv2d (1x1 / 3x3), batch norm, relu, global average pooling, elementwise
add / mul / scale, softmax / log_softmax, sum and row gathering. Forward
results are deterministic for fixed inputs (fixed summation order), and
backward walks the tape exactly once per node.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, frozen targets)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class TapeNode:
    """One recorded operation: op tag, input tensors, and its backward rule.

    ``backward_fn(grad_out)`` returns one gradient array per input (None for
    inputs that do not require gradients). Saved forward context lives in the
    closure.
    """

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    """Dense float64 array with optional gradient and tape node.

    ``grad`` is populated (and accumulated across backward calls) only on
    leaf tensors with ``requires_grad=True``; intermediate adjoints are
    transient to keep repeated backward calls correct.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[TapeNode] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant view of this tensor's values (shares the buffer)."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other) -> "Tensor":
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def backward(self) -> None:
        """Reverse sweep from a scalar; leaf grads accumulate across calls."""
        if self.data.size != 1:
            raise UsageError(
                f"backward() needs a scalar loss, got shape {self.shape}")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                topo.append(t)
                continue
            if id(t) in visited or t.node is None:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for inp in t.node.inputs:
                if inp.node is not None and id(inp) not in visited:
                    stack.append((inp, False))

        adjoint: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        if self.node is None:
            if self.requires_grad:
                self._accumulate(np.ones_like(self.data))
            return
        for t in reversed(topo):
            g = adjoint.pop(id(t), None)
            if g is None:
                continue
            grads = t.node.backward_fn(g)
            for inp, gi in zip(t.node.inputs, grads):
                if gi is None:
                    continue
                if inp.node is not None:
                    prev = adjoint.get(id(inp))
                    adjoint[id(inp)] = gi if prev is None else prev + gi
                elif inp.requires_grad:
                    inp._accumulate(gi)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad or t.node is not None for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, backward_fn)
    return out


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def _check_finite(x: Tensor, op: str) -> None:
    if not np.isfinite(x.data).all():
        raise NumericError(f"{op}: non-finite values in tensor '{x.name or '<unnamed>'}'")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product; dA = G @ B^T, dB = A^T @ G."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g: np.ndarray):
        ga = g @ b.data.T if _needs(a) else None
        gb = a.data.T @ g if _needs(b) else None
        return ga, gb

    return _make(out, "matmul", (a, b), backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """Columns laid out (C*kh*kw, N*Ho*Wo) so one GEMM covers the batch."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride,
                               j:j + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with FCkk kernels (k in {1, 3}).

    Forward runs as im2col + matmul; backward scatters the transposed
    correlation back through the same column layout.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv2d: need NCHW input and FCHW kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(
            f"conv2d: input channels {c} do not match kernel channels {cw}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ConfigError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: bad stride/padding ({stride}, {padding})")
    if (h + 2 * padding - kh) % stride or (wd + 2 * padding - kw) % stride:
        raise ConfigError(
            f"conv2d: non-integral output size for input {h}x{wd}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1

    if padding == 0:
        xp = x.data
    else:
        xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
        xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(f, c * kh * kw)
    out = np.ascontiguousarray(
        (w2 @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g: np.ndarray):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * ho * wo)
        gw = (g2 @ cols.T).reshape(w.shape) if _needs(w) else None
        gx = None
        if _needs(x):
            if stride == 1:
                # dx is a stride-1 correlation of g with the flipped kernel,
                # channels swapped; this reuses the fast im2col path.
                wt = np.ascontiguousarray(
                    w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                pad_b = kh - 1 - padding
                if pad_b == 0:
                    gp = g
                else:
                    gp = np.zeros((n, f, ho + 2 * pad_b, wo + 2 * pad_b))
                    gp[:, :, pad_b:pad_b + ho, pad_b:pad_b + wo] = g
                gcols = _im2col(gp, kh, kw, 1, h, wd)
                gx = np.ascontiguousarray(
                    (wt.reshape(c, f * kh * kw) @ gcols)
                    .reshape(c, n, h, wd).transpose(1, 0, 2, 3))
            else:
                dcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * ho:stride,
                            j:j + stride * wo:stride] += \
                            dcols[:, i, j].transpose(1, 0, 2, 3)
                gx = dxp if padding == 0 else dxp[:, :, padding:padding + h,
                                                  padding:padding + wd]
        return gx, gw

    return _make(out, "conv2d", (x, w), backward)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, *, training: bool,
                running_mean: np.ndarray, running_var: np.ndarray,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running buffers in place; eval mode uses the running buffers and is
    affine in x. The epsilon floor keeps zero-variance channels finite.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d: need NCHW input, got {x.shape}")
    n, c, h, wd = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape} "
            f"do not match {c} channels")
    m = n * h * wd
    if training and m < 2:
        raise UsageError("batchnorm2d: train mode needs at least 2 values per channel")

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = x.data - mu[None, :, None, None]
    xhat *= inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None]
    out += beta.data[None, :, None, None]

    def backward(g: np.ndarray):
        gbeta = g.sum(axis=(0, 2, 3)) if _needs(beta) else None
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if _needs(gamma) else None
        gx = None
        if _needs(x):
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3))
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))
                gx = (inv[None, :, None, None] / m) * (
                    m * dxhat - s1[None, :, None, None]
                    - xhat * s2[None, :, None, None])
            else:
                gx = dxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return _make(out, "batchnorm2d", (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def backward(g: np.ndarray):
        return ((g * mask) if _needs(x) else None,)

    return _make(out, "relu", (x,), backward)


def avgpool_global(x: Tensor) -> Tensor:
    """Mean over the spatial axes: NCHW -> NC."""
    if x.ndim != 4:
        raise DimensionError(f"avgpool_global: need NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g: np.ndarray):
        if not _needs(x):
            return (None,)
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(out, "avgpool_global", (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be 1-d and broadcast over leading axes (bias)."""
    bias = b.ndim == 1 and a.ndim > 1 and b.shape[0] == a.shape[-1]
    if not bias and a.shape != b.shape:
        raise DimensionError(f"add: incompatible shapes {a.shape} + {b.shape}")
    out = a.data + b.data

    def backward(g: np.ndarray):
        ga = g if _needs(a) else None
        gb = None
        if _needs(b):
            gb = g.reshape(-1, b.shape[0]).sum(axis=0) if bias else g
        return ga, gb

    return _make(out, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} * {b.shape}")
    out = a.data * b.data

    def backward(g: np.ndarray):
        ga = g * b.data if _needs(a) else None
        gb = g * a.data if _needs(b) else None
        return ga, gb

    return _make(out, "mul", (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = x.data * s

    def backward(g: np.ndarray):
        return ((g * s) if _needs(x) else None,)

    return _make(out, "scale", (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis, stabilized by max subtraction."""
    _check_finite(x, "softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        if not _needs(x):
            return (None,)
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, "softmax", (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    _check_finite(x, "log_softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g: np.ndarray):
        if not _needs(x):
            return (None,)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax", (x,), backward)


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def backward(g: np.ndarray):
        if not _needs(x):
            return (None,)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (x,), backward)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Pick one entry per row of a 2-d tensor: out[i] = x[i, idx[i]]."""
    if x.ndim != 2:
        raise DimensionError(f"gather_rows: need a 2-d tensor, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise DimensionError(
            f"gather_rows: need {x.shape[0]} indices, got shape {idx.shape}")
    k = x.shape[1]
    bad = np.nonzero((idx < 0) | (idx >= k))[0]
    if bad.size:
        raise DataError(f"gather_rows: index {int(idx[bad[0]])} out of range "
                        f"[0, {k}) at row {int(bad[0])}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def backward(g: np.ndarray):
        if not _needs(x):
            return (None,)
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _make(out, "gather_rows", (x,), backward)
