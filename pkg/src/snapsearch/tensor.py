"""Dense-tensor reverse-mode autodiff engine.

Small CPU engine backing every network in this package: float64 by default
(float32 opt-in for throughput), channels-first row-major layout, and a
closure-based tape. Heavy layers (conv, batchnorm, LSTM) are fused ops with
hand-written backward passes so the per-step Python overhead stays small.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

try:  # optional fused kernels; every op keeps a pure-numpy fallback
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

    def _njit(*args, **kwargs):
        def deco(f):
            return f

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return deco


class ShapeError(ValueError):
    pass


class InvalidBatch(ValueError):
    pass


class NonFiniteGradient(RuntimeError):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction (inference / decoding paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An ndarray plus an optional backward closure linking it to its inputs."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray, own: bool = False):
        """Add g into the gradient; own=True hands over a freshly built array."""
        if self.grad is None:
            if own and g.shape == self.data.shape and g.dtype == self.data.dtype:
                self.grad = g
                return
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def backward(self):
        """Reverse pass from a scalar output through the tape."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and backward is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b where b is a 2-D weight; a may carry leading batch axes."""
    if b.data.ndim != 2:
        raise ShapeError("matmul expects a 2-D right operand")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")

    def back(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T, own=True)
        flat_a = a.data.reshape(-1, a.data.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        b.accumulate(flat_a.T @ flat_g)

    return _make(a.data @ b.data, (a, b), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        x.accumulate(g * mask)

    return _make(x.data * mask, (x,), back)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def back(g):
        x.accumulate(g * (1.0 - y * y))

    return _make(y, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_raw(x.data)

    def back(g):
        x.accumulate(g * y * (1.0 - y))

    return _make(y, (x,), back)


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    # stable for any magnitude and a single ufunc pass
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def back(g):
        x.accumulate(g * y)

    return _make(y, (x,), back)


def log(x: Tensor) -> Tensor:
    def back(g):
        x.accumulate(g / x.data)

    return _make(np.log(x.data), (x,), back)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    y = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def back(g):
        x.accumulate(g * inside)

    return _make(y, (x,), back)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is None:
            x.accumulate(np.broadcast_to(g, x.shape).copy() if np.ndim(g) else np.full_like(x.data, g))
        else:
            ge = np.expand_dims(g, axis) if not keepdims else g
            x.accumulate(np.broadcast_to(ge, x.shape).copy())

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.data.shape[a] for a in axes]))

    def back(g):
        if axis is None:
            x.accumulate(np.full_like(x.data, g / n))
        else:
            ge = np.expand_dims(g, axis) if not keepdims else g
            x.accumulate(np.broadcast_to(ge / n, x.shape).copy())

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape

    def back(g):
        x.accumulate(g.reshape(orig))

    return _make(x.data.reshape(shape), (x,), back)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def back(g):
        x.accumulate(g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def back(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x.accumulate(full)

    return _make(x.data[idx].copy(), (x,), back)


def tile0(x: Tensor, reps: int) -> Tensor:
    """Repeat x along a new leading axis; backward sums the copies."""

    def back(g):
        x.accumulate(g.sum(axis=0))

    return _make(np.broadcast_to(x.data, (reps,) + x.data.shape).copy(), (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x.accumulate(y * (g - dot))

    return _make(y, (x,), back)


# ---------------------------------------------------------------------------
# fused kernels (numba-compiled when available; IEEE order, single thread)


@_njit(cache=True)
def _k_dw_fwd(xp, w3, out):  # pragma: no cover - exercised via _conv_depthwise
    n, c, h, wd = out.shape
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for a in range(3):
                        for b in range(3):
                            acc += xp[ni, ci, i + a, j + b] * w3[ci, a, b]
                    out[ni, ci, i, j] = acc


@_njit(cache=True)
def _k_dw_wgrad(xp, g, dw):  # pragma: no cover
    n, c, h, wd = g.shape
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    gv = g[ni, ci, i, j]
                    for a in range(3):
                        for b in range(3):
                            dw[ci, a, b] += gv * xp[ni, ci, i + a, j + b]


@_njit(cache=True)
def _k_maxpool_fwd(xp, stride, y, arg):  # pragma: no cover
    n, c, ho, wo = y.shape
    for ni in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    m = xp[ni, ci, i * stride, j * stride]
                    best = 0
                    for a in range(3):
                        for b in range(3):
                            v = xp[ni, ci, i * stride + a, j * stride + b]
                            if v > m:  # strict: ties keep the lowest index
                                m = v
                                best = a * 3 + b
                    y[ni, ci, i, j] = m
                    arg[ni, ci, i, j] = best


@_njit(cache=True)
def _k_maxpool_bwd(arg, g, stride, dxp):  # pragma: no cover
    n, c, ho, wo = g.shape
    for ni in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    k = arg[ni, ci, i, j]
                    dxp[ni, ci, i * stride + k // 3, j * stride + k % 3] += g[ni, ci, i, j]


@_njit(cache=True)
def _k_bn_stats(x, sums, sqs):  # pragma: no cover
    n, c, h, wd = x.shape
    for ni in range(n):
        for ci in range(c):
            s = 0.0
            q = 0.0
            for i in range(h):
                for j in range(wd):
                    v = x[ni, ci, i, j]
                    s += v
                    q += v * v
            sums[ci] += s
            sqs[ci] += q


@_njit(cache=True)
def _k_bn_fwd(x, mu, ivar, gamma, beta, y, mask):  # pragma: no cover
    n, c, h, wd = x.shape
    for ni in range(n):
        for ci in range(c):
            mm = mu[ci]
            iv = ivar[ci] * gamma[ci]
            bb = beta[ci]
            for i in range(h):
                for j in range(wd):
                    v = (x[ni, ci, i, j] - mm) * iv + bb
                    if v > 0.0:
                        y[ni, ci, i, j] = v
                        mask[ni, ci, i, j] = True
                    else:
                        y[ni, ci, i, j] = 0.0
                        mask[ni, ci, i, j] = False


@_njit(cache=True)
def _k_bn_bwd_sums(g, mask, x, mu, ivar, dgamma, dbeta):  # pragma: no cover
    n, c, h, wd = x.shape
    for ni in range(n):
        for ci in range(c):
            mm = mu[ci]
            iv = ivar[ci]
            dg = 0.0
            db = 0.0
            for i in range(h):
                for j in range(wd):
                    if mask[ni, ci, i, j]:
                        gv = g[ni, ci, i, j]
                        db += gv
                        dg += gv * (x[ni, ci, i, j] - mm) * iv
            dgamma[ci] += dg
            dbeta[ci] += db


@_njit(cache=True)
def _k_bn_bwd_dx(g, mask, x, mu, ivar, gamma, dgamma, dbeta, m, train, dx):  # pragma: no cover
    # batch statistics couple every position, so in train mode the mean terms
    # reach inputs whose own output the ReLU masked
    n, c, h, wd = x.shape
    for ni in range(n):
        for ci in range(c):
            mm = mu[ci]
            iv = ivar[ci]
            gi = gamma[ci] * iv
            c1 = dbeta[ci] / m
            c2 = dgamma[ci] / m
            for i in range(h):
                for j in range(wd):
                    gv = g[ni, ci, i, j] if mask[ni, ci, i, j] else 0.0
                    if train:
                        xhat = (x[ni, ci, i, j] - mm) * iv
                        dx[ni, ci, i, j] = gi * (gv - c1 - xhat * c2)
                    else:
                        dx[ni, ci, i, j] = gi * gv


# ---------------------------------------------------------------------------
# convolution / pooling


def _pad_hw(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def _windows3(xp: np.ndarray) -> np.ndarray:
    # [N,C,H+2,W+2] -> [N,C,H,W,3,3] view
    return np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))


def _im2col3(x: np.ndarray) -> np.ndarray:
    """[N,C,H,W] -> [N, C*9, H*W] patch matrix (the one unavoidable gather)."""
    n, c, h, wd = x.shape
    win = _windows3(_pad_hw(x))  # [N,C,H,W,3,3] view
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * 9, h * wd)


def _conv3x3_raw(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Standard same-padding stride-1 3x3 conv via batched GEMM over samples."""
    n, c, h, wd = x.shape
    out = np.matmul(w.reshape(w.shape[0], c * 9), _im2col3(x))
    return out.reshape(n, w.shape[0], h, wd)




def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, mode: str = "standard") -> Tensor:
    """Same-padding stride-1 convolution over [N,C,H,W] (or [C,H,W]) input.

    mode 'standard' takes a [O,C,k,k] kernel with k in {1,3}; 'depthwise'
    takes [C,1,3,3] (multiplier 1). Depthwise-separable nets compose a
    depthwise call with a 1x1 standard call.
    """
    squeeze = x.data.ndim == 3
    xin = reshape(x, (1,) + x.data.shape) if squeeze else x
    if xin.data.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W], got {x.data.shape}")
    if mode == "standard":
        out = _conv_standard(xin, kernel, bias)
    elif mode == "depthwise":
        out = _conv_depthwise(xin, kernel)
        if bias is not None:
            out = add(out, reshape(bias, (1, -1, 1, 1)))
    else:
        raise ValueError(f"unknown conv mode {mode!r}")
    return reshape(out, out.data.shape[1:]) if squeeze else out


def _conv_standard(x: Tensor, w: Tensor, bias: Tensor | None) -> Tensor:
    n, c, h, wd = x.data.shape
    o, ci, kh, kw = w.data.shape
    if ci != c:
        raise ShapeError(f"kernel expects {ci} input channels, input has {c}")
    parents = (x, w) if bias is None else (x, w, bias)
    if (kh, kw) == (1, 1):
        wm = w.data.reshape(o, c)
        y = np.matmul(wm, x.data.reshape(n, c, h * wd)).reshape(n, o, h, wd)
        if bias is not None:
            y += bias.data[None, :, None, None]

        def back(g):
            gm = g.reshape(n, o, h * wd)
            if x.requires_grad:
                x.accumulate(np.matmul(wm.T, gm).reshape(n, c, h, wd), own=True)
            xm = x.data.reshape(n, c, h * wd)
            w.accumulate(np.matmul(gm, xm.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, 1, 1))
            if bias is not None:
                bias.accumulate(g.sum(axis=(0, 2, 3)))

        return _make(y, parents, back)
    if (kh, kw) != (3, 3):
        raise ShapeError(f"kernel size {kh}x{kw} unsupported (1 or 3)")
    cols = _im2col3(x.data)  # kept for the weight gradient
    y = np.matmul(w.data.reshape(o, c * 9), cols).reshape(n, o, h, wd)
    if bias is not None:
        y += bias.data[None, :, None, None]

    def back(g):
        gm = g.reshape(n, o, h * wd)
        w.accumulate(np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, 3, 3))
        if x.requires_grad:
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            x.accumulate(_conv3x3_raw(g, np.ascontiguousarray(wflip)), own=True)
        if bias is not None:
            bias.accumulate(g.sum(axis=(0, 2, 3)))

    return _make(y, parents, back)


def _depthwise_raw(x: np.ndarray, w3: np.ndarray) -> np.ndarray:
    """Per-channel 3x3 correlation as nine shifted fused multiply-adds."""
    n, c, h, wd = x.shape
    xp = _pad_hw(x)
    out = np.zeros_like(x)
    tmp = np.empty_like(x)
    for i in range(3):
        for j in range(3):
            np.multiply(xp[:, :, i:i + h, j:j + wd], w3[:, i, j][None, :, None, None], out=tmp)
            out += tmp
    return out


def _depthwise_fwd(x: np.ndarray, w3: np.ndarray) -> np.ndarray:
    if _HAVE_NUMBA:
        out = np.empty_like(x)
        _k_dw_fwd(_pad_hw(x), np.ascontiguousarray(w3), out)
        return out
    return _depthwise_raw(x, w3)


def _conv_depthwise(x: Tensor, w: Tensor) -> Tensor:
    n, c, h, wd = x.data.shape
    if w.data.shape != (c, 1, 3, 3):
        raise ShapeError(f"depthwise kernel must be [{c},1,3,3], got {w.data.shape}")
    y = _depthwise_fwd(x.data, w.data[:, 0])

    def back(g):
        xp = _pad_hw(x.data)
        if _HAVE_NUMBA:
            dw = np.zeros((c, 3, 3), dtype=g.dtype)
            _k_dw_wgrad(xp, np.ascontiguousarray(g), dw)
        else:
            dw = np.empty((c, 3, 3), dtype=g.dtype)
            for i in range(3):
                for j in range(3):
                    dw[:, i, j] = (g * xp[:, :, i:i + h, j:j + wd]).sum(axis=(0, 2, 3))
        w.accumulate(dw[:, None])
        if x.requires_grad:
            x.accumulate(_depthwise_fwd(g, w.data[:, 0, ::-1, ::-1]), own=True)

    return _make(y, (x, w), back)


def maxpool3(x: Tensor, stride: int = 1) -> Tensor:
    """3x3 max pooling, same padding; stride 1 keeps spatial dims, stride 2 halves.

    Gradient routes to the argmax element of each window; ties pick the lowest
    linear index within the window (row-major), which np.argmax guarantees.
    """
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    squeeze = x.data.ndim == 3
    xin = reshape(x, (1,) + x.data.shape) if squeeze else x
    n, c, h, wd = xin.data.shape
    if h < 1 or wd < 1:
        raise ShapeError("empty spatial dims")
    xp = np.pad(xin.data, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    ho = (h + stride - 1) // stride
    wo = (wd + stride - 1) // stride
    arg = None
    if _HAVE_NUMBA:
        y = np.empty((n, c, ho, wo), dtype=xin.data.dtype)
        arg = np.empty((n, c, ho, wo), dtype=np.int8)
        _k_maxpool_fwd(xp, stride, y, arg)
        xp = None  # backward only needs the argmax
    else:
        y = np.full((n, c, ho, wo), -np.inf, dtype=xin.data.dtype)
        for i in range(3):
            for j in range(3):
                np.maximum(y, xp[:, :, i:i + h:stride, j:j + wd:stride], out=y)

    def back(g):
        # gradient routes to the argmax; ties claim the lowest window index
        dxp = np.zeros((n, c, h + 2, wd + 2), dtype=g.dtype)
        if _HAVE_NUMBA:
            _k_maxpool_bwd(arg, np.ascontiguousarray(g), stride, dxp)
        else:
            claimed = np.zeros(y.shape, dtype=bool)
            for k in range(9):
                i, j = divmod(k, 3)
                v = xp[:, :, i:i + h:stride, j:j + wd:stride]
                sel = (v == y) & ~claimed
                dxp[:, :, i:i + h:stride, j:j + wd:stride] += g * sel
                claimed |= sel
        xin.accumulate(np.ascontiguousarray(dxp[:, :, 1:1 + h, 1:1 + wd]), own=True)

    out = _make(y, (xin,), back)
    return reshape(out, out.data.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# batch normalization (+ fused ReLU)


class BatchNormState:
    """Running statistics for one batchnorm site (not trainable)."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float64):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def snapshot(self) -> dict:
        return {"mean": self.running_mean.copy(), "var": self.running_var.copy()}

    def restore(self, snap: dict):
        self.running_mean[...] = snap["mean"]
        self.running_var[...] = snap["var"]


def batchnorm_relu(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel batchnorm over [N,C,H,W] followed by ReLU.

    Train mode normalizes with biased batch statistics and updates the running
    stats by EMA (new = momentum * old + (1 - momentum) * batch).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm_relu expects [N,C,H,W], got {x.data.shape}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or state.running_mean.shape != (c,):
        raise ShapeError("channel count mismatch with batchnorm parameters")
    eps = state.eps
    m = n * h * w
    if train:
        if n == 0:
            raise InvalidBatch("zero batch in train mode")
        if _HAVE_NUMBA:
            sums = np.zeros(c, dtype=np.float64)
            sqs = np.zeros(c, dtype=np.float64)
            _k_bn_stats(x.data, sums, sqs)
            mu = (sums / m).astype(x.data.dtype)
            var = (sqs / m - (sums / m) ** 2).astype(x.data.dtype)
        else:
            mu = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
        state.running_mean[...] = state.momentum * state.running_mean + (1 - state.momentum) * mu
        state.running_var[...] = state.momentum * state.running_var + (1 - state.momentum) * var
    else:
        mu = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    ivar = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    mu = np.ascontiguousarray(mu, dtype=x.data.dtype)
    if _HAVE_NUMBA:
        y = np.empty_like(x.data)
        mask = np.empty(x.data.shape, dtype=np.bool_)
        _k_bn_fwd(x.data, mu, ivar, gamma.data, beta.data, y, mask)
    else:
        y = gamma.data[None, :, None, None] * ((x.data - mu[None, :, None, None]) * ivar[None, :, None, None]) \
            + beta.data[None, :, None, None]
        mask = y > 0
        y *= mask

    def back(g):
        if _HAVE_NUMBA:
            dgamma = np.zeros(c, dtype=np.float64)
            dbeta = np.zeros(c, dtype=np.float64)
            g = np.ascontiguousarray(g)
            _k_bn_bwd_sums(g, mask, x.data, mu, ivar, dgamma, dbeta)
            dgamma = dgamma.astype(x.data.dtype)
            dbeta = dbeta.astype(x.data.dtype)
            dx = np.empty_like(x.data)
            _k_bn_bwd_dx(g, mask, x.data, mu, ivar, gamma.data, dgamma, dbeta, float(m), train, dx)
        else:
            dy = g * mask
            xhat = (x.data - mu[None, :, None, None]) * ivar[None, :, None, None]
            dgamma = (dy * xhat).sum(axis=(0, 2, 3))
            dbeta = dy.sum(axis=(0, 2, 3))
            gi = (gamma.data * ivar)[None, :, None, None]
            if train:
                dy -= (dbeta / m)[None, :, None, None]
                dy -= xhat * (dgamma / m)[None, :, None, None]
            dy *= gi
            dx = dy
        gamma.accumulate(dgamma)
        beta.accumulate(dbeta)
        x.accumulate(dx, own=True)

    return _make(y, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# recurrent cells


def recurrent_step(x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One gated-recurrent (LSTM) update, composed from primitive ops.

    Gate layout along the 4U axis is (input, forget, candidate, output).
    """
    u = h.data.shape[-1]
    z = add(add(matmul(x, wx), matmul(h, wh)), b)
    i = sigmoid(narrow(z, -1, 0, u))
    f = sigmoid(narrow(z, -1, u, u))
    g = tanh(narrow(z, -1, 2 * u, u))
    o = sigmoid(narrow(z, -1, 3 * u, u))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def lstm_sequence(x: Tensor, h0: Tensor, c0: Tensor, wx: Tensor, wh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Fused LSTM pass over [T,B,D]; returns hidden states [T,B,U].

    One tape node for the whole unroll: the input projection is a single GEMM
    and the time loop runs in raw numpy, which keeps tape overhead flat in T.
    Matches iterating recurrent_step (tested against it).
    """
    t_len, bsz, d = x.data.shape
    u = h0.data.shape[-1]
    if wx.data.shape != (d, 4 * u) or wh.data.shape != (u, 4 * u) or b.data.shape != (4 * u,):
        raise ShapeError("inconsistent LSTM parameter shapes")
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    xproj = x.data.reshape(t_len * bsz, d) @ wx.data
    xproj = xproj.reshape(t_len, bsz, 4 * u) + b.data
    h = h0.data
    c = c0.data
    hs = np.empty((t_len, bsz, u), dtype=x.data.dtype)
    cache = [None] * t_len
    for t in order:
        z = xproj[t] + h @ wh.data
        i = _sigmoid_raw(z[:, :u])
        f = _sigmoid_raw(z[:, u:2 * u])
        g = np.tanh(z[:, 2 * u:3 * u])
        o = _sigmoid_raw(z[:, 3 * u:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        hs[t] = o * tc
        cache[t] = (i, f, g, o, c, tc, h)
        h = hs[t]
        c = c_new

    def back(gseq):
        dwh = np.zeros_like(wh.data)
        dxproj = np.empty((t_len, bsz, 4 * u), dtype=x.data.dtype)
        dh = np.zeros((bsz, u), dtype=x.data.dtype)
        dc = np.zeros((bsz, u), dtype=x.data.dtype)
        gseq = np.ascontiguousarray(gseq, dtype=x.data.dtype)
        for t in reversed(list(order)):
            i, f, g, o, c_prev, tc, h_prev = cache[t]
            dht = gseq[t] + dh
            dz = dxproj[t]
            do = dht * tc
            dct = dc + dht * o * (1.0 - tc * tc)
            dz[:, :u] = dct * g * i * (1 - i)
            dz[:, u:2 * u] = dct * c_prev * f * (1 - f)
            dz[:, 2 * u:3 * u] = dct * i * (1 - g * g)
            dz[:, 3 * u:] = do * o * (1 - o)
            dc = dct * f
            dwh += h_prev.T @ dz
            dh = dz @ wh.data.T
        flat = dxproj.reshape(t_len * bsz, 4 * u)
        x.accumulate((flat @ wx.data.T).reshape(t_len, bsz, d), own=True)
        h0.accumulate(dh)
        c0.accumulate(dc)
        wx.accumulate(x.data.reshape(t_len * bsz, d).T @ flat)
        wh.accumulate(dwh)
        b.accumulate(flat.sum(axis=0))

    return _make(hs, (x, h0, c0, wx, wh, b), back)


# ---------------------------------------------------------------------------
# dense / losses


def dense(x: Tensor, w: Tensor, b: Tensor, activation: str = "none") -> Tensor:
    """Affine map with weights [O,D] and bias [O], then an activation."""
    if w.data.shape[1] != x.data.shape[-1]:
        raise ShapeError(f"dense weights {w.data.shape} incompatible with input {x.data.shape}")
    y = add(matmul(x, transpose(w, (1, 0))), b)
    if activation == "none":
        return y
    if activation == "tanh":
        return tanh(y)
    if activation == "relu":
        return relu(y)
    if activation == "softmax":
        return softmax(y, axis=-1)
    raise ValueError(f"unknown activation {activation!r}")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse shapes differ: {pred.data.shape} vs {target.data.shape}")
    d = sub(pred, target)
    return tmean(mul(d, d))


def cross_entropy_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over rows of -sum(target * log(pred)), pred clamped to [1e-12, 1]."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"cross_entropy shapes differ: {pred.data.shape} vs {target.data.shape}")
    lp = log(clamp(pred, 1e-12, 1.0))
    per_row = tsum(mul(target, lp), axis=-1)
    return -tmean(per_row)


def loss(kind: str, pred: Tensor, target: Tensor) -> Tensor:
    if kind == "mse":
        return mse_loss(pred, target)
    if kind == "cross_entropy":
        return cross_entropy_loss(pred, target)
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    """RMSProp / Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], kind: str = "adam", lr: float = 1e-3,
                 rho: float = 0.9, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("adam", "rmsprop"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.kind = kind
        self.lr = lr
        self.rho = rho
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.slots = {name: self._init_slot(p) for name, p in params.items()}

    def _init_slot(self, p: Tensor):
        if self.kind == "rmsprop":
            return {"acc": np.zeros_like(p.data)}
        return {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in {name}")
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            s = self.slots[name]
            if self.kind == "rmsprop":
                s["acc"] = self.rho * s["acc"] + (1 - self.rho) * g * g
                p.data -= self.lr * g / (np.sqrt(s["acc"]) + self.eps)
            else:
                s["m"] = self.beta1 * s["m"] + (1 - self.beta1) * g
                s["v"] = self.beta2 * s["v"] + (1 - self.beta2) * g * g
                mhat = s["m"] / (1 - self.beta1 ** self.t)
                vhat = s["v"] / (1 - self.beta2 ** self.t)
                p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_snapshot(self) -> dict:
        return {
            "t": self.t,
            "slots": {k: {sk: sv.copy() for sk, sv in s.items()} for k, s in self.slots.items()},
        }

    def state_restore(self, snap: dict):
        self.t = snap["t"]
        for k, s in snap["slots"].items():
            for sk, sv in s.items():
                self.slots[k][sk] = sv.copy()


# ---------------------------------------------------------------------------
# verification harness


def grad_check(fn: Callable[[list[Tensor]], Tensor], params: Iterable[Tensor], step: float = 1e-5) -> dict:
    """Compare reverse-mode gradients against central finite differences.

    fn maps the parameter list to a scalar loss Tensor. Returns a report with
    the max relative error (relative to max(|a|, |b|, 1)).
    """
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    out = fn(params)
    out.backward()
    analytic = [p.grad.copy() for p in params]

    max_rel = 0.0
    worst = None
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = fn(params).item()
            flat[j] = orig - step
            lo = fn(params).item()
            flat[j] = orig
            fd = (hi - lo) / (2 * step)
            a = analytic[pi].reshape(-1)[j]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1.0)
            if rel > max_rel:
                max_rel = rel
                worst = (pi, j, float(a), float(fd))
    return {"max_rel_error": max_rel, "worst": worst, "n_params": sum(p.data.size for p in params)}


# ---------------------------------------------------------------------------
# parameter persistence: flat binary blob + JSON shape manifest


def save_params(path_prefix: str, arrays: dict[str, np.ndarray]):
    manifest = {}
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr)
        manifest[name] = {"shape": list(raw.shape), "dtype": str(raw.dtype), "offset": offset}
        chunks.append(raw.tobytes())
        offset += len(chunks[-1])
    with open(path_prefix + ".bin", "wb") as f:
        f.write(b"".join(chunks))
    with open(path_prefix + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_params(path_prefix: str) -> dict[str, np.ndarray]:
    with open(path_prefix + ".json") as f:
        manifest = json.load(f)
    with open(path_prefix + ".bin", "rb") as f:
        blob = f.read()
    out = {}
    for name, meta in manifest.items():
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=meta["offset"])
        out[name] = arr.reshape(meta["shape"]).copy()
    return out
