"""Reverse-mode autodiff over numpy arrays, limited to the ops the U-Nets need.

Each op returns a new Tensor holding a closure that pushes the upstream
gradient to its parents; ``Tensor.backward`` walks the graph in reverse
topological order. Inputs are never mutated.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_EPS = 1e-7


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._prev)
        self.grad = grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, k):
        return scale(self, float(k))

    __rmul__ = __mul__


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")

    def bw(g):
        _accum(a, g)
        _accum(b, g)
    return _result(a.data + b.data, (a, b), bw)


def scale(x: Tensor, k: float) -> Tensor:
    return affine(x, k, 0.0)


def affine(x: Tensor, k: float, c: float) -> Tensor:
    """k * x + c with constant k, c."""
    def bw(g):
        _accum(x, g * k)
    return _result(x.data * x.data.dtype.type(k) + x.data.dtype.type(c), (x,), bw)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def bw(g):
        _accum(x, g * pos)
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)

    def bw(g):
        _accum(x, g * s * (1 - s))
    return _result(s, (x,), bw)


# --- spatial ---------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*k*k) patches with zero 'same' padding."""
    B, C, H, W = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # B,C,H,W,k,k
    return cols.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * k * k)


def _correlate(x: np.ndarray, w: np.ndarray, cols=None) -> np.ndarray:
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    cols = _im2col(x, k) if cols is None else cols
    out = cols @ w.reshape(O, C * k * k).T
    return np.ascontiguousarray(out.reshape(B, H, W, O).transpose(0, 3, 1, 2))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding (odd kernels)."""
    B, C, H, W = x.shape
    O, Ci, k, k2 = w.shape
    if Ci != C or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    cols = _im2col(x.data, k)
    out = _correlate(x.data, w.data, cols)
    if b is not None:
        out += b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        if w.requires_grad:
            gm = g.transpose(0, 2, 3, 1).reshape(B * H * W, O)
            _accum(w, (gm.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            # input gradient = same-padded correlation with the flipped, transposed kernel
            wt = np.ascontiguousarray(w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            _accum(x, _correlate(g, wt))
    return _result(out, parents, bw)


def tconv2(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Transposed convolution, 2x2 kernel, stride 2: (B,C,H,W) -> (B,O,2H,2W).

    Weight layout is (in_ch, out_ch, 2, 2).
    """
    B, C, H, W = x.shape
    Ci, O, kh, kw = w.shape
    if Ci != C or (kh, kw) != (2, 2):
        raise ShapeError(f"tconv2: input {x.shape} incompatible with weight {w.shape}")
    xm = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    wm = w.data.reshape(C, O * 4)
    y = (xm @ wm).reshape(B, H, W, O, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(B, O, 2 * H, 2 * W)
    if b is not None:
        y = y + b.data[None, :, None, None]
    y = np.ascontiguousarray(y)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gm = g.reshape(B, O, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5).reshape(B * H * W, O * 4)
        if w.requires_grad:
            _accum(w, (xm.T @ gm).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            _accum(x, (gm @ wm.T).reshape(B, H, W, C).transpose(0, 3, 1, 2))
    return _result(y, parents, bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling; gradient goes to the first maximum in row-major order."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {H}x{W}")
    blocks = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        d = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
        d = d.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        _accum(x, d)
    return _result(out, (x,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def bw(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])
    return _result(np.concatenate([a.data, b.data], axis=1), (a, b), bw)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over (batch, H, W).

    In training mode the running statistics arrays are updated in place
    (unbiased variance, like the usual framework convention).
    """
    B, C, H, W = x.shape
    shp = (1, C, 1, 1)
    if training:
        if B < 2:
            raise ShapeError("batchnorm in training mode needs batch size >= 2")
        n = B * H * W
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shp)) * inv.reshape(shp)
    out = (xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)).astype(x.dtype)

    def bw(g):
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shp)
            if training:
                m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                _accum(x, (dxhat - m1 - xhat * m2) * inv.reshape(shp))
            else:
                _accum(x, dxhat * inv.reshape(shp))
    return _result(out, (x, gamma, beta), bw)


# --- losses --------------------------------------------------------------

def mse_db(pred: Tensor, target) -> Tensor:
    """Mean squared difference of dB-valued maps."""
    t = np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_db: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size

    def bw(g):
        _accum(pred, g * (2.0 / n) * diff)
    return _result(np.asarray(np.mean(diff * diff)), (pred,), bw)


def bce(prob: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7]."""
    t = np.asarray(target, dtype=prob.dtype)
    if prob.shape != t.shape:
        raise ShapeError(f"bce: {prob.shape} vs {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce target must be binary {0, 1}")
    p = np.clip(prob.data, BCE_EPS, 1 - BCE_EPS)
    live = (prob.data >= BCE_EPS) & (prob.data <= 1 - BCE_EPS)
    n = p.size
    loss = -np.mean(t * np.log(p) + (1 - t) * np.log1p(-p))

    def bw(g):
        _accum(prob, g * live * (p - t) / (p * (1 - p)) / n)
    return _result(np.asarray(loss), (prob,), bw)
