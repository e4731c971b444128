"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Every tensor holds float64 data in row-major order. Operations record
themselves on the tensors they produce (parents + a backward closure), and
``backward`` replays those records in reverse creation order, which is a
valid topological order because an operation can only consume tensors that
already exist. Gradients accumulate additively across fan-out and are only
materialized on tensors with ``requires_grad`` set (directly or inherited).

The engine is single-threaded and has no global mutable state besides the
autograd on/off switch, so independent graphs can live in parallel
processes safely.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / numeric probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 n-d array node in a reverse-mode differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_ids)

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
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; all routes through the op functions below.
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
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: upstream may hand the same buffer to several parents
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def backward(loss: Tensor):
    """Populate gradients of everything reachable from a scalar loss.

    Sweeps the recorded graph in reverse creation order; contributions from
    fan-out sum. Tensors with ``requires_grad`` False keep ``grad`` absent.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._id)
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    for t in reversed(nodes):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


# ---------------------------------------------------------------------------
# Elementwise and reduction ops


def _binary_shapes(a: Tensor, b: Tensor, name: str):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} do not match")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Only scalar-vs-array mixing is supported, so a full sum suffices.
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "div")
    out = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    # Subgradient at 0 is 0.
    mask = x.data > 0

    def bw(g):
        _accum(x, g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    # exp on -|x| only, so large magnitudes never overflow.
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        _accum(x, g * s * (1.0 - s))

    return _make(s, (x,), bw)


def reduce_sum(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, np.full_like(x.data, g.reshape(())))

    return _make(np.sum(x.data).reshape(()), (x,), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two [N,C,H,W] tensors along the channel axis."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError(f"concat_channels: need 4-d tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: N/H/W mismatch between {a.shape} and {b.shape}")
    ca = a.shape[1]

    def bw(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Column slice of a 2-d tensor; backward scatters into the source range."""
    if x.ndim != 2:
        raise ValueError(f"slice_cols: need a 2-d tensor, got {x.shape}")
    if not (0 <= start <= stop <= x.shape[1]):
        raise ValueError(f"slice_cols: range [{start}, {stop}) outside width {x.shape[1]}")

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, start:stop] = g
            _accum(x, full)

    return _make(x.data[:, start:stop].copy(), (x,), bw)


# ---------------------------------------------------------------------------
# Structured ops


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: [N,Din] x [Dout,Din]^T + [Dout] -> [N,Dout]."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ValueError(f"linear: bad ranks for shapes {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ValueError(f"linear: shapes {x.shape}, {w.shape}, {b.shape} are inconsistent")

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ w.data)
        if w.requires_grad:
            _accum(w, g.T @ x.data)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _make(x.data @ w.data.T + b.data, (x, w, b), bw)


def per_channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """out[n,c,h,w] = gamma[n,c] * x[n,c,h,w] + beta[n,c]."""
    if x.ndim != 4:
        raise ValueError(f"per_channel_affine: need [N,C,H,W] input, got {x.shape}")
    if gamma.shape != x.shape[:2] or beta.shape != x.shape[:2]:
        raise ValueError(
            f"per_channel_affine: gamma {gamma.shape} / beta {beta.shape} "
            f"do not match input batch/channels {x.shape[:2]}"
        )
    gd = gamma.data[:, :, None, None]

    def bw(g):
        if x.requires_grad:
            _accum(x, g * gd)
        if gamma.requires_grad:
            _accum(gamma, np.einsum("nchw,nchw->nc", g, x.data))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(2, 3)))

    return _make(gd * x.data + beta.data[:, :, None, None], (x, gamma, beta), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """Batched 2-d cross-correlation: [N,Cin,H,W] * [Cout,Cin,kh,kw] -> [N,Cout,H',W']."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input and weight, got {x.shape} and {w.shape}")
    if b.ndim != 1 or b.shape[0] != w.shape[0]:
        raise ValueError(f"conv2d: bias {b.shape} does not match weight {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input channels {x.shape} do not match weight {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride {stride} or padding {padding}")
    n, cin, h, wdt = x.shape
    cout, _, kh, kw = w.shape
    if kh > h + 2 * padding or kw > wdt + 2 * padding:
        raise ValueError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # im2col once; reused by the weight gradient
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2) + b.data[:, None, None]

    def bw(g):
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        gmat = None
        if w.requires_grad:
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
            _accum(w, (gmat.T @ cols).reshape(w.data.shape))
        if x.requires_grad:
            if stride == 1:
                # full correlation of the upstream gradient with the flipped kernel
                gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
                gcols = np.ascontiguousarray(gwin.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, cout * kh * kw)
                wflip = w.data[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(cout * kh * kw, cin)
                gxp = (gcols @ wflip).reshape(n, h + 2 * padding, wdt + 2 * padding, cin).transpose(0, 3, 1, 2)
            else:
                t = np.tensordot(g, w.data, axes=((1,), (0,)))  # N,H',W',Cin,kh,kw
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.moveaxis(
                            t[..., i, j], 3, 1
                        )
            _accum(x, gxp[:, :, padding:padding + h, padding:padding + wdt] if padding else gxp)

    return _make(out, (x, w, b), bw)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution (adjoint of conv2d with the same weight).

    Input [N,Cin,H,W], weight [Cin,Cout,kh,kw], output spatial size
    (H-1)*stride + kh.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv_transpose2d: need 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose2d: input channels {x.shape} do not match weight {w.shape}")
    if stride < 1:
        raise ValueError(f"conv_transpose2d: stride must be positive, got {stride}")
    n, cin, h, wdt = x.shape
    _, cout, kh, kw = w.shape
    ho, wo = (h - 1) * stride + kh, (wdt - 1) * stride + kw

    t = np.tensordot(x.data, w.data, axes=((1,), (0,)))  # N,H,W,Cout,kh,kw
    out = np.zeros((n, cout, ho, wo))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * h:stride, j:j + stride * wdt:stride] += np.moveaxis(t[..., i, j], 3, 1)

    def bw(g):
        win = sliding_window_view(g, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        if x.requires_grad:
            _accum(x, np.moveaxis(np.tensordot(win, w.data, axes=((1, 4, 5), (1, 2, 3))), 3, 1))
        if w.requires_grad:
            _accum(w, np.tensordot(x.data, win, axes=((0, 2, 3), (0, 2, 3))))

    return _make(out, (x, w), bw)


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; H and W must be divisible by k."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2d: need [N,C,H,W] input, got {x.shape}")
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ValueError(f"maxpool2d: spatial size {(h, w)} not divisible by k={k}")
    ho, wo = h // k, w // k
    windows = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    # argmax returns the first maximum, i.e. row-major scan order within the window
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        if not x.requires_grad:
            return
        gw = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        _accum(x, gw.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# Verification


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the tensor to a scalar Tensor. The error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if h <= 0:
        raise ValueError("grad_check: step must be positive")
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
