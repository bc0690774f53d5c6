"""Dense tensors and the differentiable kernels the architecture needs.

Every kernel has an analytic backward pass. Forward calls record onto the
active Tape when any input requires gradients; Tape.backward walks the
recorded ops in reverse. Kernels compute in the dtype of their inputs, so
the same code path serves float32 execution and float64 gradient checks.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import DataError, ShapeError


class Tensor:
    """N-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


_LOCAL = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Records forward ops for one episode; replays them in reverse.

    One tape belongs to one forward/backward episode on one thread. Leaf
    gradients accumulate across repeated backward calls; op outputs are
    reseeded on every call.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, *exc):
        _LOCAL.tape = None
        return False

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, out: Tensor, seed: np.ndarray | None = None):
        """Accumulate d(out)/d(leaf) into every recorded leaf's grad.

        Without an explicit seed, `out` must be scalar and is seeded with 1.
        """
        if seed is None:
            if out.size != 1:
                raise ShapeError(
                    f"backward without seed needs a scalar, got shape {out.shape}")
            seed = np.ones_like(out.data)
        else:
            seed = np.asarray(seed, dtype=out.dtype)
            if seed.shape != out.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} does not match output {out.shape}")
        recorded = [t for t, _ in self._ops]
        for t in recorded:
            t.grad = None
        out.grad = seed
        for t, backward_fn in reversed(self._ops):
            if t.grad is not None:
                backward_fn(t.grad)


def _record(out: Tensor, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], None]):
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._ops.append((out, backward_fn))


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    _record(out, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    _record(out, (a, b), backward)
    return out


def scale(x: Tensor, s: float) -> Tensor:
    out = Tensor(x.data * x.dtype.type(s))

    def backward(g):
        _accum(x, g * x.dtype.type(s))

    _record(out, (x,), backward)
    return out


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def backward(g):
        _accum(x, np.full(x.shape, float(g), dtype=x.dtype))

    _record(out, (x,), backward)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        _accum(x, g.reshape(x.shape))

    _record(out, (x,), backward)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, np.transpose(g, inv))

    _record(out, (x,), backward)
    return out


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in xs], axis=axis))
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(xs, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    _record(out, tuple(xs), backward)
    return out


# ---------------------------------------------------------------------------
# dense algebra

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b over the last axis of x; w is [Cin, Cout]."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} vs weight {w.shape}")
    out = Tensor(x.data @ w.data + b.data)

    def backward(g):
        _accum(x, g @ w.data.T)
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        _accum(w, x2.T @ g2)
        _accum(b, g2.sum(axis=0))

    _record(out, (x, w, b), backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [..., M, K] @ [..., K, N]."""
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    _record(out, (a, b), backward)
    return out


# ---------------------------------------------------------------------------
# normalization / activations

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mean = x.data.mean(axis=-1, keepdims=True)
    xm = x.data - mean
    var = (xm * xm).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xm * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def backward(g):
        n = x.shape[-1]
        _accum(beta, g.reshape(-1, n).sum(axis=0))
        _accum(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        gx = g * gamma.data
        gmean = gx.mean(axis=-1, keepdims=True)
        gdot = (gx * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (gx - gmean - xhat * gdot))

    _record(out, (x, gamma, beta), backward)
    return out


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * x.dtype.type(_INV_SQRT2)))
    out = Tensor(x.data * cdf)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * x.dtype.type(_INV_SQRT_2PI)
        _accum(x, g * (cdf + x.data * pdf))

    _record(out, (x,), backward)
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, (g - dot) * y)

    _record(out, (x,), backward)
    return out


# ---------------------------------------------------------------------------
# convolution

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0,
           groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation over NCHW with bias.

    w is [Cout, Cin/groups, Kh, Kw]; depthwise means groups == Cin.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/weight, got {x.shape}, {w.shape}")
    n, cin, h, wdt = x.shape
    cout, cg, kh, kw = w.shape
    if cin % groups != 0 or cout % groups != 0:
        raise ShapeError(f"conv2d: channels {cin}->{cout} not divisible by groups {groups}")
    if cg != cin // groups:
        raise ShapeError(f"conv2d: weight expects {cg * groups} input channels, got {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wdt + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{wdt} (pad {pad})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data

    depthwise = groups == cin == cout and stride == 1
    if depthwise:
        out_d = np.zeros((n, cout, ho, wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out_d += w.data[:, 0, i, j][None, :, None, None] * xp[:, :, i:i + ho, j:j + wo]
        out_d += b.data[None, :, None, None]
        out = Tensor(out_d)

        def backward(g):
            _accum(b, g.sum(axis=(0, 2, 3)))
            if w.requires_grad:
                gw = np.empty_like(w.data)
                for i in range(kh):
                    for j in range(kw):
                        gw[:, 0, i, j] = (g * xp[:, :, i:i + ho, j:j + wo]).sum(axis=(0, 2, 3))
                _accum(w, gw)
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + ho, j:j + wo] += w.data[:, 0, i, j][None, :, None, None] * g
                _accum(x, gxp[:, :, pad:pad + h, pad:pad + wdt] if pad else gxp)

        _record(out, (x, w, b), backward)
        return out

    og = cout // groups
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [n, groups, ho*wo, cg*kh*kw] layout shared by forward and both grads
    cols = np.ascontiguousarray(
        win.reshape(n, groups, cg, ho, wo, kh, kw).transpose(0, 1, 3, 4, 2, 5, 6)
    ).reshape(n, groups, ho * wo, cg * kh * kw)
    wm = w.data.reshape(groups, og, cg * kh * kw)
    out_m = cols @ wm.transpose(0, 2, 1)  # [n, groups, ho*wo, og]
    out_d = out_m.transpose(0, 1, 3, 2).reshape(n, cout, ho, wo) + b.data[None, :, None, None]
    out = Tensor(out_d)

    def backward(g):
        gm = g.reshape(n, groups, og, ho * wo).transpose(0, 1, 3, 2)
        _accum(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.einsum("nghc,ngho->goc", cols, gm, optimize=True)
            _accum(w, gw.reshape(w.shape))
        if x.requires_grad:
            gcols = gm @ wm  # [n, groups, ho*wo, cg*kh*kw]
            gcols = gcols.reshape(n, groups, ho, wo, cg, kh, kw).transpose(0, 1, 4, 2, 3, 5, 6)
            gcols = gcols.reshape(n, cin, ho, wo, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + (ho - 1) * stride + 1:stride,
                        j:j + (wo - 1) * stride + 1:stride] += gcols[:, :, :, :, i, j]
            _accum(x, gxp[:, :, pad:pad + h, pad:pad + wdt] if pad else gxp)

    _record(out, (x, w, b), backward)
    return out


# ---------------------------------------------------------------------------
# resampling

def _interp_matrix(n_in: int, n_out: int, align_corners: bool, dtype) -> np.ndarray:
    """Row-stochastic 1-D linear interpolation matrix [n_out, n_in]."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    o = np.arange(n_out, dtype=np.float64)
    if align_corners:
        src = o * (n_in - 1) / max(n_out - 1, 1)
    else:
        src = (o + 0.5) * n_in / n_out - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    np.add.at(m, (np.arange(n_out), lo), (1.0 - t))
    np.add.at(m, (np.arange(n_out), hi), t)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int,
                    align_corners: bool = False) -> Tensor:
    """Bilinear NCHW resize with half-pixel centers (edges clamped)."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize: need NCHW input, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: bad output size {out_h}x{out_w}")
    _, _, h, wdt = x.shape
    mh = _interp_matrix(h, out_h, align_corners, x.dtype)
    mw = _interp_matrix(wdt, out_w, align_corners, x.dtype)
    out = Tensor(np.einsum("nchw,oh,pw->ncop", x.data, mh, mw, optimize=True))

    def backward(g):
        _accum(x, np.einsum("ncop,oh,pw->nchw", g, mh, mw, optimize=True))

    _record(out, (x,), backward)
    return out


# ---------------------------------------------------------------------------
# loss

def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Softmax cross-entropy over class axis 1, averaged over scored pixels.

    logits are [B, K, H, W]; labels are [B, H, W] integer ids, with
    ignore_index excluded from the average. Raises if nothing is scored.
    """
    if logits.ndim != 4:
        raise ShapeError(f"cross_entropy: logits must be [B,K,H,W], got {logits.shape}")
    labels = np.asarray(labels)
    b, k, h, w = logits.shape
    if labels.shape != (b, h, w):
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise DataError("cross_entropy: every pixel carries the ignore id")
    safe = np.where(valid, labels, 0)
    if safe.min() < 0 or safe.max() >= k:
        bad = labels[valid & ((labels < 0) | (labels >= k))]
        raise DataError(f"cross_entropy: label ids {np.unique(bad)} outside [0, {k})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    logp = z - np.log(e.sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count
    out = Tensor(np.asarray(loss, dtype=logits.dtype))

    def backward(g):
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        gl = (p - onehot) * valid[:, None] * (float(g) / count)
        _accum(logits, gl.astype(logits.dtype, copy=False))

    _record(out, (logits,), backward)
    return out
