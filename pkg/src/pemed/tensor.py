"""Dense float tensors with reverse-mode autodiff on numpy buffers.

Model state lives in float32; verification (gradient checks, formula
oracles) builds float64 graphs with the same ops. Every op output is
checked for finiteness; NaN/Inf anywhere is an immediate error.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

from .errors import (
    BadGeometryError,
    NonFiniteError,
    NonScalarLossError,
    ShapeMismatchError,
)

_GRAD_ENABLED = True

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (rollouts, inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


class Tensor:
    """A dense n-d float array plus the tape hooks for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = _check_finite(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- inspection -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar. Accumulates into .grad fields."""
        if self.data.size != 1:
            raise NonScalarLossError(f"backward() needs a scalar, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        if self.grad is None:
            self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(data)
    out.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    return out


def _as_pair(a: Tensor, b) -> tuple[Tensor, Tensor]:
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise ShapeMismatchError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and reductions -----------------------------------------


def add(a: Tensor, b) -> Tensor:
    a, b = _as_pair(a, b)
    data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_pair(a, b)
    data = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_pair(a, b)
    data = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), bw)


def div(a: Tensor, b) -> Tensor:
    a, b = _as_pair(a, b)
    data = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(data, (a, b), bw)


def pow_const(a: Tensor, p: float) -> Tensor:
    if p == 0.0:
        return _result(np.ones_like(a.data), (a,), lambda g: (np.zeros_like(a.data),))
    data = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(data, (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=a.dtype)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _result(y, (a,), bw)


def logsigmoid(a: Tensor) -> Tensor:
    # -softplus(-x), computed without overflow on either tail
    x = a.data
    y = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        return (g * expit(-x),)

    return _result(y, (a,), bw)


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)

    def bw(g):
        return (g * (a.data > 0),)

    return _result(y, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = x * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _result(y.astype(a.dtype, copy=False), (a,), bw)


def pointwise(a: Tensor, f: str) -> Tensor:
    """Elementwise nonlinearity selected by name: sigmoid, gelu or relu."""
    try:
        return {"sigmoid": sigmoid, "gelu": gelu, "relu": relu}[f](a)
    except KeyError:
        raise ValueError(f"unknown pointwise function {f!r}") from None


# -- shape plumbing -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatchError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape

    def bw(g):
        return (g.reshape(old),)

    return _result(a.data.reshape(shape), (a,), bw)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _result(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bw)


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatchError(f"transpose2d expects rank 2, got {a.shape}")
    return permute(a, (1, 0))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.dtype != ref.dtype:
            raise ShapeMismatchError("concat inputs must share rank and dtype")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _result(data, tensors, bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeMismatchError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of {a.shape}"
        )
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _result(a.data[idx].copy(), (a,), bw)


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul expects rank-2 operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"inner extents differ: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _result(data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last axis; leading axes pass through."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeMismatchError(f"linear: {x.shape} x {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeMismatchError(f"linear bias {b.shape} != ({w.shape[1]},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    data = (x2 @ w.data + b.data).reshape(*lead, w.shape[1])

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    return _result(data, (x, w, b), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax of a 2-d tensor, max-subtracted for stability."""
    if x.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows expects rank 2, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _result(y.astype(x.dtype, copy=False), (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError(f"layer_norm params must be ({d},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bw(g):
        lead = (-1, d)
        gd = (g * gain.data).reshape(lead)
        xh = xhat.reshape(lead)
        iv = inv.reshape(-1, 1)
        m1 = gd.mean(axis=1, keepdims=True)
        m2 = (gd * xh).mean(axis=1, keepdims=True)
        dx = ((gd - m1 - xh * m2) * iv).reshape(x.shape)
        red = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=red)
        dbias = g.sum(axis=red)
        return dx, dgain, dbias

    return _result(data.astype(x.dtype, copy=False), (x, gain, bias), bw)


# -- attention ------------------------------------------------------------


@dataclass(frozen=True)
class AttentionConfig:
    """Head layout and scaling rule for scaled dot-product attention.

    scale_mode "paper_dk" divides scores by d_k itself; "sqrt_dk" uses the
    conventional sqrt(d_k).
    """

    d_model: int
    n_heads: int = 1
    scale_mode: str = "paper_dk"
    d_k: int = field(init=False)

    def __post_init__(self):
        if self.n_heads <= 0 or self.d_model % self.n_heads != 0:
            raise ValueError(f"n_heads {self.n_heads} must divide d_model {self.d_model}")
        if self.scale_mode not in ("paper_dk", "sqrt_dk"):
            raise ValueError(f"unknown scale_mode {self.scale_mode!r}")
        object.__setattr__(self, "d_k", self.d_model // self.n_heads)

    @property
    def scale(self) -> float:
        return float(self.d_k) if self.scale_mode == "paper_dk" else float(np.sqrt(self.d_k))


def attention(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig) -> Tensor:
    """softmax(Q Kᵀ / s) V per head, heads split and re-concatenated."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeMismatchError("attention expects rank-2 Q, K, V")
    if q.shape[1] != cfg.d_model or k.shape[1] != cfg.d_model or v.shape[1] != cfg.d_model:
        raise ShapeMismatchError(
            f"attention width mismatch: {q.shape}/{k.shape}/{v.shape} vs d_model {cfg.d_model}"
        )
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatchError(f"K and V token counts differ: {k.shape} vs {v.shape}")
    inv_scale = 1.0 / cfg.scale
    heads = []
    for h in range(cfg.n_heads):
        lo = h * cfg.d_k
        qh = narrow(q, 1, lo, cfg.d_k)
        kh = narrow(k, 1, lo, cfg.d_k)
        vh = narrow(v, 1, lo, cfg.d_k)
        scores = mul(matmul(qh, transpose2d(kh)), inv_scale)
        heads.append(matmul(softmax_rows(scores), vh))
    return heads[0] if len(heads) == 1 else concat(heads, axis=1)


# -- convolution and resampling ------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of CxHxW input with OxCxkxk kernel, zero padding."""
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeMismatchError(f"conv2d expects CxHxW and OxCxkxk, got {x.shape}, {w.shape}")
    c_in, h, wid = x.shape
    c_out, c_k, kh, kw = w.shape
    if kh != kw:
        raise ShapeMismatchError("conv2d kernel must be square")
    if c_k != c_in:
        raise ShapeMismatchError(f"kernel channels {c_k} != input channels {c_in}")
    if kh % 2 == 0:
        raise BadGeometryError("conv2d kernel extent must be odd")
    k = kh
    if (h + 2 * pad - k) % stride != 0 or (wid + 2 * pad - k) % stride != 0:
        raise BadGeometryError(f"geometry not integral: H={h} W={wid} k={k} stride={stride} pad={pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wid + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise BadGeometryError("empty output grid")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # win: (C, Ho, Wo, k, k)
    data = np.tensordot(w.data, win, axes=([1, 2, 3], [0, 3, 4]))

    def bw(g):
        dw = np.tensordot(g, win, axes=([1, 2], [1, 2]))
        dxp = np.zeros_like(xp)
        # g: (O, Ho, Wo); accumulate each kernel tap as a strided slice add
        gw = np.tensordot(w.data, g, axes=([0], [0]))  # (C, k, k, Ho, Wo)
        for dy in range(k):
            for dx in range(k):
                dxp[:, dy : dy + stride * ho : stride, dx : dx + stride * wo : stride] += gw[
                    :, dy, dx
                ]
        dx_ = dxp[:, pad : pad + h, pad : pad + wid] if pad else dxp
        return dx_, dw

    return _result(data.astype(x.dtype, copy=False), (x, w), bw)


_RESAMPLE_CACHE: dict[tuple, np.ndarray] = {}


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Row-stochastic 1-d bilinear interpolation matrix (half-pixel centers)."""
    key = (n_out, n_in, np.dtype(dtype).name)
    mat = _RESAMPLE_CACHE.get(key)
    if mat is None:
        mat = np.zeros((n_out, n_in), dtype=np.float64)
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        mat[np.arange(n_out), i0] += 1.0 - frac
        mat[np.arange(n_out), i1] += frac
        mat = mat.astype(dtype)
        _RESAMPLE_CACHE[key] = mat
    return mat


def bilinear_upsample(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Resample CxHxW to Cx(out_h)x(out_w); separable, exact on constants."""
    if x.ndim != 3:
        raise ShapeMismatchError(f"bilinear_upsample expects CxHxW, got {x.shape}")
    c, h, w = x.shape
    oh, ow = out_hw
    ry = _interp_matrix(oh, h, x.dtype)
    cx = _interp_matrix(ow, w, x.dtype)
    data = np.einsum("ij,cjk,lk->cil", ry, x.data, cx, optimize=True)

    def bw(g):
        return (np.einsum("ji,cjk,kl->cil", ry, g, cx, optimize=True),)

    return _result(data, (x,), bw)


# -- verification ---------------------------------------------------------


def grad_check(loss_fn, params, eps: float = 1e-3, sample_per_param: int | None = None, rng=None) -> float:
    """Worst relative error between reverse-mode and central finite differences.

    loss_fn rebuilds a scalar loss from the live param tensors on every
    call; params must be float64 so the differences are trustworthy. With
    sample_per_param set, only that many seeded random elements of each
    parameter are probed.
    """
    if isinstance(params, dict):
        params = list(params.values())
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")
        p.zero_grad()
    loss = loss_fn()
    if loss.size != 1:
        raise NonScalarLossError(f"loss has shape {loss.shape}")
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            if sample_per_param is not None and sample_per_param < n:
                idxs = rng.choice(n, size=sample_per_param, replace=False)
            else:
                idxs = range(n)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = loss_fn().item()
                flat[i] = orig - eps
                f_minus = loss_fn().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = ana.reshape(-1)[i]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-2)
                if rel > worst:
                    worst = rel
    return worst
