"""Dense float64 tensors with reverse-mode automatic differentiation.

Every forward op is a pure numpy computation; ops that participate in the
gradient tape attach a closure that scatters the upstream gradient to the
parents.  The graph is per-tensor (no global tape), so inference on disjoint
tensors is safe from concurrent threads while a single backward pass stays
confined to whoever owns the loss tensor.
"""

from __future__ import annotations

import contextlib
import contextvars
import math

import numpy as np
from scipy.special import ndtr

from .errors import ConfigurationError, NumericError, UsageError

_grad_enabled = contextvars.ContextVar("edic_grad_enabled", default=True)

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """N-dimensional float64 array, optionally tracked by the gradient tape.

    `grad` is populated by `backward()` on every tensor in the graph that
    has `requires_grad` set; it always matches `data` in shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def from_op(data: np.ndarray, parents, backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled.get() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Accumulates into `.grad` of every reachable tensor with
        `requires_grad`; leaves previously populated grads in place so
        repeated calls add up (callers zero grads between steps).
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NumericError("backward() called on a non-finite loss")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# -- broadcasting support ------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (the reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor.from_op(a.data + b.data, (a, b), None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor.from_op(a.data - b.data, (a, b), None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor.from_op(a.data * b.data, (a, b), None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor.from_op(a.data / b.data, (a, b), None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    out = Tensor.from_op(a.data**exponent, (a,), None)

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    out._backward = backward if out.requires_grad else None
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    out = Tensor.from_op(y, (a,), None)

    def backward(g):
        a._accumulate(g * 0.5 / y)

    out._backward = backward if out.requires_grad else None
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor.from_op(y, (a,), None)

    def backward(g):
        a._accumulate(g * y)

    out._backward = backward if out.requires_grad else None
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor.from_op(np.log(a.data), (a,), None)

    def backward(g):
        a._accumulate(g / a.data)

    out._backward = backward if out.requires_grad else None
    return out


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes where the input is not clamped."""
    a = as_tensor(a)
    out = Tensor.from_op(np.maximum(a.data, floor), (a,), None)

    def backward(g):
        a._accumulate(g * (a.data >= floor))

    out._backward = backward if out.requires_grad else None
    return out


# -- reductions & shape ops --------------------------------------------------


def tsum(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor.from_op(np.asarray(a.data.sum()), (a,), None)

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    out._backward = backward if out.requires_grad else None
    return out


def tmean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = Tensor.from_op(np.asarray(a.data.mean()), (a,), None)

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.data.shape).copy())

    out._backward = backward if out.requires_grad else None
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    out = Tensor.from_op(a.data.reshape(shape), (a,), None)

    def backward(g):
        a._accumulate(g.reshape(old))

    out._backward = backward if out.requires_grad else None
    return out


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor.from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), None)

    def backward(g):
        a._accumulate(g.transpose(inverse))

    out._backward = backward if out.requires_grad else None
    return out


def channel_slice(a, lo: int, hi: int) -> Tensor:
    """Slice [lo, hi) along axis 1 of a (B, C, ...) tensor."""
    a = as_tensor(a)
    out = Tensor.from_op(np.ascontiguousarray(a.data[:, lo:hi]), (a,), None)

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        a._accumulate(full)

    out._backward = backward if out.requires_grad else None
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor.from_op(a.data @ b.data, (a, b), None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward = backward if out.requires_grad else None
    return out


def bmm(a, b) -> Tensor:
    """Batched matmul: (..., m, k) @ (..., k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor.from_op(np.matmul(a.data, b.data), (a, b), None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    out._backward = backward if out.requires_grad else None
    return out


# -- activations --------------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor.from_op(np.maximum(a.data, 0.0), (a,), None)

    def backward(g):
        a._accumulate(g * (a.data > 0.0))

    out._backward = backward if out.requires_grad else None
    return out


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    out = Tensor.from_op(np.where(a.data > 0.0, a.data, slope * a.data), (a,), None)

    def backward(g):
        a._accumulate(g * np.where(a.data > 0.0, 1.0, slope))

    out._backward = backward if out.requires_grad else None
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor.from_op(y, (a,), None)

    def backward(g):
        a._accumulate(g * y * (1.0 - y))

    out._backward = backward if out.requires_grad else None
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor.from_op(y, (a,), None)

    def backward(g):
        a._accumulate(g * (1.0 - y * y))

    out._backward = backward if out.requires_grad else None
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    # log1p(exp(-|x|)) + max(x, 0) is overflow-safe
    y = np.log1p(np.exp(-np.abs(a.data))) + np.maximum(a.data, 0.0)
    out = Tensor.from_op(y, (a,), None)

    def backward(g):
        with np.errstate(over="ignore"):
            s = 1.0 / (1.0 + np.exp(-a.data))
        a._accumulate(g * s)

    out._backward = backward if out.requires_grad else None
    return out


def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor.from_op(y, (a,), None)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (g - dot))

    out._backward = backward if out.requires_grad else None
    return out


def gaussian_cdf(a) -> Tensor:
    """Standard normal CDF, accurate to ~1e-16 absolute."""
    a = as_tensor(a)
    out = Tensor.from_op(ndtr(a.data), (a,), None)

    def backward(g):
        a._accumulate(g * _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data))

    out._backward = backward if out.requires_grad else None
    return out


# -- convolution ---------------------------------------------------------------


def _conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B, C, kh, kw, Ho, Wo) patch tensor."""
    b, c, h, w = x.shape
    ho = _conv_out_extent(h, kh, stride, pad)
    wo = _conv_out_extent(w, kw, stride, pad)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def _col2im(cols: np.ndarray, h: int, w: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of `_im2col`: scatter-add patches back to (B, C, H, W)."""
    b, c, kh, kw, ho, wo = cols.shape
    buf = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad > 0:
        buf = buf[:, :, pad : pad + h, pad : pad + w]
    return buf


def _check_conv_args(x: Tensor, kernel: Tensor, stride: int, pad: int, transposed: bool):
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ConfigurationError(
            f"conv expects 4-d input and kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ConfigurationError(f"pad must be >= 0, got {pad}")
    cin_axis = 0 if transposed else 1
    if x.data.shape[1] != kernel.data.shape[cin_axis]:
        raise ConfigurationError(
            f"channel mismatch: input has {x.data.shape[1]} channels, "
            f"kernel expects {kernel.data.shape[cin_axis]}"
        )
    if not transposed:
        kh, kw = kernel.data.shape[2:]
        if x.data.shape[2] + 2 * pad < kh or x.data.shape[3] + 2 * pad < kw:
            raise ConfigurationError(
                f"spatial dims {x.data.shape[2:]} + 2*pad={pad} smaller than kernel {(kh, kw)}"
            )


def conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution (cross-correlation), zero padding.

    x: (B, Cin, H, W); kernel: (Cout, Cin, kh, kw); bias: (Cout,) or None.
    Output spatial extent: floor((n + 2*pad - k) / stride) + 1.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv_args(x, kernel, stride, pad, transposed=False)
    b, cin, h, w = x.data.shape
    cout, _, kh, kw = kernel.data.shape
    ho = _conv_out_extent(h, kh, stride, pad)
    wo = _conv_out_extent(w, kw, stride, pad)

    cols = _im2col(x.data, kh, kw, stride, pad).reshape(b, cin * kh * kw, ho * wo)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    y = np.matmul(wmat, cols).reshape(b, cout, ho, wo)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (cout,):
            raise ConfigurationError(f"bias shape {bias.data.shape} != ({cout},)")
        y = y + bias.data[None, :, None, None]
        parents.append(bias)

    out = Tensor.from_op(y, parents, None)

    def backward(g):
        gf = g.reshape(b, cout, ho * wo)
        if kernel.requires_grad:
            dw = np.einsum("bol,bkl->ok", gf, cols, optimize=True)
            kernel._accumulate(dw.reshape(kernel.data.shape))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gf).reshape(b, cin, kh, kw, ho, wo)
            x._accumulate(_col2im(dcols, h, w, stride, pad))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    out._backward = backward if out.requires_grad else None
    return out


def conv2d_transpose(x, kernel, bias=None, stride: int = 1, pad: int = 0, output_pad: int = 0) -> Tensor:
    """Transposed convolution; the exact adjoint of `conv2d`'s linear map.

    x: (B, Ca, H, W); kernel: (Ca, Cb, kh, kw) -> (B, Cb, H', W') with
    H' = (H-1)*stride - 2*pad + kh + output_pad.  With zero bias,
    <conv2d(u, K), v> == <u, conv2d_transpose(v, K)> for matching geometry.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv_args(x, kernel, stride, pad, transposed=True)
    if output_pad < 0 or output_pad >= stride:
        raise ConfigurationError(f"output_pad must be in [0, stride), got {output_pad}")
    b, ca, h, w = x.data.shape
    _, cb, kh, kw = kernel.data.shape
    ho = (h - 1) * stride - 2 * pad + kh + output_pad
    wo = (w - 1) * stride - 2 * pad + kw + output_pad
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"transposed conv output {(ho, wo)} is empty")

    wmat = kernel.data.reshape(ca, cb * kh * kw)
    xf = x.data.reshape(b, ca, h * w)
    cols = np.einsum("ak,bal->bkl", wmat, xf, optimize=True)
    y = _col2im(cols.reshape(b, cb, kh, kw, h, w), ho, wo, stride, pad)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (cb,):
            raise ConfigurationError(f"bias shape {bias.data.shape} != ({cb},)")
        y = y + bias.data[None, :, None, None]
        parents.append(bias)

    out = Tensor.from_op(y, parents, None)

    def backward(g):
        gcols = _im2col(g, kh, kw, stride, pad).reshape(b, cb * kh * kw, h * w)
        if x.requires_grad:
            dx = np.einsum("ak,bkl->bal", wmat, gcols, optimize=True)
            x._accumulate(dx.reshape(b, ca, h, w))
        if kernel.requires_grad:
            dw = np.einsum("bal,bkl->ak", xf, gcols, optimize=True)
            kernel._accumulate(dw.reshape(kernel.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    out._backward = backward if out.requires_grad else None
    return out


# -- normalization & pooling ---------------------------------------------------


def _gdn_pool(x2: np.ndarray, beta: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    b, c, h, w = x2.shape
    mixed = np.matmul(gamma, x2.reshape(b, c, h * w)).reshape(b, c, h, w)
    return mixed + beta[None, :, None, None]


def gdn(x, beta, gamma) -> Tensor:
    """Generalized divisive normalization: y_c = x_c / sqrt(beta_c + sum_j gamma_cj x_j^2).

    `beta` (C,) and `gamma` (C, C) are the effective (already positive)
    coefficients; callers keep positivity via their own reparameterization.
    """
    x, beta, gamma = as_tensor(x), as_tensor(beta), as_tensor(gamma)
    c = x.data.shape[1]
    if beta.data.shape != (c,) or gamma.data.shape != (c, c):
        raise ConfigurationError(
            f"gdn params for C={c} must be ({c},) and ({c},{c}), "
            f"got {beta.data.shape} and {gamma.data.shape}"
        )
    x2 = x.data * x.data
    pool = _gdn_pool(x2, beta.data, gamma.data)
    s = np.sqrt(pool)
    y = x.data / s
    if not np.isfinite(y).all():
        raise NumericError("gdn produced non-finite values (beta floor violated?)")
    out = Tensor.from_op(y, (x, beta, gamma), None)

    def backward(g):
        t = g * x.data / (pool * s)  # g * x / s^3
        if x.requires_grad:
            bdim, cdim, h, w = x.data.shape
            mix = np.matmul(gamma.data.T, t.reshape(bdim, cdim, h * w)).reshape(x.data.shape)
            x._accumulate(g / s - x.data * mix)
        if beta.requires_grad:
            beta._accumulate(-0.5 * t.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accumulate(-0.5 * np.einsum("bchw,bjhw->cj", t, x2, optimize=True))

    out._backward = backward if out.requires_grad else None
    return out


def igdn(x, beta, gamma, max_iter: int = 250, tol: float = 1e-14) -> Tensor:
    """Exact inverse of `gdn` with the same coefficients.

    Solves v = x * sqrt(beta + gamma @ v^2) by fixed-point iteration
    (multiplicative updates), so gdn(igdn(x)) == x and igdn(gdn(x)) == x to
    solver tolerance.  Gradients come from the implicit function theorem:
    one (C, C) linear solve per spatial location, no unrolling.
    """
    x, beta, gamma = as_tensor(x), as_tensor(beta), as_tensor(gamma)
    c = x.data.shape[1]
    if beta.data.shape != (c,) or gamma.data.shape != (c, c):
        raise ConfigurationError(
            f"igdn params for C={c} must be ({c},) and ({c},{c}), "
            f"got {beta.data.shape} and {gamma.data.shape}"
        )
    v = x.data.copy()
    for _ in range(max_iter):
        pool = _gdn_pool(v * v, beta.data, gamma.data)
        v_next = x.data * np.sqrt(pool)
        delta = np.max(np.abs(v_next - v))
        v = v_next
        if not np.isfinite(delta):
            raise NumericError("igdn fixed-point iteration diverged")
        if delta <= tol * (1.0 + np.max(np.abs(v))):
            break
    pool = _gdn_pool(v * v, beta.data, gamma.data)
    s = np.sqrt(pool)
    if not np.isfinite(v).all():
        raise NumericError("igdn produced non-finite values")
    out = Tensor.from_op(v, (x, beta, gamma), None)

    def backward(g):
        # u = gdn(v); J = d gdn / d v at v; solve J^T w = g per location.
        b, cdim, h, w = v.shape
        vt = v.transpose(0, 2, 3, 1).reshape(-1, cdim)          # (L, C)
        st = s.transpose(0, 2, 3, 1).reshape(-1, cdim)
        gt = g.transpose(0, 2, 3, 1).reshape(-1, cdim)
        inv_s = 1.0 / st
        a = vt * inv_s**3                                        # v / s^3
        # J[c, j] = delta_cj / s_c - (v_c / s_c^3) * gamma_cj * v_j
        jac = inv_s[:, :, None] * np.eye(cdim) - a[:, :, None] * gamma.data[None] * vt[:, None, :]
        wvec = np.linalg.solve(np.swapaxes(jac, 1, 2), gt[:, :, None])[:, :, 0]
        if x.requires_grad:
            x._accumulate(wvec.reshape(b, h, w, cdim).transpose(0, 3, 1, 2))
        t = wvec * a                                             # w * v / s^3
        if beta.requires_grad:
            beta._accumulate(0.5 * t.sum(axis=0))
        if gamma.requires_grad:
            gamma._accumulate(0.5 * (t.T @ (vt * vt)))

    out._backward = backward if out.requires_grad else None
    return out


def global_avg_pool(x) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ConfigurationError(f"global_avg_pool expects 4-d input, got {x.data.shape}")
    b, c, h, w = x.data.shape
    out = Tensor.from_op(x.data.mean(axis=(2, 3)), (x,), None)

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy())

    out._backward = backward if out.requires_grad else None
    return out


def avg_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling; spatial dims must divide by k."""
    x = as_tensor(x)
    b, c, h, w = x.data.shape
    if h % k or w % k:
        raise ConfigurationError(f"avg_pool2d: dims {(h, w)} not divisible by {k}")
    y = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))
    out = Tensor.from_op(y, (x,), None)

    def backward(g):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        x._accumulate(up)

    out._backward = backward if out.requires_grad else None
    return out


def fully_connected(x, weight, bias=None) -> Tensor:
    """x: (B, Cin), weight: (Cout, Cin) -> (B, Cout)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ConfigurationError(
            f"fully_connected shapes incompatible: {x.data.shape} vs {weight.data.shape}"
        )
    y = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data[None, :]
        parents.append(bias)
    out = Tensor.from_op(y, parents, None)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    out._backward = backward if out.requires_grad else None
    return out
