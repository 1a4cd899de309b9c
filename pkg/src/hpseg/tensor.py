"""Reverse-mode autodiff over dense numpy arrays.

A small, closed operation set: everything the segmentation model needs
(linear maps, attention primitives, normalization, activations, small-kernel
convolution, bilinear resampling, reductions, fused losses) and nothing else.
Values are float32 by default; gradient checking runs the same graph in
float64.

Gradients accumulate into ``Tensor.grad`` during ``backward()``. Forward
evaluation inside ``no_grad()`` builds no graph.
"""

from __future__ import annotations

from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from .errors import NumericError, ShapeError, UsageError

Array = np.ndarray

_GRAD_ENABLED = True
_FINITE_CHECKS = False


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def finite_checks(enabled: bool = True):
    """Verify every op output is finite inside the block (debug/test aid)."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


def _check_finite(data: Array, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Dense array node in the reverse-mode graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backprop=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: Array = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self._parents = _parents if self.requires_grad else ()
        self._backprop = _backprop if self.requires_grad else None

    @property
    def shape(self):
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable node."""
        if self.data.size != 1:
            raise UsageError("backward() requires a scalar tensor")
        if not self.requires_grad:
            return
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _wrap(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(data: Array, parents: tuple, backprop, op: str) -> Tensor:
    _check_finite(data, op)
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents, _backprop=backprop)


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out_data = a.data + b.data

    def backprop(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backprop, "add")


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out_data = a.data * b.data

    def backprop(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backprop, "mul")


def div(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out_data = a.data / b.data

    def backprop(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out_data, (a, b), backprop, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backprop(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _node(out_data, (a, b), backprop, "matmul")


# -- shape ------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def backprop(g):
        _accum(a, g.reshape(a.shape))

    return _node(out_data, (a,), backprop, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backprop(g):
        _accum(a, g.transpose(inv))

    return _node(out_data, (a,), backprop, "transpose")


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows along the first axis; scatter-adds on the way back."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = a.data[idx]

    def backprop(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return _node(out_data, (a,), backprop, "take_rows")


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backprop(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _node(out_data, (a,), backprop, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- pointwise ----------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    out_data = np.maximum(a.data, 0)

    def backprop(g):
        _accum(a, g * (a.data > 0))

    return _node(out_data, (a,), backprop, "relu")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU; smooth, so central differences behave."""
    a = _wrap(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backprop(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        _accum(a, g * da)

    return _node(out_data, (a,), backprop, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    a = _wrap(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backprop(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backprop, "sigmoid")


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def backprop(g):
        _accum(a, g * out_data)

    return _node(out_data, (a,), backprop, "exp")


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    out_data = np.log(a.data)

    def backprop(g):
        _accum(a, g / a.data)

    return _node(out_data, (a,), backprop, "log")


# -- fused network ops ---------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Overflow-safe softmax along ``axis`` (max subtraction)."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backprop(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _node(out_data, (a,), backprop, "softmax")


def linear_forward(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W^T + b with weight shaped (d_out, d_in)."""
    x = _wrap(x)
    weight = _wrap(weight)
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(
            f"linear: input dim {x.shape[-1]} != weight in-dim {weight.shape[-1]}"
        )
    y = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        y = add(y, bias)
    return y


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine."""
    x = _wrap(x)
    gain = _wrap(gain, x.dtype)
    bias = _wrap(bias, x.dtype)
    d = x.shape[-1]
    if d < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backprop(g):
        if gain.requires_grad:
            lead = tuple(range(g.ndim - 1))
            _accum(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            lead = tuple(range(g.ndim - 1))
            _accum(bias, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gain.data
            dx = (dxhat - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv
            _accum(x, dx)

    return _node(out_data, (x, gain, bias), backprop, "layer_norm")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Direct small-kernel convolution on a single (C, H, W) image."""
    x = _wrap(x)
    weight = _wrap(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError("conv2d expects x:(C,H,W), weight:(O,C,kh,kw)")
    c_out, c_in, kh, kw = weight.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"conv2d channels disagree: {x.shape[0]} vs {c_in}")
    _, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c_in, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride]
    cols2 = cols.reshape(c_in * kh * kw, oh * ow)
    wmat = weight.data.reshape(c_out, c_in * kh * kw)
    out = wmat @ cols2
    if bias is not None:
        out = out + bias.data[:, None]
    out_data = out.reshape(c_out, oh, ow)

    def backprop(g):
        gmat = g.reshape(c_out, oh * ow)
        if bias is not None and bias.requires_grad:
            _accum(bias, gmat.sum(axis=1))
        if weight.requires_grad:
            _accum(weight, (gmat @ cols2.T).reshape(weight.shape))
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c_in, kh, kw, oh, ow)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, i, j]
            if padding:
                gxp = gxp[:, padding:padding + h, padding:padding + w]
            _accum(x, gxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out_data, parents, backprop, "conv2d")


_RESIZE_CACHE: dict[tuple, tuple] = {}


def _resize_plan(n_in: int, n_out: int):
    key = (n_in, n_out)
    plan = _RESIZE_CACHE.get(key)
    if plan is None:
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(pos).astype(np.intp)
        frac = pos - lo
        lo_c = np.clip(lo, 0, n_in - 1)
        hi_c = np.clip(lo + 1, 0, n_in - 1)
        plan = (lo_c, hi_c, frac)
        _RESIZE_CACHE[key] = plan
    return plan


def bilinear_resize(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Resample (C, H, W) to (C, H', W'); half-pixel centers, clamped edges."""
    x = _wrap(x)
    if x.ndim != 3:
        raise ShapeError("bilinear_resize expects (C, H, W)")
    c, h, w = x.shape
    oh, ow = out_hw
    ylo, yhi, fy = _resize_plan(h, oh)
    xlo, xhi, fx = _resize_plan(w, ow)
    fy_col = fy[None, :, None]
    fx_row = fx[None, None, :]
    tmp = x.data[:, ylo, :] * (1.0 - fy_col) + x.data[:, yhi, :] * fy_col
    out_data = tmp[:, :, xlo] * (1.0 - fx_row) + tmp[:, :, xhi] * fx_row
    out_data = out_data.astype(x.dtype, copy=False)

    def backprop(g):
        gtmp = np.zeros((c, oh, w), dtype=g.dtype)
        np.add.at(gtmp, (slice(None), slice(None), xlo), g * (1.0 - fx_row))
        np.add.at(gtmp, (slice(None), slice(None), xhi), g * fx_row)
        gx = np.zeros((c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), ylo, slice(None)), gtmp * (1.0 - fy_col))
        np.add.at(gx, (slice(None), yhi, slice(None)), gtmp * fy_col)
        _accum(x, gx)

    return _node(out_data, (x,), backprop, "bilinear_resize")


def bce_with_logits_mean(logits: Tensor, target) -> Tensor:
    """Mean binary cross entropy from logits, in the stable form.

    mean(max(x, 0) - x*t + log(1 + exp(-|x|))) over all elements.
    """
    logits = _wrap(logits)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs target {t.shape}")
    x = logits.data
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out_data = np.asarray(per.mean(), dtype=logits.dtype)

    def backprop(g):
        if logits.requires_grad:
            sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                           np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            _accum(logits, g * (sig - t) / x.size)

    return _node(out_data, (logits,), backprop, "bce_with_logits")


def nll_from_logits(logits: Tensor, targets, weights) -> Tensor:
    """Weighted mean of -log softmax(logits)[i, targets[i]] over rows.

    ``weights`` is a per-class vector; the divisor is the row count, so
    down-weighted classes reduce their terms, not the denominator.
    """
    logits = _wrap(logits)
    idx = np.asarray(targets, dtype=np.intp)
    n, k = logits.shape
    if idx.shape != (n,):
        raise ShapeError("nll: one target per row required")
    if idx.min(initial=0) < 0 or (n and idx.max() >= k):
        raise UsageError("nll: target index out of range")
    wvec = np.asarray(weights, dtype=logits.dtype)
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(n)
    wrow = wvec[idx]
    out_data = np.asarray(-(wrow * logp[rows, idx]).sum() / max(n, 1), dtype=logits.dtype)

    def backprop(g):
        if logits.requires_grad:
            p = np.exp(logp)
            gi = p * wrow[:, None]
            gi[rows, idx] -= wrow
            _accum(logits, g * gi / max(n, 1))

    return _node(out_data, (logits,), backprop, "nll_from_logits")


# -- parameters -----------------------------------------------------------------


class Parameter:
    """Named learnable tensor with its gradient slot and group tag."""

    __slots__ = ("name", "tensor", "group", "learnable")

    def __init__(self, name: str, value: Array, group: str = "head", learnable: bool = True):
        if group not in ("backbone", "head"):
            raise UsageError(f"unknown parameter group '{group}'")
        self.name = name
        self.group = group
        self.learnable = learnable
        self.tensor = Tensor(value, requires_grad=learnable)

    @property
    def data(self) -> Array:
        return self.tensor.data

    @data.setter
    def data(self, value: Array) -> None:
        self.tensor.data = value

    @property
    def grad(self) -> Array | None:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.tensor.shape}, group={self.group})"


class ParamStore:
    """Ordered registry of uniquely named parameters."""

    def __init__(self):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()

    def add(self, name: str, value: Array, group: str = "head", learnable: bool = True) -> Parameter:
        if name in self._params:
            raise UsageError(f"duplicate parameter name '{name}'")
        p = Parameter(name, value, group=group, learnable=learnable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params.values())

    def names(self) -> list[str]:
        return list(self._params.keys())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def count(self, learnable_only: bool = False) -> int:
        return sum(p.tensor.size for p in self._params.values()
                   if p.learnable or not learnable_only)
