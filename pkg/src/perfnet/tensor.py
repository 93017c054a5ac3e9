"""Tape-based reverse-mode autodiff on numpy arrays.

Provides exactly the primitives the synthesis model needs: 1-d convolution
and transposed convolution, instance normalization, leaky ReLU, channel
concat/slice, elementwise add/scale, MSE loss, and a bias-corrected Adam
optimizer. Training runs in float32; float64 is supported so that
finite-difference gradient checks are meaningful.

Every forward and backward output is checked for NaN/Inf and fails fast.
The tape records operations in execution order and is rebuilt on every
forward pass; ``backward`` traverses it in exact reverse order, which keeps
gradient accumulation deterministic.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_TYPES = (np.float32, np.float64)


class NonFiniteError(ArithmeticError):
    """A tensor, op output, or gradient contained NaN or Inf."""


class GraphError(RuntimeError):
    """backward() was called on a tensor the tape never produced."""


def _ensure_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Dense real array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        _ensure_finite(arr, "tensor data")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _from_op(cls, data, requires_grad):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = requires_grad
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def numel(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class Parameter:
    """Named trainable tensor; name is a dotted path unique within a model."""

    name: str
    tensor: Tensor

    def __post_init__(self):
        if not self.name or not self.name.isascii():
            raise ValueError(f"parameter name must be non-empty ASCII, got {self.name!r}")
        self.tensor.requires_grad = True


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward_fn: Callable


_TAPE: list[_Node] = []
_GRAD_ENABLED = True


def tape_size():
    return len(_TAPE)


def clear_tape():
    """Drop all recorded operations. Call between training steps."""
    _TAPE.clear()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _record(out_data, inputs, backward_fn):
    _ensure_finite(out_data, "op output")
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor._from_op(out_data, track)
    if track:
        _TAPE.append(_Node(out, tuple(inputs), backward_fn))
    return out


def backward(loss):
    """Populate ``.grad`` of every leaf tensor the scalar ``loss`` depends on.

    Repeated calls accumulate into existing gradients. Raises GraphError if
    ``loss`` was not produced by a recorded operation.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.out) for n in _TAPE}
    if id(loss) not in produced:
        raise GraphError("tensor was not produced by a recorded operation")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_TAPE):
        gy = pending.pop(id(node.out), None)
        if gy is None:
            continue
        grads = node.backward_fn(gy)
        for t, g in zip(node.inputs, grads):
            if g is None:
                continue
            _ensure_finite(g, "gradient")
            if id(t) in produced:
                acc = pending.get(id(t))
                pending[id(t)] = g if acc is None else acc + g
            elif t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad = t.grad + g


# --------------------------------------------------------------------------
# Shape / dtype validation helpers
# --------------------------------------------------------------------------

def _require(cond, msg):
    if not cond:
        raise ValueError(msg)


def _same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        _require(t.dtype == dt, f"mixed dtypes: {dt} vs {t.dtype}")
    return dt


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------

def _im2col(xp, kernel, stride, t_out):
    b, c, _ = xp.shape
    cols = np.empty((b, c, kernel, t_out), dtype=xp.dtype)
    end = (t_out - 1) * stride + 1
    for k in range(kernel):
        cols[:, :, k, :] = xp[:, :, k:k + end:stride]
    return cols


def _col2im(cols, t_padded, stride):
    b, c, kernel, t_out = cols.shape
    out = np.zeros((b, c, t_padded), dtype=cols.dtype)
    end = (t_out - 1) * stride + 1
    for k in range(kernel):
        out[:, :, k:k + end:stride] += cols[:, :, k, :]
    return out


def conv1d(x, w, b, stride=1, pad=0):
    """Cross-correlation along time with zero padding.

    x: [B, Cin, T], w: [Cout, Cin, K], b: [Cout] -> [B, Cout, T'],
    T' = floor((T + 2*pad - K) / stride) + 1.
    """
    _require(x.data.ndim == 3, f"conv1d input must be [B,C,T], got {x.shape}")
    _require(w.data.ndim == 3, f"conv1d weight must be [Cout,Cin,K], got {w.shape}")
    _require(b.data.ndim == 1, f"conv1d bias must be [Cout], got {b.shape}")
    _same_dtype(x, w, b)
    bsz, cin, t = x.shape
    cout, cin_w, kernel = w.shape
    _require(cin_w == cin, f"conv1d channel mismatch: input {cin}, weight {cin_w}")
    _require(b.shape == (cout,), f"conv1d bias shape {b.shape} != ({cout},)")
    _require(stride >= 1, "stride must be >= 1")
    _require(pad >= 0, "pad must be >= 0")
    _require(t + 2 * pad >= kernel,
             f"conv1d: T + 2*pad = {t + 2 * pad} shorter than kernel {kernel}")
    t_out = (t + 2 * pad - kernel) // stride + 1

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad))) if pad else xd
    cols = _im2col(xp, kernel, stride, t_out)
    y = np.tensordot(w.data, cols, axes=([1, 2], [1, 2]))  # [Cout, B, T']
    y = np.ascontiguousarray(y.transpose(1, 0, 2))
    y += b.data[None, :, None]

    wd = w.data
    needs = (x.requires_grad, w.requires_grad, b.requires_grad)

    def bwd(gy):
        gx = gw = gb = None
        if needs[1]:
            xp2 = np.pad(xd, ((0, 0), (0, 0), (pad, pad))) if pad else xd
            c2 = _im2col(xp2, kernel, stride, t_out)
            gw = np.tensordot(gy, c2, axes=([0, 2], [0, 3]))
        if needs[0]:
            gcols = np.tensordot(gy, wd, axes=([1], [0]))  # [B, T', Cin, K]
            gcols = np.ascontiguousarray(gcols.transpose(0, 2, 3, 1))
            gxp = _col2im(gcols, t + 2 * pad, stride)
            gx = gxp[:, :, pad:pad + t] if pad else gxp
        if needs[2]:
            gb = gy.sum(axis=(0, 2))
        return gx, gw, gb

    return _record(y, (x, w, b), bwd)


def tconv1d(x, w, b, stride=1, pad=0, out_pad=0):
    """Transposed 1-d convolution (scatter-add adjoint of conv1d).

    x: [B, Cin, T], w: [Cin, Cout, K], b: [Cout] -> [B, Cout, T'],
    T' = (T - 1)*stride - 2*pad + K + out_pad.
    """
    _require(x.data.ndim == 3, f"tconv1d input must be [B,C,T], got {x.shape}")
    _require(w.data.ndim == 3, f"tconv1d weight must be [Cin,Cout,K], got {w.shape}")
    _require(b.data.ndim == 1, f"tconv1d bias must be [Cout], got {b.shape}")
    _same_dtype(x, w, b)
    bsz, cin, t = x.shape
    cin_w, cout, kernel = w.shape
    _require(cin_w == cin, f"tconv1d channel mismatch: input {cin}, weight {cin_w}")
    _require(b.shape == (cout,), f"tconv1d bias shape {b.shape} != ({cout},)")
    _require(stride >= 1, "stride must be >= 1")
    _require(pad >= 0, "pad must be >= 0")
    _require(0 <= out_pad < stride, "out_pad must satisfy 0 <= out_pad < stride")
    t_out = (t - 1) * stride - 2 * pad + kernel + out_pad
    _require(t_out >= 1, f"tconv1d output length {t_out} < 1")

    xd, wd = x.data, w.data
    buf_len = (t - 1) * stride + kernel + out_pad
    prod = np.tensordot(xd, wd, axes=([1], [0]))  # [B, T, Cout, K]
    buf = np.zeros((bsz, cout, buf_len), dtype=xd.dtype)
    end = (t - 1) * stride + 1
    for k in range(kernel):
        buf[:, :, k:k + end:stride] += prod[:, :, :, k].transpose(0, 2, 1)
    y = np.ascontiguousarray(buf[:, :, pad:pad + t_out])
    y += b.data[None, :, None]

    needs = (x.requires_grad, w.requires_grad, b.requires_grad)

    def bwd(gy):
        gx = gw = gb = None
        if needs[0] or needs[1]:
            gbuf = np.zeros((bsz, cout, buf_len), dtype=gy.dtype)
            gbuf[:, :, pad:pad + t_out] = gy
            cols_g = _im2col(gbuf, kernel, stride, t)  # [B, Cout, K, T]
            if needs[0]:
                gx = np.tensordot(wd, cols_g, axes=([1, 2], [1, 2])).transpose(1, 0, 2)
            if needs[1]:
                gw = np.tensordot(xd, cols_g, axes=([0, 2], [0, 3]))
        if needs[2]:
            gb = gy.sum(axis=(0, 2))
        return gx, gw, gb

    return _record(y, (x, w, b), bwd)


# --------------------------------------------------------------------------
# Pointwise / normalization ops
# --------------------------------------------------------------------------

def leaky_relu(x, slope=0.2):
    """Elementwise max(x, slope*x)."""
    _require(0 <= slope < 1, f"slope must be in [0, 1), got {slope}")
    xd = x.data
    y = np.where(xd >= 0, xd, xd * slope)

    def bwd(gy):
        return (np.where(xd >= 0, gy, gy * slope),)

    return _record(y, (x,), bwd)


def instance_norm(x, gamma, beta, eps=1e-5):
    """Per-sample, per-channel normalization over the time axis.

    x: [B, C, T], gamma/beta: [C]. Uses the population variance; requires
    T >= 2 so the variance is informative.
    """
    _require(x.data.ndim == 3, f"instance_norm input must be [B,C,T], got {x.shape}")
    _require(eps > 0, "eps must be > 0")
    bsz, c, t = x.shape
    _require(t >= 2, f"instance_norm needs T >= 2, got T={t}")
    _require(gamma.shape == (c,) and beta.shape == (c,),
             f"affine params must be [{c}], got {gamma.shape}, {beta.shape}")
    _same_dtype(x, gamma, beta)

    xd = x.data
    mu = xd.mean(axis=2, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    gd = gamma.data
    needs = (x.requires_grad, gamma.requires_grad, beta.requires_grad)

    def bwd(gy):
        gx = ggamma = gbeta = None
        if needs[1]:
            ggamma = (gy * xhat).sum(axis=(0, 2))
        if needs[2]:
            gbeta = gy.sum(axis=(0, 2))
        if needs[0]:
            g = gy * gd[None, :, None]
            gm = g.mean(axis=2, keepdims=True)
            gxm = (g * xhat).mean(axis=2, keepdims=True)
            gx = inv * (g - gm - xhat * gxm)
        return gx, ggamma, gbeta

    return _record(y, (x, gamma, beta), bwd)


def concat_channels(xs):
    """Concatenate [B, Ci, T] tensors along the channel axis."""
    xs = list(xs)
    _require(len(xs) >= 1, "concat_channels needs at least one input")
    for t in xs:
        _require(t.data.ndim == 3, f"concat_channels inputs must be [B,C,T], got {t.shape}")
    _same_dtype(*xs)
    b0, _, t0 = xs[0].shape
    for t in xs[1:]:
        _require(t.shape[0] == b0 and t.shape[2] == t0,
                 f"concat_channels B/T mismatch: {xs[0].shape} vs {t.shape}")
    y = np.concatenate([t.data for t in xs], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in xs])
    needs = [t.requires_grad for t in xs]

    def bwd(gy):
        return tuple(
            gy[:, offsets[i]:offsets[i + 1], :] if needs[i] else None
            for i in range(len(xs))
        )

    return _record(y, tuple(xs), bwd)


def slice_channels(x, lo, hi):
    """Contiguous channel slice x[:, lo:hi, :]."""
    _require(x.data.ndim == 3, f"slice_channels input must be [B,C,T], got {x.shape}")
    c = x.shape[1]
    _require(0 <= lo < hi <= c, f"slice [{lo}:{hi}] out of range for C={c}")
    xd = x.data
    y = np.ascontiguousarray(xd[:, lo:hi, :])

    def bwd(gy):
        gx = np.zeros_like(xd)
        gx[:, lo:hi, :] = gy
        return (gx,)

    return _record(y, (x,), bwd)


def slice_time(x, lo, hi):
    """Contiguous time slice x[:, :, lo:hi]."""
    _require(x.data.ndim == 3, f"slice_time input must be [B,C,T], got {x.shape}")
    t = x.shape[2]
    _require(0 <= lo < hi <= t, f"slice [{lo}:{hi}] out of range for T={t}")
    xd = x.data
    y = np.ascontiguousarray(xd[:, :, lo:hi])

    def bwd(gy):
        gx = np.zeros_like(xd)
        gx[:, :, lo:hi] = gy
        return (gx,)

    return _record(y, (x,), bwd)


def add(x, y):
    """Elementwise sum of two same-shape tensors."""
    _require(x.shape == y.shape, f"add shape mismatch: {x.shape} vs {y.shape}")
    _same_dtype(x, y)
    out = x.data + y.data
    needs = (x.requires_grad, y.requires_grad)

    def bwd(gy):
        return (gy if needs[0] else None, gy if needs[1] else None)

    return _record(out, (x, y), bwd)


def scale(x, c):
    """Multiply by a python scalar."""
    c = float(c)
    out = x.data * c

    def bwd(gy):
        return (gy * c,)

    return _record(out, (x,), bwd)


def mse_loss(pred, target):
    """Mean of squared differences over all elements; returns a 0-d tensor."""
    _require(pred.shape == target.shape,
             f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    _same_dtype(pred, target)
    d = pred.data - target.data
    val = np.asarray((d * d).mean(), dtype=pred.dtype)
    n = d.size
    needs = (pred.requires_grad, target.requires_grad)

    def bwd(gy):
        g = (2.0 / n) * d * gy
        return (g if needs[0] else None, -g if needs[1] else None)

    return _record(val, (pred, target), bwd)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_init(params):
    state = AdamState()
    for p in params:
        state.m[p.name] = np.zeros_like(p.tensor.data)
        state.v[p.name] = np.zeros_like(p.tensor.data)
    return state


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; a missing gradient counts as zero."""
    _require(lr >= 0, "lr must be >= 0")
    _require(0 <= beta1 < 1 and 0 <= beta2 < 1, "betas must be in [0, 1)")
    _require(eps > 0, "eps must be > 0")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p in params:
        data = p.tensor.data
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None or m.shape != data.shape or v.shape != data.shape:
            raise ValueError(f"adam state shape mismatch for {p.name!r}")
        g = p.tensor.grad
        if g is None:
            g = np.zeros_like(data)
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new = data - update
        _ensure_finite(new, f"adam update of {p.name!r}")
        p.tensor.data = new


class Adam:
    """Container tying parameters to an AdamState with fixed hyperparameters."""

    def __init__(self, params: Sequence[Parameter], lr=1e-3, beta1=0.9,
                 beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = adam_init(self.params)

    def step(self):
        adam_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None
