"""A small reverse-mode differentiation engine.

Only the operators the denoising model needs are provided. Operations executed
inside an active :class:`Tape` context are recorded when any input requires a
gradient; :meth:`Tape.backward` then walks the record in reverse.

No operator broadcasts. Storage is float32 by default; float64 tensors flow
through every operator unchanged, which is what the gradient checks use.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from mrdenoise import kernels
from mrdenoise.errors import (
    DegenerateVarianceError,
    DimensionError,
    NumericalError,
    TapeError,
    UninitializedStatsError,
)

_TAPES = []
_DEBUG = False
_KINK_LOGS = []


class kink_monitor:
    """Collect the sign pattern of every ReLU / LeakyReLU input seen inside the block."""

    def __enter__(self):
        self.masks = []
        _KINK_LOGS.append(self.masks)
        return self

    def __exit__(self, *exc):
        _KINK_LOGS.remove(self.masks)
        return False

    def signature(self):
        if not self.masks:
            return np.zeros(0, dtype=bool)
        return np.concatenate([m.ravel() for m in self.masks])


def _log_kink(mask):
    for log in _KINK_LOGS:
        log.append(mask)


def set_debug(flag):
    """Enable finite-value assertions after every forward op."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    """An n-dimensional array that may take part in a differentiation tape."""

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad=False, dtype=np.float32, name=None):
        self.values = np.ascontiguousarray(values, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, values, requires_grad):
        t = cls.__new__(cls)
        t.values = values
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: object
    op: str


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager around the forward pass, then call
    :meth:`backward` exactly once::

        with Tape() as tape:
            loss = mse_loss(model(x), y)
        tape.backward(loss)
    """

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape already consumed by backward; record a new forward pass")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out, inputs, backward, op):
        self.records.append(_Record(out, inputs, backward, op))

    def backward(self, loss):
        if self.consumed:
            raise TapeError("backward already ran on this tape")
        if loss.values.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if not any(r.out is loss for r in self.records):
            raise TapeError("loss was not produced on this tape")
        self.consumed = True
        loss.grad = np.ones_like(loss.values)
        for rec in reversed(self.records):
            g = rec.out.grad
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi
        # drop saved activations
        self.records = []


def backward(loss, tape):
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``."""
    tape.backward(loss)


def _emit(values, inputs, backward_fn, op):
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, requires)
    if _DEBUG and not np.all(np.isfinite(values)):
        if all(np.all(np.isfinite(t.values)) for t in inputs):
            raise NumericalError(f"{op}: non-finite output from finite inputs")
    if requires and _TAPES:
        _TAPES[-1].record(out, inputs, backward_fn, op)
    return out


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    _same_shape("add", a, b)

    def back(g):
        return g, g

    return _emit(a.values + b.values, (a, b), back, "add")


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} ({x.size} elements) as {shape}")
    src = x.shape

    def back(g):
        return (g.reshape(src),)

    return _emit(x.values.reshape(shape), (x,), back, "reshape")


def sum_all(x):
    """Sum of all elements as a scalar tensor."""

    def back(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _emit(np.asarray(x.values.sum(dtype=np.float64), dtype=x.dtype), (x,), back, "sum")


def mse_loss(pred, target):
    """Mean of squared differences over every element."""
    target = _as_tensor(target, pred)
    _same_shape("mse_loss", pred, target)
    diff = pred.values.astype(np.float64) - target.values
    n = diff.size
    loss = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def back(g):
        gp = (2.0 / n) * diff * g
        return gp.astype(pred.dtype), (-gp).astype(target.dtype)

    return _emit(loss, (pred, target), back, "mse_loss")


# ---------------------------------------------------------------------------
# activations

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    v = x.values
    cdf = 0.5 * (1.0 + erf(v * _SQRT1_2))

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
        return ((cdf + v * pdf) * g).astype(x.dtype),

    return _emit((v * cdf).astype(x.dtype), (x,), back, "gelu")


def relu(x):
    mask = x.values > 0
    _log_kink(mask)

    def back(g):
        return (g * mask,)

    # maximum propagates NaN, so non-finite activations still reach the loss
    return _emit(np.maximum(x.values, x.dtype.type(0)), (x,), back, "relu")


def leaky_relu(x, slope=0.2):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    mask = x.values > 0
    _log_kink(mask)
    scale = np.where(mask, 1.0, slope).astype(x.dtype)

    def back(g):
        return (g * scale,)

    return _emit(x.values * scale, (x,), back, "leaky_relu")


def activation(kind, x, slope=0.2):
    if kind == "gelu":
        return gelu(x)
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# fully-connected and normalisation


def linear(x, weight, bias):
    """``x @ weight.T + bias`` for ``x`` of shape (d_in,) or (N, d_in)."""
    if weight.values.ndim != 2:
        raise DimensionError(f"linear: weight must be 2-D, got shape {weight.shape}")
    d_out, d_in = weight.shape
    if x.values.ndim not in (1, 2) or x.shape[-1] != d_in:
        raise DimensionError(
            f"linear: x axis -1 has size {x.shape[-1] if x.shape else None} "
            f"but weight axis 1 has size {d_in}"
        )
    if bias.shape != (d_out,):
        raise DimensionError(f"linear: bias axis 0 has size {bias.shape} but weight axis 0 has size {d_out}")
    xv, wv = x.values, weight.values

    def back(g):
        gx = g @ wv
        if xv.ndim == 1:
            gw = np.outer(g, xv)
            gb = g
        else:
            gw = g.T @ xv
            gb = g.sum(axis=0)
        return gx, gw, gb

    return _emit(xv @ wv.T + bias.values, (x, weight, bias), back, "linear")


def layer_norm(x, gain, shift, eps=1e-5):
    """Normalise over the last axis, then apply ``gain`` and ``shift``."""
    d = x.shape[-1]
    if d == 1 and eps == 0:
        raise DegenerateVarianceError("layer_norm over a single element needs eps > 0")
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / shift {shift.shape} must be ({d},)")
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.values

    def back(g):
        gxhat = g * gv
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(v.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit(xhat * gv + shift.values, (x, gain, shift), back, "layer_norm")


class BatchNormStats:
    """Running mean/variance of one batch-norm layer."""

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.count = 0

    def copy(self):
        out = BatchNormStats(len(self.mean), self.mean.dtype)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        out.count = self.count
        return out


def batch_norm3d(x, gain, shift, stats, mode="train", momentum=0.1, eps=1e-5):
    """Per-channel normalisation of an (N, C, D, H, W) tensor.

    Train mode normalises with the batch statistics and updates ``stats``
    in place (unbiased variance enters the running estimate); eval mode uses
    the running statistics.
    """
    if x.values.ndim != 5:
        raise DimensionError(f"batch_norm3d expects (N, C, D, H, W), got {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"batch_norm3d: gain/shift must be ({c},)")
    v = x.values
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    gv = gain.values.reshape(bshape)
    if mode == "train":
        m = v.size // c
        if m < 2:
            raise DimensionError("batch_norm3d train mode needs at least 2 values per channel")
        mu = v.mean(axis=axes, keepdims=True)
        xc = v - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        stats.mean = ((1 - momentum) * stats.mean + momentum * mu.ravel()).astype(stats.mean.dtype)
        unbiased = var.ravel() * (m / (m - 1))
        stats.var = ((1 - momentum) * stats.var + momentum * unbiased).astype(stats.var.dtype)
        stats.count += 1

        def back(g):
            gxhat = g * gv
            gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    elif mode == "eval":
        if stats.count == 0:
            raise UninitializedStatsError("batch_norm3d eval mode before any train-mode update")
        inv = (1.0 / np.sqrt(stats.var.astype(v.dtype) + eps)).reshape(bshape)
        xhat = (v - stats.mean.astype(v.dtype).reshape(bshape)) * inv

        def back(g):
            return g * gv * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = (xhat * gv + shift.values.reshape(bshape)).astype(v.dtype)
    return _emit(out, (x, gain, shift), back, "batch_norm3d")


# ---------------------------------------------------------------------------
# 3x3x3 convolution and its adjoint


def _batched_outer(a, b):
    """``sum_n a[n] @ b[n].T``, accumulated in sample order."""
    acc = a[0] @ b[0].T
    for i in range(1, a.shape[0]):
        acc += a[i] @ b[i].T
    return acc


def _check_geometry(op, kernel, padding, stride):
    if kernel.values.ndim != 5 or kernel.shape[2:] != (3, 3, 3):
        raise DimensionError(f"{op}: kernel must have shape (*, *, 3, 3, 3), got {kernel.shape}")
    if padding != 1 or stride != 1:
        raise ValueError(f"{op}: only padding=1, stride=1 is supported")


def conv3d(x, kernel, bias, padding=1, stride=1):
    """Shape-preserving 3x3x3 cross-correlation.

    ``x`` is (N, Cin, D, H, W), ``kernel`` is (Cout, Cin, 3, 3, 3).
    """
    _check_geometry("conv3d", kernel, padding, stride)
    cout, cin = kernel.shape[:2]
    if x.values.ndim != 5 or x.shape[1] != cin:
        raise DimensionError(f"conv3d: input channel axis 1 of {x.shape} does not match kernel axis 1 ({cin})")
    if bias.shape != (cout,):
        raise DimensionError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    n, _, d, h, w = x.shape
    cols = kernels.im2col(x.values)
    wf = kernel.values.reshape(cout, cin * 27)
    out = np.matmul(wf, cols)
    out += bias.values[None, :, None]

    def back(g):
        gf = g.reshape(n, cout, d * h * w)
        gw = _batched_outer(gf, cols).reshape(kernel.shape)
        gx = kernels.col2im(np.matmul(wf.T, gf), x.shape)
        return gx, gw, gf.sum(axis=(0, 2))

    return _emit(out.reshape(n, cout, d, h, w), (x, kernel, bias), back, "conv3d")


def deconv3d(x, kernel, bias, padding=1, stride=1):
    """Transposed 3x3x3 convolution, the adjoint of :func:`conv3d`.

    ``kernel`` is (Cin, Cout, 3, 3, 3): the same array used by ``conv3d`` to
    map Cout channels to Cin channels.
    """
    _check_geometry("deconv3d", kernel, padding, stride)
    cin, cout = kernel.shape[:2]
    if x.values.ndim != 5 or x.shape[1] != cin:
        raise DimensionError(f"deconv3d: input channel axis 1 of {x.shape} does not match kernel axis 0 ({cin})")
    if bias.shape != (cout,):
        raise DimensionError(f"deconv3d: bias shape {bias.shape} != ({cout},)")
    n, _, d, h, w = x.shape
    wf = kernel.values.reshape(cin, cout * 27)
    xf = x.values.reshape(n, cin, d * h * w)
    out = kernels.col2im(np.matmul(wf.T, xf), (n, cout, d, h, w))
    out += bias.values[None, :, None, None, None]

    def back(g):
        gc = kernels.im2col(np.ascontiguousarray(g))
        gx = np.matmul(wf, gc).reshape(x.shape)
        gw = _batched_outer(xf, gc).reshape(kernel.shape)
        return gx, gw, g.sum(axis=(0, 2, 3, 4))

    return _emit(out, (x, kernel, bias), back, "deconv3d")
