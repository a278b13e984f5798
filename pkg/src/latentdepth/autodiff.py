"""Minimal reverse-mode differentiation over dense numpy arrays.

Ops record themselves on the active ``Tape`` (a plain list of taped entries in
execution order, which is already a topological order); ``backward`` replays
the tape once in reverse and accumulates gradients additively into ``.grad``
of every tensor that requires them. Gradients persist across backward calls
until explicitly zeroed, which is what gradient accumulation relies on.

The op set is exactly what the VAE and U-Net need: conv2d, linear, silu,
group_norm, nearest-neighbor 2x upsampling, channel concat/slice, pointwise
arithmetic, reductions, and mse_loss. No attention, no fusion, no GPU.

Forward math runs in the dtype of the inputs (float32 for training, float64
for the finite-difference suites). Non-finite op outputs raise rather than
propagate: overflow is an error, not a value.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, UsageError

_TAPE_STACK: list["Tape"] = []
_CHECK_FINITE = True


class finite_checks:
    """Context manager toggling the non-finite output guard (default on)."""

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        global _CHECK_FINITE
        self._saved = _CHECK_FINITE
        _CHECK_FINITE = self.enabled
        return self

    def __exit__(self, *exc):
        global _CHECK_FINITE
        _CHECK_FINITE = self._saved
        return False


def _guard_finite(data: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values (overflow?)")


class Tensor:
    """Dense array node. ``data`` is a numpy array; ``grad`` matches its shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Execution-ordered record of ops; usable as a context manager."""

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self.ops)


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(out_data: np.ndarray, inputs: Sequence[Tensor], bwd: Callable, op: str) -> Tensor:
    """Wrap an op result, recording the backward rule if a tape is active."""
    _guard_finite(out_data, op)
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.ops.append((out, tuple(inputs), bwd))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``.

    Gradients add onto whatever is already stored, so calling twice without
    zeroing doubles them.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, bwd in reversed(tape.ops):
        g = pending.get(id(out))
        if g is None:
            continue
        for inp, ig in zip(inputs, bwd(g)):
            if ig is None or not inp.requires_grad:
                continue
            prev = pending.get(id(inp))
            pending[id(inp)] = ig if prev is None else prev + ig
            holders[id(inp)] = inp
    for tid, t in holders.items():
        if t.requires_grad:
            t.accumulate_grad(pending[tid])


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# pointwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finish(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish(out, (a, b), bwd, "mul")


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * x + shift with python-scalar coefficients."""
    out = x.data * scale + shift

    def bwd(g):
        return (g * scale,)

    return _finish(out, (x,), bwd, "affine")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _finish(out, (x,), bwd, "exp")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _finish(out, (x,), bwd, "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), elementwise."""
    s = _sigmoid(x.data)
    out = x.data * s

    def bwd(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _finish(out, (x,), bwd, "silu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    passthrough = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        return (g * passthrough,)

    return _finish(out, (x,), bwd, "clamp")


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _finish(out, (x,), bwd, "reshape")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError(f"concat_channels expects NCHW inputs, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f"concat_channels: batch/spatial axes differ, {a.shape} vs {b.shape}"
        )
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return _finish(out, (a, b), bwd, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"slice_channels expects NCHW input, got {x.shape}")
    if not (0 <= start < stop <= x.shape[1]):
        raise DimensionError(f"channel slice [{start}:{stop}] out of range for C={x.shape[1]}")
    out = x.data[:, start:stop].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _finish(out, (x,), bwd, "slice_channels")


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the spatial axes of an NCHW tensor; backward crops."""
    if x.data.ndim != 4:
        raise DimensionError(f"pad2d expects NCHW input, got {x.shape}")
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    n, c, h, w = x.shape

    def bwd(g):
        return (g[:, :, top : top + h, left : left + w],)

    return _finish(out, (x,), bwd, "pad2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block; backward sums the block grads."""
    if x.data.ndim != 4:
        raise DimensionError(f"upsample_nearest2x expects NCHW input, got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _finish(out, (x,), bwd, "upsample_nearest2x")


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=x.data.dtype)).reshape(())

    def bwd(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _finish(out, (x,), bwd, "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(dtype=x.data.dtype)).reshape(())

    def bwd(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.data.dtype),)

    return _finish(out, (x,), bwd, "mean")


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences; gradient 2*(pred-target)/count."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.asarray(np.mean(diff * diff, dtype=pred.data.dtype)).reshape(())
    n = pred.size

    def bwd(g):
        scaled = (2.0 / n) * diff * g
        return scaled, -scaled

    return _finish(out, (pred, target), bwd, "mse_loss")


# ---------------------------------------------------------------------------
# dense layers


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: x [N, Din] @ weight.T [Din, Dout] + bias [Dout]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"linear expects 2D input/weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input features {x.shape[1]} != weight in-features {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def bwd(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        gb = g.sum(axis=0)
        return gx, gw, gb

    return _finish(out, (x, weight, bias), bwd, "linear")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, xshape: tuple, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = xshape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols6[:, :, i, j]
    if padding:
        return xp[:, :, padding : padding + h, padding : padding + w]
    return xp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2D cross-correlation (the usual deep-learning "convolution")."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be NCHW, got {x.shape}")
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d weight must be [Cout,Cin,kh,kw], got {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise DimensionError(
            f"conv2d: spatial dims {h}x{w} (pad {padding}) not divisible by stride {stride} "
            f"for kernel {kh}x{kw}"
        )
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols) + bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    def bwd(g):
        g2 = g.reshape(n, cout, -1)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gb = g2.sum(axis=(0, 2))
        gcols = np.matmul(w2.T, g2)
        gx = _col2im(gcols, x.shape, kh, kw, stride, padding)
        return gx, gw, gb

    return _finish(out, (x, weight, bias), bwd, "conv2d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, group) standardization followed by channelwise affine."""
    if x.data.ndim != 4:
        raise DimensionError(f"group_norm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if c % groups:
        raise ConfigError(f"group_norm: channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"group_norm: affine params must be shape ({c},)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = ((xg - mu) * inv_std).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bwd(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gh = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        m1 = gh.mean(axis=2, keepdims=True)
        m2 = (gh * xh).mean(axis=2, keepdims=True)
        gx = ((gh - m1 - xh * m2) * inv_std).reshape(n, c, h, w)
        return gx, ggamma, gbeta

    return _finish(out, (x, gamma, beta), bwd, "group_norm")
