"""Dense tensors with reverse-mode autodiff over a recorded tape.

Only the operators used by the CSI autoencoder are implemented: 3x3
same-padded convolution, dense (affine) layers, leaky ReLU, sigmoid,
batch normalization, elementwise add (skip connections), reshape and
mean-squared-error loss. Forward results are deterministic: summation
happens in fixed row-major order via numpy reductions.

Ops run in the dtype of their inputs. Models use float32 throughout;
gradient checks may drive the same code in float64.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ShapeError, TinyCsiError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional array plus the tape hooks needed for backprop.

    ``mask``, when set on a leaf parameter, zeroes the accumulated gradient
    at masked (0) positions after every backward pass; pruned weights rely
    on this to stay exactly zero through fine-tuning.
    """

    __slots__ = ("data", "grad", "requires_grad", "mask", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.mask: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def accumulate(self, delta: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += delta


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss.

    Gradients accumulate into ``.grad`` of every reachable tensor that
    requires them. Raises if ``loss`` is not a scalar or carries no
    recorded graph (backward without forward).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss._parents:
        raise TinyCsiError("backward called without a recorded forward graph")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    for t in topo:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in reversed(topo):
        if t._backward is not None:
            t._backward(t)
    for t in topo:
        if t.mask is not None and t.grad is not None:
            t.grad *= t.mask


# ---------------------------------------------------------------------------
# operators


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map: out[b, j] = sum_k x[b, k] * weights[k, j] + bias[j]."""
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise ShapeError("dense expects 2-D input and weights")
    if x.data.shape[1] != weights.data.shape[0]:
        raise ShapeError(
            f"dense inner dims disagree: input {x.data.shape} vs weights {weights.data.shape}"
        )
    if bias.data.shape != (weights.data.shape[1],):
        raise ShapeError("dense bias shape must match output width")
    out_data = x.data @ weights.data + bias.data

    def back(out: Tensor):
        g = out.grad
        x.accumulate(g @ weights.data.T)
        weights.accumulate(x.data.T @ g)
        bias.accumulate(g.sum(axis=0))

    return _make(out_data, (x, weights, bias), back)


def _im2col(padded: np.ndarray, height: int, width: int) -> np.ndarray:
    # padded [B, C, H+2, W+2] -> [B*H*W, C*9]; column index = c*9 + u*3 + v
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5)
    batch = padded.shape[0]
    channels = padded.shape[1]
    return np.ascontiguousarray(cols).reshape(batch * height * width, channels * 9)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, same padding (pad 1 on each side)."""
    if x.data.ndim != 4:
        raise ShapeError("conv2d expects input of shape [B, C, H, W]")
    if kernel.data.ndim != 4 or kernel.data.shape[2:] != (3, 3):
        raise ShapeError("conv2d kernel must have shape [F, C, 3, 3]")
    if x.data.shape[1] != kernel.data.shape[1]:
        raise ShapeError(
            f"input channels {x.data.shape[1]} do not match kernel channels {kernel.data.shape[1]}"
        )
    if bias.data.shape != (kernel.data.shape[0],):
        raise ShapeError("conv2d bias shape must be [F]")

    batch, _, height, width = x.data.shape
    filters = kernel.data.shape[0]
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(padded, height, width)
    kflat = kernel.data.reshape(filters, -1)
    out_flat = cols @ kflat.T + bias.data
    out_data = out_flat.reshape(batch, height, width, filters).transpose(0, 3, 1, 2)

    def back(out: Tensor):
        g_flat = out.grad.transpose(0, 2, 3, 1).reshape(batch * height * width, filters)
        kernel.accumulate((g_flat.T @ cols).reshape(kernel.data.shape))
        bias.accumulate(g_flat.sum(axis=0))
        dcols = g_flat @ kflat
        dwin = dcols.reshape(batch, height, width, x.data.shape[1], 3, 3)
        dwin = dwin.transpose(0, 3, 4, 5, 1, 2)  # [B, C, 3, 3, H, W]
        dpad = np.zeros_like(padded)
        for u in range(3):
            for v in range(3):
                dpad[:, :, u : u + height, v : v + width] += dwin[:, :, u, v]
        x.accumulate(dpad[:, :, 1 : 1 + height, 1 : 1 + width])

    return _make(out_data, (x, kernel, bias), back)


def leaky_relu(x: Tensor, slope: float = 0.3) -> Tensor:
    """Elementwise x if x >= 0 else slope * x; slope must be in [0, 1)."""
    if not 0.0 <= slope < 1.0:
        raise ShapeError(f"leaky_relu slope must be in [0, 1), got {slope}")
    keep = x.data >= 0
    out_data = np.where(keep, x.data, slope * x.data)

    def back(out: Tensor):
        x.accumulate(np.where(keep, out.grad, slope * out.grad))

    return _make(out_data, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable elementwise logistic; outputs lie in (0, 1)."""
    z = np.exp(-np.abs(x.data))
    out_data = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def back(out: Tensor):
        x.accumulate(out.grad * out_data * (1.0 - out_data))

    return _make(out_data, (x,), back)


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum of equal-shaped tensors (skip connections)."""
    if x.data.shape != y.data.shape:
        raise ShapeError(f"add shape mismatch: {x.data.shape} vs {y.data.shape}")
    out_data = x.data + y.data

    def back(out: Tensor):
        x.accumulate(out.grad)
        y.accumulate(out.grad)

    return _make(out_data, (x, y), back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = x.data.reshape(shape)

    def back(out: Tensor):
        x.accumulate(out.grad.reshape(x.data.shape))

    return _make(out_data, (x,), back)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    return reshape(x, (x.data.shape[0], -1))


class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    epsilon is fixed at 1e-3; running statistics update with momentum 0.99
    in training mode (new = 0.99 * old + 0.01 * batch).
    """

    EPS = 1e-3
    MOMENTUM = 0.99

    def __init__(self, channels: int, dtype=np.float32):
        self.scale = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    @property
    def channels(self) -> int:
        return self.scale.data.shape[0]


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Channel-wise normalization over [B, C, H, W] input.

    Training mode normalizes by batch statistics (population variance) and
    updates the running statistics in place; inference mode uses the stored
    running statistics.
    """
    if x.data.ndim != 4:
        raise ShapeError("batch_norm expects input of shape [B, C, H, W]")
    if x.data.shape[0] == 0:
        raise ShapeError("batch_norm requires a non-empty batch")
    if x.data.shape[1] != state.channels:
        raise ShapeError(
            f"batch_norm channels {state.channels} do not match input {x.data.shape[1]}"
        )

    axes = (0, 2, 3)
    cshape = (1, state.channels, 1, 1)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.running_mean[:] = state.MOMENTUM * state.running_mean + (1 - state.MOMENTUM) * mean
        state.running_var[:] = state.MOMENTUM * state.running_var + (1 - state.MOMENTUM) * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.EPS)
    xhat = (x.data - mean.reshape(cshape)) * inv_std.reshape(cshape)
    out_data = state.scale.data.reshape(cshape) * xhat + state.shift.data.reshape(cshape)

    scale, shift = state.scale, state.shift

    def back(out: Tensor):
        g = out.grad
        scale.accumulate((g * xhat).sum(axis=axes))
        shift.accumulate(g.sum(axis=axes))
        dxhat = g * scale.data.reshape(cshape)
        if training:
            count = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            sum_dxhat = dxhat.sum(axis=axes).reshape(cshape)
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes).reshape(cshape)
            dx = (inv_std.reshape(cshape) / count) * (
                count * dxhat - sum_dxhat - xhat * sum_dxhat_xhat
            )
        else:
            dx = dxhat * inv_std.reshape(cshape)
        x.accumulate(dx)

    return _make(out_data, (x, scale, shift), back)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared elementwise differences, as a scalar tensor."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(
            f"mse_loss shape mismatch: {pred.data.shape} vs {target.data.shape}"
        )
    diff = pred.data - target.data
    out_data = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)

    def back(out: Tensor):
        coeff = out.grad * (2.0 / diff.size)
        pred.accumulate(coeff * diff)
        target.accumulate(-coeff * diff)

    return _make(out_data, (pred, target), back)
