"""From-scratch neural-network engine on dense numpy arrays.

Layers operate on single samples laid out channels-first ([C, H, W] for
spatial data, flat vectors for fully connected stages).  Backward passes
compute exact gradients of the forward maps and *accumulate* into the
parameter gradient buffers, so a mini-batch is processed by running
forward/backward per sample and calling :func:`sgd_step` once.

Float64 is the default dtype so finite-difference verification is exact
to roundoff; float32 is supported for faster training runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Tensor shape incompatible with a layer; raised before any state changes."""


@dataclass
class LayerParams:
    """Learnable tensors plus their gradient and momentum buffers.

    Gradient and momentum arrays always mirror the parameter shapes.
    """

    weights: np.ndarray
    biases: np.ndarray
    weight_grads: np.ndarray = field(init=False)
    bias_grads: np.ndarray = field(init=False)
    weight_momentum: np.ndarray = field(init=False)
    bias_momentum: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.weight_grads = np.zeros_like(self.weights)
        self.bias_grads = np.zeros_like(self.biases)
        self.weight_momentum = np.zeros_like(self.weights)
        self.bias_momentum = np.zeros_like(self.biases)

    def zero_grads(self) -> None:
        self.weight_grads[...] = 0.0
        self.bias_grads[...] = 0.0


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)), suited to tanh nets."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Common layer interface: forward, backward, optional parameters."""

    spec: tuple = ()

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def params(self) -> LayerParams | None:
        return None

    def output_shape(self, input_shape: tuple) -> tuple:
        """Static shape arithmetic; raises ShapeError on mismatch."""
        raise NotImplementedError


class Conv2D(Layer):
    """Valid (no padding), stride-1 cross-correlation with per-filter bias."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        dtype=np.float64,
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        k = kernel_size
        fan_in = in_channels * k * k
        fan_out = out_channels * k * k
        weights = glorot_uniform(rng, (out_channels, in_channels, k, k), fan_in, fan_out, dtype)
        biases = np.zeros(out_channels, dtype=dtype)
        self._params = LayerParams(weights=weights, biases=biases)
        self._cols: np.ndarray | None = None
        self._input_shape: tuple | None = None
        self.spec = ("conv", in_channels, out_channels, kernel_size)

    @property
    def params(self) -> LayerParams:
        return self._params

    def output_shape(self, input_shape: tuple) -> tuple:
        k = self.kernel_size
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(
                f"conv expects ({self.in_channels}, H, W) input, got {input_shape}"
            )
        c, h, w = input_shape
        if h < k or w < k:
            raise ShapeError(
                f"input {input_shape} smaller than {k}x{k} kernel"
            )
        return (self.out_channels, h - k + 1, w - k + 1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        out_c, out_h, out_w = self.output_shape(x.shape)
        k = self.kernel_size
        windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
        cols = windows.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, -1)
        w_mat = self._params.weights.reshape(self.out_channels, -1)
        out = cols @ w_mat.T + self._params.biases
        self._cols = cols
        self._input_shape = x.shape
        return out.T.reshape(out_c, out_h, out_w)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._cols is None:
            raise RuntimeError("backward called before forward")
        c, h, w = self._input_shape
        k = self.kernel_size
        out_h, out_w = h - k + 1, w - k + 1
        if grad.shape != (self.out_channels, out_h, out_w):
            raise ShapeError(
                f"upstream grad {grad.shape} does not match forward output "
                f"{(self.out_channels, out_h, out_w)}"
            )
        g_mat = grad.reshape(self.out_channels, -1)
        self._params.weight_grads += (g_mat @ self._cols).reshape(self._params.weights.shape)
        self._params.bias_grads += g_mat.sum(axis=1)

        w_mat = self._params.weights.reshape(self.out_channels, -1)
        d_cols = (g_mat.T @ w_mat).reshape(out_h, out_w, c, k, k).transpose(2, 3, 4, 0, 1)
        dx = np.zeros((c, h, w), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, i : i + out_h, j : j + out_w] += d_cols[:, i, j]
        return dx


class MaxPool2x2(Layer):
    """2x2 max pooling with stride 2; ties route to the first (row-major) max."""

    spec = ("pool",)

    def __init__(self):
        self._argmax: np.ndarray | None = None
        self._input_shape: tuple | None = None

    def output_shape(self, input_shape: tuple) -> tuple:
        if len(input_shape) != 3:
            raise ShapeError(f"pool expects (C, H, W) input, got {input_shape}")
        c, h, w = input_shape
        if h % 2 or w % 2:
            raise ShapeError(f"pool requires even spatial dims, got {input_shape}")
        return (c, h // 2, w // 2)

    def _windows(self, x: np.ndarray) -> np.ndarray:
        c, h, w = x.shape
        return x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(
            c, h // 2, w // 2, 4
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.output_shape(x.shape)
        windows = self._windows(x)
        self._argmax = windows.argmax(axis=-1)
        self._input_shape = x.shape
        return np.take_along_axis(windows, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._argmax is None:
            raise RuntimeError("backward called before forward")
        c, h, w = self._input_shape
        if grad.shape != (c, h // 2, w // 2):
            raise ShapeError(
                f"upstream grad {grad.shape} does not match pooled shape {(c, h // 2, w // 2)}"
            )
        flat = np.zeros((c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(flat, self._argmax[..., None], grad[..., None], axis=-1)
        return flat.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


class Tanh(Layer):
    """Elementwise hyperbolic tangent."""

    spec = ("tanh",)

    def __init__(self):
        self._out: np.ndarray | None = None

    def output_shape(self, input_shape: tuple) -> tuple:
        return input_shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._out = np.tanh(x)
        return self._out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._out is None:
            raise RuntimeError("backward called before forward")
        if grad.shape != self._out.shape:
            raise ShapeError(f"upstream grad {grad.shape} != activation {self._out.shape}")
        return grad * (1.0 - self._out * self._out)


class Flatten(Layer):
    spec = ("flatten",)

    def __init__(self):
        self._input_shape: tuple | None = None

    def output_shape(self, input_shape: tuple) -> tuple:
        return (int(np.prod(input_shape)),)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._input_shape = x.shape
        return x.reshape(-1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad.reshape(self._input_shape)


class Linear(Layer):
    """Fully connected map y = W x + b on flat vectors."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64):
        self.in_dim = in_dim
        self.out_dim = out_dim
        weights = glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim, dtype)
        biases = np.zeros(out_dim, dtype=dtype)
        self._params = LayerParams(weights=weights, biases=biases)
        self._x: np.ndarray | None = None
        self.spec = ("linear", in_dim, out_dim)

    @property
    def params(self) -> LayerParams:
        return self._params

    def output_shape(self, input_shape: tuple) -> tuple:
        if input_shape != (self.in_dim,):
            raise ShapeError(
                f"linear expects ({self.in_dim},) input, got {input_shape}"
            )
        return (self.out_dim,)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.output_shape(x.shape)
        self._x = x
        return self._params.weights @ x + self._params.biases

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward called before forward")
        if grad.shape != (self.out_dim,):
            raise ShapeError(f"upstream grad {grad.shape} != output shape ({self.out_dim},)")
        self._params.weight_grads += np.outer(grad, self._x)
        self._params.bias_grads += grad
        return self._params.weights.T @ grad


def l2_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum over the batch of squared Euclidean prediction errors.

    Accepts (B, K) batches or single (K,) vectors.  Returns the scalar loss
    and its gradient with respect to ``pred``, 2 * (pred - target).
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return float(np.sum(diff * diff)), 2.0 * diff


@dataclass(frozen=True)
class SgdConfig:
    """SGD hyperparameters: base learning rate, momentum, weight decay, and
    an optional step schedule of (epoch, lr) pairs applied in order."""

    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")
        epochs = [e for e, _ in self.schedule]
        if epochs != sorted(set(epochs)):
            raise ValueError(f"schedule epochs must be strictly increasing, got {epochs}")
        if any(lr <= 0 for _, lr in self.schedule):
            raise ValueError("scheduled learning rates must be positive")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for step_epoch, step_lr in self.schedule:
            if epoch >= step_epoch:
                lr = step_lr
        return lr

    @staticmethod
    def step_decay(base_lr: float, total_epochs: int, **kwargs) -> "SgdConfig":
        """x0.1 steps at 80% and 90% of the run, landing two decades down."""
        first = max(1, int(total_epochs * 0.8))
        second = max(first + 1, int(total_epochs * 0.9))
        schedule = ((first, base_lr * 0.1), (second, base_lr * 0.01))
        return SgdConfig(learning_rate=base_lr, schedule=schedule, **kwargs)


def sgd_step(param_layers, config: SgdConfig, epoch: int) -> None:
    """One momentum SGD update: v <- mu*v - lr*(g + wd*w); w <- w + v.

    Gradient buffers are zeroed after the update.
    """
    lr = config.lr_at(epoch)
    mu = config.momentum
    wd = config.weight_decay
    for p in param_layers:
        p.weight_momentum *= mu
        p.weight_momentum -= lr * (p.weight_grads + wd * p.weights)
        p.weights += p.weight_momentum
        p.bias_momentum *= mu
        p.bias_momentum -= lr * (p.bias_grads + wd * p.biases)
        p.biases += p.bias_momentum
        p.zero_grads()
