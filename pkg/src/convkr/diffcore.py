"""Minimal differentiable numeric core.

Every layer is a pair of plain functions: a forward pass that returns its
output (plus whatever the backward pass needs) and a ``*_backward`` that maps
the upstream gradient to gradients of its inputs and parameters.  Arrays are
float64 numpy arrays throughout; trainable arrays live in :class:`Param`.

Convolutions are cross-correlations (no kernel flip).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckError, ConfigurationError, DimensionError, EvaluationError, TrainingError


@dataclass
class Param:
    """A named trainable array with an optional accumulated gradient."""

    name: str
    value: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            raise DimensionError(f"gradient for {self.name} has shape {g.shape}, expected {self.value.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


# ---------------------------------------------------------------- convolution


def conv1d_valid(signal, kernel, bias: float = 0.0) -> np.ndarray:
    """``out[..., i] = bias + sum_l kernel[l] * signal[..., i + l]``."""
    signal = np.asarray(signal, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    T, L = signal.shape[-1], kernel.shape[-1]
    if L < 1 or L > T:
        raise DimensionError(f"kernel length {L} must be between 1 and signal length {T}")
    return sliding_window_view(signal, L, axis=-1) @ kernel + bias


def conv1d_valid_backward(grad_out, signal, kernel):
    """Return ``(d_signal, d_kernel, d_bias)`` for :func:`conv1d_valid`."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    signal = np.asarray(signal, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    L = kernel.shape[-1]
    n_out = grad_out.shape[-1]
    windows = sliding_window_view(signal, L, axis=-1)
    d_kernel = grad_out.reshape(-1) @ windows.reshape(-1, L)
    d_signal = np.zeros_like(signal)
    for l in range(L):
        d_signal[..., l:l + n_out] += kernel[l] * grad_out
    return d_signal, d_kernel, float(grad_out.sum())


def conv1d_channels(x, weights, bias) -> np.ndarray:
    """Multi-channel valid cross-correlation.

    ``x`` is ``(N, C_in, T)``, ``weights`` is ``(C_out, C_in, L)`` and ``bias``
    is ``(C_out,)``; the result is ``(N, C_out, T - L + 1)``.
    """
    x = np.asarray(x, dtype=np.float64)
    C_out, C_in, L = weights.shape
    if x.ndim != 3 or x.shape[1] != C_in:
        raise DimensionError(f"input shape {x.shape} does not match {C_in} input channels")
    if L > x.shape[2]:
        raise DimensionError(f"kernel length {L} exceeds signal length {x.shape[2]}")
    windows = sliding_window_view(x, L, axis=2)  # N, C_in, T', L
    if C_in == 1:  # plain matmul is markedly faster for the single-channel case
        return (windows[:, 0] @ weights[:, 0, :].T).transpose(0, 2, 1) + bias[None, :, None]
    return np.einsum("nctl,ocl->not", windows, weights, optimize=True) + bias[None, :, None]


def conv1d_channels_backward(grad_out, x, weights):
    """Return ``(d_x, d_weights, d_bias)`` for :func:`conv1d_channels`."""
    L = weights.shape[2]
    n_out = grad_out.shape[2]
    windows = sliding_window_view(x, L, axis=2)
    d_w = np.einsum("not,nctl->ocl", grad_out, windows, optimize=True)
    d_x = np.zeros_like(x)
    for l in range(L):
        d_x[:, :, l:l + n_out] += np.einsum("not,oc->nct", grad_out, weights[:, :, l], optimize=True)
    return d_x, d_w, grad_out.sum(axis=(0, 2))


def conv1d_same_centered(signal, kernel) -> np.ndarray:
    """Centered cross-correlation with zero padding; output length equals input length.

    ``out[t] = sum_{tau=-M..M} kernel[tau + M] * signal[t + tau]`` where samples
    outside ``[0, T-1]`` read as zero.  Works along the last axis.
    """
    signal = np.asarray(signal, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 1 or kernel.size % 2 == 0:
        raise ConfigurationError(f"centered kernel must have odd length, got {kernel.size}")
    M = kernel.size // 2
    pad = [(0, 0)] * (signal.ndim - 1) + [(M, M)]
    padded = np.pad(signal, pad)
    return sliding_window_view(padded, kernel.size, axis=-1) @ kernel


def conv1d_same_centered_backward(grad_out, signal, kernel):
    """Return ``(d_signal, d_kernel)`` for :func:`conv1d_same_centered`."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    signal = np.asarray(signal, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    M = kernel.size // 2
    pad = [(0, 0)] * (signal.ndim - 1) + [(M, M)]
    windows = sliding_window_view(np.pad(signal, pad), kernel.size, axis=-1)
    d_kernel = grad_out.reshape(-1) @ windows.reshape(-1, kernel.size)
    # d_signal[s] = sum_t grad[t] * kernel[s - t + M]
    d_signal = sliding_window_view(np.pad(grad_out, pad), kernel.size, axis=-1) @ kernel[::-1]
    return d_signal, d_kernel


# ---------------------------------------------------------------- pooling


def maxpool(x, p: int):
    """Non-overlapping max pooling along the last axis.

    Returns ``(out, argmax)`` where ``out`` has length ``floor(T / p)`` and
    ``argmax`` holds the absolute index of the (first) maximum of each window.
    A trailing partial window is dropped.
    """
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[-1]
    if p < 1:
        raise ConfigurationError(f"pool size must be positive, got {p}")
    if T < p:
        raise DimensionError(f"signal length {T} shorter than pool size {p}")
    n = T // p
    blocks = x[..., :n * p].reshape(x.shape[:-1] + (n, p))
    local = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    return out, local + p * np.arange(n)


def maxpool_backward(grad_out, argmax, length: int) -> np.ndarray:
    grad_out = np.asarray(grad_out, dtype=np.float64)
    d_x = np.zeros(grad_out.shape[:-1] + (length,))
    np.put_along_axis(d_x, argmax, grad_out, axis=-1)
    return d_x


# ---------------------------------------------------------------- activations


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(grad_out, x):
    return grad_out * (np.asarray(x) > 0)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(grad_out, out):
    return grad_out * out * (1.0 - out)


def log_softmax2(x):
    """Log-softmax over a trailing axis of size 2."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 2:
        raise DimensionError(f"log_softmax2 needs a trailing axis of 2, got {x.shape}")
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def log_softmax2_backward(grad_out, out):
    return grad_out - np.exp(out) * grad_out.sum(axis=-1, keepdims=True)


_ACTIVATIONS = {
    "relu": (relu, lambda g, x, y: relu_backward(g, x)),
    "sigmoid": (sigmoid, lambda g, x, y: sigmoid_backward(g, y)),
    "log_softmax2": (log_softmax2, lambda g, x, y: log_softmax2_backward(g, y)),
}


def activation(kind: str, x):
    try:
        return _ACTIVATIONS[kind][0](x)
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}") from None


def activation_backward(kind: str, grad_out, x, out):
    return _ACTIVATIONS[kind][1](grad_out, x, out)


# ---------------------------------------------------------------- batch norm


class BatchNorm:
    """Batch normalization over axis 1 of an ``(N, F, ...)`` array.

    Statistics are pooled over every axis except the feature axis, so the same
    layer serves dense ``(N, F)`` activations and convolution maps
    ``(N, F, T)``.  Running statistics follow
    ``running = (1 - momentum) * running + momentum * batch``.
    """

    def __init__(self, n_features: int, name: str, momentum: float = 0.1, epsilon: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ConfigurationError("batch-norm momentum must lie in (0, 1)")
        if epsilon <= 0:
            raise ConfigurationError("batch-norm epsilon must be positive")
        self.gamma = Param(f"{name}.gamma", np.ones(n_features))
        self.beta = Param(f"{name}.beta", np.zeros(n_features))
        self.running_mean = np.zeros(n_features)
        self.running_var = np.ones(n_features)
        self.momentum = momentum
        self.epsilon = epsilon
        self.train = True
        self._cache = None

    @property
    def params(self) -> list[Param]:
        return [self.gamma, self.beta]

    @staticmethod
    def _sum_spec(x, pair=False):
        idx = "nc" + "tuvw"[:x.ndim - 2]
        return f"{idx},{idx}->c" if pair else f"{idx}->c"

    def _bcast(self, v, x):
        return v.reshape((1, -1) + (1,) * (x.ndim - 2))

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < 2 or x.shape[1] != self.gamma.size:
            raise DimensionError(f"batch-norm expects {self.gamma.size} features on axis 1, got {x.shape}")
        if self.train:
            count = x.size // x.shape[1]
            if x.shape[0] < 2:
                raise TrainingError("batch-norm in train mode needs a batch of at least 2")
            mean = np.einsum(self._sum_spec(x), x) / count
            xc = x - self._bcast(mean, x)
            var = np.einsum(self._sum_spec(x, True), xc, xc) / count
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            unbiased = var * count / max(count - 1, 1)
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            xc = x - self._bcast(self.running_mean, x)
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        x_hat = xc * self._bcast(inv_std, x)
        self._cache = (x_hat, inv_std, self.train)
        return x_hat * self._bcast(self.gamma.value, x) + self._bcast(self.beta.value, x)

    def backward(self, grad_out) -> np.ndarray:
        x_hat, inv_std, train = self._cache
        d_beta = np.einsum(self._sum_spec(grad_out), grad_out)
        d_gamma = np.einsum(self._sum_spec(grad_out, True), grad_out, x_hat)
        self.gamma.accumulate(d_gamma)
        self.beta.accumulate(d_beta)
        scale = self._bcast(self.gamma.value * inv_std, x_hat)
        if not train:
            return grad_out * scale
        count = x_hat.size // x_hat.shape[1]
        return scale * (grad_out - self._bcast(d_beta / count, x_hat) - x_hat * self._bcast(d_gamma / count, x_hat))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batchnorm_forward(x, state: BatchNorm) -> np.ndarray:
    return state.forward(x)


# ---------------------------------------------------------------- dropout


def dropout(x, p_drop: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout.  Returns ``(out, mask)``; ``mask`` is None when inactive."""
    x = np.asarray(x, dtype=np.float64)
    if not 0.0 <= p_drop < 1.0:
        raise ConfigurationError(f"dropout probability must lie in [0, 1), got {p_drop}")
    if not train or p_drop == 0.0:
        return x, None
    keep = rng.random(x.shape) >= p_drop
    mask = keep / (1.0 - p_drop)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


# ---------------------------------------------------------------- dense


def dense(x, weights, bias) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise DimensionError(
            f"dense shapes disagree: input {x.shape}, weights {weights.shape}, bias {bias.shape}")
    return x @ weights + bias


def dense_backward(grad_out, x, weights):
    """Return ``(d_x, d_weights, d_bias)``."""
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


# ---------------------------------------------------------------- losses


def _nll_weights(labels, pos_weight):
    labels = np.asarray(labels).astype(np.int64)
    return labels, np.where(labels == 1, float(pos_weight), 1.0)


def weighted_nll(log_probs, labels, pos_weight: float = 1.0) -> float:
    """Mean over the batch of ``-w_i * log_probs[i, label_i]``."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    labels, w = _nll_weights(labels, pos_weight)
    if len(labels) == 0:
        return 0.0
    picked = log_probs[np.arange(len(labels)), labels]
    return float(np.mean(-w * picked))


def weighted_nll_backward(log_probs, labels, pos_weight: float = 1.0) -> np.ndarray:
    labels, w = _nll_weights(labels, pos_weight)
    grad = np.zeros_like(np.asarray(log_probs, dtype=np.float64))
    if len(labels):
        grad[np.arange(len(labels)), labels] = -w / len(labels)
    return grad


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise EvaluationError("mse of an empty input is undefined")
    return float(np.mean((pred - target) ** 2))


def mse_backward(pred, target) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    return 2.0 * (pred - np.asarray(target, dtype=np.float64)) / pred.size


# ---------------------------------------------------------------- optimizer


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    decay_per_epoch: float = 0.95
    batch_size: int = 256
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0.0 < self.decay_per_epoch <= 1.0:
            raise ConfigurationError("decay_per_epoch must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")

    def rate_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay_per_epoch ** epoch


def sgd_step(params: Iterable[Param], epoch: int, cfg: SgdConfig) -> None:
    """In-place ``p -= lr_epoch * grad``, then clears the gradients."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise TrainingError(f"parameter {p.name} has no gradient")
    lr = cfg.rate_at(epoch)
    for p in params:
        p.value -= lr * p.grad
        p.grad = None


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_tol: float
    n_checked: int
    worst: tuple[str, int] | None = None
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.rel_tol


def grad_check(
    closure: Callable[[], float],
    params: Sequence[Param],
    rel_tol: float = 1e-4,
    step: float = 1e-5,
    max_entries: int = 64,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``closure`` recomputes the loss and accumulates analytic gradients into
    the params (their grads are reset before each call).  Params larger than
    ``max_entries`` are checked on a random subsample.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)

    def run() -> float:
        for p in params:
            p.grad = None
        return float(closure())

    base = run()
    if run() != base:
        raise CheckError("loss closure is not deterministic across identical calls")
    analytic = {p.name: (np.zeros_like(p.value) if p.grad is None else p.grad.copy()) for p in params}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, rel_tol, 0)
    for p in params:
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        worst_here = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = run()
            flat[i] = orig - step
            down = run()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = analytic[p.name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst_here = max(worst_here, err)
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (p.name, int(i))
            report.n_checked += 1
        report.per_param[p.name] = worst_here
    run()
    if not math.isfinite(report.max_rel_error):
        report.max_rel_error = math.inf
    return report
