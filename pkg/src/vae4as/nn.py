"""Dense MLP substrate: layers, He-normal init, forward/backward, Adam.

Everything works on float64 arrays.  Layers store weights as
``(fan_out, fan_in)`` so a batch ``X`` of shape ``(n, fan_in)`` maps to
``X @ W.T + b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NumericalError

LEAKY_SLOPE = 0.01
SIGMOID_EPS = 1e-7
ACTIVATIONS = ("leaky_relu", "sigmoid", "linear")


@dataclass
class DenseLayer:
    weights: np.ndarray
    biases: np.ndarray
    activation: str = "leaky_relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ContractViolation(
                f"inconsistent layer shapes: weights {self.weights.shape}, biases {self.biases.shape}"
            )

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.biases.copy(), self.activation)


def he_normal_init(fan_in: int, fan_out: int, rng: np.random.Generator,
                   activation: str = "leaky_relu") -> DenseLayer:
    """Weights ~ Normal(0, 2/fan_in), zero biases."""
    if fan_in < 1 or fan_out < 1:
        raise ContractViolation("fan_in and fan_out must be >= 1")
    std = np.sqrt(2.0 / fan_in)
    weights = rng.normal(0.0, std, size=(fan_out, fan_in))
    return DenseLayer(weights, np.zeros(fan_out), activation)


def sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow in exp for large |a|
    s = 0.5 * (1.0 + np.tanh(0.5 * a))
    return np.clip(s, SIGMOID_EPS, 1.0 - SIGMOID_EPS)


def activate(a: np.ndarray, kind: str, slope: float = LEAKY_SLOPE) -> np.ndarray:
    if kind == "leaky_relu":
        return np.where(a > 0, a, slope * a)
    if kind == "sigmoid":
        return sigmoid(a)
    return a


def activation_grad(a: np.ndarray, out: np.ndarray, kind: str,
                    slope: float = LEAKY_SLOPE) -> np.ndarray:
    """Derivative of the activation at pre-activation ``a`` (output ``out``)."""
    if kind == "leaky_relu":
        return np.where(a > 0, 1.0, slope)
    if kind == "sigmoid":
        # zero where the output sits on the clamp
        clamped = (out <= SIGMOID_EPS) | (out >= 1.0 - SIGMOID_EPS)
        return np.where(clamped, 0.0, out * (1.0 - out))
    return np.ones_like(a)


@dataclass
class ForwardCache:
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


def forward(layers: Sequence[DenseLayer], x: np.ndarray,
            slope: float = LEAKY_SLOPE) -> ForwardCache:
    """Run ``x`` (shape ``(d,)`` or ``(n, d)``) through ``layers``.

    Returns every layer input, pre-activation and activation; these are
    exactly what :func:`backward` needs.
    """
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != layers[0].fan_in:
        raise ContractViolation(
            f"input dimension {h.shape[-1]} does not match fan_in {layers[0].fan_in}"
        )
    cache = ForwardCache()
    for layer in layers:
        cache.inputs.append(h)
        a = h @ layer.weights.T + layer.biases
        h = activate(a, layer.activation, slope)
        cache.pre.append(a)
        cache.post.append(h)
    return cache


def backward(layers: Sequence[DenseLayer], cache: ForwardCache, grad_output: np.ndarray,
             slope: float = LEAKY_SLOPE):
    """Backpropagate ``dL/d(output)`` through a batched forward pass.

    Returns ``(grads, grad_input)`` where ``grads`` is a list of
    ``(dW, db)`` per layer, summed over the batch.
    """
    g = grad_output
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        delta = g * activation_grad(cache.pre[i], cache.post[i], layer.activation, slope)
        x_in = cache.inputs[i]
        if delta.ndim == 1:
            grads[i] = (np.outer(delta, x_in), delta.copy())
        else:
            grads[i] = (delta.T @ x_in, delta.sum(axis=0))
        g = delta @ layer.weights
    return grads, g


def layer_params(layers: Sequence[DenseLayer]) -> list:
    out = []
    for layer in layers:
        out.extend((layer.weights, layer.biases))
    return out


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params], 0, **hyper)

    def copy(self) -> "AdamState":
        return AdamState([m.copy() for m in self.first_moment],
                         [v.copy() for v in self.second_moment],
                         self.step_count, self.beta1, self.beta2, self.epsilon)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState, lr: float):
    """One bias-corrected Adam update.

    Pure: returns ``(new_params, new_state)`` and leaves the inputs alone.
    """
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ContractViolation("params, grads and optimizer state disagree in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.first_moment[i].shape:
            raise ContractViolation(f"shape mismatch at parameter {i}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {i}", index=i)

    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_params.append(p - lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.epsilon)


def gradient_check(loss_fn: Callable[[list], float], params: Sequence[np.ndarray],
                   analytic: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Max relative error between ``analytic`` and central differences.

    ``loss_fn`` takes a full list of parameter arrays.  Relative error per
    entry is ``|ga - gfd| / max(1, |ga|, |gfd|)``.
    """
    if not 0 < eps <= 1e-2:
        raise ContractViolation("eps must lie in (0, 1e-2]")
    work = [np.array(p, dtype=np.float64, copy=True) for p in params]
    worst = 0.0
    for i, p in enumerate(work):
        flat = p.reshape(-1)
        ga_flat = np.asarray(analytic[i], dtype=np.float64).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn(work)
            flat[j] = orig - eps
            down = loss_fn(work)
            flat[j] = orig
            g_fd = (up - down) / (2.0 * eps)
            ga = ga_flat[j]
            err = abs(ga - g_fd) / max(1.0, abs(ga), abs(g_fd))
            worst = max(worst, err)
    return float(worst)
