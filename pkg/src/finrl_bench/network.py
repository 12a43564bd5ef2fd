"""Feed-forward networks with hand-written backpropagation.

All parameters of a network live in one flat float64 vector; the layer
weights are views into it, so optimizers, checkpoints and target-network
updates work on a single array.
"""
import math
from typing import Callable, Optional, Sequence

import numpy as np

_ACTIVATIONS = ("tanh", "relu")


class MLP:
    """Multilayer perceptron y = f_L(... f_1(x W_1 + b_1) ... W_L + b_L).

    Args:
        sizes (Sequence[int]): Layer widths, input first and output last.
        activation (str, optional): Hidden activation, 'tanh' or 'relu'.
        output_activation (str, optional): None for a linear output or 'tanh'.
        seed (int, optional): Seed of the weight initialization.
        output_scale (float, optional): Scales the initial output-layer weights.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        activation: str = "tanh",
        output_activation: Optional[str] = None,
        seed: int = 0,
        output_scale: float = 1.0,
    ):
        if len(sizes) < 2:
            raise ValueError("An MLP needs at least an input and an output size.")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}.")
        if output_activation not in (None, "tanh"):
            raise ValueError("output_activation must be None or 'tanh'.")
        self.sizes = tuple(int(size) for size in sizes)
        self.activation = activation
        self.output_activation = output_activation
        self.shapes = list(zip(self.sizes[:-1], self.sizes[1:]))
        self.params = np.zeros(sum(n_in * n_out + n_out for n_in, n_out in self.shapes))

        rng = np.random.default_rng(seed)
        for index, (weights, _) in enumerate(self.layers()):
            limit = 1.0 / math.sqrt(weights.shape[0])
            scale = output_scale if index == len(self.shapes) - 1 else 1.0
            weights[...] = rng.uniform(-limit, limit, weights.shape) * scale

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def input_size(self) -> int:
        return self.sizes[0]

    @property
    def output_size(self) -> int:
        return self.sizes[-1]

    def layers(self, params: Optional[np.ndarray] = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into the flat parameter vector."""
        params = self.params if params is None else params
        views, offset = [], 0
        for n_in, n_out in self.shapes:
            weights = params[offset:offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            bias = params[offset:offset + n_out]
            offset += n_out
            views.append((weights, bias))
        return views

    def set_params(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        if values.shape != self.params.shape:
            raise ValueError(f"expected {self.params.size} parameters, got {values.size}")
        self.params[...] = values

    def copy(self) -> "MLP":
        clone = MLP.__new__(MLP)
        clone.sizes = self.sizes
        clone.activation = self.activation
        clone.output_activation = self.output_activation
        clone.shapes = list(self.shapes)
        clone.params = self.params.copy()
        return clone

    def forward(self, x: np.ndarray, params: Optional[np.ndarray] = None) -> np.ndarray:
        return self.forward_cache(x, params)[0]

    def forward_cache(self, x: np.ndarray, params: Optional[np.ndarray] = None):
        """Forward pass that also returns what `backward` needs."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.input_size:
            raise ValueError(f"expected inputs of size {self.input_size}, got {x.shape[1]}")
        inputs, outputs = [], []
        layers = self.layers(params)
        h = x
        for index, (weights, bias) in enumerate(layers):
            inputs.append(h)
            z = h @ weights + bias
            last = index == len(layers) - 1
            if not last:
                h = np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)
            elif self.output_activation == "tanh":
                h = np.tanh(z)
            else:
                h = z
            outputs.append((z, h))
        y = h[0] if squeeze else h
        return y, (inputs, outputs, params)

    def backward(self, cache, grad_output: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Backpropagates dL/dy.

        Args:
            cache: Second value returned by `forward_cache`.
            grad_output (np.ndarray): Gradient of the loss w.r.t. the outputs.

        Returns:
            tuple: dL/dθ as a flat vector and dL/dx.
        """
        inputs, outputs, params = cache
        layers = self.layers(params)
        grad = np.atleast_2d(np.asarray(grad_output, dtype=float))
        grad_params = np.zeros(self.n_params)
        grad_layers = self.layers(grad_params)
        for index in reversed(range(len(layers))):
            z, h = outputs[index]
            last = index == len(layers) - 1
            if not last:
                grad = grad * (1.0 - h * h) if self.activation == "tanh" else grad * (z > 0)
            elif self.output_activation == "tanh":
                grad = grad * (1.0 - h * h)
            weights, _ = layers[index]
            grad_weights, grad_bias = grad_layers[index]
            grad_weights[...] = inputs[index].T @ grad
            grad_bias[...] = grad.sum(axis=0)
            grad = grad @ weights.T
        return grad_params, grad


class Adam:
    """Adam on a flat parameter vector; `step` minimizes."""

    def __init__(self, n_params: int, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        """Updates params in place."""
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        params -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(grad: np.ndarray, max_norm: Optional[float]) -> np.ndarray:
    if max_norm is None or max_norm <= 0:
        return grad
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


def polyak_update(target: MLP, online: MLP, tau: float) -> None:
    """target <- (1 - tau) target + tau online; tau = 1 is a hard sync."""
    target.params[...] = (1.0 - tau) * target.params + tau * online.params


def numerical_gradient(loss: Callable[[np.ndarray], float], params: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences (L(θ + e_i) - L(θ - e_i)) / 2 eps for every entry."""
    params = np.array(params, dtype=float)
    grad = np.zeros_like(params)
    for i in range(params.size):
        original = params[i]
        params[i] = original + eps
        upper = loss(params)
        params[i] = original - eps
        lower = loss(params)
        params[i] = original
        grad[i] = (upper - lower) / (2 * eps)
    return grad


def gradient_check(
    loss: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic: np.ndarray,
    eps: float = 1e-6,
) -> float:
    """Relative error ||g_a - g_n|| / (||g_a|| + ||g_n||) of an analytic gradient.

    Args:
        loss: Maps a flat parameter vector to a scalar loss. Must not keep
            references to the vector it is given.
        params (np.ndarray): Point at which to check.
        analytic (np.ndarray): The gradient to verify.
        eps (float, optional): Finite-difference step.

    Returns:
        float: The relative error; 0 when both gradients vanish.
    """
    numeric = numerical_gradient(loss, params, eps)
    denominator = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denominator == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denominator)
