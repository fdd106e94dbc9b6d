"""Minimal differentiable-computation core for small tabular MLPs.

Dense layers, batch normalization, softmax, cross-entropy, Adam, and a
finite-difference gradient checker. Backprop is written by hand; the
elementwise passes go through the selected kernel backend.
"""

from dataclasses import dataclass, field

import numpy as np

from latentshift.backend import kernels
from latentshift.errors import ShapeError, TrainingError

PROB_FLOOR = 1e-12

ACTIVATIONS = ("relu", "identity")


def _as_batch(x):
    """Promote a single sample to a 1-row batch. Returns (array, was_1d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return np.ascontiguousarray(x[None, :]), True
    if x.ndim == 2:
        return np.ascontiguousarray(x), False
    raise ShapeError(f"expected vector or matrix input, got ndim={x.ndim}")


class DenseLayer:
    """Fully connected layer y = act(x @ W.T + b)."""

    def __init__(self, weights, biases, activation="identity"):
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        self.biases = np.ascontiguousarray(biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.ndim != 1:
            raise ShapeError("dense layer needs 2-d weights and 1-d biases")
        if self.weights.shape[0] != self.biases.shape[0]:
            raise ShapeError(
                f"weights rows {self.weights.shape[0]} != biases size {self.biases.shape[0]}"
            )
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation

    @classmethod
    def initialize(cls, in_dim, out_dim, activation, rng):
        """Fan-in scaled uniform weights, zero biases."""
        limit = np.sqrt(1.0 / max(1, in_dim))
        w = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(w, np.zeros(out_dim), activation)

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    def forward(self, x):
        out, _ = self.forward_cache(x)
        return out

    def forward_cache(self, x):
        if x.shape[1] != self.in_dim:
            raise ShapeError(
                f"dense layer expects input dim {self.in_dim}, got {x.shape[1]}"
            )
        y = x @ self.weights.T + self.biases
        if self.activation == "relu":
            y = kernels.relu_forward(y)
        return y, (x, y)

    def backward(self, cache, dy):
        """Returns (dx, dweights, dbiases)."""
        x, y = cache
        if self.activation == "relu":
            dy = kernels.relu_backward(y, dy)
        dw = dy.T @ x
        db = dy.sum(axis=0)
        dx = dy @ self.weights
        return dx, dw, db

    def copy(self):
        return DenseLayer(self.weights.copy(), self.biases.copy(), self.activation)


class BatchNormLayer:
    """Per-feature batch normalization with running statistics.

    In train mode the batch statistics normalize the input and update the
    running buffers; in eval mode only the running buffers are read, so
    the layer is a fixed affine map.
    """

    def __init__(self, dim, momentum=0.1, epsilon=1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        self.gamma = np.ones(dim, dtype=np.float64)
        self.beta = np.zeros(dim, dtype=np.float64)
        self.running_mean = np.zeros(dim, dtype=np.float64)
        self.running_var = np.ones(dim, dtype=np.float64)
        self.momentum = momentum
        self.epsilon = epsilon
        self.mode = "eval"

    @property
    def dim(self):
        return self.gamma.shape[0]

    def forward(self, x):
        out, _ = self.forward_cache(x, train=(self.mode == "train"))
        return out

    def forward_cache(self, x, train, update_running=None):
        if x.shape[1] != self.dim:
            raise ShapeError(f"batchnorm expects dim {self.dim}, got {x.shape[1]}")
        if train:
            y, xhat, mean, var = kernels.bn_forward_train(
                x, self.gamma, self.beta, self.epsilon
            )
            if update_running is None or update_running:
                m = self.momentum
                self.running_mean = (1.0 - m) * self.running_mean + m * mean
                self.running_var = (1.0 - m) * self.running_var + m * var
            return y, (xhat, var)
        y = kernels.bn_forward_eval(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.epsilon,
        )
        return y, None

    def backward(self, cache, dy):
        """Train-mode gradient. Returns (dx, dgamma, dbeta)."""
        xhat, var = cache
        return kernels.bn_backward(dy, xhat, self.gamma, var, self.epsilon)

    def copy(self):
        out = BatchNormLayer(self.dim, self.momentum, self.epsilon)
        out.gamma = self.gamma.copy()
        out.beta = self.beta.copy()
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        out.mode = self.mode
        return out


def forward_mlp(layers, x):
    """Compose dense / batchnorm layers over a sample or batch.

    Dimension mismatches raise a ShapeError naming the offending layer.
    Pure when every batchnorm layer is in eval mode.
    """
    out, single = _as_batch(x)
    for i, layer in enumerate(layers):
        try:
            out = layer.forward(out)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from None
    return out[0] if single else out


def softmax(v):
    """Numerically stable softmax over the last axis of a vector or matrix."""
    arr, single = _as_batch(v)
    if not np.isfinite(arr).all():
        raise ValueError("softmax input must be finite")
    out = kernels.softmax_forward(arr)
    return out[0] if single else out


def cross_entropy(predicted, target_index):
    """-log predicted[target_index], with the probability floored at 1e-12."""
    predicted = np.asarray(predicted, dtype=np.float64)
    if not 0 <= target_index < predicted.shape[-1]:
        raise IndexError(
            f"target index {target_index} out of range for {predicted.shape[-1]} classes"
        )
    return float(-np.log(max(predicted[target_index], PROB_FLOOR)))


@dataclass
class AdamState:
    """Bias-corrected Adam state over a named parameter set."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def _slot(self, name, param):
        if name not in self.first_moment:
            self.first_moment[name] = np.zeros_like(param)
            self.second_moment[name] = np.zeros_like(param)
        return self.first_moment[name], self.second_moment[name]


def adam_step(params, grads, state):
    """Apply one Adam update in place to every entry of `params`.

    params and grads are dicts of matching names and shapes. Raises
    TrainingError naming the parameter on a non-finite gradient.
    """
    state.step_count += 1
    t = state.step_count
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise ShapeError(
                f"gradient shape {grad.shape} != parameter shape {param.shape} for {name!r}"
            )
        if not np.isfinite(grad).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m, v = state._slot(name, param)
        kernels.adam_update(
            param, grad, m, v, t,
            state.learning_rate, state.beta1, state.beta2, state.epsilon,
        )
    return params, state


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_parameter: dict
    tolerance: float

    @property
    def passed(self):
        return self.max_relative_error < self.tolerance


def grad_check(loss_fn, params, tolerance=1e-4, step=1e-5):
    """Compare analytic gradients against central finite differences.

    loss_fn(params) must return (loss, grads) deterministically and
    without side effects. The relative error of each parameter array is
    the max-abs gradient gap over the larger of the two gradient scales.
    """
    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise TrainingError("non-finite loss during gradient check")
    per_param = {}
    for name, param in params.items():
        analytic = np.asarray(grads[name], dtype=np.float64)
        numeric = np.zeros_like(analytic)
        flat = param.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, _ = loss_fn(params)
            flat[i] = orig - step
            down, _ = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise TrainingError(f"non-finite loss while perturbing {name!r}")
            nflat[i] = (up - down) / (2.0 * step)
        gap = np.abs(analytic - numeric).max() if flat.size else 0.0
        scale = max(np.abs(analytic).max(initial=0.0),
                    np.abs(numeric).max(initial=0.0), 1e-8)
        per_param[name] = gap / scale
    max_err = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_err, per_param, tolerance)
