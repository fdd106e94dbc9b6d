"""Posterior-gated mixture-of-experts for binary labels, plus an
unstructured MLP baseline trained on the same budget.

The gate is a frozen encoder posterior; experts share a trunk and own
only their final layer. Training minimizes the negative log-likelihood
of the gated mixture, so heads with zero gate weight receive no
gradient.
"""

import math

import numpy as np

from latentshift.backend import kernels
from latentshift.data import split_train_val
from latentshift.errors import DataError, ShapeError, TrainingError
from latentshift.nn import PROB_FLOOR, AdamState, DenseLayer, adam_step

TRUNK_WIDTH = 64
ERM_HIDDEN = (64, 64)


def _check_gate_rows(gates, n_z):
    gates = np.asarray(gates, dtype=np.float64)
    if gates.shape[-1] != n_z:
        raise DataError(f"gate override must have {n_z} entries per row")
    flat = np.atleast_2d(gates)
    if (flat < -1e-6).any() or np.abs(flat.sum(axis=1) - 1.0).max() > 1e-6:
        raise DataError("gate override is off the probability simplex")
    return gates


class MoEModel:
    """Gated mixture: predicted P(Y=1|x) = sum_i gate_i(x) * head_i(trunk(x))."""

    def __init__(self, gating, trunk, heads):
        if len(heads) != gating.output_dim:
            raise ShapeError(
                f"{len(heads)} heads for a {gating.output_dim}-way gate"
            )
        self.gating = gating
        self.trunk = trunk
        self.heads = heads
        self.confusion = None  # training-time gate confusion, set by the pipeline

    @property
    def n_experts(self):
        return len(self.heads)

    @property
    def feature_dim(self):
        return self.trunk[0].in_dim

    def _trunk_forward(self, x):
        out = x
        for layer in self.trunk:
            out = layer.forward(out)
        return out

    def head_probs(self, x):
        """Per-expert P(Y=1|x), shape (n, n_experts)."""
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        h = self._trunk_forward(x)
        logits = np.column_stack([head.forward(h)[:, 0] for head in self.heads])
        return kernels.sigmoid(np.ascontiguousarray(logits))

    def predict_proba(self, x, gate_override=None):
        """Mixture probability of the positive class.

        gate_override may be one simplex vector (applied to every row)
        or a per-row matrix; default is the gating posterior.
        """
        single = np.asarray(x).ndim == 1
        probs = self.head_probs(x)
        if gate_override is None:
            gates = self.gating.predict_proba(x)
        else:
            gates = _check_gate_rows(gate_override, self.n_experts)
            if gates.ndim == 1:
                gates = np.broadcast_to(gates, probs.shape)
            elif gates.shape[0] != probs.shape[0]:
                raise ShapeError("gate override row count does not match input")
        out = (gates * probs).sum(axis=1)
        return float(out[0]) if single else out


def moe_predict_proba(model, x, gate_override=None):
    return model.predict_proba(x, gate_override=gate_override)


class ErmModel:
    """Plain MLP binary classifier."""

    def __init__(self, layers):
        self.layers = layers

    @property
    def feature_dim(self):
        return self.layers[0].in_dim

    def predict_proba(self, x):
        single = np.asarray(x).ndim == 1
        out = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        for layer in self.layers:
            out = layer.forward(out)
        p = kernels.sigmoid(np.ascontiguousarray(out[:, 0]))
        return float(p[0]) if single else p


def _labeled_xy(data):
    if data.labels is None:
        raise DataError("dataset has no labels")
    mask = data.labeled_mask()
    if not mask.any():
        raise DataError("dataset has no labeled rows")
    sub = data.subset(np.flatnonzero(mask))
    if sub.labels.max() > 1:
        raise DataError("only binary labels are supported")
    return sub


def _mixture_val_loss(gates, head_probs, y):
    ycol = y[:, None]
    p_y = head_probs * ycol + (1.0 - head_probs) * (1.0 - ycol)
    mix = (gates * p_y).sum(axis=1)
    return float(-np.log(np.maximum(mix, PROB_FLOOR)).mean())


def fit_moe(gating, labeled, config, val_data=None):
    """Train trunk and heads against the frozen gate.

    Unlabeled rows are dropped. Early stopping watches the held-out
    mixture negative log-likelihood; best-epoch parameters are restored.
    The gating encoder is only ever read (eval mode), never updated.
    """
    labeled = _labeled_xy(labeled)
    if val_data is None:
        train, val = split_train_val(labeled, config.val_fraction, config.seed)
    else:
        train, val = labeled, _labeled_xy(val_data)

    n_z = gating.output_dim
    d = train.n_features
    if gating.feature_dim != d:
        raise ShapeError(
            f"gating expects {gating.feature_dim} features, data has {d}"
        )
    rng = np.random.default_rng([config.seed, 3])
    trunk = [DenseLayer.initialize(d, TRUNK_WIDTH, "relu", rng)]
    heads = [DenseLayer.initialize(TRUNK_WIDTH, 1, "identity", rng)
             for _ in range(n_z)]
    model = MoEModel(gating, trunk, heads)

    params = {}
    for i, layer in enumerate(trunk):
        params[f"trunk_w{i}"] = layer.weights
        params[f"trunk_b{i}"] = layer.biases
    for i, head in enumerate(heads):
        params[f"head_w{i}"] = head.weights
        params[f"head_b{i}"] = head.biases
    adam = AdamState(learning_rate=config.learning_rate)

    x_train = train.features
    y_train = np.ascontiguousarray(train.labels)
    gates_train = gating.predict_proba(x_train)
    gates_val = gating.predict_proba(val.features)
    y_val = np.ascontiguousarray(val.labels)
    n = x_train.shape[0]

    best_val = math.inf
    best_state = None
    bad_epochs = 0

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = np.ascontiguousarray(x_train[idx])
            yb = np.ascontiguousarray(y_train[idx])
            gb = np.ascontiguousarray(gates_train[idx])
            h, trunk_cache = trunk[0].forward_cache(xb)
            head_caches = []
            logits = np.empty((xb.shape[0], n_z))
            for i, head in enumerate(heads):
                out, cache = head.forward_cache(h)
                logits[:, i] = out[:, 0]
                head_caches.append(cache)
            p = kernels.sigmoid(np.ascontiguousarray(logits))
            loss, dlogits = kernels.mixture_nll_grad(gb, p, yb, PROB_FLOOR)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite mixture loss at epoch {epoch + 1}")
            grads = {}
            dh = np.zeros_like(h)
            for i, head in enumerate(heads):
                dcol = np.ascontiguousarray(dlogits[:, i:i + 1])
                dh_i, grads[f"head_w{i}"], grads[f"head_b{i}"] = head.backward(
                    head_caches[i], dcol
                )
                dh += dh_i
            _, grads["trunk_w0"], grads["trunk_b0"] = trunk[0].backward(
                trunk_cache, dh
            )
            adam_step(params, grads, adam)

        val_loss = _mixture_val_loss(gates_val, model.head_probs(val.features), y_val)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch + 1}")
        if val_loss < best_val:
            best_val = val_loss
            best_state = {k: v.copy() for k, v in params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    for k, v in params.items():
        v[...] = best_state[k]
    return model


def fit_erm(labeled, config, val_data=None):
    """Baseline MLP with the same budget and early stopping as fit_moe."""
    labeled = _labeled_xy(labeled)
    if val_data is None:
        train, val = split_train_val(labeled, config.val_fraction, config.seed)
    else:
        train, val = labeled, _labeled_xy(val_data)

    d = train.n_features
    rng = np.random.default_rng([config.seed, 4])
    dims = [d, *ERM_HIDDEN]
    layers = [
        DenseLayer.initialize(dims[i], dims[i + 1], "relu", rng)
        for i in range(len(dims) - 1)
    ]
    layers.append(DenseLayer.initialize(dims[-1], 1, "identity", rng))
    model = ErmModel(layers)

    params = {}
    for i, layer in enumerate(layers):
        params[f"w{i}"] = layer.weights
        params[f"b{i}"] = layer.biases
    adam = AdamState(learning_rate=config.learning_rate)

    x_train = train.features
    y_train = np.ascontiguousarray(train.labels)
    y_val = np.ascontiguousarray(val.labels)
    ones = None
    n = x_train.shape[0]

    best_val = math.inf
    best_state = None
    bad_epochs = 0

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = np.ascontiguousarray(x_train[idx])
            yb = np.ascontiguousarray(y_train[idx])
            caches = []
            out = xb
            for layer in layers:
                out, cache = layer.forward_cache(out)
                caches.append(cache)
            p = kernels.sigmoid(np.ascontiguousarray(out))
            if ones is None or ones.shape[0] != p.shape[0]:
                ones = np.ones_like(p)
            loss, dlogits = kernels.mixture_nll_grad(ones, p, yb, PROB_FLOOR)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}")
            grads = {}
            d_out = dlogits
            for i in range(len(layers) - 1, -1, -1):
                d_out, grads[f"w{i}"], grads[f"b{i}"] = layers[i].backward(
                    caches[i], d_out
                )
            adam_step(params, grads, adam)

        p_val = model.predict_proba(val.features)
        p_y = np.where(y_val == 1, p_val, 1.0 - p_val)
        val_loss = float(-np.log(np.maximum(p_y, PROB_FLOOR)).mean())
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch + 1}")
        if val_loss < best_val:
            best_val = val_loss
            best_state = {k: v.copy() for k, v in params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    for k, v in params.items():
        v[...] = best_state[k]
    return model
