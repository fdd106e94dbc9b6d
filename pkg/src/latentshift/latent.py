"""Latent-class posterior estimation from a discrete side variable.

Factorizes the observed conditional P(side | x) into an encoder
posterior over latent classes and a row-stochastic decoder matrix,
trained jointly by cross-entropy reconstruction plus a max-row-variance
penalty on the decoder. Includes automatic latent-cardinality selection
and penalty-weight tuning on held-out reconstruction loss.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from latentshift.backend import kernels
from latentshift.data import class_count, split_train_val
from latentshift.errors import DataError, ShapeError, TrainingError
from latentshift.nn import PROB_FLOOR, AdamState, BatchNormLayer, DenseLayer, adam_step

HIDDEN_WIDTHS = (64, 64)

# A successor cardinality must beat the previous held-out loss by more
# than this relative margin to count as an improvement; absolute floor
# guards the loss-near-zero regime.
NZ_SELECTION_REL_SLACK = 0.01
NZ_SELECTION_ABS_SLACK = 1e-4


class EncoderModel:
    """MLP mapping features to a point on the latent simplex.

    Two ReLU hidden layers, a linear head, batch normalization on the
    head outputs, then softmax.
    """

    def __init__(self, trunk, batch_norm):
        self.trunk = trunk
        self.batch_norm = batch_norm

    @classmethod
    def initialize(cls, feature_dim, n_z, rng, hidden=HIDDEN_WIDTHS):
        dims = [feature_dim, *hidden]
        trunk = [
            DenseLayer.initialize(dims[i], dims[i + 1], "relu", rng)
            for i in range(len(dims) - 1)
        ]
        trunk.append(DenseLayer.initialize(dims[-1], n_z, "identity", rng))
        return cls(trunk, BatchNormLayer(n_z))

    @property
    def feature_dim(self):
        return self.trunk[0].in_dim

    @property
    def output_dim(self):
        return self.trunk[-1].out_dim

    def forward(self, x, train, update_running=None):
        """Full forward pass. Returns (probs, caches) for backprop."""
        if x.ndim != 2 or x.shape[1] != self.feature_dim:
            raise ShapeError(
                f"encoder expects (n, {self.feature_dim}) input, got {x.shape}"
            )
        caches = []
        out = x
        for layer in self.trunk:
            out, cache = layer.forward_cache(out)
            caches.append(cache)
        out, bn_cache = self.batch_norm.forward_cache(
            out, train=train, update_running=update_running
        )
        probs = kernels.softmax_forward(out)
        caches.append(bn_cache)
        return probs, caches

    def backward(self, probs, caches, dprobs):
        """Backprop a gradient on the simplex output; train-mode only."""
        grads = {}
        d = kernels.softmax_backward(probs, dprobs)
        d, grads["gamma"], grads["beta"] = self.batch_norm.backward(caches[-1], d)
        for i in range(len(self.trunk) - 1, -1, -1):
            d, grads[f"w{i}"], grads[f"b{i}"] = self.trunk[i].backward(caches[i], d)
        return grads

    def predict_proba(self, x):
        """Eval-mode posterior for a batch or single sample."""
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        probs, _ = self.forward(x, train=False)
        return probs

    def parameters(self):
        """Live parameter arrays, keyed for the optimizer."""
        params = {}
        for i, layer in enumerate(self.trunk):
            params[f"w{i}"] = layer.weights
            params[f"b{i}"] = layer.biases
        params["gamma"] = self.batch_norm.gamma
        params["beta"] = self.batch_norm.beta
        return params

    def snapshot(self):
        state = {k: v.copy() for k, v in self.parameters().items()}
        state["running_mean"] = self.batch_norm.running_mean.copy()
        state["running_var"] = self.batch_norm.running_var.copy()
        return state

    def restore(self, state):
        for k, v in self.parameters().items():
            v[...] = state[k]
        self.batch_norm.running_mean = state["running_mean"].copy()
        self.batch_norm.running_var = state["running_var"].copy()

    def copy(self):
        clone = EncoderModel([l.copy() for l in self.trunk], self.batch_norm.copy())
        return clone


class DecoderMatrix:
    """Row-stochastic matrix of side-variable probabilities per latent class."""

    def __init__(self, entries):
        self.entries = np.ascontiguousarray(entries, dtype=np.float64)
        if self.entries.ndim != 2:
            raise ShapeError("decoder entries must be a matrix")

    @classmethod
    def initialize(cls, n_z, n_s, rng):
        entries = np.full((n_z, n_s), 1.0 / n_s)
        entries += rng.uniform(-0.01, 0.01, size=entries.shape)
        out = cls(entries)
        out.project()
        return out

    @property
    def n_z(self):
        return self.entries.shape[0]

    @property
    def n_s(self):
        return self.entries.shape[1]

    def project(self):
        """Clip to [0, 1] and renormalize rows in place."""
        kernels.project_rows_clip_renorm(self.entries)

    def copy(self):
        return DecoderMatrix(self.entries.copy())


def reconstruct_s_given_x(encoder, decoder, x):
    """Side-variable distribution implied by the factorization at x."""
    if decoder.n_z != encoder.output_dim:
        raise ShapeError(
            f"decoder has {decoder.n_z} rows but encoder outputs {encoder.output_dim}"
        )
    single = np.asarray(x).ndim == 1
    probs = encoder.predict_proba(x) @ decoder.entries
    return probs[0] if single else probs


def variance_regularizer(decoder):
    """Largest per-row variance of the decoder entries around 1/n_s."""
    entries = decoder.entries if isinstance(decoder, DecoderMatrix) else np.asarray(decoder)
    dev = entries - 1.0 / entries.shape[1]
    return float((dev * dev).mean(axis=1).max())


def _variance_reg_value_grad(entries):
    """Value and subgradient of the max-row-variance penalty.

    The gradient flows through the row attaining the max (lowest index
    on ties).
    """
    n_s = entries.shape[1]
    dev = entries - 1.0 / n_s
    row_var = (dev * dev).mean(axis=1)
    top = int(np.argmax(row_var))
    grad = np.zeros_like(entries)
    grad[top] = (2.0 / n_s) * dev[top]
    return float(row_var[top]), grad


def _decoder_tangent_grad(entries, grad):
    """Gradient of the loss through the row-sum normalization.

    The decoder rows are kept on the simplex by renormalization, so the
    optimized parametrization is row/sum(row); at sum 1 its Jacobian
    turns a raw entry gradient g into g - (g . row) per row. Without
    this, the reconstruction gradient is sign-uniform and Adam's scale
    normalization makes every update cancel against the renormalization.
    """
    inner = (grad * entries).sum(axis=1, keepdims=True)
    return grad - inner


@dataclass
class LatentFitReport:
    chosen_nz: int
    chosen_lambda: float
    val_reconstruction_loss_by_nz: dict
    final_val_loss: float
    epochs_run: int
    no_elbow: bool = False
    val_loss_by_lambda: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


def _reconstruction_loss(encoder, decoder, x, targets):
    probs = encoder.predict_proba(x) @ decoder.entries
    n = probs.shape[0]
    pt = probs[np.arange(n), targets]
    return float(-np.log(np.maximum(pt, PROB_FLOOR)).mean())


def _resolve_target(data, target_column):
    if target_column not in ("proxy", "source_id"):
        raise DataError(
            f"target_column must be 'proxy' or 'source_id', got {target_column!r}"
        )
    return data.column(target_column)


def _fit_latent_once(train, val, t_train, t_val, n_z, n_s, lam, config, seed_key):
    """One optimization run from one seeded init. Returns
    (encoder, decoder, best_val_loss, epochs_run)."""
    rng = np.random.default_rng(seed_key)
    encoder = EncoderModel.initialize(train.n_features, n_z, rng)
    decoder = DecoderMatrix.initialize(n_z, n_s, rng)
    encoder.batch_norm.mode = "train"

    params = encoder.parameters()
    params["decoder"] = decoder.entries
    adam = AdamState(learning_rate=config.learning_rate)

    x_train = train.features
    n = x_train.shape[0]

    best_val = math.inf
    best_state = None
    bad_epochs = 0
    epochs_run = 0

    for epoch in range(config.epochs):
        epochs_run = epoch + 1
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = np.ascontiguousarray(x_train[idx])
            tb = np.ascontiguousarray(t_train[idx])
            phi, caches = encoder.forward(xb, train=True)
            recon = phi @ decoder.entries
            loss_ce, drecon = kernels.ce_loss_grad(recon, tb, PROB_FLOOR)
            reg_val, reg_grad = _variance_reg_value_grad(decoder.entries)
            if not np.isfinite(loss_ce + lam * reg_val):
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch + 1}"
                )
            grads = encoder.backward(phi, caches, drecon @ decoder.entries.T)
            grads["decoder"] = _decoder_tangent_grad(
                decoder.entries, phi.T @ drecon + lam * reg_grad
            )
            adam_step(params, grads, adam)
            decoder.project()

        val_loss = _reconstruction_loss(encoder, decoder, val.features, t_val)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch + 1}")
        if val_loss < best_val:
            best_val = val_loss
            best_state = (encoder.snapshot(), decoder.entries.copy())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    encoder.restore(best_state[0])
    decoder.entries[...] = best_state[1]
    encoder.batch_norm.mode = "eval"
    return encoder, decoder, best_val, epochs_run


def fit_latent(data, target_column, n_z, lam, config, val_data=None):
    """Train the encoder/decoder pair at a fixed latent cardinality.

    Minimizes mean reconstruction cross-entropy plus lam times the
    decoder variance penalty with Adam; the decoder is clipped to [0, 1]
    and row-renormalized after every step. Early stopping watches the
    held-out reconstruction loss (penalty excluded) and the best-epoch
    parameters are restored. The fit is repeated from config.restarts
    independent inits and the best held-out loss wins, since the
    factorization landscape has local optima that merge latent classes.
    """
    if n_z < 1:
        raise DataError("n_z must be at least 1")
    if lam < 0.0:
        raise DataError("lambda must be nonnegative")
    _resolve_target(data, target_column)
    if val_data is None:
        train, val = split_train_val(data, config.val_fraction, config.seed)
    else:
        train, val = data, val_data
    t_train = np.ascontiguousarray(_resolve_target(train, target_column))
    t_val = _resolve_target(val, target_column)
    n_s = max(class_count(t_train), class_count(t_val))

    warnings = []
    if n_s < n_z:
        warnings.append(
            f"requested n_z={n_z} exceeds the {n_s} observed side classes; "
            "the factorization rank cannot support it"
        )

    best = None
    for restart in range(max(1, config.restarts)):
        fit = _fit_latent_once(
            train, val, t_train, t_val, n_z, n_s, lam, config,
            seed_key=[config.seed, 2, n_z, restart],
        )
        if best is None or fit[2] < best[2]:
            best = fit
    encoder, decoder, best_val, epochs_run = best

    report = LatentFitReport(
        chosen_nz=n_z,
        chosen_lambda=lam,
        val_reconstruction_loss_by_nz={n_z: best_val},
        final_val_loss=best_val,
        epochs_run=epochs_run,
        warnings=warnings,
    )
    return encoder, decoder, report


def choose_elbow(loss_by_nz, rel_slack=NZ_SELECTION_REL_SLACK,
                 abs_slack=NZ_SELECTION_ABS_SLACK):
    """First k whose successor fails to improve the held-out loss.

    A successor within the slack of the previous loss counts as no
    improvement; the slack absorbs the sampling noise of the held-out
    estimate. Returns (chosen_k, no_elbow) where no_elbow means the
    losses were still strictly improving at the largest k tried.
    """
    ks = sorted(loss_by_nz)
    for prev, nxt in zip(ks, ks[1:]):
        slack = max(abs_slack, rel_slack * abs(loss_by_nz[prev]))
        if loss_by_nz[nxt] >= loss_by_nz[prev] - slack:
            return prev, False
    return ks[-1], True


def select_nz(data, target_column, lam, nz_max, config, val_data=None):
    """Grow the latent cardinality until held-out reconstruction stalls."""
    if nz_max < 1:
        raise DataError("nz_max must be at least 1")
    losses = {}
    reports = {}
    for k in range(1, nz_max + 1):
        _, _, rep = fit_latent(data, target_column, k, lam, config, val_data)
        losses[k] = rep.final_val_loss
        reports[k] = rep
        chosen, no_elbow = choose_elbow(losses)
        if not no_elbow:
            break
    chosen, no_elbow = choose_elbow(losses)
    out = reports[chosen]
    return LatentFitReport(
        chosen_nz=chosen,
        chosen_lambda=lam,
        val_reconstruction_loss_by_nz=losses,
        final_val_loss=losses[chosen],
        epochs_run=out.epochs_run,
        no_elbow=no_elbow,
        warnings=sum((reports[k].warnings for k in sorted(reports)), []),
    )


def tune_lambda(data, target_column, n_z, grid, config, val_data=None):
    """Fit per penalty weight; lowest held-out loss wins, ties to larger."""
    if not grid:
        raise DataError("lambda grid must be nonempty")
    best = None
    loss_by_lambda = {}
    for lam in sorted(grid):
        encoder, decoder, rep = fit_latent(
            data, target_column, n_z, lam, config, val_data
        )
        loss_by_lambda[lam] = rep.final_val_loss
        if best is None or rep.final_val_loss <= best[2].final_val_loss:
            best = (encoder, decoder, rep)
    encoder, decoder, rep = best
    rep.val_loss_by_lambda = loss_by_lambda
    return encoder, decoder, rep
