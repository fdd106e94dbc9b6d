"""Test-time correction for a shifted latent-class marginal.

A method-of-moments estimator: the train-time joint of (hard gate
prediction, soft gate mass) plays the confusion matrix role, the hard
prediction marginal on test covariates is the observed moment, and the
solved density ratio reweights the gating posterior row by row. Only
test covariates are consumed; no side variable is needed at test time.
"""

from dataclasses import dataclass

import numpy as np

from latentshift.errors import (
    DataError,
    DegenerateReweightError,
    ShiftEstimationError,
)

CONDITION_LIMIT = 1e8


@dataclass
class ShiftWeights:
    """Per-class density ratio of test to train latent marginals."""

    ratios: np.ndarray
    train_marginal: np.ndarray
    test_marginal_implied: np.ndarray

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        self.train_marginal = np.asarray(self.train_marginal, dtype=np.float64)
        self.test_marginal_implied = np.asarray(
            self.test_marginal_implied, dtype=np.float64
        )
        if (self.ratios < 0).any():
            raise DataError("shift ratios must be nonnegative")
        if abs(float(self.ratios @ self.train_marginal) - 1.0) > 1e-6:
            raise DataError("ratios times train marginal must normalize to 1")

    @classmethod
    def identity(cls, train_marginal):
        ones = np.ones_like(train_marginal)
        return cls(ones, train_marginal, train_marginal.copy())


@dataclass
class ConfusionEstimate:
    """Train-time joint of hard gate predictions vs soft gate mass.

    joint[i, j] approximates the probability of (hard prediction i,
    latent class j) under the training covariates, using the gate's own
    posterior as the reference over classes. train_marginal is the mean
    posterior.
    """

    joint: np.ndarray
    train_marginal: np.ndarray
    predictor: str = "argmax of gating posterior, ties to lowest index"

    def __post_init__(self):
        self.joint = np.asarray(self.joint, dtype=np.float64)
        self.train_marginal = np.asarray(self.train_marginal, dtype=np.float64)
        if self.joint.ndim != 2 or self.joint.shape[0] != self.joint.shape[1]:
            raise DataError("confusion joint must be square")
        if (self.joint < 0).any() or abs(self.joint.sum() - 1.0) > 1e-6:
            raise DataError("confusion entries must be >= 0 and sum to 1")


def estimate_confusion(gating, train_x, reference="soft"):
    """Confusion of the gate's hard predictions over training covariates.

    reference picks the class-mass estimate paired with each hard
    prediction: "soft" uses the gate's posterior mass (the joint then
    has off-diagonal entries wherever the gate is unsure), "hard" uses
    the hard predictions themselves (diagonal joint). The soft variant
    inherits any calibration bias of the gate's posterior mass, which in
    practice distorts the solved ratios far more than imperfect hard
    assignments do, so the prediction pipeline uses "hard".
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    if train_x.size == 0:
        raise DataError("train_x must be nonempty")
    if reference not in ("soft", "hard"):
        raise DataError(f"reference must be soft or hard, got {reference!r}")
    phi = gating.predict_proba(train_x)
    pred = phi.argmax(axis=1)
    n_z = phi.shape[1]
    joint = np.zeros((n_z, n_z))
    if reference == "soft":
        for i in range(n_z):
            rows = phi[pred == i]
            if rows.size:
                joint[i] = rows.sum(axis=0)
        joint /= phi.shape[0]
        marginal = phi.mean(axis=0)
    else:
        counts = np.bincount(pred, minlength=n_z) / phi.shape[0]
        np.fill_diagonal(joint, counts)
        marginal = counts
    predictor = (
        "argmax of gating posterior, ties to lowest index"
        + (" (hard self-reference)" if reference == "hard" else "")
    )
    return ConfusionEstimate(joint=joint, train_marginal=marginal,
                             predictor=predictor)


def solve_shift(confusion, test_pred_marginal):
    """Solve joint @ w = test prediction marginal for the density ratio.

    Negative solutions are clipped to zero and the ratio is rescaled so
    the implied test marginal (ratio times train marginal) normalizes.
    """
    mu = np.asarray(test_pred_marginal, dtype=np.float64)
    joint = confusion.joint
    if mu.shape != (joint.shape[0],):
        raise DataError("test prediction marginal has wrong length")
    cond = np.linalg.cond(joint)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise ShiftEstimationError(
            f"confusion matrix condition number {cond:.3g} exceeds "
            f"{CONDITION_LIMIT:.0e}; fall back to unit weights"
        )
    w = np.linalg.solve(joint, mu)
    w = np.maximum(w, 0.0)
    scale = float(w @ confusion.train_marginal)
    if scale <= 0.0:
        raise ShiftEstimationError(
            "clipped ratio has no mass on the training marginal; "
            "fall back to unit weights"
        )
    w = w / scale
    return ShiftWeights(
        ratios=w,
        train_marginal=confusion.train_marginal.copy(),
        test_marginal_implied=w * confusion.train_marginal,
    )


def reweight_posterior(gate, weights):
    """Rescale a posterior by the density ratio and renormalize.

    Accepts one simplex vector or a matrix of rows; rows whose rescaled
    mass vanishes raise DegenerateReweightError.
    """
    ratios = weights.ratios if isinstance(weights, ShiftWeights) else np.asarray(weights)
    gate = np.asarray(gate, dtype=np.float64)
    single = gate.ndim == 1
    rows = np.atleast_2d(gate)
    num = rows * ratios
    denom = num.sum(axis=1)
    if (denom <= 0.0).any():
        raise DegenerateReweightError(
            "gate support is disjoint from the shift-weight support"
        )
    out = num / denom[:, None]
    return out[0] if single else out


@dataclass
class AdaptResult:
    weights: ShiftWeights
    probabilities: np.ndarray
    fallback: bool = False


def adapt_and_predict(model, test_x):
    """Estimate the marginal shift from test covariates and predict.

    Uses the confusion stored on the model at train time. If the moment
    system is unsolvable the gate is left unadjusted and the result is
    flagged.
    """
    if model.confusion is None:
        raise DataError("model carries no training confusion estimate")
    test_x = np.asarray(test_x, dtype=np.float64)
    test_x = np.atleast_2d(test_x)
    if test_x.shape[0] == 0:
        raise DataError("test set must be nonempty")
    phi = model.gating.predict_proba(test_x)
    n_z = phi.shape[1]
    mu = np.bincount(phi.argmax(axis=1), minlength=n_z) / phi.shape[0]
    try:
        weights = solve_shift(model.confusion, mu)
        gates = reweight_posterior(phi, weights)
        fallback = False
    except ShiftEstimationError:
        weights = ShiftWeights.identity(model.confusion.train_marginal)
        gates = phi
        fallback = True
    probs = model.predict_proba(test_x, gate_override=gates)
    return AdaptResult(weights=weights, probabilities=probs, fallback=fallback)
