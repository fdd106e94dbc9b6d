"""Pure-numpy implementations of the hot per-batch training kernels.

`latentshift.backend` falls back to this module when the compiled
extension is unavailable. Both backends expose the same signatures on
float64 C-contiguous arrays; matrix products stay in numpy (BLAS) on
either path, so the backends differ only in the fused elementwise and
reduction passes.
"""

import numpy as np

BACKEND_NAME = "python"


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(y, dy):
    """Gradient through ReLU given its output y."""
    return np.where(y > 0.0, dy, 0.0)


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax_forward(z):
    """Row-wise softmax with max subtraction; z is (N, K)."""
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(p, dp):
    inner = (dp * p).sum(axis=1, keepdims=True)
    return p * (dp - inner)


def bn_forward_train(x, gamma, beta, eps):
    """Batch statistics normalization. Returns (y, xhat, mean, var).

    var is the biased (1/N) batch variance; running-buffer updates are
    the caller's job.
    """
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    xhat = (x - mean) / np.sqrt(var + eps)
    return gamma * xhat + beta, xhat, mean, var


def bn_forward_eval(x, gamma, beta, running_mean, running_var, eps):
    xhat = (x - running_mean) / np.sqrt(running_var + eps)
    return gamma * xhat + beta


def bn_backward(dy, xhat, gamma, var, eps):
    n = dy.shape[0]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    inv_std = 1.0 / np.sqrt(var + eps)
    dx = (inv_std / n) * (
        n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
    )
    return dx, dgamma, dbeta


def ce_loss_grad(probs, targets, floor):
    """Mean cross-entropy of class probabilities against integer targets.

    Probabilities below `floor` are clamped inside the log, which zeroes
    their gradient. Returns (loss, dprobs).
    """
    n = probs.shape[0]
    pt = probs[np.arange(n), targets]
    loss = float(-np.log(np.maximum(pt, floor)).mean())
    dprobs = np.zeros_like(probs)
    dprobs[np.arange(n), targets] = np.where(pt >= floor, -1.0 / (n * pt), 0.0)
    return loss, dprobs


def mixture_nll_grad(gates, head_probs, y, floor):
    """Negative log-likelihood of the gated mixture for binary labels.

    gates and head_probs are (N, K); head_probs are per-head sigmoid
    outputs P(Y=1 | head). Returns (loss, dlogits) where dlogits is the
    gradient with respect to the pre-sigmoid head logits. Gate weights
    are treated as constants.
    """
    n, _ = gates.shape
    ycol = y[:, None].astype(np.float64)
    p_y = head_probs * ycol + (1.0 - head_probs) * (1.0 - ycol)
    mix = (gates * p_y).sum(axis=1)
    loss = float(-np.log(np.maximum(mix, floor)).mean())
    dmix = np.where(mix >= floor, -1.0 / (n * mix), 0.0)
    sign = 2.0 * ycol - 1.0
    dlogits = dmix[:, None] * gates * head_probs * (1.0 - head_probs) * sign
    return loss, dlogits


def adam_update(param, grad, m, v, t, lr, beta1, beta2, eps):
    """One bias-corrected Adam update, in place; t is the 1-based step."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def project_rows_clip_renorm(mat):
    """Clip entries to [0, 1] and renormalize each row to sum 1, in place.

    A row clipped to all zeros becomes uniform.
    """
    np.clip(mat, 0.0, 1.0, out=mat)
    sums = mat.sum(axis=1)
    zero = sums <= 0.0
    if zero.any():
        mat[zero] = 1.0 / mat.shape[1]
        sums = mat.sum(axis=1)
    mat /= sums[:, None]
