# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused per-batch training kernels, compiled backend.

Mirrors `latentshift._kernels_py` exactly; see that module for the
semantics of each function.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

BACKEND_NAME = "compiled"


def relu_forward(cnp.ndarray x):
    out = np.empty_like(x)
    cdef double[::1] xf = x.ravel()
    cdef double[::1] of = out.ravel()
    cdef Py_ssize_t i, n = xf.shape[0]
    for i in range(n):
        of[i] = xf[i] if xf[i] > 0.0 else 0.0
    return out


def relu_backward(cnp.ndarray y, cnp.ndarray dy):
    out = np.empty_like(dy)
    cdef double[::1] yf = y.ravel()
    cdef double[::1] df = dy.ravel()
    cdef double[::1] of = out.ravel()
    cdef Py_ssize_t i, n = yf.shape[0]
    for i in range(n):
        of[i] = df[i] if yf[i] > 0.0 else 0.0
    return out


def sigmoid(cnp.ndarray z):
    out = np.empty_like(z)
    cdef double[::1] zf = z.ravel()
    cdef double[::1] of = out.ravel()
    cdef Py_ssize_t i, n = zf.shape[0]
    cdef double e
    for i in range(n):
        if zf[i] >= 0.0:
            of[i] = 1.0 / (1.0 + exp(-zf[i]))
        else:
            e = exp(zf[i])
            of[i] = e / (1.0 + e)
    return out


def softmax_forward(double[:, ::1] z):
    cdef Py_ssize_t n = z.shape[0], k = z.shape[1]
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] p = out
    cdef Py_ssize_t i, j
    cdef double mx, total
    for i in range(n):
        mx = z[i, 0]
        for j in range(1, k):
            if z[i, j] > mx:
                mx = z[i, j]
        total = 0.0
        for j in range(k):
            p[i, j] = exp(z[i, j] - mx)
            total += p[i, j]
        for j in range(k):
            p[i, j] /= total
    return out


def softmax_backward(double[:, ::1] p, double[:, ::1] dp):
    cdef Py_ssize_t n = p.shape[0], k = p.shape[1]
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] dz = out
    cdef Py_ssize_t i, j
    cdef double inner
    for i in range(n):
        inner = 0.0
        for j in range(k):
            inner += dp[i, j] * p[i, j]
        for j in range(k):
            dz[i, j] = p[i, j] * (dp[i, j] - inner)
    return out


def bn_forward_train(double[:, ::1] x, double[::1] gamma, double[::1] beta,
                     double eps):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1]
    y_arr = np.empty((n, k), dtype=np.float64)
    xhat_arr = np.empty((n, k), dtype=np.float64)
    mean_arr = np.zeros(k, dtype=np.float64)
    var_arr = np.zeros(k, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr
    cdef Py_ssize_t i, j
    cdef double d, inv_std
    for j in range(k):
        for i in range(n):
            mean[j] += x[i, j]
        mean[j] /= n
        for i in range(n):
            d = x[i, j] - mean[j]
            var[j] += d * d
        var[j] /= n
        inv_std = 1.0 / sqrt(var[j] + eps)
        for i in range(n):
            xhat[i, j] = (x[i, j] - mean[j]) * inv_std
            y[i, j] = gamma[j] * xhat[i, j] + beta[j]
    return y_arr, xhat_arr, mean_arr, var_arr


def bn_forward_eval(double[:, ::1] x, double[::1] gamma, double[::1] beta,
                    double[::1] running_mean, double[::1] running_var,
                    double eps):
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1]
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef Py_ssize_t i, j
    cdef double inv_std
    for j in range(k):
        inv_std = 1.0 / sqrt(running_var[j] + eps)
        for i in range(n):
            y[i, j] = gamma[j] * (x[i, j] - running_mean[j]) * inv_std + beta[j]
    return out


def bn_backward(double[:, ::1] dy, double[:, ::1] xhat, double[::1] gamma,
                double[::1] var, double eps):
    cdef Py_ssize_t n = dy.shape[0], k = dy.shape[1]
    dx_arr = np.empty((n, k), dtype=np.float64)
    dgamma_arr = np.zeros(k, dtype=np.float64)
    dbeta_arr = np.zeros(k, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef Py_ssize_t i, j
    cdef double s1, s2, inv_std, dxh
    for j in range(k):
        s1 = 0.0
        s2 = 0.0
        for i in range(n):
            dgamma[j] += dy[i, j] * xhat[i, j]
            dbeta[j] += dy[i, j]
            dxh = dy[i, j] * gamma[j]
            s1 += dxh
            s2 += dxh * xhat[i, j]
        inv_std = 1.0 / sqrt(var[j] + eps)
        for i in range(n):
            dxh = dy[i, j] * gamma[j]
            dx[i, j] = (inv_std / n) * (n * dxh - s1 - xhat[i, j] * s2)
    return dx_arr, dgamma_arr, dbeta_arr


def ce_loss_grad(double[:, ::1] probs, long[::1] targets, double floor):
    cdef Py_ssize_t n = probs.shape[0], k = probs.shape[1]
    dprobs_arr = np.zeros((n, k), dtype=np.float64)
    cdef double[:, ::1] dprobs = dprobs_arr
    cdef Py_ssize_t i
    cdef long t
    cdef double pt, loss = 0.0
    for i in range(n):
        t = targets[i]
        pt = probs[i, t]
        loss += -log(pt if pt > floor else floor)
        if pt >= floor:
            dprobs[i, t] = -1.0 / (n * pt)
    return loss / n, dprobs_arr


def mixture_nll_grad(double[:, ::1] gates, double[:, ::1] head_probs,
                     long[::1] y, double floor):
    cdef Py_ssize_t n = gates.shape[0], k = gates.shape[1]
    dlogits_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] dlogits = dlogits_arr
    cdef Py_ssize_t i, j
    cdef double mix, p_y, dmix, sign, loss = 0.0
    for i in range(n):
        sign = 1.0 if y[i] == 1 else -1.0
        mix = 0.0
        for j in range(k):
            p_y = head_probs[i, j] if y[i] == 1 else 1.0 - head_probs[i, j]
            mix += gates[i, j] * p_y
        loss += -log(mix if mix > floor else floor)
        dmix = -1.0 / (n * mix) if mix >= floor else 0.0
        for j in range(k):
            dlogits[i, j] = (dmix * gates[i, j] * head_probs[i, j]
                             * (1.0 - head_probs[i, j]) * sign)
    return loss / n, dlogits_arr


def adam_update(cnp.ndarray param, cnp.ndarray grad, cnp.ndarray m,
                cnp.ndarray v, long t, double lr, double beta1, double beta2,
                double eps):
    cdef double[::1] pf = param.ravel()
    cdef double[::1] gf = grad.ravel()
    cdef double[::1] mf = m.ravel()
    cdef double[::1] vf = v.ravel()
    cdef Py_ssize_t i, n = pf.shape[0]
    cdef double c1 = 1.0 - beta1**t
    cdef double c2 = 1.0 - beta2**t
    cdef double mhat, vhat
    for i in range(n):
        mf[i] = beta1 * mf[i] + (1.0 - beta1) * gf[i]
        vf[i] = beta2 * vf[i] + (1.0 - beta2) * gf[i] * gf[i]
        mhat = mf[i] / c1
        vhat = vf[i] / c2
        pf[i] -= lr * mhat / (sqrt(vhat) + eps)


def project_rows_clip_renorm(double[:, ::1] mat):
    cdef Py_ssize_t r = mat.shape[0], c = mat.shape[1]
    cdef Py_ssize_t i, j
    cdef double total
    for i in range(r):
        total = 0.0
        for j in range(c):
            if mat[i, j] < 0.0:
                mat[i, j] = 0.0
            elif mat[i, j] > 1.0:
                mat[i, j] = 1.0
            total += mat[i, j]
        if total <= 0.0:
            for j in range(c):
                mat[i, j] = 1.0 / c
        else:
            for j in range(c):
                mat[i, j] /= total
