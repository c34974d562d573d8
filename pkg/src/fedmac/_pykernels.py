"""Pure-numpy fallback for the compiled kernels in ``_ckernels.pyx``.

Every function here has the same signature and in-place semantics as its
compiled twin, and agrees with it to rounding error.
"""

import numpy as np

LOG2 = 0.6931471805599453


def logcosh_excess(x, rho):
    d = LOG2 - np.log1p(np.exp(-2.0 * np.abs(x) / rho))
    return np.maximum(d, 0.0)


def tanh_scaled(x, rho):
    return np.tanh(x / rho)


def _finite(a):
    return bool(np.isfinite(a).all())


def theta_step(theta, grad, w, lr, gamma, lam, rho):
    if gamma != 0.0:
        theta -= lr * (grad + gamma * np.tanh(theta / rho) - lam * w)
    else:
        theta -= lr * (grad - lam * w)
    return _finite(theta)


def prox_step(x, grad, anchor, lr, gamma, mu, rho):
    g = grad
    if gamma != 0.0:
        g = g + gamma * np.tanh(x / rho)
    if mu != 0.0:
        g = g + mu * (x - anchor)
    x -= lr * g
    return _finite(x)


def w_step(w, theta, lr, lam, gamma_w, rho):
    g = lam * (w - theta)
    if gamma_w != 0.0:
        g += gamma_w * np.tanh(w / rho)
    w -= lr * g
    return _finite(w)


def softmax_xent(logits, labels):
    """Mean cross-entropy; overwrites ``logits`` with d(loss)/d(logits)."""
    b = logits.shape[0]
    rows = np.arange(b)
    logits -= logits.max(axis=1, keepdims=True)
    zy = logits[rows, labels].copy()
    np.exp(logits, out=logits)
    s = logits.sum(axis=1)
    loss = float(np.sum(np.log(s) - zy)) / b
    logits /= s[:, None]
    logits[rows, labels] -= 1.0
    logits /= b
    return loss


def ista_step(theta, grad, step, thresh):
    v = theta - step * grad
    np.copyto(theta, np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0))
    return _finite(theta)


def box_sq_dist(g, lo, hi):
    below = np.minimum(g - lo, 0.0)
    above = np.maximum(g - hi, 0.0)
    return np.sum(below * below + above * above, axis=1)
