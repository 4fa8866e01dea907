"""Hot numeric kernels with a numba path and a pure-numpy path.

The backend is picked once at import from ``PREFDISTILL_BACKEND``
(``numba`` or ``numpy``). ``numba`` is the default when importable.
Both paths share signatures and agree to rounding error; within one
backend every result is deterministic.
"""
import os

import numpy as np

ACT_IDENTITY = 0
ACT_TANH = 1
ACT_RELU = 2

ACTIVATIONS = {"identity": ACT_IDENTITY, "tanh": ACT_TANH, "relu": ACT_RELU}


# --- numpy path -------------------------------------------------------------

def _apply_act_np(z, act):
    if act == ACT_TANH:
        return np.tanh(z)
    if act == ACT_RELU:
        return np.maximum(z, 0.0)
    return z


def dense_forward_np(x, w, b, act):
    """Rows of ``x`` through one affine layer; returns the activated output."""
    return _apply_act_np(x @ w.T + b, act)


def dense_backward_np(x, w, out, act, upstream):
    """Backprop ``upstream`` (d loss / d out) through one layer.

    Returns (dW, db, dx) with parameter grads summed over rows.
    """
    if act == ACT_TANH:
        g = upstream * (1.0 - out * out)
    elif act == ACT_RELU:
        g = upstream * (out > 0.0)
    else:
        g = upstream
    return g.T @ x, g.sum(axis=0), g @ w


def mixture_eps_np(x, means, variances, log_weights, alpha, sigma):
    """Noise prediction and log-density of a noised diagonal Gaussian mixture.

    ``x`` is (n, d); components are rows of ``means``/``variances``.
    Each component noised to Normal(alpha*mean, alpha^2*var + sigma^2).
    Returns (eps, logp) with eps = -sigma * grad log p.
    """
    s = alpha * alpha * variances + sigma * sigma  # (m, d)
    diff = x[:, None, :] - alpha * means[None, :, :]  # (n, m, d)
    comp = -0.5 * (np.sum(np.log(2.0 * np.pi * s), axis=1)[None, :]
                   + np.sum(diff * diff / s[None, :, :], axis=2))
    logits = log_weights[None, :] + comp
    top = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - top)
    tot = ex.sum(axis=1, keepdims=True)
    resp = ex / tot
    logp = top[:, 0] + np.log(tot[:, 0])
    eps = sigma * np.einsum("nm,nmd->nd", resp, diff / s[None, :, :])
    return eps, logp


# --- numba path -------------------------------------------------------------

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

if njit is not None:

    # Matrix products go through numba's BLAS binding; the activation and
    # its derivative are fused into a single pass over the result.
    @njit(cache=True)
    def dense_forward_nb(x, w, b, act):
        out = x @ w.T
        n, m = out.shape
        for i in range(n):
            for j in range(m):
                v = out[i, j] + b[j]
                if act == 1:
                    v = np.tanh(v)
                elif act == 2 and v < 0.0:
                    v = 0.0
                out[i, j] = v
        return out

    @njit(cache=True)
    def dense_backward_nb(x, w, out, act, upstream):
        n, m = upstream.shape
        g = np.empty((n, m))
        db = np.zeros(m)
        for i in range(n):
            for j in range(m):
                v = upstream[i, j]
                if act == 1:
                    v *= 1.0 - out[i, j] * out[i, j]
                elif act == 2 and out[i, j] <= 0.0:
                    v = 0.0
                g[i, j] = v
                db[j] += v
        return g.T @ x, db, g @ w

    @njit(cache=True)
    def mixture_eps_nb(x, means, variances, log_weights, alpha, sigma):
        n, d = x.shape
        m = means.shape[0]
        s = alpha * alpha * variances + sigma * sigma
        lognorm = np.empty(m)
        for c in range(m):
            acc = 0.0
            for k in range(d):
                acc += np.log(2.0 * np.pi * s[c, k])
            lognorm[c] = acc
        eps = np.zeros((n, d))
        logp = np.empty(n)
        logits = np.empty(m)
        for i in range(n):
            top = -np.inf
            for c in range(m):
                q = 0.0
                for k in range(d):
                    diff = x[i, k] - alpha * means[c, k]
                    q += diff * diff / s[c, k]
                logits[c] = log_weights[c] - 0.5 * (lognorm[c] + q)
                if logits[c] > top:
                    top = logits[c]
            tot = 0.0
            for c in range(m):
                logits[c] = np.exp(logits[c] - top)
                tot += logits[c]
            logp[i] = top + np.log(tot)
            for c in range(m):
                r = logits[c] / tot
                for k in range(d):
                    eps[i, k] += r * (x[i, k] - alpha * means[c, k]) / s[c, k]
            for k in range(d):
                eps[i, k] *= sigma
        return eps, logp


def _select(name):
    if name == "numba" and njit is not None:
        return dense_forward_nb, dense_backward_nb, mixture_eps_nb
    if name in ("numba", "numpy"):
        return dense_forward_np, dense_backward_np, mixture_eps_np
    raise ValueError(f"unknown PREFDISTILL_BACKEND {name!r}; use 'numba' or 'numpy'")


BACKEND = os.environ.get("PREFDISTILL_BACKEND", "numba").strip().lower()
dense_forward, dense_backward, mixture_eps = _select(BACKEND)
if njit is None:
    BACKEND = "numpy"
