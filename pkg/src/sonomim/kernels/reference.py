"""Numpy implementations of the hot kernels.

This is the fallback backend when the compiled extension is unavailable.
Formulations avoid temporaries where it matters; inputs are never mutated
except for the explicitly in-place optimizer update.
"""

import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def softmax_fwd(x):
    """Row-wise softmax of a 2D array."""
    m = x.max(axis=1, keepdims=True)
    out = np.subtract(x, m)
    np.exp(out, out=out)
    z = out.sum(axis=1, keepdims=True)
    np.reciprocal(z, out=z)
    out *= z
    return out


def softmax_bwd(y, g):
    t = (g * y).sum(axis=1, keepdims=True)
    out = np.subtract(g, t)
    out *= y
    return out


def gelu_fwd(x):
    """tanh-form GELU. Returns (y, u) with u the tanh term saved for backward."""
    u = x * x
    u *= x
    u *= _GELU_A
    u += x
    u *= _GELU_C
    np.tanh(u, out=u)
    y = u + 1.0
    y *= x
    y *= 0.5
    return y, u


def gelu_bwd(x, u, g):
    sech2 = 1.0 - u * u
    inner = x * x
    inner *= 3.0 * _GELU_A
    inner += 1.0
    inner *= _GELU_C
    dx = sech2 * inner
    dx *= x
    dx += 1.0 + u
    dx *= 0.5
    dx *= g
    return dx


def layernorm_fwd(x, gamma, beta, eps):
    """Normalize each row of 2D x; returns (y, xhat, rstd)."""
    mu = x.mean(axis=1, keepdims=True)
    xhat = np.subtract(x, mu)
    var = np.mean(xhat * xhat, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat *= rstd
    y = xhat * gamma
    y += beta
    return y, xhat, rstd.ravel()


def layernorm_bwd(xhat, rstd, gamma, g):
    """Input gradient only; gamma/beta gradients are plain column sums done
    by the caller."""
    gxg = g * gamma
    s1 = gxg.mean(axis=1, keepdims=True)
    s2 = (gxg * xhat).mean(axis=1, keepdims=True)
    dx = gxg
    dx -= s1
    dx -= xhat * s2
    dx *= rstd[:, None]
    return dx


def sigmoid_fwd(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2, wd_mult):
    """Fused AdamW step, in place on p, m, v.

    bc1/bc2 are the bias corrections 1-beta^t; wd_mult is the decoupled decay
    factor 1-lr*wd (1.0 for excluded tensors), applied after the moment update.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    step = np.sqrt(v / bc2)
    step += eps
    np.divide(m / bc1, step, out=step)
    step *= lr
    p -= step
    if wd_mult != 1.0:
        p *= wd_mult
