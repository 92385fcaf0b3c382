"""Numpy implementations of the hot kernels; reference for the compiled
backend and the fallback when it is unavailable."""

import numpy as np

_SQRT_2_OVER_PI = 0.7978845608028654  # sqrt(2/pi)
_GELU_C = 0.044715


def gelu_fwd(x):
    inner = _SQRT_2_OVER_PI * (x + _GELU_C * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(x, grad_out):
    inner = _SQRT_2_OVER_PI * (x + _GELU_C * x * x * x)
    t = np.tanh(inner)
    d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
    return grad_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)


def layer_norm_fwd(x, gain, bias, eps):
    """Rows of `x` normalized to zero mean / unit variance, then affine.

    Returns (y, mean, rstd); mean/rstd are kept for the backward pass.
    """
    mean = x.mean(axis=1)
    var = np.square(x - mean[:, None]).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mean[:, None]) * rstd[:, None] * gain + bias
    return y, mean, rstd


def layer_norm_bwd(x, gain, mean, rstd, grad_out):
    xhat = (x - mean[:, None]) * rstd[:, None]
    g = grad_out * gain
    grad_gain = (grad_out * xhat).sum(axis=0)
    grad_bias = grad_out.sum(axis=0)
    grad_x = rstd[:, None] * (g - g.mean(axis=1, keepdims=True)
                              - xhat * (g * xhat).mean(axis=1, keepdims=True))
    return grad_x, grad_gain, grad_bias


def adam_update(param, grad, m, v, step, lr, beta1, beta2, eps):
    """In-place bias-corrected Adam step on flat float buffers."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * np.square(grad)
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
