"""Hot numeric kernels with backend selection at import time.

The compiled extension (`sgvlp.kernels._core`, built from Cython) is used
when importable; otherwise the numpy fallback (`sgvlp.kernels._pure`) is.
Set SGVLP_PURE_PYTHON=1 to force the fallback. Within one process a single
backend serves every call, which keeps runs bitwise reproducible.
"""

import os

import numpy as np

from sgvlp.kernels import _pure

if os.environ.get("SGVLP_PURE_PYTHON"):
    _impl = _pure
    BACKEND = "python"
else:
    try:
        from sgvlp.kernels import _core as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pure
        BACKEND = "python"

_COMPILED = BACKEND == "cython"


def _flat(a):
    return np.ascontiguousarray(a).reshape(-1)


def gelu_fwd(x):
    if _COMPILED:
        return _impl.gelu_fwd(_flat(x)).reshape(x.shape)
    return _impl.gelu_fwd(x)


def gelu_bwd(x, grad_out):
    if _COMPILED:
        return _impl.gelu_bwd(_flat(x), _flat(grad_out)).reshape(x.shape)
    return _impl.gelu_bwd(x, grad_out)


def layer_norm_fwd(x2d, gain, bias, eps=1e-12):
    return _impl.layer_norm_fwd(np.ascontiguousarray(x2d), gain, bias, eps)


def layer_norm_bwd(x2d, gain, mean, rstd, grad_out):
    return _impl.layer_norm_bwd(np.ascontiguousarray(x2d), gain, mean, rstd,
                                np.ascontiguousarray(grad_out))


def adam_update(param, grad, m, v, step, lr, beta1, beta2, eps):
    if _COMPILED:
        _impl.adam_update(param.reshape(-1), _flat(grad), m.reshape(-1),
                          v.reshape(-1), step, lr, beta1, beta2, eps)
    else:
        _impl.adam_update(param, grad, m, v, step, lr, beta1, beta2, eps)
