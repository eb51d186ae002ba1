"""Hot kernels: LSTM recurrence (forward/backward) and STAT pooling.

The compiled extension is used when it imports; otherwise the NumPy
fallback is selected.  Set ``AFFEX_PURE_PYTHON=1`` to force the fallback.
``BACKEND`` names the active implementation.
"""

import importlib
import os

import numpy as np

from . import _pure

_ext = None
if os.environ.get("AFFEX_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        _ext = importlib.import_module(f"{__name__}._ext")
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "numpy"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def get_backend(name=None):
    """Return the kernel module for ``name`` (``cython``/``numpy``), or the active one."""
    name = name or BACKEND
    if name == "numpy":
        return _pure
    if name == "cython":
        if _ext is None:
            raise ImportError("compiled kernels are not available")
        return _ext
    raise ValueError(f"unknown backend {name!r}")


if _ext is not None:

    def lstm_seq_forward(X, Wx, Wh, b):
        return _ext.lstm_seq_forward(_c(X), _c(Wx), _c(Wh), _c(b))

    def lstm_seq_backward(dHs, X, Wx, Wh, Hs, gates, Cs):
        return _ext.lstm_seq_backward(_c(dHs), _c(X), _c(Wx), _c(Wh), _c(Hs), _c(gates), _c(Cs))

    def stat_pool_forward(M):
        return _ext.stat_pool_forward(_c(M))

    def stat_pool_backward(dout, amax, amin, s):
        return _ext.stat_pool_backward(
            _c(dout), np.ascontiguousarray(amax, dtype=np.int64), np.ascontiguousarray(amin, dtype=np.int64), int(s)
        )

else:
    lstm_seq_forward = _pure.lstm_seq_forward
    lstm_seq_backward = _pure.lstm_seq_backward
    stat_pool_forward = _pure.stat_pool_forward
    stat_pool_backward = _pure.stat_pool_backward

__all__ = [
    "BACKEND",
    "get_backend",
    "lstm_seq_forward",
    "lstm_seq_backward",
    "stat_pool_forward",
    "stat_pool_backward",
]
