"""Kernel backend selection.

The compiled extension (shardmax._ckernels) is preferred; the numpy fallback
(shardmax._pykernels) is used when the extension is missing or when
SHARDMAX_PURE_PY is set to a non-empty value. Both expose the same functions
with the same contracts. `benchmarks/bench_kernels.py` compares them.
"""

import os

from . import _pykernels

WEIGHTED_EXP = _pykernels.WEIGHTED_EXP
WEIGHTED_LOGIT = _pykernels.WEIGHTED_LOGIT

if os.environ.get("SHARDMAX_PURE_PY"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

softmax_stats = _impl.softmax_stats
softmax_loss_grad = _impl.softmax_loss_grad
topk_desc = _impl.topk_desc


def backend() -> str:
    """Name of the active kernel backend: 'cython' or 'numpy'."""
    return _impl.BACKEND_NAME
