"""Backend selection for the hot graph kernels.

The compiled extension is used when it was built; otherwise, or when the
``MPQ_PURE_PYTHON`` environment variable is set to a non-empty value other
than ``0``, the numpy fallback is used. Both produce identical bits.
"""
import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

_FORCE_PURE = os.environ.get("MPQ_PURE_PYTHON", "") not in ("", "0")

try:
    if _FORCE_PURE:
        raise ImportError("MPQ_PURE_PYTHON set")
    from . import _kernels as _impl

    BACKEND = "cython"
except ImportError as exc:  # extension not built, or disabled
    log.debug("using numpy kernels: %s", exc)
    _impl = _fallback
    BACKEND = "numpy"

dense = _impl.dense
conv2d = _impl.conv2d
global_avg_pool = _impl.global_avg_pool
qdq = _impl.qdq

__all__ = ["BACKEND", "dense", "conv2d", "global_avg_pool", "qdq"]
