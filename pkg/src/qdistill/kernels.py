"""Kernel backend selection.

The compiled extension is used when it imports; set ``QDISTILL_PURE_PYTHON=1``
to force the numpy fallback.
"""
import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

if os.environ.get("QDISTILL_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")
        _impl = _pykernels

BACKEND = _impl.BACKEND
correlate2d = _impl.correlate2d
apply_1q = _impl.apply_1q
apply_cnot = _impl.apply_cnot
