"""Kernel backend selection.

The compiled extension is used when it was built and importable; set
``PELLETFLOW_PURE_PYTHON=1`` to force the pure-Python kernels.
"""
import logging
import os

from . import _pykernels as pure

logger = logging.getLogger(__name__)

compiled = None
if not os.environ.get("PELLETFLOW_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using pure Python")

active = compiled if compiled is not None else pure
BACKEND = "cython" if compiled is not None else "python"

SCALE = pure.SCALE
fnv1a64 = active.fnv1a64
key_hash_index = active.key_hash_index
bucket_counts = active.bucket_counts
workload_series = active.workload_series
pipeline_tick = active.pipeline_tick


def backends():
    """Return the importable backends as ``{name: module}``."""
    found = {"python": pure}
    if compiled is not None:
        found["cython"] = compiled
    return found
