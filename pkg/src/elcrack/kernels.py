"""Backend selection for the pooling/threshold kernels.

The compiled Cython extension is preferred.  Setting the environment
variable ``ELCRACK_PURE_PYTHON=1`` before import, or a missing build,
selects the NumPy fallback.  Both backends expose the same three
functions; :func:`get_backend` returns either module explicitly, which the
tests and the benchmark use to compare them.
"""

import logging
import os

from elcrack import _lpfallback

log = logging.getLogger(__name__)

try:
    from elcrack import _lpkernels
except ImportError:  # extension not built
    _lpkernels = None

if _lpkernels is not None and os.environ.get("ELCRACK_PURE_PYTHON", "") not in ("1", "true"):
    _impl = _lpkernels
    BACKEND = "cython"
else:
    _impl = _lpfallback
    BACKEND = "python"
    if _lpkernels is None:
        log.debug("compiled kernels unavailable; using NumPy fallback")

lp_forward = _impl.lp_forward
lp_backward = _impl.lp_backward
half_max_threshold = _impl.half_max_threshold


def available_backends():
    names = ["python"]
    if _lpkernels is not None:
        names.insert(0, "cython")
    return names


def get_backend(name):
    if name == "cython":
        if _lpkernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _lpkernels
    if name == "python":
        return _lpfallback
    raise ValueError(f"unknown backend {name!r}")
