"""Confocal non-line-of-sight imaging with visibility and surface normals."""

import os as _os

# NLOSFACT_THREADS caps BLAS/OpenMP threads; it only takes effect when this
# package is imported before numpy.
_threads = _os.environ.get("NLOSFACT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
