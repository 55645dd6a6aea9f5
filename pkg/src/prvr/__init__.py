"""Partially relevant video retrieval with a dual-branch student, dynamic
distillation from a file-backed teacher and dynamic soft targets."""

from __future__ import annotations

import os

# BLAS pools read these once, at numpy import time.
_threads = os.environ.get("PRVR_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
