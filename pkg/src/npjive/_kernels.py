"""Backend selection for the grouped-reduction kernels.

The compiled extension is preferred; the numpy fallback is used when it is
missing or when the environment variable ``NPJIVE_PURE_PYTHON`` is set to a
truthy value.  ``BACKEND`` records which one was picked.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_force_py = os.environ.get("NPJIVE_PURE_PYTHON", "").lower() in ("1", "true", "yes")

if _force_py:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"


def _index(a):
    return np.ascontiguousarray(a, dtype=np.intp)


def fold_sums(F, cell, fold, K, nfold=2, backend=None):
    """Per-(cell, fold) column sums of ``F`` and row counts."""
    impl = _pick(backend)
    F = np.ascontiguousarray(F, dtype=np.float64)
    return impl.fold_sums(F, _index(cell), _index(fold), int(K), int(nfold))


def fold_sums_1d(x, cell, fold, K, nfold=2, backend=None):
    """Per-(cell, fold) sums and sums of squares of a vector."""
    impl = _pick(backend)
    x = np.ascontiguousarray(x, dtype=np.float64)
    return impl.fold_sums_1d(x, _index(cell), _index(fold), int(K), int(nfold))


def histogram_fold_counts(bins, cell, fold, K, nfold, p, backend=None):
    """Per-(cell, fold) bin occupancy counts, shape ``(K, nfold, p)``."""
    impl = _pick(backend)
    return impl.histogram_fold_counts(
        _index(bins), _index(cell), _index(fold), int(K), int(nfold), int(p)
    )


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        from . import _ckernels  # type: ignore[attr-defined]

        return _ckernels
    raise ValueError(f"unknown kernel backend {backend!r}")


def cython_available() -> bool:
    try:
        from . import _ckernels  # type: ignore[attr-defined]  # noqa: F401
    except ImportError:
        return False
    return True
