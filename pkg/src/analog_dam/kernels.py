"""Select the integration backend at import time.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
NumPy implementation in ``_pykernels`` is used.  Set ``ANALOG_DAM_BACKEND`` to
``python`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
advance = _pykernels.advance

if os.environ.get("ANALOG_DAM_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        advance = _ckernels.advance
        BACKEND = "cython"

RUNNING = _pykernels.RUNNING
CONVERGED = _pykernels.CONVERGED
NONFINITE = _pykernels.NONFINITE


def get_advance(backend=None):
    """Return ``advance`` for a named backend (``"python"`` or ``"cython"``)."""
    if backend is None:
        return advance
    if backend == "python":
        return _pykernels.advance
    if backend == "cython":
        from . import _ckernels

        return _ckernels.advance
    raise ValueError(f"unknown backend {backend!r}")
