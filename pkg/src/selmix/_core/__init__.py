"""Kernel backend selection.

Imports the compiled Cython kernels when available, otherwise the numpy
fallback.  Set the environment variable ``SELMIX_FORCE_FALLBACK=1`` to
force the fallback (used by the parity tests and the benchmark).
"""

import os

if os.environ.get("SELMIX_FORCE_FALLBACK"):
    from . import _fallback as _backend

    BACKEND = "python"
else:
    try:
        from . import _kernels as _backend

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on build environment
        from . import _fallback as _backend

        BACKEND = "python"

dense_logdet_quad = _backend.dense_logdet_quad
arrow_logdet_quad = _backend.arrow_logdet_quad

__all__ = ["BACKEND", "dense_logdet_quad", "arrow_logdet_quad"]
