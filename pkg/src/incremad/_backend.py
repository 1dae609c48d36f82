"""Select the compiled kernels when available, else the numpy fallback.

Set ``INCREMAD_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

NAME = "python"
kernels = _pykernels

if os.environ.get("INCREMAD_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    try:
        from . import _kernels as kernels  # type: ignore[no-redef]
        NAME = "cython"
    except ImportError:
        kernels = _pykernels
