"""Hot-kernel dispatch: compiled Cython core when available, numpy otherwise.

Set ``HALS_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"

if os.environ.get("HALS_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

zbuffer_winners = _impl.zbuffer_winners
raycast = _impl.raycast
linear_assignment = _impl.linear_assignment

__all__ = ["BACKEND", "zbuffer_winners", "raycast", "linear_assignment"]
