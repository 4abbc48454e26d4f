"""Select compiled kernels when available, numpy fallback otherwise.

Set ``CARNOT_FLOW_PURE_PYTHON=1`` to force the fallback.
"""
import os

COMPILED = False
if os.environ.get("CARNOT_FLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]

        COMPILED = True
    except ImportError:  # pragma: no cover - depends on build
        from . import _kernels_py as kernels
else:
    from . import _kernels_py as kernels

__all__ = ["kernels", "COMPILED"]
