"""Hot loops: Soft-NMS and greedy detection matching.

The compiled extension is used when it was built; otherwise, or when
``TADCONF_PURE_PYTHON=1`` is set, the pure-Python fallback is used. Both
backends produce bit-identical results.
"""
import os

from . import _fallback

BACKENDS = {"python": _fallback}

try:
    from . import _ext
except ImportError:
    _ext = None
else:
    BACKENDS["cython"] = _ext

if _ext is not None and not os.environ.get("TADCONF_PURE_PYTHON"):
    BACKEND = "cython"
else:
    BACKEND = "python"


def get_backend(name=None):
    """Kernel module by name (``"cython"`` or ``"python"``); default is the active one."""
    name = BACKEND if name is None else name
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} is not available (have {sorted(BACKENDS)})")
    return BACKENDS[name]


soft_nms_kernel = BACKENDS[BACKEND].soft_nms_kernel
match_kernel = BACKENDS[BACKEND].match_kernel
