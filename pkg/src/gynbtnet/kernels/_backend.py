"""Import-time selection between the compiled core and the numpy fallback.

``GYNBTNET_BACKEND=numpy`` forces the fallback; ``=compiled`` makes a
missing extension an ImportError instead of a silent downgrade.
"""

import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

_KERNEL_NAMES = ("vol2col", "col2vol", "vol2col_sites", "col2vol_sites", "xoshiro_fill")


def _load(choice):
    if choice == "numpy":
        return _fallback, "numpy"
    try:
        from . import _core
    except ImportError:
        if choice == "compiled":
            raise
        log.info("compiled kernels unavailable, using numpy fallback")
        return _fallback, "numpy"
    return _core, "compiled"


def available():
    """Names of the backends importable in this environment."""
    names = ["numpy"]
    try:
        from . import _core  # noqa: F401
    except ImportError:
        return names
    return ["compiled"] + names


def module_for(name):
    """Kernel module for a backend name, for side-by-side benchmarking."""
    return _load(name)[0] if name == "compiled" else _fallback


_impl, BACKEND = _load(os.environ.get("GYNBTNET_BACKEND", "auto").lower())

vol2col = _impl.vol2col
col2vol = _impl.col2vol
vol2col_sites = _impl.vol2col_sites
col2vol_sites = _impl.col2vol_sites
xoshiro_fill = _impl.xoshiro_fill


def use(name):
    """Switch the active backend in-process; returns the previous name."""
    global _impl, BACKEND, vol2col, col2vol, vol2col_sites, col2vol_sites, xoshiro_fill
    previous = BACKEND
    _impl, BACKEND = _load(name)
    vol2col = _impl.vol2col
    col2vol = _impl.col2vol
    vol2col_sites = _impl.vol2col_sites
    col2vol_sites = _impl.col2vol_sites
    xoshiro_fill = _impl.xoshiro_fill
    return previous
