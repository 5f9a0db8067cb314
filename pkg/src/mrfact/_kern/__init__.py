"""Kernel selection: compiled extension if importable, numpy fallback otherwise.

Set MRFACT_NO_EXT=1 before import to force the fallback (used by the
benchmark and the equivalence tests).
"""

import os

from mrfact._kern import fallback

_impl = fallback
_EXT = False

if not os.environ.get("MRFACT_NO_EXT"):
    try:
        from mrfact._kern import _fast  # type: ignore[attr-defined]

        _impl = _fast
        _EXT = True
    except ImportError:
        pass

conjugate_inplace = _impl.conjugate_inplace
jacobi_eigh = _impl.jacobi_eigh
angle_scan = _impl.angle_scan
pair_scan_k2 = _impl.pair_scan_k2


def extension_active():
    """True when the compiled kernel module is in use."""
    return _EXT


def backend_name():
    return "cython" if _EXT else "numpy"
