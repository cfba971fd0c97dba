"""Kernel backend selection.

The compiled extension is used when it imports; otherwise (or when
``ATTNASPP_PURE_PYTHON=1`` is set) the numpy fallback is used. Both expose
``im2col``, ``col2im``, ``maxpool2_forward`` and ``maxpool2_backward``.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("ATTNASPP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward


def available_backends():
    """Return ``{name: module}`` for every backend importable in this process."""
    out = {"python": _fallback}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
