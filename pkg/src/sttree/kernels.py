"""Backend selection for the hot sliding-window kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Setting ``ST_TREE_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ST_TREE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

conv1d_forward = _impl.conv1d_forward
conv1d_grad_input = _impl.conv1d_grad_input
conv1d_grad_kernel = _impl.conv1d_grad_kernel
argmax_lastaxis = _impl.argmax_lastaxis


def available_backends():
    """Return a mapping of backend name -> kernel module that can be imported."""
    out = {"python": _kernels_py}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
