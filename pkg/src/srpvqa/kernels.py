"""Backend selection for the fused numeric kernels.

The compiled extension is used when it imports; otherwise the numpy
versions are used.  Set ``SRPVQA_KERNELS=python`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SRPVQA_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
cross_entropy_forward = _impl.cross_entropy_forward


def implementations():
    """Return ``{name: module}`` for every importable backend."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled
    except ImportError:
        return found
    found["cython"] = _compiled
    return found
