"""Hot inner loops: compiled extension when built, numpy otherwise.

Set ``SHADOWTRACE_PURE_PYTHON=1`` to force the fallback.  The edge-weight
kernel always runs on numpy: its vectorised ``exp`` beats the compiled scalar
loop (see ``benchmarks/bench_kernels.py``).
"""

import os

from . import _pykernels

BACKEND = "python"

if not os.environ.get("SHADOWTRACE_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

ray_integrals = _impl.ray_integrals
rw_edge_weights = _pykernels.rw_edge_weights

__all__ = ["BACKEND", "ray_integrals", "rw_edge_weights"]
