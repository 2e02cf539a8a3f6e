"""Kernel backend selection.

Two interchangeable backends provide the row-wise hot kernels:

* ``saga.kernels._fastk`` - Cython extension, built by setup.py when a
  compiler is available (fixed left-to-right reduction order).
* ``saga.kernels.reference`` - pure numpy, always available.

The choice is made once at import. ``SAGA_KERNELS`` overrides it:
``auto`` (default: compiled if importable), ``compiled`` (fail if the
extension is missing), ``reference``.
"""

import os

from . import reference

_mode = os.environ.get("SAGA_KERNELS", "auto")
if _mode not in ("auto", "compiled", "reference"):
    raise ValueError(f"SAGA_KERNELS must be auto|compiled|reference, got {_mode!r}")

_backend = None
if _mode in ("auto", "compiled"):
    try:
        from . import _fastk as _backend
    except ImportError:
        if _mode == "compiled":
            raise
if _backend is None:
    _backend = reference

softmax_fwd = _backend.softmax_fwd
softmax_bwd = _backend.softmax_bwd
logsumexp_fwd = _backend.logsumexp_fwd
logsumexp_bwd = _backend.logsumexp_bwd
layernorm_fwd = _backend.layernorm_fwd
layernorm_bwd = _backend.layernorm_bwd
l2norm_fwd = _backend.l2norm_fwd
l2norm_bwd = _backend.l2norm_bwd
max_lastaxis = _backend.max_lastaxis
quickgelu_fwd = _backend.quickgelu_fwd
quickgelu_bwd = _backend.quickgelu_bwd


def backend_name() -> str:
    return "compiled" if _backend is not reference else "reference"
