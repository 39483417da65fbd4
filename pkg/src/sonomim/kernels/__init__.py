"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy reference
backend is the fallback. ``SONOMIM_BACKEND=python`` forces the fallback,
``SONOMIM_BACKEND=native`` makes a missing extension a hard error. Both
backends expose the same functions; within one backend results are
deterministic run to run.
"""

import os

_requested = os.environ.get("SONOMIM_BACKEND", "").strip().lower()

if _requested not in ("", "native", "python"):
    raise ImportError(f"SONOMIM_BACKEND must be 'native' or 'python', got {_requested!r}")

if _requested == "python":
    from sonomim.kernels import reference as _impl

    BACKEND = "python"
else:
    try:
        from sonomim.kernels import _native as _impl

        BACKEND = "native"
    except ImportError:
        if _requested == "native":
            raise
        from sonomim.kernels import reference as _impl

        BACKEND = "python"

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
sigmoid_fwd = _impl.sigmoid_fwd
adamw_update = _impl.adamw_update
