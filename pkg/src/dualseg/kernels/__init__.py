"""Backend dispatch for the hot convolution kernels.

The active backend is chosen once at import time from the DUALSEG_BACKEND
environment variable: "numba" (default when numba imports cleanly) or
"numpy" (im2col fallback). `benchmarks/bench_kernels.py` compares the two.
"""

import os

from dualseg.errors import ConfigError

_requested = os.environ.get("DUALSEG_BACKEND", "auto").strip().lower() or "auto"

if _requested == "numpy":
    from dualseg.kernels import numpy_impl as _impl

    BACKEND = "numpy"
elif _requested == "numba":
    from dualseg.kernels import numba_impl as _impl

    BACKEND = "numba"
elif _requested == "auto":
    try:
        from dualseg.kernels import numba_impl as _impl

        BACKEND = "numba"
    except ImportError:
        from dualseg.kernels import numpy_impl as _impl

        BACKEND = "numpy"
else:
    raise ConfigError(
        f"DUALSEG_BACKEND={_requested!r} not recognized (expected 'numba', 'numpy', or 'auto')"
    )

conv3x3_forward = _impl.conv3x3_forward
conv3x3_input_grad = _impl.conv3x3_input_grad
conv3x3_weight_grad = _impl.conv3x3_weight_grad


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return BACKEND
