"""Convolution kernel backend selection.

The compiled Cython extension is preferred when it imported cleanly; the
numpy backend is the fallback. SSVO_BACKEND=numpy or SSVO_BACKEND=compiled
forces a choice (forcing "compiled" when the extension is missing raises,
so CI failures are loud rather than silently slow).
"""

import os

from . import numpy_backend

_requested = os.environ.get("SSVO_BACKEND", "auto")

_compiled = None
if _requested in ("auto", "compiled"):
    try:
        from . import _ckern as _compiled
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "SSVO_BACKEND=compiled but the ssvo.diffcore.kernels._ckern "
                "extension is not built; reinstall the package or use "
                "SSVO_BACKEND=numpy"
            )

if _compiled is not None:
    backend_name = "compiled"
    conv2d_forward = _compiled.conv2d_forward
    conv2d_input_grad = _compiled.conv2d_input_grad
    conv2d_weight_grad = _compiled.conv2d_weight_grad
else:
    backend_name = "numpy"
    conv2d_forward = numpy_backend.conv2d_forward
    conv2d_input_grad = numpy_backend.conv2d_input_grad
    conv2d_weight_grad = numpy_backend.conv2d_weight_grad


def get_backend(name: str):
    """Return the kernel module for an explicit backend name (for benchmarks
    and parity tests)."""
    if name == "numpy":
        return numpy_backend
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernel extension not available")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    names = ["numpy"]
    if _compiled is not None:
        names.insert(0, "compiled")
    return names
