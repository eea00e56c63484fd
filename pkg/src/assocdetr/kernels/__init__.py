"""Hot inner loops behind one interface, with two interchangeable backends.

``ASSOCDETR_KERNELS=numpy`` forces the pure-numpy path; the default uses the
numba kernels when numba imports, else falls back to numpy. Both backends
produce bitwise-identical results; ``use_backend`` switches at runtime.
"""
import contextlib
import logging
import os

from . import _numpy

logger = logging.getLogger(__name__)

KERNEL_NAMES = (
    "conv2d_forward",
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
    "avgpool_forward",
    "avgpool_backward",
)

_BACKENDS = {"numpy": _numpy}
try:
    from . import _numba
    _BACKENDS["numba"] = _numba
except ImportError:  # pragma: no cover - depends on the environment
    logger.info("numba unavailable; kernels run on the numpy path")

_active = None


def available_backends():
    return tuple(sorted(_BACKENDS))


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active = name
    mod = _BACKENDS[name]
    g = globals()
    for k in KERNEL_NAMES:
        g[k] = getattr(mod, k)


def get_backend():
    return _active


@contextlib.contextmanager
def use_backend(name):
    prev = _active
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _default_backend():
    requested = os.environ.get("ASSOCDETR_KERNELS", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            logger.warning("ASSOCDETR_KERNELS=%s not available, using numpy", requested)
            return "numpy"
        return requested
    return "numba" if "numba" in _BACKENDS else "numpy"


set_backend(_default_backend())
