"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise the numpy
fallback is used.  ``LBSF_PURE_PYTHON=1`` forces the fallback.
"""

import logging
import os
from contextlib import contextmanager

from . import _fallback

logger = logging.getLogger(__name__)

try:
    if os.environ.get("LBSF_PURE_PYTHON", "") == "1":
        raise ImportError("pure-python backend requested")
    from . import _kernels as _compiled
except ImportError as exc:  # pragma: no cover - depends on build
    logger.debug("compiled kernels unavailable: %s", exc)
    _compiled = None

_active = _compiled if _compiled is not None else _fallback


def has_compiled():
    return _compiled is not None


def name():
    return "compiled" if _active is _compiled else "numpy"


def kernels():
    return _active


def use(backend):
    """Switch to ``"compiled"`` or ``"numpy"``; returns the previous name."""
    global _active
    prev = name()
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        _active = _compiled
    elif backend == "numpy":
        _active = _fallback
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return prev


@contextmanager
def using(backend):
    prev = use(backend)
    try:
        yield
    finally:
        use(prev)
