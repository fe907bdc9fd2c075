"""Global floating-point precision switch.

The toolkit computes in float32 by default (training speed). Verification
work -- adjoint identities, gradient checks -- runs in float64, switched on
through :func:`double_precision` or :func:`set_dtype`.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DTYPE = np.float32


def dtype() -> np.dtype:
    """Current default floating dtype (float32 or float64)."""
    return np.dtype(_DTYPE)


def set_dtype(d) -> None:
    d = np.dtype(d)
    if d not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported compute dtype {d}; use float32 or float64")
    global _DTYPE
    _DTYPE = d.type


@contextlib.contextmanager
def double_precision():
    """Run the enclosed block in float64 (verification mode)."""
    previous = _DTYPE
    set_dtype(np.float64)
    try:
        yield
    finally:
        set_dtype(previous)


def asarray(x) -> np.ndarray:
    """View/convert ``x`` as an array of the current default dtype."""
    return np.asarray(x, dtype=dtype())
