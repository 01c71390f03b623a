"""Backend selection for the hot kernels.

Kernels exist twice: a numba ``@njit`` loop version and a vectorized numpy
version. ``CTSEVERITY_BACKEND=numpy`` (or a missing numba install) selects the
numpy path; anything else uses numba.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

_BACKEND = "numba" if HAVE_NUMBA and os.environ.get("CTSEVERITY_BACKEND", "numba").lower() != "numpy" else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda func: func


def get_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _BACKEND = name


class use_backend:
    """Context manager that temporarily switches the kernel backend."""

    def __init__(self, name: str):
        self.name = name
        self._prev = None

    def __enter__(self):
        self._prev = get_backend()
        set_backend(self.name)
        return self

    def __exit__(self, *exc):
        set_backend(self._prev)
        return False
