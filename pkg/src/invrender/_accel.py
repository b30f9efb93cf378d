"""Backend selection for the numeric kernels.

Kernels in :mod:`invrender.kernels` exist twice: a numba ``@njit`` loop
version and a vectorised numpy version. Numba is used when importable unless
``INVRENDER_DISABLE_NUMBA`` is set to a truthy value before import. The
backend can also be switched at runtime with :func:`set_backend`, which is
what the benchmark and the cross-backend tests do.
"""

import os

ENV_FLAG = "INVRENDER_DISABLE_NUMBA"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    numba = None
    HAVE_NUMBA = False


def _flag_set():
    return os.environ.get(ENV_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


_state = {"backend": "numba" if HAVE_NUMBA and not _flag_set() else "numpy"}


def njit(*args, **kwargs):
    """``numba.njit`` when numba is installed, identity otherwise."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def backend():
    return _state["backend"]


def set_backend(name):
    """Switch kernels between ``"numba"`` and ``"numpy"``; returns the previous name."""
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    prev = _state["backend"]
    _state["backend"] = name
    return prev
