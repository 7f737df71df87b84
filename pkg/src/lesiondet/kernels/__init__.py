"""Hot-kernel dispatch: numba-jitted implementations with a numpy fallback.

Backend selection, checked once at first use:

* ``MLD_DETERMINISTIC=1`` pins the pure-numpy reference kernels (the
  deterministic baseline that needs no JIT).
* ``MLD_KERNELS=numba|numpy`` picks a backend explicitly.
* otherwise numba when importable, numpy fallback if not.

``use_backend`` swaps the backend for a ``with`` block (used by tests and
the benchmark).
"""
from __future__ import annotations

import contextlib
import os

from . import numpy_impl

_BACKENDS = {"numpy": numpy_impl}
try:
    from . import numba_impl

    _BACKENDS["numba"] = numba_impl
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    HAVE_NUMBA = False

_active: str | None = None


def _resolve_default() -> str:
    if os.environ.get("MLD_DETERMINISTIC", "") == "1":
        return "numpy"
    name = os.environ.get("MLD_KERNELS", "").strip().lower()
    if name:
        if name not in _BACKENDS:
            raise ValueError(
                f"MLD_KERNELS={name!r} not available; choose from {sorted(_BACKENDS)}"
            )
        return name
    return "numba" if HAVE_NUMBA else "numpy"


def backend_name() -> str:
    global _active
    if _active is None:
        _active = _resolve_default()
    return _active


def active():
    """The active kernel module."""
    return _BACKENDS[backend_name()]


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; choose from {sorted(_BACKENDS)}")
    _active = name


@contextlib.contextmanager
def use_backend(name: str):
    global _active
    prev = backend_name()
    set_backend(name)
    try:
        yield _BACKENDS[name]
    finally:
        _active = prev


def deterministic_mode() -> bool:
    return os.environ.get("MLD_DETERMINISTIC", "") == "1"
