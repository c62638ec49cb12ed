"""Selection of the SDE stepping kernel.

The compiled kernel is used when importable; ``OPTOMECH_BACKEND=python``
forces the NumPy fallback.  ``OPTOMECH_THREADS`` sets the number of worker
threads of the compiled kernel (default: all CPUs).
"""
from __future__ import annotations

import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover - depends on the build
    _compiled = None

BACKENDS = ("cython", "python")


def available() -> tuple[str, ...]:
    return BACKENDS if _compiled is not None else ("python",)


def default_backend() -> str:
    forced = os.environ.get("OPTOMECH_BACKEND", "").strip().lower()
    if forced:
        if forced not in BACKENDS:
            raise ValueError(f"OPTOMECH_BACKEND must be one of {BACKENDS}")
        if forced == "cython" and _compiled is None:
            raise ImportError("compiled kernel requested but not built")
        return forced
    return "cython" if _compiled is not None else "python"


def get_kernel(name: str | None = None):
    name = default_backend() if name is None else name
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernel not built")
        return _compiled.step_chunk
    if name == "python":
        return _kernels_py.step_chunk
    raise ValueError(f"unknown backend {name!r}")


def thread_count() -> int:
    raw = os.environ.get("OPTOMECH_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ValueError("OPTOMECH_THREADS must be a positive integer") from exc
        if n < 1:
            raise ValueError("OPTOMECH_THREADS must be a positive integer")
        return n
    return os.cpu_count() or 1
