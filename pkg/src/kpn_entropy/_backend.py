"""Kernel backend selection.

Hot loops (the L-infinity neighbour scan and the per-sample EP iterations)
exist twice: as numba ``@njit`` kernels and as pure-numpy equivalents.  The
numba path is used when numba imports and ``ENTROPY_KPN_NUMBA`` is not set to
a false value (``0``, ``false``, ``no``, ``off``).
"""
from __future__ import annotations

import ctypes
import os
from contextlib import contextmanager

try:
    import numba
    from numba.extending import get_cython_function_address

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

_FALSE = {"0", "false", "no", "off"}


def _env_wants_numba() -> bool:
    return os.environ.get("ENTROPY_KPN_NUMBA", "1").strip().lower() not in _FALSE


_state = {"numba": HAS_NUMBA and _env_wants_numba()}


def use_numba() -> bool:
    return _state["numba"]


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` kernels for subsequent calls."""
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    _state["numba"] = name == "numba"


@contextmanager
def backend(name: str):
    previous = "numba" if _state["numba"] else "numpy"
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def set_threads(n: int | None) -> None:
    """Cap numba worker threads; ``None`` leaves the numba default."""
    if n is None or not HAS_NUMBA:
        return
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def threads_from_env() -> int | None:
    raw = os.environ.get("ENTROPY_KPN_THREADS")
    if raw is None or not raw.strip():
        return None
    return int(raw)


if HAS_NUMBA:
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # prefer OpenMP; an outdated TBB otherwise warns on every first launch
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    njit = numba.njit
    prange = numba.prange

    # scipy exports the double specialisation of erfcx through its Cython
    # C-API; binding it keeps the numba kernels bit-identical to scipy.
    _erfcx_addr = get_cython_function_address(
        "scipy.special.cython_special", "__pyx_fuse_1erfcx"
    )
    _erfcx_c = ctypes.CFUNCTYPE(ctypes.c_double, ctypes.c_double, ctypes.c_int)(
        _erfcx_addr
    )

    # not cacheable: the ctypes address differs between processes
    @numba.njit
    def erfcx_nb(x):
        return _erfcx_c(x, 0)

else:  # pragma: no cover
    njit = None
    prange = range
    erfcx_nb = None
