"""Backend selection for the basis evaluation kernels.

The compiled extension ``morphflow._ckernels`` is used when it was built;
otherwise the numpy implementation takes over.  Set ``MORPHFLOW_BACKEND=python``
to force the fallback, and ``MORPHFLOW_THREADS`` to bound the number of
OpenMP threads (``0`` means all cores).
"""

import os

import numpy as np

from . import _kernels_py

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _kernels_py}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_threads = None


def available_backends():
    return sorted(_BACKENDS)


def _default_backend():
    requested = os.environ.get("MORPHFLOW_BACKEND", "auto").lower()
    if requested in _BACKENDS:
        return requested
    return "cython" if "cython" in _BACKENDS else "python"


BACKEND = _default_backend()


def set_backend(name):
    """Switch the process-wide backend; returns the previous name."""
    global BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {available_backends()}")
    previous, BACKEND = BACKEND, name
    return previous


def set_threads(n):
    """Set the thread count for compiled kernels (``0`` = all cores, ``None`` = env default)."""
    global _threads
    _threads = None if n is None else int(n)


def resolve_threads(n=None):
    if n is None:
        n = _threads
    if n is None:
        n = int(os.environ.get("MORPHFLOW_THREADS", "0") or 0)
    if n <= 0:
        n = os.cpu_count() or 1
    return n


def _impl(backend):
    return _BACKENDS[backend or BACKEND]


def _prepare(points, modes, src, sgn):
    return (np.ascontiguousarray(points, dtype=np.float64),
            np.ascontiguousarray(modes, dtype=np.intp),
            np.ascontiguousarray(src, dtype=np.intp),
            np.ascontiguousarray(sgn, dtype=np.float64))


def field(points, modes, src, sgn, a, jacobian=False, backend=None, threads=None):
    """Summed field ``sum_k a_k v_k(x)`` at every point, plus its spatial Jacobian.

    Returns ``(v, jac)`` with shapes ``(N, D)`` and ``(N, D, D)``; ``jac`` is
    None unless requested.  ``jac[n, i, l]`` is ``d v_i / d x_l``.
    """
    points, modes, src, sgn = _prepare(points, modes, src, sgn)
    a = np.ascontiguousarray(a, dtype=np.float64)
    return _impl(backend).field(points, modes, src, sgn, a, bool(jacobian),
                                resolve_threads(threads))


def basis(points, modes, src, sgn, entry_jacobians=False, backend=None, threads=None):
    """Every basis entry at every point: ``(N, K, D)`` values and optional ``(N, K, D, D)`` Jacobians."""
    points, modes, src, sgn = _prepare(points, modes, src, sgn)
    return _impl(backend).basis(points, modes, src, sgn, bool(entry_jacobians),
                                resolve_threads(threads))
