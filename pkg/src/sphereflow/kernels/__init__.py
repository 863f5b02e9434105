"""Hot per-stage kernels behind a backend switch.

Both backends expose::

    field_div(sizes, theta, t, Q) -> (X, D)
    field_div_vjp(sizes, theta, t, Q, gX, gD) -> (X, D, gQ, gT, gtheta)

The active backend is read from ``SPHEREFLOW_BACKEND`` at import time and
can be swapped with :func:`use_backend`.
"""
from contextlib import contextmanager
import importlib

from .._accel import requested_backend

_active = None


def get_backend(name):
    if name == "numba":
        return importlib.import_module("._numba", __name__)
    if name == "numpy":
        return importlib.import_module("._numpy", __name__)
    raise ValueError(f"unknown backend {name!r}")


def set_backend(name):
    global _active
    _active = get_backend(name)
    _active.name = name
    return _active


def active_backend():
    return _active.name


@contextmanager
def use_backend(name):
    prev = _active.name
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def field_div(sizes, theta, t, Q):
    return _active.field_div(sizes, theta, t, Q)


def field_div_vjp(sizes, theta, t, Q, gX, gD):
    return _active.field_div_vjp(sizes, theta, t, Q, gX, gD)


set_backend(requested_backend())
