"""Kernel backend selection.

The compiled Cython module is used when it imports; otherwise the numpy
fallback. Set ``DYNSEG_BACKEND=python`` to force the fallback.
"""

import importlib
import os

_MODULES = {"cython": "dynseg._ckernels", "python": "dynseg._pykernels"}


def load(name):
    """Import a backend module by name (``"cython"`` or ``"python"``)."""
    try:
        return importlib.import_module(_MODULES[name])
    except KeyError:
        raise ValueError(f"unknown backend {name!r}; choose from {sorted(_MODULES)}") from None


def available():
    names = []
    for name in _MODULES:
        try:
            load(name)
        except ImportError:
            continue
        names.append(name)
    return names


def _select():
    requested = os.environ.get("DYNSEG_BACKEND", "").strip().lower()
    if requested:
        return requested, load(requested)
    try:
        return "cython", load("cython")
    except ImportError:
        return "python", load("python")


NAME, kernels = _select()
