"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``VTPRUNE_BACKEND=numpy`` to force the fallback,
or ``VTPRUNE_BACKEND=cython`` to fail loudly when the extension is missing.
"""

import importlib
import os

_CHOICE = os.environ.get("VTPRUNE_BACKEND", "auto").lower()


def load(name):
    """Return the kernel module for ``name`` ('cython' or 'numpy')."""
    if name == "cython":
        return importlib.import_module("vtprune._ckernels")
    if name == "numpy":
        return importlib.import_module("vtprune._pykernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def available():
    names = ["numpy"]
    try:
        load("cython")
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


if _CHOICE == "auto":
    try:
        _impl = load("cython")
    except ImportError:
        _impl = load("numpy")
else:
    _impl = load(_CHOICE)

BACKEND = _impl.NAME
matmul = _impl.matmul
softmax_rows = _impl.softmax_rows
attention_head = _impl.attention_head
dot_argmax = _impl.dot_argmax
