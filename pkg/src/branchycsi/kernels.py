"""Backend selection for the convolution hot loops.

The compiled Cython module is used when it was built; otherwise the numpy
fallback in ``_kernels_py`` is loaded. Set ``BRANCHYCSI_KERNELS=python`` to
force the fallback.
"""

from __future__ import annotations

import contextlib
import importlib
import logging
import os

logger = logging.getLogger(__name__)

ENV_VAR = "BRANCHYCSI_KERNELS"
BACKENDS = {"compiled": "branchycsi._kernels", "python": "branchycsi._kernels_py"}


def _load(name: str):
    return importlib.import_module(BACKENDS[name])


def available() -> list[str]:
    names = []
    for name in BACKENDS:
        try:
            _load(name)
        except ImportError:
            continue
        names.append(name)
    return names


def _initial() -> tuple[str, object]:
    wanted = os.environ.get(ENV_VAR, "").strip().lower()
    if wanted and wanted not in BACKENDS:
        raise ValueError(f"{ENV_VAR} must be one of {sorted(BACKENDS)}, got {wanted!r}")
    if wanted == "python":
        return "python", _load("python")
    try:
        return "compiled", _load("compiled")
    except ImportError:
        if wanted == "compiled":
            raise
        logger.debug("compiled kernels unavailable, using numpy fallback")
        return "python", _load("python")


_name, _impl = _initial()


def name() -> str:
    return _name


def impl():
    return _impl


def set_backend(backend: str) -> None:
    global _name, _impl
    if backend not in BACKENDS:
        raise ValueError(f"unknown kernel backend {backend!r}")
    _impl = _load(backend)
    _name = backend


@contextlib.contextmanager
def using(backend: str):
    prev = _name
    set_backend(backend)
    try:
        yield
    finally:
        set_backend(prev)
