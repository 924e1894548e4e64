"""Kernel backend selection.

The compiled extension is used when it was built; setting the environment
variable ``FIGMM_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("FIGMM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def backend_module(name=None):
    """Kernel module for ``"cython"``, ``"python"`` or the active default."""
    if name is None:
        return _impl
    if not isinstance(name, str):
        return name
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def _prep(values, comp):
    return (np.ascontiguousarray(values, dtype=np.float64),
            np.ascontiguousarray(comp, dtype=np.intp))


def quadform_by_component(values, comp, means, chol, impl=None):
    impl = backend_module(impl)
    values, comp = _prep(values, comp)
    return impl.quadform_by_component(values, comp, np.ascontiguousarray(means, dtype=np.float64),
                                      np.ascontiguousarray(chol, dtype=np.float64))


def segment_softmax(logw, ptr, impl=None):
    impl = backend_module(impl)
    return impl.segment_softmax(np.ascontiguousarray(logw, dtype=np.float64),
                                np.ascontiguousarray(ptr, dtype=np.intp))


def weighted_component_stats(values, comp, weights, G, impl=None):
    impl = backend_module(impl)
    values, comp = _prep(values, comp)
    return impl.weighted_component_stats(values, comp, np.ascontiguousarray(weights, dtype=np.float64),
                                         int(G))
