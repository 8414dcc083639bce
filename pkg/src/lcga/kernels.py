"""Backend selection for the likelihood kernels.

The compiled Cython module is used when it imported cleanly; otherwise the
NumPy implementation takes over. Set LCGA_PURE_PYTHON=1 to force the
fallback, or call use_backend() (tests and the kernel benchmark do).
"""

from __future__ import annotations

import os

from . import _kernels_py

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

LOG_FLOOR = _kernels_py.LOG_FLOOR

_BACKENDS = {"python": _kernels_py}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if os.environ.get("LCGA_PURE_PYTHON", "") not in ("", "0"):
    _active = _kernels_py
else:
    _active = _ckernels if _ckernels is not None else _kernels_py


def available_backends():
    return sorted(_BACKENDS)


def backend_name() -> str:
    return "cython" if _active is _ckernels else "python"


def use_backend(name: str):
    """Switch the process-wide kernel backend ('cython' or 'python')."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    _active = _BACKENDS[name]


def get_backend(name: str):
    return _BACKENDS[name]


def cnorm_terms(y, mu, sigma, ymin, ymax, want_derivs):
    return _active.cnorm_terms(y, mu, sigma, ymin, ymax, want_derivs)


def probit_terms(y_cat, mu, eta, want_derivs):
    return _active.probit_terms(y_cat, mu, eta, want_derivs)


def sum_by_subject(values, offsets):
    return _active.sum_by_subject(values, offsets)


def cnorm_class_terms(Ug, B, sigma, ymin, ymax, y_levels, t_idx, s_idx,
                      offsets, want_derivs):
    return _active.cnorm_class_terms(Ug, B, sigma, ymin, ymax, y_levels,
                                     t_idx, s_idx, offsets, want_derivs)


def probit_class_terms(Ug, B, eta, t_idx, s_idx, offsets, want_derivs):
    return _active.probit_class_terms(Ug, B, eta, t_idx, s_idx, offsets,
                                      want_derivs)
