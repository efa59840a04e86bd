"""Kernel backend selection.

The compiled extension is preferred when it imported cleanly; the pure-numpy
backend is the fallback. ``SPML_LAB_PURE_PY=1`` forces the fallback, which is
how the benchmark and the cross-backend tests address both implementations.
"""

import os

from . import _kernels_py

if os.environ.get("SPML_LAB_PURE_PY"):
    _active = _kernels_py
else:
    try:
        from . import _ckern as _active  # type: ignore[no-redef]
    except ImportError:
        _active = _kernels_py


def backend_name() -> str:
    return _active.BACKEND_NAME


def load_backend(name: str):
    """Return a kernel module by name ("pure" or "compiled")."""
    if name == "pure":
        return _kernels_py
    if name == "compiled":
        from . import _ckern

        return _ckern
    raise ValueError(f"unknown kernel backend {name!r}")


def gpr_elements(probs, ann, pseudo, k_hat, mu, sigma, lam1, lam2, q1, q2, q3):
    return _active.gpr_elements(probs, ann, pseudo, k_hat, mu, sigma, lam1, lam2, q1, q2, q3)


def gr_elements(probs, ann, k_hat, mu, sigma, q1, q2):
    return _active.gr_elements(probs, ann, k_hat, mu, sigma, q1, q2)


def pool_rects(integral, rects):
    return _active.pool_rects(integral, rects)
