"""Hot loops of the particle engine.

The compiled extension ``_core`` is used when it was built; otherwise the
pure-Python ``_fallback`` with the same interface is loaded.  Setting the
environment variable ``FVLAB_PURE_PYTHON=1`` forces the fallback.

Both backends expose::

    fv_finite_state(rates, states, T, rng, snap_times=None, log=False)
    fv_ruin_exp(x0, c, theta, mean, T, rng, snap_times=None, log=False)
    discrete_finite_state(rates, states, level_times, rng)
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("FVLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback


def get_backend(name=None):
    """Return the kernel module ``name`` ("cython" or "python"), default the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _core

        return _core
    raise ValueError(f"unknown kernel backend {name!r}")


fv_finite_state = _impl.fv_finite_state
fv_ruin_exp = _impl.fv_ruin_exp
discrete_finite_state = _impl.discrete_finite_state

__all__ = ["BACKEND", "get_backend", "fv_finite_state", "fv_ruin_exp", "discrete_finite_state"]
