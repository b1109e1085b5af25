"""Backend selection for the hot kernels.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy implementation in ``_kernels_py`` takes over. Setting
``SUBEVO_PURE_PYTHON=1`` forces the fallback.

All wrappers broadcast their array arguments, return arrays of the
broadcast shape, and raise :class:`NumericalError` if an inner Newton
solve failed to converge.
"""
import os

import numpy as np

from . import _kernels_py
from .errors import NumericalError

HUBER = _kernels_py.HUBER
PSEUDO_HUBER = _kernels_py.PSEUDO_HUBER
LOGISTIC = _kernels_py.LOGISTIC


def _load_compiled():
    if os.environ.get("SUBEVO_PURE_PYTHON", "") not in ("", "0"):
        return None
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = _load_compiled()
backend = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


def use_backend(name):
    """Switch the active backend ("cython" or "python"); returns the old name."""
    global backend, BACKEND
    old = BACKEND
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        backend, BACKEND = _compiled, "cython"
    elif name == "python":
        backend, BACKEND = _kernels_py, "python"
    else:
        raise ValueError(f"unknown backend {name!r}")
    return old


def compiled_available():
    return _compiled is not None


def _flat(*arrays):
    arrs = np.broadcast_arrays(*[np.asarray(a, dtype=float) for a in arrays])
    shape = arrs[0].shape
    return shape, [np.ascontiguousarray(a).ravel() for a in arrs]


def _checked(out, shape, what):
    if np.isnan(out).any():
        raise NumericalError(f"{what}: inner Newton solve did not converge")
    return out.reshape(shape)


def prox(kind, amp, width, y, gamma, x):
    shape, (yf, xf) = _flat(y, x)
    return _checked(backend.prox(kind, amp, width, yf, float(gamma), xf), shape, "prox")


def prox_d1(kind, amp, width, y, gamma, x):
    shape, (yf, xf) = _flat(y, x)
    return _checked(backend.prox_d1(kind, amp, width, yf, float(gamma), xf), shape,
                    "prox_d1")


def loss_d1(kind, amp, width, y, u):
    shape, (yf, uf) = _flat(y, u)
    return backend.loss_d1(kind, amp, width, yf, uf).reshape(shape)


def loss_d2(kind, amp, width, y, u):
    shape, (yf, uf) = _flat(y, u)
    return backend.loss_d2(kind, amp, width, yf, uf).reshape(shape)


def pair_moment(kind, amp, width, gamma, score_form, y, c, wk, sigma, t,
                cnodes, cweights, gnodes, gweights, ref_x, ref_w, feats, fixed,
                half_width):
    """Weighted sum over atoms (y, c) of E[r(c + sigma G) r(c + sigma G~)].

    ``corr(G, G~) = t``; ``cnodes``/``cweights`` (atoms x nodes) integrate
    the shared factor C, the private factor D uses ``gnodes`` (smooth
    losses) or Gauss-Legendre pieces split at ``fixed`` and at the points
    where ``y - x`` hits ``feats``.
    """
    c64 = lambda a: np.ascontiguousarray(a, dtype=float)  # noqa: E731
    val = backend.pair_moment(
        int(kind), float(amp), float(width), float(gamma), int(bool(score_form)),
        c64(y), c64(c), c64(wk), float(sigma), float(t), c64(cnodes), c64(cweights),
        c64(gnodes), c64(gweights), c64(ref_x), c64(ref_w), c64(feats), c64(fixed),
        float(half_width))
    if not np.isfinite(val):
        raise NumericalError("pair_moment: non-finite result")
    return float(val)
