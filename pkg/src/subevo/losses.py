"""Convex per-observation losses with derivatives and proximal maps.

Robust losses act on residuals, ``l_y(u) = rho(y - u)``; the logistic loss
is the Bernoulli negative log-likelihood ``log(1 + e^u) - u y`` with
``y in {0, 1}``. Every function here broadcasts over numpy arrays.

Proximal maps are evaluated by the kernels in :mod:`subevo.kernels`: Huber
in closed form, the smooth losses by safeguarded Newton on the (strictly
increasing) stationarity map ``p + gamma l_y'(p) = x``.
"""
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import kernels
from .errors import DomainError

ROBUST_KINDS = ("huber", "pseudo_huber", "scaled_pseudo_huber")
KINDS = ROBUST_KINDS + ("logistic",)
# below this gamma the logistic prox is smooth on the Gaussian scale
LOGISTIC_BEND_GAMMA = 1.0

# names rejected outright because |rho'| is unbounded
_NON_LIPSCHITZ = {"squared", "square", "l2", "least_squares", "ols"}


@dataclass(frozen=True)
class LossModel:
    """A loss family; ``lam`` is only used by ``scaled_pseudo_huber``."""

    kind: str
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown loss kind {self.kind!r}")
        if self.kind == "scaled_pseudo_huber" and not self.lam > 0:
            raise DomainError("scaled pseudo-Huber needs lam > 0")

    @classmethod
    def huber(cls):
        return cls("huber")

    @classmethod
    def pseudo_huber(cls):
        return cls("pseudo_huber")

    @classmethod
    def scaled_pseudo_huber(cls, lam):
        return cls("scaled_pseudo_huber", float(lam))

    @classmethod
    def logistic(cls):
        return cls("logistic")

    @classmethod
    def from_name(cls, name, lam=1.0):
        key = name.strip().lower().replace("-", "_")
        if key in _NON_LIPSCHITZ:
            raise DomainError(f"loss {name!r} is not Lipschitz; only |rho'| <= 1 is supported")
        if key == "scaled_pseudo_huber":
            return cls.scaled_pseudo_huber(lam)
        return cls(key)

    @property
    def is_robust(self):
        return self.kind != "logistic"

    @property
    def satisfies_curvature_assumption(self):
        """False for Huber, whose rho'' vanishes outside [-1, 1]."""
        return self.kind in ("pseudo_huber", "scaled_pseudo_huber")

    @property
    def name(self):
        if self.kind == "scaled_pseudo_huber":
            return f"scaled_pseudo_huber(lam={self.lam:g})"
        return self.kind

    @property
    def kernel_params(self):
        """``(kind code, amp, width)`` for the kernels.

        The pseudo-Huber family is ``rho(t) = amp * width * sqrt(1 + (t/width)^2)``;
        the scaled variant with prefactor lam^2/(1+lam) has amp = lam/(1+lam).
        """
        if self.kind == "huber":
            return kernels.HUBER, 1.0, 1.0
        if self.kind == "pseudo_huber":
            return kernels.PSEUDO_HUBER, 1.0, 1.0
        if self.kind == "scaled_pseudo_huber":
            return kernels.PSEUDO_HUBER, self.lam / (1.0 + self.lam), self.lam
        return kernels.LOGISTIC, 1.0, 1.0

    def prox_features(self, gamma):
        """Points ``z`` where ``prox_{gamma rho}`` has a kink or a sharp bend.

        Robust integrands depend on the noise through ``z = y - x``; the
        quadrature splits its rules at these points. Huber has kinks at
        ``+-(1 + gamma)``. For the pseudo-Huber family the curvature of the
        prox sits where ``|prox| ~ width`` but decays only algebraically, so
        the images of a geometric ladder of levels are returned; when gamma
        is large relative to the width the bend is nearly a kink.

        For the logistic loss the prox bends where ``|prox| ~ log(gamma)``;
        those bends matter only for large gamma. With ``x0(s) = s + gamma
        sigmoid(s)`` the bends sit at ``x = x0(s)`` for ``y = 0`` and at
        ``x = -x0(s)`` for ``y = 1``; both sets are returned in the ``y - x``
        convention, so each atom gets a few unused splits.
        """
        if self.kind == "huber":
            return (-(1.0 + gamma), 1.0 + gamma)
        if self.kind == "logistic":
            if gamma <= LOGISTIC_BEND_GAMMA:
                return ()
            L = np.log(gamma)
            s = np.array([-L - 2.0, -L, -L + 2.0, 0.0, L - 2.0, L, L + 2.0])
            x0 = s + gamma * special.expit(s)
            return tuple(float(v) for v in np.unique(np.concatenate([-x0, 1.0 + x0])))
        _, amp, width = self.kernel_params
        top = max(1.0, np.sqrt(gamma * amp / width))
        levels = [0.5]
        while levels[-1] < top:
            levels.append(3.0 * levels[-1])
        lv = np.array(levels)
        z = width * lv + gamma * amp * lv / np.sqrt(1.0 + lv * lv)
        return tuple(float(v) for v in np.concatenate([-z[::-1], z]))

    # -- pointwise functions -------------------------------------------------

    def _check_y(self, y):
        y = np.asarray(y, dtype=float)
        if not self.is_robust and not np.all((y == 0.0) | (y == 1.0)):
            raise DomainError("logistic responses must be 0 or 1")
        return y

    def rho(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "huber":
            a = np.abs(t)
            return np.where(a < 1.0, 0.5 * t * t, a - 0.5)
        _, amp, width = self.kernel_params
        return amp * width * np.sqrt(1.0 + (t / width) ** 2)

    def value(self, y, u):
        y = self._check_y(y)
        u = np.asarray(u, dtype=float)
        if self.is_robust:
            return self.rho(y - u)
        return np.logaddexp(0.0, u) - u * y

    def d1(self, y, u):
        y = self._check_y(y)
        return kernels.loss_d1(*self.kernel_params, y, u)

    def d2(self, y, u):
        y = self._check_y(y)
        return kernels.loss_d2(*self.kernel_params, y, u)

    def prox(self, y, gamma, x):
        """``argmin_p (x - p)^2 / 2 + gamma * l_y(p)``."""
        if not gamma > 0:
            raise DomainError("gamma must be positive")
        y = self._check_y(y)
        return kernels.prox(*self.kernel_params, y, gamma, x)

    def prox_d1(self, y, gamma, x):
        """Derivative of the prox in ``x``: ``1 / (1 + gamma l_y''(prox(x)))``."""
        if not gamma > 0:
            raise DomainError("gamma must be positive")
        y = self._check_y(y)
        return kernels.prox_d1(*self.kernel_params, y, gamma, x)


def _scalar(v):
    return v.item() if isinstance(v, np.ndarray) and v.ndim == 0 else v


def loss_value(model, y, u):
    return _scalar(model.value(y, u))


def loss_d1(model, y, u):
    return _scalar(model.d1(y, u))


def loss_d2(model, y, u):
    return _scalar(model.d2(y, u))


def prox(model, y, gamma, x):
    return _scalar(model.prox(y, gamma, x))


def prox_d1(model, y, gamma, x):
    return _scalar(model.prox_d1(y, gamma, x))
