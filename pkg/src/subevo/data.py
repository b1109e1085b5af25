"""Generative models: noise laws, design laws, and full data models.

Noise is ``scale * t(df)``, the scale multiplying samples (not a variance
normalisation). Non-Gaussian designs are only used by the simulator; the
asymptotic theory always assumes iid N(0, 1) entries.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DomainError

DESIGN_KINDS = ("gaussian", "rademacher", "uniform", "student_t")


@dataclass(frozen=True)
class NoiseLaw:
    """``scale`` times a Student t variable with ``df`` degrees of freedom."""

    df: float = 2.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.df > 0:
            raise DomainError("noise df must be positive")
        if not self.scale > 0:
            raise DomainError("noise scale must be positive")

    def sample(self, rng, size):
        # normal / sqrt(chi2_df / df)
        z = rng.standard_normal(size)
        chi2 = rng.chisquare(self.df, size)
        return self.scale * z / np.sqrt(chi2 / self.df)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        if np.any((u <= 0.0) | (u >= 1.0)):
            raise DomainError("quantile level must lie in (0, 1)")
        if self.df == 2.0:
            q = (2.0 * u - 1.0) / np.sqrt(2.0 * u * (1.0 - u))
        else:
            q = special.stdtrit(self.df, u)
        return self.scale * q

    def cdf(self, e):
        t = np.asarray(e, dtype=float) / self.scale
        if self.df == 2.0:
            return 0.5 + t / (2.0 * np.sqrt(2.0 + t * t))
        return special.stdtr(self.df, t)


def noise_quantile(law, u):
    q = law.quantile(u)
    return q.item() if q.ndim == 0 else q


@dataclass(frozen=True)
class DesignLaw:
    """iid design entries with mean 0 and variance 1."""

    kind: str = "gaussian"
    df: float = 4.0

    def __post_init__(self):
        if self.kind not in DESIGN_KINDS:
            raise DomainError(f"unknown design {self.kind!r}")
        if self.kind == "student_t" and not self.df > 2:
            raise DomainError("student_t design needs df > 2 for unit variance")

    def sample(self, rng, shape):
        if self.kind == "gaussian":
            return rng.standard_normal(shape)
        if self.kind == "rademacher":
            return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0
        if self.kind == "uniform":
            return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=shape)
        t = rng.standard_t(self.df, size=shape)
        return t * np.sqrt((self.df - 2.0) / self.df)

    @property
    def excess_kurtosis(self):
        if self.kind == "gaussian":
            return 0.0
        if self.kind == "rademacher":
            return -2.0
        if self.kind == "uniform":
            return -1.2
        return 6.0 / (self.df - 4.0) if self.df > 4 else np.inf


@dataclass(frozen=True)
class DataModel:
    """Robust linear model or logistic model.

    ``beta_star`` is optional: robust mode defaults to zero (the estimator
    error does not depend on it), logistic mode to ``signal_norm`` times the
    normalised all-ones direction.
    """

    mode: str
    noise: NoiseLaw | None = None
    signal_norm: float = 0.0
    design: DesignLaw = field(default_factory=DesignLaw)
    beta_star: tuple | None = None

    def __post_init__(self):
        if self.mode not in ("robust", "logistic"):
            raise DomainError(f"unknown mode {self.mode!r}")
        if self.mode == "robust" and self.noise is None:
            raise DomainError("robust mode needs a noise law")
        if self.mode == "logistic":
            if not self.signal_norm >= 0:
                raise DomainError("signal norm must be nonnegative")
            if self.beta_star is not None:
                norm = float(np.linalg.norm(self.beta_star))
                if abs(norm - self.signal_norm) > 1e-12 * max(1.0, self.signal_norm):
                    raise DomainError("beta_star must have norm equal to signal_norm")

    @classmethod
    def robust(cls, noise, design=None, beta_star=None):
        return cls("robust", noise=noise, design=design or DesignLaw(),
                   beta_star=None if beta_star is None else tuple(beta_star))

    @classmethod
    def logistic(cls, signal_norm, design=None, beta_star=None):
        return cls("logistic", signal_norm=float(signal_norm), design=design or DesignLaw(),
                   beta_star=None if beta_star is None else tuple(beta_star))

    def beta_for(self, p):
        if self.beta_star is not None:
            beta = np.asarray(self.beta_star, dtype=float)
            if beta.shape != (p,):
                raise DomainError(f"beta_star has length {beta.size}, expected {p}")
            return beta
        if self.mode == "robust":
            return np.zeros(p)
        return np.full(p, self.signal_norm / np.sqrt(p))

    def direction(self, p):
        """Unit vector along beta_star (logistic); None when the signal is zero."""
        beta = self.beta_for(p)
        norm = np.linalg.norm(beta)
        return beta / norm if norm > 0 else None


def sample_dataset(model, n, p, seed):
    """Draw ``(X, y)`` with ``n`` iid rows; deterministic given ``seed``.

    ``seed`` may be an int, a ``SeedSequence`` or a ``Generator``.
    """
    if n < 1 or p < 1:
        raise DomainError("n and p must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    beta = model.beta_for(p)
    X = model.design.sample(rng, (n, p))
    lin = X @ beta
    if model.mode == "robust":
        y = lin + model.noise.sample(rng, n)
    else:
        prob = special.expit(lin)
        y = (rng.random(n) < prob).astype(float)
    return X, y
