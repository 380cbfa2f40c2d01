"""Expert densities for pairwise and absolute judge observations.

A pairwise expert is a density over the score difference ``d = s_i - s_j``
given the judge probability ``p`` that ``i`` beats ``j``. Three families are
provided:

``genbeta``
    sigmoid link with a Beta(p + alpha, 1 - p + beta) density on ``sigmoid(d)``.
    ``alpha = beta = 0`` is the soft Bradley-Terry expert.
``phigaussian``
    ``N(d; 0, 1) * N(Phi(d); p, var)``.
``lineargaussian``
    ``N(d; Phi^-1(p), var)``.

All log-densities are defined up to an additive constant that does not depend
on ``d``. The home-advantage offset shifts the argument, ``d -> d + delta``,
for a comparison whose first-shown candidate is ``i``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import InvalidInputError

P_CLAMP = 1e-6
VAR_FLOOR = 1e-3

FAMILIES = ("genbeta", "phigaussian", "lineargaussian")

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Comparison:
    """One judge observation: probability that ``i`` beats ``j``.

    ``order`` is ``"ij"`` when ``i`` was shown in the first prompt position and
    ``"ji"`` when ``j`` was.
    """

    context_id: str
    i: int
    j: int
    p: float
    order: str = "ij"

    def __post_init__(self):
        if self.i == self.j:
            raise InvalidInputError(f"comparison of candidate {self.i} with itself")
        if self.i < 0 or self.j < 0:
            raise InvalidInputError("candidate indices must be non-negative")
        if self.order not in ("ij", "ji"):
            raise InvalidInputError(f"order must be 'ij' or 'ji', got {self.order!r}")
        _check_prob(self.p)

    @property
    def orientation(self) -> int:
        """+1 if ``i`` held the first prompt position, -1 otherwise."""
        return 1 if self.order == "ij" else -1


@dataclass(frozen=True)
class AbsoluteAssessment:
    """Categorical class probabilities for one candidate, classes ``1..C``."""

    context_id: str
    n: int
    class_probs: tuple

    def __post_init__(self):
        probs = np.asarray(self.class_probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0:
            raise InvalidInputError("class_probs must be a non-empty vector")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise InvalidInputError("class_probs must be finite and non-negative")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise InvalidInputError(f"class_probs sum to {probs.sum():.12g}, expected 1")
        if self.n < 0:
            raise InvalidInputError("candidate index must be non-negative")
        object.__setattr__(self, "class_probs", tuple(float(x) for x in probs))


@dataclass(frozen=True)
class AbsoluteExpert:
    """Gaussian expert obtained by moment matching a categorical judge."""

    mu: float
    var: float


@dataclass(frozen=True)
class ExpertForm:
    """Comparative density family plus home-advantage offset.

    ``var`` is the variance of the linear-Gaussian expert, and the variance of
    the second Gaussian factor of the Phi-Gaussian expert. It is unused by the
    generalised Beta family.
    """

    family: str = "genbeta"
    alpha: float = 0.0
    beta: float = 0.0
    var: float = 1.0
    delta: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidInputError(f"unknown expert family {self.family!r}")
        if self.alpha < 0 or self.beta < 0:
            raise InvalidInputError("alpha and beta must be non-negative")
        if not self.var > 0:
            raise InvalidInputError("var must be positive")
        if not math.isfinite(self.delta):
            raise InvalidInputError("delta must be finite")

    @classmethod
    def soft_bt(cls, delta=0.0):
        return cls("genbeta", 0.0, 0.0, 1.0, delta)

    @classmethod
    def gen_beta(cls, alpha, beta, delta=0.0):
        return cls("genbeta", alpha, beta, 1.0, delta)

    @classmethod
    def phi_gaussian(cls, var=1.0, delta=0.0):
        return cls("phigaussian", 0.0, 0.0, var, delta)

    @classmethod
    def linear_gaussian(cls, var=1.0, delta=0.0):
        return cls("lineargaussian", 0.0, 0.0, var, delta)

    @property
    def is_soft_bt(self) -> bool:
        return self.family == "genbeta" and self.alpha == 0 and self.beta == 0

    def with_delta(self, delta):
        return ExpertForm(self.family, self.alpha, self.beta, self.var, delta)

    def to_dict(self):
        return {"family": self.family, "alpha": self.alpha, "beta": self.beta,
                "var": self.var, "delta": self.delta}


def _check_prob(p):
    arr = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise InvalidInputError(f"probability outside [0, 1]: {p!r}")


def clamp_prob(p):
    """Clamp probabilities into ``[1e-6, 1 - 1e-6]``."""
    _check_prob(p)
    return np.clip(np.asarray(p, dtype=float), P_CLAMP, 1.0 - P_CLAMP)


def _check_d(d):
    arr = np.asarray(d, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("score difference must be finite")
    return arr


def _scalar_or_array(x):
    return float(x) if np.ndim(x) == 0 else x


def pair_terms(form, d, p, value=True):
    """Log-density, first and second derivative for arrays of (d, p).

    No validation: ``p`` must already be clamped and ``d`` already shifted by
    any home advantage. Used on the hot path of the posterior solver.
    """
    if form.family == "genbeta":
        a = p + form.alpha
        b = 1.0 - p + form.beta
        sig = special.expit(d)
        grad = a - (a + b) * sig
        hess = -(a + b) * sig * (1.0 - sig)
        logf = a * special.log_expit(d) + b * special.log_expit(-d) if value else None
    elif form.family == "phigaussian":
        cdf = special.ndtr(d)
        pdf = np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
        resid = cdf - p
        grad = -d - resid * pdf / form.var
        hess = -1.0 - (pdf * pdf - resid * d * pdf) / form.var
        if value:
            logf = (-0.5 * d * d - _HALF_LOG_2PI
                    - 0.5 * resid * resid / form.var - 0.5 * math.log(2.0 * math.pi * form.var))
        else:
            logf = None
    else:
        m = special.ndtri(p)
        resid = d - m
        grad = -resid / form.var
        hess = np.full_like(np.asarray(d, dtype=float), -1.0 / form.var)
        if value:
            logf = -0.5 * resid * resid / form.var - 0.5 * math.log(2.0 * math.pi * form.var)
        else:
            logf = None
    return logf, grad, hess


def log_density_pair(form: ExpertForm, d, p):
    """``ln p(s_i - s_j | p)`` up to a constant independent of ``d``.

    Accepts scalars or broadcastable arrays. ``p`` is clamped to
    ``[1e-6, 1 - 1e-6]``; values outside ``[0, 1]`` raise.
    """
    d = _check_d(d) + form.delta
    logf, _, _ = pair_terms(form, d, clamp_prob(p))
    return _scalar_or_array(logf)


def grad_pair(form: ExpertForm, d, p):
    """Derivative of :func:`log_density_pair` with respect to ``d``."""
    d = _check_d(d) + form.delta
    _, grad, _ = pair_terms(form, d, clamp_prob(p), value=False)
    return _scalar_or_array(grad)


def hess_pair(form: ExpertForm, d, p):
    """Second derivative of :func:`log_density_pair` with respect to ``d``."""
    d = _check_d(d) + form.delta
    _, _, hess = pair_terms(form, d, clamp_prob(p), value=False)
    return _scalar_or_array(hess)


def moment_match(a: AbsoluteAssessment) -> AbsoluteExpert:
    """Gaussian with the mean and variance of the categorical over ``1..C``."""
    if not isinstance(a, AbsoluteAssessment):
        raise InvalidInputError("expected an AbsoluteAssessment")
    probs = np.asarray(a.class_probs)
    classes = np.arange(1, probs.size + 1, dtype=float)
    mu = float(np.dot(classes, probs))
    var = float(np.dot((classes - mu) ** 2, probs))
    return AbsoluteExpert(mu=mu, var=max(var, 0.0))


def effective_var(e: AbsoluteExpert, var_floor=VAR_FLOOR):
    if e.var < var_floor:
        warnings.warn(
            f"absolute expert variance {e.var:.3g} below floor, clamped to {var_floor:g}",
            RuntimeWarning,
            stacklevel=3,
        )
        return var_floor
    return e.var


def log_density_absolute(s, e: AbsoluteExpert, var_floor=VAR_FLOOR):
    """``ln N(s; e.mu, e.var)``; variances under ``var_floor`` are clamped."""
    var = effective_var(e, var_floor)
    s = np.asarray(s, dtype=float)
    out = -0.5 * (s - e.mu) ** 2 / var - 0.5 * np.log(2.0 * math.pi * var)
    return _scalar_or_array(out)


def debias(p_ij, p_ji):
    """Permutation-debiased probability ``(p_ij + 1 - p_ji) / 2``."""
    _check_prob(p_ij)
    _check_prob(p_ji)
    out = 0.5 * (np.asarray(p_ij, dtype=float) + (1.0 - np.asarray(p_ji, dtype=float)))
    return _scalar_or_array(out)


def anneal(p, T):
    """Temperature-scaled probability ``p^(1/T) / (p^(1/T) + (1-p)^(1/T))``.

    Computed in logit space, which is algebraically identical and keeps the
    result on the same side of 0.5 as ``p``.
    """
    if not T > 0 or not math.isfinite(T):
        raise InvalidInputError(f"temperature must be positive, got {T!r}")
    _check_prob(p)
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore"):
        logit = np.log(p) - np.log1p(-p)
    out = special.expit(logit / T)
    return _scalar_or_array(out)
