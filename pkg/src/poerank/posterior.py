"""Joint Product-of-Experts posterior, MAP scores and Laplace covariance."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import ConvergenceError, InvalidInputError, SingularityError
from .experts import (
    VAR_FLOOR,
    AbsoluteExpert,
    Comparison,
    ExpertForm,
    clamp_prob,
    pair_terms,
)

JITTERS = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass(frozen=True, eq=False)
class JointModel:
    """Comparisons, optional absolute experts and a Gaussian prior over N scores.

    ``prior_var=None`` drops the prior entirely; scores are then only defined
    up to a common shift unless absolute experts anchor them.

    Home advantage: a comparison whose first-shown candidate is ``i`` is
    evaluated at ``s_i - s_j + delta`` and one whose first-shown candidate is
    ``j`` at ``s_i - s_j - delta``, so a positive ``delta`` is a bonus for the
    first prompt position.
    """

    n_candidates: int
    comparisons: tuple = ()
    absolute_experts: tuple | None = None
    form: ExpertForm = field(default_factory=ExpertForm)
    prior_var: float | None = 1.0
    var_floor: float = VAR_FLOOR

    def __post_init__(self):
        n = int(self.n_candidates)
        if n < 1:
            raise InvalidInputError("n_candidates must be at least 1")
        if self.prior_var is not None and not self.prior_var > 0:
            raise InvalidInputError("prior_var must be positive or None")
        comps = tuple(self.comparisons)
        object.__setattr__(self, "comparisons", comps)
        if comps and not hasattr(self, "_I"):
            I = np.fromiter((c.i for c in comps), dtype=np.intp, count=len(comps))
            J = np.fromiter((c.j for c in comps), dtype=np.intp, count=len(comps))
            P = np.fromiter((c.p for c in comps), dtype=float, count=len(comps))
            O = np.fromiter((c.orientation for c in comps), dtype=float, count=len(comps))
            self._set_arrays(I, J, P, O)
        elif not hasattr(self, "_I"):
            self._set_arrays(np.empty(0, np.intp), np.empty(0, np.intp),
                             np.empty(0), np.empty(0))
        if self._I.size and (self._I.max() >= n or self._J.max() >= n):
            raise InvalidInputError("comparison index out of range for n_candidates")
        if self.absolute_experts is not None:
            abs_ = tuple(self.absolute_experts)
            if len(abs_) != n:
                raise InvalidInputError("need exactly one absolute expert per candidate")
            object.__setattr__(self, "absolute_experts", abs_)
            mus = np.array([e.mu for e in abs_], dtype=float)
            raw = np.array([e.var for e in abs_], dtype=float)
            if np.any(raw < self.var_floor):
                warnings.warn("absolute expert variance below floor, clamped",
                              RuntimeWarning, stacklevel=3)
            object.__setattr__(self, "_abs_mu", mus)
            object.__setattr__(self, "_abs_prec", 1.0 / np.maximum(raw, self.var_floor))
        else:
            object.__setattr__(self, "_abs_mu", None)
            object.__setattr__(self, "_abs_prec", None)

    def _set_arrays(self, I, J, P, O):
        if I.size and np.any(I == J):
            raise InvalidInputError("comparison of a candidate with itself")
        object.__setattr__(self, "_I", np.asarray(I, dtype=np.intp))
        object.__setattr__(self, "_J", np.asarray(J, dtype=np.intp))
        object.__setattr__(self, "_P", clamp_prob(P) if np.size(P) else np.empty(0))
        object.__setattr__(self, "_O", np.asarray(O, dtype=float))

    @classmethod
    def from_arrays(cls, n_candidates, i, j, p, orientation=None, *, absolute_experts=None,
                    form=None, prior_var=1.0, var_floor=VAR_FLOOR):
        """Build a model straight from index/probability arrays.

        Skips creating per-comparison objects; ``comparisons`` is left empty
        and only the arrays are stored.
        """
        obj = cls.__new__(cls)
        i = np.asarray(i, dtype=np.intp)
        if orientation is None:
            orientation = np.ones(i.size)
        obj._set_arrays(i, np.asarray(j, dtype=np.intp), np.asarray(p, dtype=float),
                        np.asarray(orientation, dtype=float))
        object.__setattr__(obj, "n_candidates", int(n_candidates))
        object.__setattr__(obj, "comparisons", ())
        object.__setattr__(obj, "absolute_experts", absolute_experts)
        object.__setattr__(obj, "form", form if form is not None else ExpertForm())
        object.__setattr__(obj, "prior_var", prior_var)
        object.__setattr__(obj, "var_floor", var_floor)
        obj.__post_init__()
        return obj

    @property
    def n_comparisons(self) -> int:
        return int(self._I.size)

    def arrays(self):
        """``(i, j, p, orientation)`` arrays with clamped probabilities."""
        return self._I, self._J, self._P, self._O


@dataclass(frozen=True, eq=False)
class PosteriorState:
    """Laplace posterior ``N(mu, sigma)`` after ``k_used`` comparisons."""

    mu: np.ndarray
    sigma: np.ndarray
    k_used: int = 0


def _delta(m, delta):
    return m.form.delta if delta is None else float(delta)


def _shifted(m, s, delta):
    I, J, P, O = m.arrays()
    return s[I] - s[J] + O * delta, P


def _check_s(m, s):
    s = np.asarray(s, dtype=float)
    if s.shape != (m.n_candidates,):
        raise InvalidInputError(
            f"score vector has shape {s.shape}, expected ({m.n_candidates},)")
    return s


def log_joint(m: JointModel, s, delta=None) -> float:
    """Joint log-density of scores, up to constants."""
    s = _check_s(m, s)
    delta = _delta(m, delta)
    return _log_joint(m, s, delta)


def _log_joint(m, s, delta):
    total = 0.0
    if m.n_comparisons:
        d, P = _shifted(m, s, delta)
        logf, _, _ = pair_terms(m.form, d, P)
        total += float(np.sum(logf))
    if m._abs_mu is not None:
        prec = m._abs_prec
        total += float(np.sum(-0.5 * prec * (s - m._abs_mu) ** 2 + 0.5 * np.log(prec / (2 * math.pi))))
    if m.prior_var is not None:
        total += float(np.sum(-0.5 * s * s / m.prior_var)) - 0.5 * s.size * math.log(2 * math.pi * m.prior_var)
    return total


def _derivatives(m, s, delta, value=True):
    """Value, gradient and Hessian of the log joint at ``s``."""
    n = m.n_candidates
    grad = np.zeros(n)
    hess = np.zeros(n * n)
    total = 0.0
    if m.n_comparisons:
        I, J, P, O = m.arrays()
        d = s[I] - s[J] + O * delta
        logf, g, h = pair_terms(m.form, d, P, value=value)
        if value:
            total += float(np.sum(logf))
        grad += np.bincount(I, g, n) - np.bincount(J, g, n)
        hess += (np.bincount(I * (n + 1), h, n * n) + np.bincount(J * (n + 1), h, n * n)
                 - np.bincount(I * n + J, h, n * n) - np.bincount(J * n + I, h, n * n))
    hess = hess.reshape(n, n)
    diag = np.zeros(n)
    if m._abs_mu is not None:
        grad -= m._abs_prec * (s - m._abs_mu)
        diag -= m._abs_prec
        if value:
            total += float(np.sum(-0.5 * m._abs_prec * (s - m._abs_mu) ** 2
                                  + 0.5 * np.log(m._abs_prec / (2 * math.pi))))
    if m.prior_var is not None:
        grad -= s / m.prior_var
        diag -= 1.0 / m.prior_var
        if value:
            total += float(np.sum(-0.5 * s * s / m.prior_var)) - 0.5 * n * math.log(2 * math.pi * m.prior_var)
    hess[np.diag_indices(n)] += diag
    return total, grad, hess


def grad_log_joint(m: JointModel, s, delta=None):
    s = _check_s(m, s)
    return _derivatives(m, s, _delta(m, delta), value=False)[1]


def hessian_log_joint(m: JointModel, s, delta=None):
    """Analytic Hessian assembled from per-comparison second derivatives."""
    s = _check_s(m, s)
    return _derivatives(m, s, _delta(m, delta), value=False)[2]


def _ascent_direction(grad, hess):
    """Newton direction when ``-hess`` factorises, else least squares."""
    try:
        factor = linalg.cho_factor(-hess, check_finite=False)
        direction = linalg.cho_solve(factor, grad, check_finite=False)
    except linalg.LinAlgError:
        direction = np.linalg.lstsq(-hess, grad, rcond=None)[0]
    if not np.all(np.isfinite(direction)) or direction @ grad <= 0:
        direction = grad.copy()
    return direction


def map_estimate(m: JointModel, delta=None, *, init=None, tol=1e-6, max_iters=10_000):
    """MAP score vector by Newton-preconditioned ascent with backtracking.

    Starts from the zero vector unless ``init`` is given and stops once the
    infinity norm of the gradient is at most ``tol``.
    """
    delta = _delta(m, delta)
    s = np.zeros(m.n_candidates) if init is None else _check_s(m, init).copy()
    value, grad, hess = _derivatives(m, s, delta)
    gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
    for _ in range(max_iters):
        if gnorm <= tol:
            return s
        direction = _ascent_direction(grad, hess)
        slope = float(direction @ grad)
        step = 1.0
        while True:
            trial = s + step * direction
            trial_value = _log_joint(m, trial, delta)
            if trial_value >= value + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-12:
                # no representable ascent left; accept if roundoff-limited
                if gnorm <= 1e3 * tol:
                    return s
                raise ConvergenceError(
                    f"line search failed with gradient norm {gnorm:.3g}",
                    iterate=s, grad_norm=gnorm)
        s = trial
        value, grad, hess = _derivatives(m, s, delta)
        gnorm = float(np.max(np.abs(grad)))
    if gnorm <= tol:
        return s
    raise ConvergenceError(
        f"no convergence after {max_iters} iterations (gradient norm {gnorm:.3g})",
        iterate=s, grad_norm=gnorm)


def precision_matrix(m: JointModel, mu, delta=None):
    """Negative Hessian of the log joint at ``mu``."""
    return -hessian_log_joint(m, mu, delta)


def _cholesky_with_jitter(a):
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(a.shape[0])
    for jitter in JITTERS:
        try:
            chol = np.linalg.cholesky(a + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        warnings.warn(f"precision matrix needed jitter {jitter:g}", RuntimeWarning, stacklevel=3)
        return chol, jitter
    raise SingularityError("precision matrix is not positive definite even with jitter 1e-4")


def laplace(m: JointModel, mu, delta=None):
    """Laplace covariance: inverse of the negative Hessian at ``mu``."""
    prec = precision_matrix(m, mu, delta)
    chol, _ = _cholesky_with_jitter(prec)
    inv_chol = linalg.solve_triangular(chol, np.eye(chol.shape[0]), lower=True, check_finite=False)
    sigma = inv_chol.T @ inv_chol
    return 0.5 * (sigma + sigma.T)


def entropy(sigma) -> float:
    """Differential entropy of ``N(., sigma)`` via a Cholesky factor."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    n = sigma.shape[0]
    if sigma.shape != (n, n) or not np.allclose(sigma, sigma.T, atol=1e-10):
        raise SingularityError("covariance must be a symmetric square matrix")
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("covariance is not positive definite") from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return 0.5 * n * (1.0 + math.log(2.0 * math.pi)) + 0.5 * logdet


def fit_posterior(m: JointModel, delta=None, *, init=None, tol=1e-6, max_iters=10_000):
    """MAP plus Laplace covariance bundled as a :class:`PosteriorState`."""
    mu = map_estimate(m, delta, init=init, tol=tol, max_iters=max_iters)
    sigma = laplace(m, mu, delta)
    return PosteriorState(mu=mu, sigma=sigma, k_used=m.n_comparisons)


def _delta_newton(m, s, delta, tol=1e-10, max_iters=50):
    """Maximise the log joint over ``delta`` with ``s`` held fixed."""
    I, J, P, O = m.arrays()
    base = s[I] - s[J]
    value = float(np.sum(pair_terms(m.form, base + O * delta, P)[0]))
    for _ in range(max_iters):
        logf, g, h = pair_terms(m.form, base + O * delta, P)
        gd = float(np.sum(O * g))
        hd = float(np.sum(h))
        if abs(gd) <= tol:
            break
        step = -gd / hd if hd < 0 else gd
        t = 1.0
        while True:
            new = float(np.sum(pair_terms(m.form, base + O * (delta + t * step), P)[0]))
            if new >= value + 1e-4 * t * step * gd:
                break
            t *= 0.5
            if t < 1e-12:
                return delta
        delta += t * step
        value = new
    return delta


def fit_home_advantage(m: JointModel, *, tol=1e-6, max_rounds=50, init_delta=0.0):
    """Jointly maximise the log joint over scores and the home advantage.

    Coordinate ascent: a MAP solve for the scores at fixed ``delta``, then a
    one-dimensional Newton solve for ``delta`` at fixed scores. Returns
    ``(delta, mu)``.
    """
    delta = float(init_delta)
    mu = None
    if m.n_comparisons == 0:
        return delta, map_estimate(m, delta, tol=tol)
    for _ in range(max_rounds):
        mu = map_estimate(m, delta, init=mu, tol=tol)
        new_delta = _delta_newton(m, mu, delta)
        shift = abs(new_delta - delta)
        delta = new_delta
        if shift <= 1e-8:
            mu = map_estimate(m, delta, init=mu, tol=tol)
            return delta, mu
    _, grad, _ = _derivatives(m, mu, delta, value=False)
    raise ConvergenceError(
        f"home-advantage fit did not converge in {max_rounds} rounds",
        iterate=mu, grad_norm=float(np.max(np.abs(grad))))


def build_model(n_candidates, comparisons, *, form=None, prior_var=1.0, absolute_experts=None):
    """Convenience constructor accepting any iterable of comparisons."""
    comps = tuple(comparisons)
    for c in comps:
        if not isinstance(c, Comparison):
            raise InvalidInputError("comparisons must be Comparison instances")
    if absolute_experts is not None:
        absolute_experts = tuple(absolute_experts)
        for e in absolute_experts:
            if not isinstance(e, AbsoluteExpert):
                raise InvalidInputError("absolute experts must be AbsoluteExpert instances")
    return JointModel(n_candidates, comps, absolute_experts,
                      form if form is not None else ExpertForm(), prior_var)
