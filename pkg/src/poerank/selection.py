"""Pair scoring policies and the iterative comparison-acquisition loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import (
    ConvergenceError,
    EmptyPoolError,
    InvalidInputError,
    SingularityError,
    UndefinedMetricError,
)
from .experts import ExpertForm, debias
from .metrics import Trajectory, TrajectoryRecord
from .posterior import (
    JointModel,
    PosteriorState,
    entropy,
    fit_home_advantage,
    laplace,
    map_estimate,
)

logger = logging.getLogger(__name__)

KINDS = ("random", "min_uncertainty", "variance", "reorder", "power")
TIE_EPS = 1e-12


@dataclass(frozen=True)
class SelectionPolicy:
    """How pairs are ranked for acquisition.

    ``kind`` is one of ``random``, ``min_uncertainty``, ``variance``,
    ``reorder`` or ``power``; ``epsilon`` is the exponent of ``power``.
    """

    kind: str = "reorder"
    epsilon: float = 2.0
    seed: int = 0
    batch_size: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInputError(f"unknown policy {self.kind!r}")
        if self.epsilon < 0:
            raise InvalidInputError("epsilon must be non-negative")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be at least 1")

    @property
    def name(self):
        if self.kind == "power":
            return f"power{self.epsilon:g}"
        return self.kind


class CandidatePool:
    """Ordered pairs ``(i, j)``, ``i != j``, not yet queried.

    ``pairs`` restricts the pool to a subset, e.g. the pairs present in a log.
    """

    def __init__(self, n_candidates, pairs=None):
        self.n = int(n_candidates)
        if pairs is None:
            self._mask = ~np.eye(self.n, dtype=bool)
        else:
            self._mask = np.zeros((self.n, self.n), dtype=bool)
            for i, j in pairs:
                if i == j or not (0 <= i < self.n and 0 <= j < self.n):
                    raise InvalidInputError(f"invalid pair {(i, j)}")
                self._mask[i, j] = True

    def __len__(self):
        return int(self._mask.sum())

    def __contains__(self, pair):
        i, j = pair
        return bool(self._mask[i, j])

    def arrays(self):
        """Remaining pairs in lexicographic order as index arrays."""
        return np.nonzero(self._mask)

    def remove(self, pairs):
        for i, j in pairs:
            if not self._mask[i, j]:
                raise InvalidInputError(f"pair {(i, j)} is not in the pool")
            self._mask[i, j] = False


def pair_variance(sigma, i, j):
    """Posterior variance of ``s_i - s_j``."""
    sigma = np.asarray(sigma)
    v = sigma[i, i] - 2.0 * sigma[i, j] + sigma[j, j]
    return np.maximum(v, 0.0) if np.ndim(v) else max(float(v), 0.0)


def reorder_probability(mu, sigma, i, j):
    """Probability that the currently lower-mean candidate of the pair is better."""
    mu = np.asarray(mu)
    gap = np.abs(mu[i] - mu[j])
    v = pair_variance(sigma, i, j)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(v > 0, -gap / np.sqrt(np.where(v > 0, v, 1.0)), -np.inf)
    z = np.where(gap == 0, 0.0, z)
    out = special.ndtr(z)
    return float(out) if np.ndim(out) == 0 else out


def score_pairs(policy: SelectionPolicy, mu, sigma, I, J):
    """Vectorised :func:`score_pair` over index arrays; higher is earlier."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    diag = np.diag(sigma)
    v = np.maximum(diag[I] - 2.0 * sigma[I, J] + diag[J], 0.0)
    d = mu[I] - mu[J]
    kind = policy.kind
    if kind == "variance":
        return v
    if kind == "min_uncertainty":
        return special.expit(d) * special.expit(-d) * v
    if kind == "reorder":
        eps = 2.0
    elif kind == "power":
        eps = policy.epsilon
        if eps == 0:
            return v
    else:
        raise InvalidInputError("random policy has no deterministic pair score")
    gap = np.abs(d)
    tied = gap < TIE_EPS
    with np.errstate(divide="ignore"):
        out = v / np.where(tied, 1.0, gap) ** eps
    out[tied] = np.inf
    return out


def score_pair(policy, mu, sigma, i, j) -> float:
    return float(score_pairs(policy, mu, sigma, np.array([i]), np.array([j]))[0])


def select_next(policy: SelectionPolicy, state: PosteriorState, pool: CandidatePool, rng=None):
    """Top ``batch_size`` pairs of the pool; ties broken lexicographically.

    The random policy draws from ``rng`` (a fresh generator seeded with
    ``policy.seed`` when omitted). The caller removes the pairs from the pool.
    """
    I, J = pool.arrays()
    if I.size == 0:
        raise EmptyPoolError("candidate pool is empty")
    b = min(policy.batch_size, I.size)
    if policy.kind == "random":
        if rng is None:
            rng = np.random.default_rng(policy.seed)
        idx = rng.choice(I.size, size=b, replace=False)
    else:
        scores = score_pairs(policy, state.mu, state.sigma, I, J)
        # lexsort: last key is primary
        idx = np.lexsort((J, I, -scores))[:b]
    return [(int(I[k]), int(J[k])) for k in idx]


class _ComparisonSet:
    """Growable arrays of acquired comparisons."""

    def __init__(self, capacity):
        self.I = np.empty(capacity, dtype=np.intp)
        self.J = np.empty(capacity, dtype=np.intp)
        self.P = np.empty(capacity)
        self.O = np.empty(capacity)
        self.k = 0

    def add(self, i, j, p, orient=1.0):
        if self.k == self.I.size:
            for name in ("I", "J", "P", "O"):
                arr = getattr(self, name)
                setattr(self, name, np.concatenate([arr, np.empty_like(arr)]))
        self.I[self.k], self.J[self.k], self.P[self.k], self.O[self.k] = i, j, p, orient
        self.k += 1

    def model(self, n, form, prior_var, absolute_experts):
        k = self.k
        return JointModel.from_arrays(n, self.I[:k], self.J[:k], self.P[:k], self.O[:k],
                                      absolute_experts=absolute_experts, form=form,
                                      prior_var=prior_var)


def run_selection_loop(judge, policy: SelectionPolicy, expert_form: ExpertForm | None, budget,
                       eval_hook=None, *, n_candidates, prior_var=1.0, absolute_experts=None,
                       debiasing="none", stop_when=None, warm_start=True, context_id="",
                       pairs=None):
    """Iteratively estimate uncertainty, select, query the judge and refit.

    ``judge(i, j)`` returns the probability that ``i`` beats ``j`` with ``i``
    shown first. ``eval_hook(mu)`` returns a Spearman value or ``None``; an
    undefined metric (e.g. all scores tied at the prior) is recorded as ``None``.
    ``debiasing`` is ``"none"``, ``"permutation"`` (both orders are queried
    and averaged, costing two budget units) or ``"home_advantage"`` (the
    offset is refitted after every batch).

    ``pairs`` limits the candidate pool to the given ordered pairs.
    ``stop_when(record)`` may end the loop early once it returns true. Returns
    a :class:`~poerank.metrics.Trajectory` whose ``final_state`` attribute holds
    the last posterior.
    """
    n = int(n_candidates)
    pool = CandidatePool(n, pairs)
    total = len(pool)
    if budget is None:
        budget = total
    if budget < 0 or budget > total:
        raise InvalidInputError(f"budget must be in [0, {total}]")
    if debiasing not in ("none", "permutation", "home_advantage"):
        raise InvalidInputError(f"unknown debiasing mode {debiasing!r}")
    form = expert_form if expert_form is not None else ExpertForm()
    acquired = _ComparisonSet(max(budget, 1))
    rng = np.random.default_rng(policy.seed)
    traj = Trajectory(policy=policy.name, seed=policy.seed, context_id=context_id)
    delta = form.delta
    mu = None
    step = 0

    def refit():
        nonlocal delta, mu
        model = acquired.model(n, form, prior_var, absolute_experts)
        try:
            if debiasing == "home_advantage" and model.n_comparisons:
                delta, mu_new = fit_home_advantage(model, init_delta=delta)
            else:
                mu_new = map_estimate(model, delta, init=mu if warm_start else None)
            sigma = laplace(model, mu_new, delta)
        except ConvergenceError as exc:
            exc.step = step
            raise
        except SingularityError as exc:
            exc.step = step
            raise
        mu = mu_new
        return PosteriorState(mu=mu_new, sigma=sigma, k_used=acquired.k)

    def record(state, pairs, ps):
        rho = None
        if eval_hook is not None:
            try:
                rho = eval_hook(state.mu)
            except UndefinedMetricError:
                rho = None
        rec = TrajectoryRecord(k=acquired.k if step else 0, pairs=pairs, p=ps,
                               spearman=rho, entropy=entropy(state.sigma))
        traj.append(rec)
        if len(traj.records) > 1 and rec.entropy > traj.records[-2].entropy + 1e-9:
            logger.debug("entropy increased at k=%d (%.6f -> %.6f)",
                         rec.k, traj.records[-2].entropy, rec.entropy)
        return rec

    state = refit()
    rec = record(state, [], [])
    used = 0
    unit = 2 if debiasing == "permutation" else 1
    while used + unit <= budget and len(pool) and not (stop_when and stop_when(rec)):
        step += 1
        room = (budget - used) // unit
        batch_policy = policy if policy.batch_size <= room else SelectionPolicy(
            policy.kind, policy.epsilon, policy.seed, room)
        if debiasing == "permutation":
            batch = _select_unordered(batch_policy, state, pool, rng)
        else:
            batch = select_next(batch_policy, state, pool, rng)
        pairs, ps = [], []
        for i, j in batch:
            if debiasing == "permutation":
                p_ij, p_ji = judge(i, j), judge(j, i)
                pt = float(debias(p_ij, p_ji))
                pool.remove([(i, j), (j, i)])
                acquired.add(i, j, pt)
                acquired.add(j, i, 1.0 - pt)
                pairs += [(i, j), (j, i)]
                ps += [pt, 1.0 - pt]
                used += 2
            else:
                p = float(judge(i, j))
                pool.remove([(i, j)])
                acquired.add(i, j, p)
                pairs.append((i, j))
                ps.append(p)
                used += 1
        state = refit()
        rec = record(state, pairs, ps)
    traj.final_state = state
    traj.delta = delta
    return traj


def _select_unordered(policy, state, pool, rng):
    """Selection restricted to pairs whose reverse order is also unqueried."""
    I, J = pool.arrays()
    keep = (I < J) & pool._mask[J, I]
    I, J = I[keep], J[keep]
    if I.size == 0:
        raise EmptyPoolError("no unqueried unordered pairs left")
    b = min(policy.batch_size, I.size)
    if policy.kind == "random":
        idx = rng.choice(I.size, size=b, replace=False)
    else:
        scores = score_pairs(policy, state.mu, state.sigma, I, J)
        idx = np.lexsort((J, I, -scores))[:b]
    return [(int(I[k]), int(J[k])) for k in idx]


def full_budget(n_candidates) -> int:
    """Number of ordered comparisons among ``n_candidates``."""
    n = int(n_candidates)
    return n * (n - 1)


def prior_entropy(n_candidates, prior_var=1.0) -> float:
    n = int(n_candidates)
    return 0.5 * n * (1.0 + math.log(2.0 * math.pi)) + 0.5 * n * math.log(prior_var)
