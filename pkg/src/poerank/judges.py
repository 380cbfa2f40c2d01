"""Synthetic judges with known ground truth, and JSON-lines log I/O.

Comparison log line::

    {"context": "c0", "i": 3, "j": 5, "p": 0.71, "order": "ij"}

``p`` is the probability that ``i`` beats ``j``; ``order`` records which
candidate was shown first. Absolute log line::

    {"context": "c0", "n": 3, "probs": [0.0, 0.1, ...]}

A first line of the form ``{"meta": {...}}`` is allowed and skipped.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .errors import InvalidInputError, LogParseError
from .experts import P_CLAMP, AbsoluteAssessment, Comparison


@dataclass(frozen=True)
class SyntheticJudgeConfig:
    """Generative judge: ``p = sigmoid((s_i - s_j) / tau + delta_star * o + eps)``.

    ``o`` is +1 when ``i`` is shown first and -1 otherwise; ``eps`` is Gaussian
    logit noise with standard deviation ``noise_sd``.
    """

    n_candidates: int = 16
    tau: float = 1.0
    delta_star: float = 0.0
    noise_sd: float = 0.0
    abs_noise_sd: float = 1.0
    n_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_candidates < 2:
            raise InvalidInputError("need at least two candidates")
        if not self.tau > 0:
            raise InvalidInputError("tau must be positive")
        if self.noise_sd < 0 or self.abs_noise_sd < 0:
            raise InvalidInputError("noise levels must be non-negative")
        if self.n_classes < 2:
            raise InvalidInputError("need at least two classes")


def _rng(cfg, *stream):
    return np.random.default_rng(np.random.SeedSequence([int(cfg.seed), *stream]))


def simulate_true_scores(cfg: SyntheticJudgeConfig, context_index=None):
    """Standard-normal latent scores, seeded by ``cfg.seed`` (and context)."""
    if context_index is None:
        rng = np.random.default_rng(cfg.seed)
    else:
        rng = _rng(cfg, 1, int(context_index))
    return rng.standard_normal(cfg.n_candidates)


def judge_compare(cfg: SyntheticJudgeConfig, s_i, s_j, order="ij", rng=None):
    """Judge probability that the candidate with score ``s_i`` wins."""
    orient = 1.0 if order == "ij" else -1.0
    logit = (s_i - s_j) / cfg.tau + cfg.delta_star * orient
    if cfg.noise_sd > 0:
        if rng is None:
            raise InvalidInputError("a noisy judge needs an rng")
        logit = logit + rng.normal(0.0, cfg.noise_sd, size=np.shape(logit))
    return np.clip(special.expit(logit), P_CLAMP, 1.0 - P_CLAMP)


def judge_absolute(cfg: SyntheticJudgeConfig, s_n, lo, hi, *, context_id="", n=0):
    """Discretised Gaussian over classes ``1..C`` around the rescaled score.

    ``[lo, hi]`` is the range of true scores in the context and maps affinely
    onto ``[1, C]``. With ``abs_noise_sd == 0`` all mass sits on the nearest
    class.
    """
    C = cfg.n_classes
    if hi > lo:
        target = 1.0 + (s_n - lo) / (hi - lo) * (C - 1)
    else:
        target = (C + 1) / 2.0
    target = min(max(target, 1.0), float(C))
    classes = np.arange(1, C + 1, dtype=float)
    if cfg.abs_noise_sd == 0:
        probs = np.zeros(C)
        probs[int(np.argmin(np.abs(classes - target)))] = 1.0
    else:
        logw = -0.5 * ((classes - target) / cfg.abs_noise_sd) ** 2
        w = np.exp(logw - logw.max())
        probs = w / w.sum()
    return AbsoluteAssessment(context_id, int(n), tuple(probs))


@dataclass
class SyntheticContext:
    """One simulated context: truth plus every judge output for it.

    ``p_table[i, j]`` is the judge probability that ``i`` beats ``j`` with ``i``
    shown first; every ordered pair is pre-drawn so different selection
    policies see identical judge outputs.
    """

    context_id: str
    truth: np.ndarray
    p_table: np.ndarray
    absolutes: list = field(default_factory=list)

    @property
    def n_candidates(self):
        return self.truth.size

    def compare(self, i, j):
        return float(self.p_table[i, j])

    def comparisons(self, pairs=None):
        if pairs is None:
            n = self.n_candidates
            pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
        return [Comparison(self.context_id, int(i), int(j), float(self.p_table[i, j]), "ij")
                for i, j in pairs]


def simulate_context(cfg: SyntheticJudgeConfig, index=0, context_id=None):
    truth = simulate_true_scores(cfg, index)
    rng = _rng(cfg, 2, int(index))
    n = cfg.n_candidates
    diff = truth[:, None] - truth[None, :]
    p_table = judge_compare(cfg, diff, 0.0, "ij", rng=rng)
    np.fill_diagonal(p_table, 0.5)
    cid = context_id if context_id is not None else f"ctx{index:04d}"
    lo, hi = float(truth.min()), float(truth.max())
    absolutes = [judge_absolute(cfg, float(truth[k]), lo, hi, context_id=cid, n=k)
                 for k in range(n)]
    return SyntheticContext(cid, truth, p_table, absolutes)


def simulate_suite(cfg: SyntheticJudgeConfig, n_contexts):
    return [simulate_context(cfg, k) for k in range(n_contexts)]


# -- log I/O ----------------------------------------------------------------


def _iter_json_lines(path):
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogParseError(f"malformed JSON: {exc.msg}", line=lineno, path=path) from exc
            if not isinstance(row, dict):
                raise LogParseError("expected a JSON object", line=lineno, path=path)
            if "meta" in row and len(row) == 1:
                continue
            yield lineno, row


def _get(row, key, kind, lineno, path):
    if key not in row:
        raise LogParseError(f"missing field {key!r}", line=lineno, path=path)
    value = row[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise LogParseError(f"field {key!r} must be an integer", line=lineno, path=path)
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise LogParseError(f"field {key!r} must be a number", line=lineno, path=path)
    return value


def load_comparison_log(path):
    """Read a comparison log into ``{context_id: [Comparison, ...]}``."""
    out = OrderedDict()
    for lineno, row in _iter_json_lines(path):
        ctx = str(_get(row, "context", str, lineno, path))
        i = _get(row, "i", int, lineno, path)
        j = _get(row, "j", int, lineno, path)
        p = float(_get(row, "p", float, lineno, path))
        order = row.get("order", "ij")
        if not (0.0 < p < 1.0) or not math.isfinite(p):
            raise LogParseError(f"probability {p} outside (0, 1)", line=lineno, path=path)
        try:
            comp = Comparison(ctx, i, j, p, order)
        except InvalidInputError as exc:
            raise LogParseError(str(exc), line=lineno, path=path) from exc
        out.setdefault(ctx, []).append(comp)
    return dict(out)


def load_absolute_log(path):
    """Read an absolute log into ``{context_id: [AbsoluteAssessment, ...]}``."""
    out = OrderedDict()
    for lineno, row in _iter_json_lines(path):
        ctx = str(_get(row, "context", str, lineno, path))
        n = _get(row, "n", int, lineno, path)
        probs = row.get("probs")
        if not isinstance(probs, list) or not probs:
            raise LogParseError("field 'probs' must be a non-empty list", line=lineno, path=path)
        try:
            a = AbsoluteAssessment(ctx, n, tuple(float(x) for x in probs))
        except (InvalidInputError, TypeError, ValueError) as exc:
            raise LogParseError(str(exc), line=lineno, path=path) from exc
        out.setdefault(ctx, []).append(a)
    return dict(out)


def _meta_line(meta):
    return json.dumps({"meta": meta}, sort_keys=True) + "\n" if meta is not None else ""


def comparison_line(c: Comparison) -> str:
    return json.dumps({"context": c.context_id, "i": c.i, "j": c.j, "p": c.p, "order": c.order})


def absolute_line(a: AbsoluteAssessment) -> str:
    return json.dumps({"context": a.context_id, "n": a.n, "probs": list(a.class_probs)})


def write_comparison_log(path, comparisons, meta=None):
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(_meta_line(meta))
        for c in comparisons:
            fh.write(comparison_line(c) + "\n")


def write_absolute_log(path, assessments, meta=None):
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(_meta_line(meta))
        for a in assessments:
            fh.write(absolute_line(a) + "\n")


def write_truth(path, truths, meta=None):
    """Write ``{context_id: scores}`` as JSON lines."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(_meta_line(meta))
        for ctx, scores in truths.items():
            fh.write(json.dumps({"context": ctx, "scores": [float(x) for x in scores]}) + "\n")


def load_truth(path):
    out = OrderedDict()
    for lineno, row in _iter_json_lines(path):
        ctx = str(_get(row, "context", str, lineno, path))
        scores = row.get("scores")
        if not isinstance(scores, list):
            raise LogParseError("field 'scores' must be a list", line=lineno, path=path)
        out[ctx] = np.asarray(scores, dtype=float)
    return dict(out)


def infer_n_candidates(comparisons, absolutes=()):
    """Candidate count implied by the largest index seen."""
    top = -1
    for c in comparisons:
        top = max(top, c.i, c.j)
    for a in absolutes:
        top = max(top, a.n)
    return top + 1
