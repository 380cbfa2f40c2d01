"""Ranking, uncertainty and calibration metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .errors import InvalidInputError, UndefinedMetricError
from .experts import anneal

REJECTION_FRACTIONS = tuple(round(0.05 * k, 2) for k in range(20))


@dataclass
class TrajectoryRecord:
    """State after one acquisition step (a single pair or a batch)."""

    k: int
    pairs: list = field(default_factory=list)
    p: list = field(default_factory=list)
    spearman: float | None = None
    entropy: float = float("nan")


@dataclass
class Trajectory:
    records: list = field(default_factory=list)
    policy: str = ""
    seed: int | None = None
    context_id: str = ""

    def append(self, record: TrajectoryRecord):
        if self.records and record.k <= self.records[-1].k:
            raise InvalidInputError("trajectory k must be strictly increasing")
        self.records.append(record)

    @property
    def ks(self):
        return [r.k for r in self.records]

    @property
    def spearmans(self):
        return [r.spearman for r in self.records]

    @property
    def entropies(self):
        return [r.entropy for r in self.records]

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            lines.append(json.dumps({
                "context": self.context_id,
                "k": r.k,
                "pair": [list(map(int, q)) for q in r.pairs],
                "p": [float(x) for x in r.p],
                "spearman": r.spearman,
                "entropy": r.entropy,
                "policy": self.policy,
                "seed": self.seed,
            }))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str):
        traj = None
        for line in text.splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            if "meta" in row:
                continue
            if traj is None:
                traj = cls(policy=row.get("policy", ""), seed=row.get("seed"),
                           context_id=row.get("context", ""))
            traj.append(TrajectoryRecord(
                k=int(row["k"]),
                pairs=[tuple(q) for q in row.get("pair", [])],
                p=list(row.get("p", [])),
                spearman=row.get("spearman"),
                entropy=float(row["entropy"]),
            ))
        return traj if traj is not None else cls()


def spearman(pred, truth) -> float:
    """Spearman's rho with average ranks for ties."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise InvalidInputError("spearman needs two vectors of equal length")
    if pred.size < 2:
        raise InvalidInputError("spearman needs at least two items")
    rp = stats.rankdata(pred)
    rt = stats.rankdata(truth)
    rp -= rp.mean()
    rt -= rt.mean()
    denom = math.sqrt(float(rp @ rp) * float(rt @ rt))
    if denom == 0.0:
        raise UndefinedMetricError("spearman is undefined for a constant vector")
    return float(rp @ rt) / denom


def efficiency_at_90(traj: Trajectory, full_value: float, fraction=0.9):
    """Smallest ``k`` whose Spearman reaches ``fraction * full_value``.

    Returns ``None`` when the threshold is never reached. When
    ``full_value <= 0`` every non-negative Spearman meets the threshold and the
    first record's ``k`` is returned.
    """
    if not traj.records:
        raise InvalidInputError("empty trajectory")
    if not math.isfinite(full_value):
        raise InvalidInputError("full_value must be finite")
    if full_value <= 0:
        return traj.records[0].k
    threshold = fraction * full_value
    for r in traj.records:
        if r.spearman is not None and r.spearman >= threshold:
            return r.k
    return None


def binarize_by_median(values):
    """1 where a value is strictly above the median, else 0."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise InvalidInputError("need at least two values")
    return (values > np.median(values)).astype(int)


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Ties between a positive and a negative count one half.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise InvalidInputError("scores and labels differ in shape")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != labels.size:
        raise UndefinedMetricError("auroc needs binary labels with both classes present")
    ranks = stats.rankdata(scores)
    u = float(np.sum(ranks[labels == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass
class CalibrationBin:
    lo: float
    hi: float
    mean_confidence: float
    accuracy: float
    count: int


@dataclass
class CalibrationReport:
    ece: float
    bins: list
    optimal_temperature: float = 1.0

    def to_dict(self):
        return {"ece": self.ece, "optimal_temperature": self.optimal_temperature,
                "bins": [asdict(b) for b in self.bins]}

    def bins_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bin_lo", "bin_hi", "confidence", "accuracy", "count"])
        for b in self.bins:
            writer.writerow([b.lo, b.hi, b.mean_confidence, b.accuracy, b.count])
        return buf.getvalue()


def ece_from_bins(bins) -> float:
    total = sum(b.count for b in bins)
    if total == 0:
        raise InvalidInputError("no samples in bins")
    return float(sum(b.count / total * abs(b.accuracy - b.mean_confidence)
                     for b in bins if b.count))


def ece(confidences, correct, n_bins=10) -> CalibrationReport:
    """Expected calibration error over equal-width bins on ``[0.5, 1]``.

    Empty bins carry ``nan`` confidence and accuracy and contribute nothing.
    """
    conf = np.asarray(confidences, dtype=float)
    correct = np.asarray(correct, dtype=float)
    if conf.size == 0:
        raise InvalidInputError("ece needs at least one sample")
    if conf.shape != correct.shape:
        raise InvalidInputError("confidences and correctness differ in shape")
    if n_bins < 1:
        raise InvalidInputError("n_bins must be at least 1")
    if np.any(conf < 0.5 - 1e-12) or np.any(conf > 1 + 1e-12):
        raise InvalidInputError("confidences must lie in [0.5, 1]")
    edges = np.linspace(0.5, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        mask = idx == b
        count = int(mask.sum())
        if count:
            bins.append(CalibrationBin(float(edges[b]), float(edges[b + 1]),
                                       float(conf[mask].mean()), float(correct[mask].mean()), count))
        else:
            bins.append(CalibrationBin(float(edges[b]), float(edges[b + 1]), math.nan, math.nan, 0))
    return CalibrationReport(ece=ece_from_bins(bins), bins=bins)


def confidence(p):
    p = np.asarray(p, dtype=float)
    return np.maximum(p, 1.0 - p)


def _ece_at(p, correct, n_bins, log_t):
    return ece(confidence(anneal(p, math.exp(log_t))), correct, n_bins).ece


def fit_temperature(p, correct, n_bins=10, lo=0.1, hi=10.0, grid=41, tol=1e-4):
    """Temperature minimising ECE of annealed probabilities.

    A log-spaced grid that contains ``T = 1`` brackets the minimum, then a
    golden-section search refines it in ``ln T``. The best point seen is
    returned, so the fitted ECE never exceeds the ECE at ``T = 1``.
    """
    p = np.asarray(p, dtype=float)
    correct = np.asarray(correct, dtype=float)
    if p.size == 0:
        raise InvalidInputError("fit_temperature needs data")
    a, b = math.log(lo), math.log(hi)
    xs = np.union1d(np.linspace(a, b, grid), [0.0])
    vals = [_ece_at(p, correct, n_bins, x) for x in xs]
    best = int(np.argmin(vals))
    best_x, best_v = float(xs[best]), vals[best]
    left = float(xs[max(best - 1, 0)])
    right = float(xs[min(best + 1, len(xs) - 1)])
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    c = right - inv_phi * (right - left)
    d = left + inv_phi * (right - left)
    fc, fd = _ece_at(p, correct, n_bins, c), _ece_at(p, correct, n_bins, d)
    while right - left > tol:
        if fc <= fd:
            right, d, fd = d, c, fc
            c = right - inv_phi * (right - left)
            fc = _ece_at(p, correct, n_bins, c)
        else:
            left, c, fc = c, d, fd
            d = left + inv_phi * (right - left)
            fd = _ece_at(p, correct, n_bins, d)
    for x, v in ((c, fc), (d, fd)):
        if v < best_v:
            best_x, best_v = x, v
    return math.exp(best_x)


def calibration_report(p, correct, n_bins=10) -> tuple:
    """ECE report before and after temperature fitting."""
    before = ece(confidence(p), correct, n_bins)
    t = fit_temperature(p, correct, n_bins)
    after = ece(confidence(anneal(p, t)), correct, n_bins)
    before.optimal_temperature = t
    after.optimal_temperature = t
    return before, after


def rejection_curve(uncertainties, correct, fractions=REJECTION_FRACTIONS):
    """Accuracy of what remains after dropping the most uncertain items.

    Items are ordered by decreasing uncertainty (stable for ties) and the
    first ``floor(f * n)`` are rejected for each fraction ``f``.
    """
    u = np.asarray(uncertainties, dtype=float)
    correct = np.asarray(correct, dtype=float)
    if u.size == 0:
        raise InvalidInputError("rejection curve needs data")
    order = np.argsort(-u, kind="stable")
    ordered = correct[order]
    n = u.size
    out = []
    for f in fractions:
        cut = int(math.floor(f * n + 1e-9))
        kept = ordered[cut:]
        out.append((float(f), float(kept.mean()) if kept.size else math.nan))
    return out
