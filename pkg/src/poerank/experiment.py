"""Config-driven experiment runs behind the command-line interface.

Every run is a pure function of its :class:`ExperimentConfig` and input
files. Outputs go to ``<output_dir>/<command>/<config_hash>/`` and every file
starts with a metadata line recording the hash.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import InvalidInputError
from .experts import ExpertForm, anneal, debias, moment_match
from .judges import (
    SyntheticJudgeConfig,
    comparison_line,
    absolute_line,
    infer_n_candidates,
    load_absolute_log,
    load_comparison_log,
    load_truth,
    simulate_context,
)
from .metrics import (
    Trajectory,
    calibration_report,
    confidence,
    efficiency_at_90,
    rejection_curve,
    spearman,
)
from .posterior import JointModel, entropy, fit_home_advantage, laplace, map_estimate
from .selection import SelectionPolicy, full_budget, reorder_probability, run_selection_loop

COMMANDS = ("simulate", "rank", "select", "calibrate", "report")

DEFAULTS = {
    "judge": {
        "n_candidates": 16,
        "n_contexts": 100,
        "tau": 1.0,
        "delta_star": 0.0,
        "noise_sd": 0.5,
        "abs_noise_sd": 1.0,
        "n_classes": 10,
    },
    "comparison_log": None,
    "absolute_log": None,
    "truth_log": None,
    "expert": {"family": "genbeta", "alpha": 0.0, "beta": 0.0, "var": 1.0},
    "prior_var": 1.0,
    "absolute_experts": False,
    "debiasing": "none",
    "policies": ["random", "min_uncertainty", "variance", "reorder"],
    "epsilon": 0.5,
    "batch_size": 1,
    "budget": None,
    "seeds": [0],
    "output_dir": "runs",
    "n_bins": 10,
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise InvalidInputError(f"unknown config key {key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            for sub in value:
                if sub not in base[key]:
                    raise InvalidInputError(f"unknown config key {key}.{sub}")
            out[key].update(value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    """Full description of a run; see ``DEFAULTS`` for keys."""

    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, data):
        cfg = cls(_merge(DEFAULTS, data or {}))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path):
        with Path(path).open(encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}: invalid JSON config: {exc.msg}") from exc
        return cls.from_dict(data)

    def override(self, dotted):
        """Apply ``{"a.b": value}`` overrides and return a new config."""
        data = copy.deepcopy(self.values)
        for key, value in dotted.items():
            parts = key.split(".")
            node = data
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise InvalidInputError(f"unknown config key {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise InvalidInputError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(data)

    def validate(self):
        v = self.values
        self.judge_config(0)
        self.expert_form()
        if v["debiasing"] not in ("none", "permutation", "home_advantage"):
            raise InvalidInputError(f"unknown debiasing {v['debiasing']!r}")
        if v["prior_var"] is not None and not v["prior_var"] > 0:
            raise InvalidInputError("prior_var must be positive")
        if not v["seeds"]:
            raise InvalidInputError("need at least one seed")
        for name in v["policies"]:
            self.policy(name, 0)
        if int(v["judge"]["n_contexts"]) < 1:
            raise InvalidInputError("n_contexts must be at least 1")

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self):
        return copy.deepcopy(self.values)

    @property
    def hash(self):
        # the output location does not change results
        values = {k: v for k, v in self.values.items() if k != "output_dir"}
        blob = json.dumps(values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def judge_config(self, seed):
        j = self.values["judge"]
        return SyntheticJudgeConfig(
            n_candidates=int(j["n_candidates"]), tau=float(j["tau"]),
            delta_star=float(j["delta_star"]), noise_sd=float(j["noise_sd"]),
            abs_noise_sd=float(j["abs_noise_sd"]), n_classes=int(j["n_classes"]), seed=int(seed))

    def expert_form(self):
        e = self.values["expert"]
        return ExpertForm(e["family"], float(e["alpha"]), float(e["beta"]), float(e["var"]))

    def policy(self, name, seed):
        kind, eps = name, float(self.values["epsilon"])
        if name.startswith("power"):
            kind = "power"
            if ":" in name:
                eps = float(name.split(":", 1)[1])
        return SelectionPolicy(kind, eps, int(seed), int(self.values["batch_size"]))

    def meta(self, command, **extra):
        return {"command": command, "config_hash": self.hash, **extra}

    def run_dir(self, command):
        return Path(self.values["output_dir"]) / command / self.hash


# -- shared helpers -----------------------------------------------------------


@dataclass
class ContextData:
    """Everything needed to process one context."""

    context_id: str
    n_candidates: int
    comparisons: list
    absolutes: list = field(default_factory=list)
    truth: np.ndarray | None = None
    seed: int = 0


def load_contexts(cfg: ExperimentConfig, seed):
    """Contexts from log files when configured, else from the synthetic judge."""
    v = cfg.values
    if v["comparison_log"]:
        comps = load_comparison_log(v["comparison_log"])
        absolutes = load_absolute_log(v["absolute_log"]) if v["absolute_log"] else {}
        truths = load_truth(v["truth_log"]) if v["truth_log"] else {}
        out = []
        for ctx in sorted(set(comps) | set(absolutes) | set(truths)):
            c_list = comps.get(ctx, [])
            a_list = sorted(absolutes.get(ctx, []), key=lambda a: a.n)
            n = infer_n_candidates(c_list, a_list)
            truth = truths.get(ctx)
            if truth is not None:
                if truth.size < n:
                    raise InvalidInputError(f"context {ctx}: truth has fewer scores than candidates")
                n = truth.size
            out.append(ContextData(ctx, n, c_list, a_list, truth, seed))
        return out
    jcfg = cfg.judge_config(seed)
    out = []
    for k in range(int(v["judge"]["n_contexts"])):
        sc = simulate_context(jcfg, k)
        out.append(ContextData(sc.context_id, sc.n_candidates, sc.comparisons(),
                               sc.absolutes, sc.truth, seed))
    return out


def _absolute_experts(cfg, ctx):
    if not cfg["absolute_experts"] or not ctx.absolutes:
        return None
    if len(ctx.absolutes) != ctx.n_candidates:
        raise InvalidInputError(f"context {ctx.context_id}: absolute experts do not cover all candidates")
    return tuple(moment_match(a) for a in ctx.absolutes)


def debias_comparisons(comparisons):
    """Average both presentation orders where both exist.

    Pairs seen in a single order are kept unchanged.
    """
    table = {}
    for c in comparisons:
        table.setdefault((c.i, c.j), []).append(c)
    out = []
    for c in comparisons:
        rev = table.get((c.j, c.i))
        if rev:
            p = float(debias(c.p, rev[0].p))
            out.append(type(c)(c.context_id, c.i, c.j, p, "ij"))
        else:
            out.append(c)
    return out


def _model(cfg, ctx, comparisons):
    if cfg["debiasing"] == "permutation":
        comparisons = debias_comparisons(comparisons)
    return JointModel(ctx.n_candidates, tuple(comparisons), _absolute_experts(cfg, ctx),
                      cfg.expert_form(), cfg["prior_var"])


def _fit(cfg, model):
    if cfg["debiasing"] == "home_advantage" and model.n_comparisons:
        delta, mu = fit_home_advantage(model)
    else:
        delta, mu = 0.0, map_estimate(model)
    return delta, mu


def _safe_spearman(mu, truth):
    if truth is None or np.ptp(mu) == 0 or np.ptp(truth) == 0:
        return None
    return spearman(mu, truth)


def _map_jobs(fn, items, jobs):
    if jobs and jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _csv_text(meta, header, rows):
    buf = io.StringIO()
    buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _meta_line(meta):
    return json.dumps({"meta": meta}, sort_keys=True) + "\n"


def _json_text(meta, payload):
    return json.dumps({"meta": meta, **payload}, indent=2, sort_keys=True, allow_nan=True) + "\n"


# -- simulate -----------------------------------------------------------------


def run_simulate(cfg: ExperimentConfig):
    """Write comparison, absolute and truth logs for every seed.

    ``budget`` (if set) keeps a seeded random subset of ordered pairs per
    context; otherwise all ``N(N-1)`` comparisons are written.
    """
    out_dir = cfg.run_dir("simulate")
    written = []
    for seed in cfg["seeds"]:
        contexts = load_contexts(cfg.override({"comparison_log": None}), seed)
        budget = cfg["budget"]
        seed_dir = out_dir / f"seed_{seed}"
        meta = cfg.meta("simulate", seed=seed)
        comp_lines, abs_lines, truth_lines = [], [], []
        for k, ctx in enumerate(contexts):
            comps = ctx.comparisons
            if budget is not None and budget < len(comps):
                rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3, k]))
                keep = np.sort(rng.choice(len(comps), size=int(budget), replace=False))
                comps = [comps[i] for i in keep]
            comp_lines += [comparison_line(c) for c in comps]
            abs_lines += [absolute_line(a) for a in ctx.absolutes]
            truth_lines.append(json.dumps({"context": ctx.context_id,
                                           "scores": [float(x) for x in ctx.truth]}))
        written.append(_write(seed_dir / "comparisons.jsonl",
                              _meta_line(meta) + "".join(x + "\n" for x in comp_lines)))
        written.append(_write(seed_dir / "absolute.jsonl",
                              _meta_line(meta) + "".join(x + "\n" for x in abs_lines)))
        written.append(_write(seed_dir / "truth.jsonl",
                              _meta_line(meta) + "".join(x + "\n" for x in truth_lines)))
    return written


# -- rank ---------------------------------------------------------------------


def _rank_one(args):
    cfg_dict, ctx = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    model = _model(cfg, ctx, ctx.comparisons)
    try:
        delta, mu = _fit(cfg, model)
        sigma = laplace(model, mu, delta)
    except Exception as exc:
        exc.args = (f"context {ctx.context_id}: {exc}",) + exc.args[1:]
        raise
    ranks = stats.rankdata(-mu)
    return {
        "context": ctx.context_id,
        "seed": ctx.seed,
        "k": model.n_comparisons,
        "scores": mu.tolist(),
        "ranks": ranks.tolist(),
        "entropy": entropy(sigma),
        "delta": delta,
        "spearman": _safe_spearman(mu, ctx.truth),
    }


def run_rank(cfg: ExperimentConfig, jobs=1):
    out_dir = cfg.run_dir("rank")
    items = []
    for seed in cfg["seeds"]:
        items += [(cfg.to_dict(), ctx) for ctx in load_contexts(cfg, seed)]
    results = _map_jobs(_rank_one, items, jobs)
    results.sort(key=lambda r: (r["seed"], r["context"]))
    meta = cfg.meta("rank")
    rows = []
    for r in results:
        for cand, (score, rank) in enumerate(zip(r["scores"], r["ranks"])):
            rows.append([r["seed"], r["context"], cand, repr(float(score)), rank])
    _write(out_dir / "ranking.csv",
           _csv_text(meta, ["seed", "context", "candidate", "score", "rank"], rows))
    rhos = [r["spearman"] for r in results if r["spearman"] is not None]
    summary = {
        "contexts": [{k: r[k] for k in ("seed", "context", "k", "entropy", "delta", "spearman")}
                     for r in results],
        "mean_spearman": float(np.mean(rhos)) if rhos else None,
        "mean_entropy": float(np.mean([r["entropy"] for r in results])) if results else None,
    }
    _write(out_dir / "summary.json", _json_text(meta, summary))
    return results


# -- select -------------------------------------------------------------------


def _select_one(args):
    cfg_dict, ctx = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    n = ctx.n_candidates
    table = {}
    for c in ctx.comparisons:
        if c.order == "ij":
            table[(c.i, c.j)] = c.p
        else:
            table[(c.j, c.i)] = 1.0 - c.p
    full_model = _model(cfg, ctx, [c for c in ctx.comparisons])
    _, full_mu = _fit(cfg, full_model)
    full_value = _safe_spearman(full_mu, ctx.truth)
    budget = cfg["budget"] if cfg["budget"] is not None else len(table)
    pairs = sorted(table)
    absolute_experts = _absolute_experts(cfg, ctx)
    out = []
    for name in cfg["policies"]:
        policy = cfg.policy(name, ctx.seed)
        traj = run_selection_loop(
            lambda i, j: table[(i, j)], policy, cfg.expert_form(), budget,
            (lambda mu: _safe_spearman(mu, ctx.truth)) if ctx.truth is not None else None,
            n_candidates=n, prior_var=cfg["prior_var"], absolute_experts=absolute_experts,
            debiasing=cfg["debiasing"], context_id=ctx.context_id, pairs=pairs)
        eff = efficiency_at_90(traj, full_value) if full_value is not None else None
        out.append({"policy": policy.name, "context": ctx.context_id, "seed": ctx.seed,
                    "efficiency": eff, "full_value": full_value,
                    "final_spearman": traj.records[-1].spearman,
                    "trajectory": traj.to_jsonl()})
    return out


def summarise_efficiency(results):
    """Mean/std of efficiency per policy, across contexts and across seeds."""
    summary = {}
    for name in sorted({r["policy"] for r in results}):
        rows = [r for r in results if r["policy"] == name]
        effs = [r["efficiency"] for r in rows if r["efficiency"] is not None]
        per_seed = {}
        for r in rows:
            if r["efficiency"] is not None:
                per_seed.setdefault(r["seed"], []).append(r["efficiency"])
        seed_means = [float(np.mean(v)) for _, v in sorted(per_seed.items())]
        finals = [r["final_spearman"] for r in rows if r["final_spearman"] is not None]
        summary[name] = {
            "mean_efficiency": float(np.mean(effs)) if effs else None,
            "std_across_contexts": float(np.std(effs)) if effs else None,
            "std_across_seeds": float(np.std(seed_means)) if seed_means else None,
            "not_reached": len(rows) - len(effs),
            "n": len(rows),
            "mean_final_spearman": float(np.mean(finals)) if finals else None,
        }
    return summary


def run_select(cfg: ExperimentConfig, jobs=1):
    out_dir = cfg.run_dir("select")
    items = []
    for seed in cfg["seeds"]:
        items += [(cfg.to_dict(), ctx) for ctx in load_contexts(cfg, seed)]
    nested = _map_jobs(_select_one, items, jobs)
    results = sorted((r for group in nested for r in group),
                     key=lambda r: (r["policy"], r["seed"], r["context"]))
    meta = cfg.meta("select")
    for name in sorted({r["policy"] for r in results}):
        text = _meta_line(meta) + "".join(r["trajectory"] for r in results if r["policy"] == name)
        _write(out_dir / "trajectories" / f"{name}.jsonl", text)
    summary = summarise_efficiency(results)
    rows = [[name, s["mean_efficiency"], s["std_across_contexts"], s["std_across_seeds"],
             s["not_reached"], s["n"], s["mean_final_spearman"]] for name, s in summary.items()]
    _write(out_dir / "summary.csv", _csv_text(
        meta, ["policy", "mean_efficiency", "std_across_contexts", "std_across_seeds",
               "not_reached", "n", "mean_final_spearman"], rows))
    per_context = [[r["policy"], r["seed"], r["context"], r["efficiency"], r["full_value"],
                    r["final_spearman"]] for r in results]
    _write(out_dir / "efficiency.csv", _csv_text(
        meta, ["policy", "seed", "context", "efficiency", "full_value", "final_spearman"],
        per_context))
    _write(out_dir / "summary.json", _json_text(meta, {"policies": summary}))
    for r in results:
        r.pop("trajectory")
    return summary, results


# -- calibrate ----------------------------------------------------------------


def _calibration_rows(args):
    cfg_dict, ctx = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    if ctx.truth is None:
        raise InvalidInputError(f"context {ctx.context_id}: calibration needs truth scores")
    model = _model(cfg, ctx, ctx.comparisons)
    delta, mu = _fit(cfg, model)
    sigma = laplace(model, mu, delta)
    I, J, P, _ = model.arrays()
    truth = ctx.truth
    correct = ((P > 0.5) == (truth[I] > truth[J])).astype(float)
    reorder = reorder_probability(mu, sigma, I, J)
    return {"context": ctx.context_id, "seed": ctx.seed, "p": P, "correct": correct,
            "reorder": np.atleast_1d(reorder), "mu": mu}


def _annealed_ranking_equal(cfg, ctx, mu_raw, T):
    comps = [type(c)(c.context_id, c.i, c.j, float(anneal(c.p, T)), c.order)
             for c in ctx.comparisons]
    model = _model(cfg, ctx, comps)
    _, mu = _fit(cfg, model)
    return bool(np.array_equal(np.argsort(-mu_raw, kind="stable"), np.argsort(-mu, kind="stable")))


def run_calibrate(cfg: ExperimentConfig, jobs=1):
    out_dir = cfg.run_dir("calibrate")
    contexts = []
    for seed in cfg["seeds"]:
        contexts += load_contexts(cfg, seed)
    parts = _map_jobs(_calibration_rows, [(cfg.to_dict(), c) for c in contexts], jobs)
    p = np.concatenate([x["p"] for x in parts])
    correct = np.concatenate([x["correct"] for x in parts])
    reorder = np.concatenate([x["reorder"] for x in parts])
    n_bins = int(cfg["n_bins"])
    before, after = calibration_report(p, correct, n_bins)
    T = before.optimal_temperature
    meta = cfg.meta("calibrate")
    for tag, report in (("before", before), ("after", after)):
        rows = [[b.lo, b.hi, b.mean_confidence, b.accuracy, b.count] for b in report.bins]
        _write(out_dir / f"reliability_{tag}.csv",
               _csv_text(meta, ["bin_lo", "bin_hi", "confidence", "accuracy", "count"], rows))
    conf_curve = rejection_curve(1.0 - confidence(p), correct)
    reo_curve = rejection_curve(reorder, correct)
    rows = [[f, a, b] for (f, a), (_, b) in zip(conf_curve, reo_curve)]
    _write(out_dir / "rejection.csv", _csv_text(
        meta, ["fraction_rejected", "accuracy_by_confidence", "accuracy_by_reorder"], rows))
    unchanged = {ctx.context_id: _annealed_ranking_equal(cfg, ctx, part["mu"], T)
                 for ctx, part in zip(contexts, parts)}
    summary = {
        "ece_before": before.ece,
        "ece_after": after.ece,
        "optimal_temperature": T,
        "n_comparisons": int(p.size),
        "annealed_ranking_unchanged": unchanged,
    }
    _write(out_dir / "summary.json", _json_text(meta, summary))
    return summary


# -- report -------------------------------------------------------------------


def run_report(output_dir):
    """Collect every ``summary.json`` under ``output_dir`` into one table."""
    lines = []
    for path in sorted(Path(output_dir).glob("*/*/summary.json")):
        data = json.loads(path.read_text(encoding="utf-8"))
        command = data.get("meta", {}).get("command", path.parent.parent.name)
        head = f"{command} {path.parent.name}"
        if command == "select":
            for name, s in data["policies"].items():
                eff = s["mean_efficiency"]
                lines.append(f"{head}  {name:<16} efficiency "
                             f"{'n/a' if eff is None else f'{eff:.1f}'}"
                             f" +/- {s['std_across_contexts'] or 0:.1f} (contexts)"
                             f" +/- {s['std_across_seeds'] or 0:.1f} (seeds)"
                             f"  not reached {s['not_reached']}/{s['n']}")
        elif command == "rank":
            ms = data.get("mean_spearman")
            lines.append(f"{head}  mean spearman {'n/a' if ms is None else f'{ms:.4f}'}"
                         f"  mean entropy {data.get('mean_entropy')}")
        elif command == "calibrate":
            lines.append(f"{head}  ece {data['ece_before']:.4f} -> {data['ece_after']:.4f}"
                         f"  T={data['optimal_temperature']:.3f}")
    return "\n".join(lines)


def nan_to_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x
