"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` (the lines are repeated in the
terminal summary) or ``python tests/test_acceptance.py``.
"""

import json
import math
import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from oracles import auroc_pairs, grid_moments, grid_mode, random_spd, softbt_log  # noqa: E402
from poerank.experiment import ExperimentConfig, run_rank, run_select, run_simulate  # noqa: E402
from poerank.experts import Comparison, ExpertForm, anneal, debias, grad_pair, hess_pair  # noqa: E402
from poerank.experts import log_density_pair  # noqa: E402
from poerank.judges import SyntheticJudgeConfig, simulate_context  # noqa: E402
from poerank.metrics import auroc, ece, ece_from_bins, efficiency_at_90, fit_temperature, spearman  # noqa: E402
from poerank.posterior import JointModel, fit_home_advantage, laplace, map_estimate  # noqa: E402
from poerank.selection import (  # noqa: E402
    CandidatePool,
    SelectionPolicy,
    prior_entropy,
    reorder_probability,
    run_selection_loop,
    score_pairs,
)

RESULTS = {}


def verdict(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# -- 1 ------------------------------------------------------------------------


def test_c01_laplace_matches_grid_posterior():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    mu_err = diag_err = off_err = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 4))
        k = int(rng.integers(1, 5))
        comps = []
        for _ in range(k):
            i, j = rng.choice(n, 2, replace=False)
            comps.append((int(i), int(j), float(rng.uniform(0.3, 0.7))))
        m = JointModel(n, tuple(Comparison("c", i, j, p) for i, j, p in comps))
        mu = map_estimate(m, tol=1e-10)
        sigma = laplace(m, mu)
        mode = grid_mode(comps, n)
        _, cov = grid_moments(comps, n)
        mu_err = max(mu_err, float(np.max(np.abs(mu - mode))))
        for a in range(n):
            for b in range(n):
                if abs(cov[a, b]) < 1e-9 and abs(sigma[a, b]) < 1e-9:
                    continue  # structurally zero in both
                rel = abs(sigma[a, b] - cov[a, b]) / abs(cov[a, b])
                if a == b:
                    diag_err = max(diag_err, rel)
                else:
                    off_err = max(off_err, rel)
    elapsed = time.perf_counter() - start
    ok = mu_err <= 0.05 and diag_err <= 0.10 and off_err <= 0.10 and elapsed < 60
    verdict(1, ok, f"max |mu - grid mode| {mu_err:.4f} (<= 0.05); max rel err diag {diag_err:.3f}, "
                   f"off-diag {off_err:.3f} (<= 0.10); {elapsed:.1f}s")


# -- 2 ------------------------------------------------------------------------


def _fd5(f, x, h=1e-3):
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)


def test_c02_derivatives_match_finite_differences():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        kind = rng.integers(4)
        delta = float(rng.uniform(-1, 1))
        if kind == 0:
            form = ExpertForm.soft_bt(delta)
        elif kind == 1:
            form = ExpertForm.gen_beta(float(rng.uniform(0, 3)), float(rng.uniform(0, 3)), delta)
        elif kind == 2:
            form = ExpertForm.phi_gaussian(float(rng.uniform(0.1, 2)), delta)
        else:
            form = ExpertForm.linear_gaussian(float(rng.uniform(0.1, 2)), delta)
        d = float(rng.uniform(-4, 4))
        p = float(rng.uniform(0.02, 0.98))
        for analytic, fd in ((grad_pair(form, d, p), _fd5(lambda x: log_density_pair(form, x, p), d)),
                             (hess_pair(form, d, p), _fd5(lambda x: grad_pair(form, x, p), d))):
            worst = max(worst, abs(analytic - fd) / max(abs(fd), 1e-12))
    verdict(2, worst <= 1e-5, f"max relative error {worst:.2e} over 1000 draws (<= 1e-5)")


# -- 3 ------------------------------------------------------------------------


def _pair_order(policy, mu, sigma):
    n = mu.size
    I, J = np.nonzero(~np.eye(n, dtype=bool))
    scores = score_pairs(policy, mu, sigma, I, J)
    return np.lexsort((J, I, -scores))


def test_c03_special_cases():
    rng = np.random.default_rng(3)
    d = np.linspace(-6, 6, 200)
    spread = 0.0
    for p in rng.uniform(0.01, 0.99, 50):
        diff = log_density_pair(ExpertForm.gen_beta(0.0, 0.0), d, p) - np.array([softbt_log(x, p) for x in d])
        spread = max(spread, float(np.ptp(diff)))
    same_var = same_reorder = True
    for _ in range(100):
        n = int(rng.integers(3, 9))
        mu = rng.normal(size=n)
        sigma = random_spd(rng, n) / n
        same_var &= np.array_equal(_pair_order(SelectionPolicy("power", 0.0), mu, sigma),
                                   _pair_order(SelectionPolicy("variance"), mu, sigma))
        same_reorder &= np.array_equal(_pair_order(SelectionPolicy("power", 2.0), mu, sigma),
                                       _pair_order(SelectionPolicy("reorder"), mu, sigma))
    ok = spread <= 1e-9 and same_var and same_reorder
    verdict(3, ok, f"genbeta(0,0) offset spread {spread:.1e}; power(0)==variance {same_var}; "
                   f"power(2)==reorder {same_reorder}")


# -- 4 ------------------------------------------------------------------------


def test_c04_closed_form_reordering():
    rng = np.random.default_rng(4)
    agree = 0
    for _ in range(100):
        n = int(rng.integers(3, 10))
        mu = rng.normal(size=n)
        sigma = random_spd(rng, n) / n
        I, J = np.triu_indices(n, 1)
        probs = reorder_probability(mu, sigma, I, J)
        v = sigma[I, I] - 2 * sigma[I, J] + sigma[J, J]
        ratio = v / (mu[I] - mu[J]) ** 2
        agree += int(np.argmax(probs) == np.argmax(ratio))
    worst_z = 0.0
    for _ in range(5):
        mu = rng.normal(size=3)
        sigma = random_spd(rng, 3) / 3
        x = rng.multivariate_normal(mu, sigma, size=10**6)
        lo, hi = (0, 1) if mu[0] < mu[1] else (1, 0)
        est = float(np.mean(x[:, lo] > x[:, hi]))
        q = reorder_probability(mu, sigma, 0, 1)
        se = math.sqrt(q * (1 - q) / 10**6)
        worst_z = max(worst_z, abs(q - est) / se)
    ok = agree == 100 and worst_z <= 3
    verdict(4, ok, f"argmax agreement {agree}/100; worst Monte Carlo deviation {worst_z:.2f} SE (<= 3)")


# -- 5 ------------------------------------------------------------------------


def test_c05_temperature_invariance():
    worst = 0.0
    ranks_equal = True
    for seed in range(10):
        cfg = SyntheticJudgeConfig(n_candidates=10, seed=seed)
        ctx = simulate_context(cfg, 0)
        comps = ctx.comparisons()
        raw = map_estimate(JointModel(10, tuple(comps), prior_var=None), tol=1e-10)
        raw -= raw.mean()
        for T in (0.5, 2.0, 4.0):
            annealed = tuple(Comparison(c.context_id, c.i, c.j, float(anneal(c.p, T))) for c in comps)
            mu = map_estimate(JointModel(10, annealed, prior_var=None), tol=1e-10)
            mu -= mu.mean()
            worst = max(worst, float(np.max(np.abs(mu - raw / T))))
            ranks_equal &= np.array_equal(np.argsort(mu, kind="stable"), np.argsort(raw, kind="stable"))
    rng = np.random.default_rng(5)
    p = rng.uniform(0.001, 0.999, 5000)
    correct = (rng.uniform(size=p.size) < 0.8).astype(float)
    T = fit_temperature(p, correct)
    same_side = bool(np.array_equal(np.sign(anneal(p, T) - 0.5), np.sign(p - 0.5)))
    ok = worst <= 1e-4 and ranks_equal and same_side
    verdict(5, ok, f"max |mu_T - mu/T| after centring {worst:.1e} (<= 1e-4); rankings identical "
                   f"{ranks_equal}; directions kept at T={T:.3f} {same_side}")


# -- 6 ------------------------------------------------------------------------


def test_c06_structural_count(tmp_path):
    pool = CandidatePool(16)
    ctx = simulate_context(SyntheticJudgeConfig(n_candidates=16, noise_sd=0.5), 0)
    traj = run_selection_loop(ctx.compare, SelectionPolicy("reorder", batch_size=7), None, 240,
                              n_candidates=16)
    pairs = [q for r in traj.records for q in r.pairs]
    expected_ks = list(range(0, 240, 7)) + [240]
    perm = run_selection_loop(ctx.compare, SelectionPolicy("variance"), None, 240, n_candidates=16,
                              debiasing="permutation")
    perm_pairs = [q for r in perm.records for q in r.pairs]
    cfg = ExperimentConfig.from_dict({"judge": {"n_candidates": 16, "n_contexts": 1},
                                      "output_dir": str(tmp_path)})
    lines = run_simulate(cfg)[0].read_text().splitlines()
    n_records = sum(1 for x in lines if "meta" not in json.loads(x))
    ok = (len(pool) == 240 and len(pairs) == 240 == len(set(pairs)) and traj.ks == expected_ks
          and len(perm_pairs) == 240 == len(set(perm_pairs)) and perm.ks[-1] == 240
          and n_records == 240)
    verdict(6, ok, f"pool {len(pool)}, acquired {len(set(pairs))} distinct, permutation mode "
                   f"{len(set(perm_pairs))}, simulated log {n_records} records (all == 240)")


# -- 7 ------------------------------------------------------------------------


SUITE = SyntheticJudgeConfig(n_candidates=16, tau=1.0, noise_sd=0.5)
POLICIES_7 = ("reorder", "variance", "min_uncertainty")


def _efficiencies(seed, index, policies):
    cfg = SyntheticJudgeConfig(SUITE.n_candidates, SUITE.tau, SUITE.delta_star, SUITE.noise_sd,
                               seed=seed)
    ctx = simulate_context(cfg, index)
    full = map_estimate(JointModel(16, tuple(ctx.comparisons())))
    full_value = spearman(full, ctx.truth)
    threshold = 0.9 * full_value
    out = {}
    for kind in policies:
        # the trajectory up to the first crossing is all efficiency needs
        traj = run_selection_loop(
            ctx.compare, SelectionPolicy(kind, seed=seed), ExpertForm.soft_bt(), 240,
            lambda mu: spearman(mu, ctx.truth), n_candidates=16,
            stop_when=lambda r: r.spearman is not None and r.spearman >= threshold)
        out[kind] = efficiency_at_90(traj, full_value)
    return out


def test_c07_efficiency_ordering():
    start = time.perf_counter()
    effs = {k: [] for k in POLICIES_7}
    for seed in range(20):
        for index in range(100):
            for kind, e in _efficiencies(seed, index, POLICIES_7).items():
                effs[kind].append(e)
    elapsed = time.perf_counter() - start
    mean = {k: float(np.mean(v)) for k, v in effs.items()}
    reduction = 1.0 - mean["reorder"] / mean["min_uncertainty"]
    ok = (mean["reorder"] <= mean["variance"] <= mean["min_uncertainty"] and reduction >= 0.40
          and elapsed < 600)
    verdict(7, ok, f"mean efficiency reorder {mean['reorder']:.1f}, variance {mean['variance']:.1f}, "
                   f"min_uncertainty {mean['min_uncertainty']:.1f}; reduction {reduction:.1%} "
                   f"(needs ordering and >= 40%); {elapsed:.0f}s")


# -- 8 ------------------------------------------------------------------------


def test_c08_large_batch_checkpoint():
    n = 200
    budget = round(0.01 * n * (n - 1))
    b = round(0.1 * budget)
    scores = {k: [] for k in ("random", "min_uncertainty", "reorder")}
    for seed in range(10):
        ctx = simulate_context(SyntheticJudgeConfig(n_candidates=n, noise_sd=0.5, seed=seed), 0)
        for kind in scores:
            traj = run_selection_loop(ctx.compare, SelectionPolicy(kind, seed=seed, batch_size=b),
                                      ExpertForm.soft_bt(), budget, n_candidates=n)
            scores[kind].append(spearman(traj.final_state.mu, ctx.truth))
    mean = {k: float(np.mean(v)) for k, v in scores.items()}
    ok = mean["min_uncertainty"] < mean["random"] and mean["reorder"] > mean["random"]
    verdict(8, ok, f"Spearman at k={budget} (b={b}): random {mean['random']:.4f}, min_uncertainty "
                   f"{mean['min_uncertainty']:.4f}, reorder {mean['reorder']:.4f} "
                   f"(needs min_uncertainty < random < reorder)")


# -- 9 ------------------------------------------------------------------------


def test_c09_debiasing():
    worst = 0.0
    deltas = []
    for seed in range(10):
        cfg = SyntheticJudgeConfig(n_candidates=16, delta_star=0.5, noise_sd=0.5, seed=seed)
        ctx = simulate_context(cfg, 0)
        P = ctx.p_table
        I, J = np.nonzero(~np.eye(16, dtype=bool))
        tilde = debias(P[I, J], P[J, I])
        tilde_rev = debias(P[J, I], P[I, J])
        worst = max(worst, float(np.max(np.abs(tilde + tilde_rev - 1.0))))
        traj = run_selection_loop(ctx.compare, SelectionPolicy("random", seed=seed), None, 200,
                                  n_candidates=16, debiasing="home_advantage")
        deltas.append(traj.delta)
        # refit from scratch on the same comparisons as a cross-check
        pairs = [q for r in traj.records for q in r.pairs]
        m = JointModel(16, tuple(Comparison("c", i, j, float(P[i, j])) for i, j in pairs))
        assert abs(fit_home_advantage(m)[0] - traj.delta) < 1e-6
    mean_delta = float(np.mean(deltas))
    ok = worst <= 1e-15 and abs(mean_delta - 0.5) <= 0.1
    verdict(9, ok, f"max |p~ij + p~ji - 1| {worst:.1e}; mean fitted delta {mean_delta:.3f} at K=200 "
                   f"over 10 seeds (0.5 +/- 0.1)")


# -- 10 -----------------------------------------------------------------------


def test_c10_convergence_equality(tmp_path):
    sim = ExperimentConfig.from_dict({"judge": {"n_candidates": 16, "n_contexts": 5, "noise_sd": 0.5},
                                      "output_dir": str(tmp_path)})
    log_dir = run_simulate(sim)[0].parent
    cfg = sim.override({"comparison_log": str(log_dir / "comparisons.jsonl"),
                        "truth_log": str(log_dir / "truth.jsonl"),
                        "policies": ["random", "min_uncertainty", "variance", "reorder", "power:0.5"]})
    _, results = run_select(cfg)
    spread = 0.0
    for ctx in {r["context"] for r in results}:
        finals = [r["final_spearman"] for r in results if r["context"] == ctx]
        spread = max(spread, max(finals) - min(finals))
    verdict(10, spread <= 1e-9, f"max spread of final Spearman across 5 policies {spread:.1e} "
                                f"over 5 contexts (<= 1e-9)")


# -- 11 -----------------------------------------------------------------------


def test_c11_noiseless_recovery(tmp_path):
    cfg = ExperimentConfig.from_dict({"judge": {"n_candidates": 16, "n_contexts": 100, "noise_sd": 0.0},
                                      "output_dir": str(tmp_path)})
    results = run_rank(cfg)
    rhos = [r["spearman"] for r in results]
    h0 = prior_entropy(16)
    below = all(r["entropy"] < h0 for r in results)
    ok = all(r == 1.0 for r in rhos) and below and len(results) == 100
    verdict(11, ok, f"Spearman 1.0 on {sum(r == 1.0 for r in rhos)}/100 contexts; entropy below prior "
                    f"({h0:.2f}) on all: {below}")


# -- 12 -----------------------------------------------------------------------


def test_c12_metric_oracles():
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(5, 80))
        scores = np.round(rng.normal(size=n), 1)
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        worst = max(worst, abs(auroc(scores, labels) - auroc_pairs(scores, labels)))
    rho = spearman([1, 2, 3, 4], [1, 3, 2, 4])
    exact = True
    for _ in range(50):
        conf = rng.uniform(0.5, 1.0, int(rng.integers(1, 300)))
        correct = (rng.uniform(size=conf.size) < conf).astype(float)
        report = ece(conf, correct, int(rng.integers(1, 15)))
        exact &= ece_from_bins(report.bins) == report.ece
    ok = worst <= 1e-12 and abs(rho - 0.8) <= 1e-12 and exact
    verdict(12, ok, f"auroc vs brute force {worst:.1e} (<= 1e-12); spearman example {rho:.12f}; "
                    f"ece rebuilt from bins exactly {exact}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
