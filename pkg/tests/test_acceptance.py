"""Acceptance criteria, each at its stated size and tolerance.

Run with ``pytest tests/test_acceptance.py -v``; a summary with one
PASS/FAIL line per criterion is printed at the end of the session.
"""

import itertools
import re
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from clsm import cli, evaluation
from clsm.core import BehaviorData, Graph, Hyperparams
from clsm.evaluation import (run_attribute_prediction_cv, run_link_prediction_cv,
                             run_scaling_benchmark, scaling_dataset, summarize, topic_recovery_mae)
from clsm.generative import SimConfig, generate_dataset
from clsm.inference import FitConfig, fit
from conftest import record_criterion
from enumeration_oracle import log_evidence

pytestmark = pytest.mark.slow


def test_criterion_1_bound_never_decreases():
    t0 = time.perf_counter()
    worst, sweeps = np.inf, 0
    for i in range(20):
        K = (2, 5)[i % 2]
        graph, behaviors = scaling_dataset(100, 8, 50, num_topics=K, seed=100 + i)
        for mode in ("variational_rho", "direct_with_smoothing"):
            _, report, _ = fit(graph, behaviors, FitConfig(K, seed=i, omega_mode=mode))
            steps = np.diff(report.elbo_trace)
            worst = min(worst, steps.min())
            sweeps += steps.size
    elapsed = time.perf_counter() - t0
    ok = worst >= -1e-9 and elapsed < 120
    record_criterion(1, ok, f"{sweeps} sweeps, min change {worst:.3g}, {elapsed:.0f}s")
    assert worst >= -1e-9
    assert elapsed < 120


def _oracle_instances(rng, count, K):
    out = []
    while len(out) < count:
        N = int(rng.integers(2, 5))
        V = int(rng.integers(1, 4))
        pairs = list(itertools.combinations(range(N), 2))
        edges = [p for p in pairs if rng.random() < 0.5]
        lists = [[int(rng.integers(V))] if rng.random() < 0.7 else [] for _ in range(N)]
        out.append((N, edges, lists, K, V))
    return out


def test_criterion_2_bound_below_exact_evidence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_gap, tight, n_strict = np.inf, 0.0, 0
    failures = []
    for N, edges, lists, K, V in _oracle_instances(rng, 60, 2):
        g = Graph(N, edges)
        b = BehaviorData.from_token_lists(N, V, lists)
        cfg = FitConfig(K, seed=0, max_iterations=5000)
        _, report, _ = fit(g, b, cfg)
        h = cfg.hyperparams(V)
        exact = log_evidence(N, edges, lists, h.alpha, h.eta, h.kappa, h.epsilon)
        gap = exact - report.elbo_trace[-1]
        worst_gap = min(worst_gap, gap)
        n_strict += 1
        if not (report.converged and report.elbo_trace[-1] <= exact):
            failures.append((N, edges, lists, gap))
    # with one topic the family holds the exact posterior, so the bound is
    # an equality and only its closeness is meaningful in floating point
    for N, edges, lists, K, V in _oracle_instances(rng, 20, 1):
        g = Graph(N, edges)
        b = BehaviorData.from_token_lists(N, V, lists)
        cfg = FitConfig(1, seed=0)
        _, report, _ = fit(g, b, cfg)
        h = cfg.hyperparams(V)
        exact = log_evidence(N, edges, lists, h.alpha, h.eta, h.kappa, h.epsilon)
        tight = max(tight, abs(exact - report.elbo_trace[-1]))
    elapsed = time.perf_counter() - t0
    ok = not failures and tight <= 1e-12 and elapsed < 60
    record_criterion(2, ok, f"{n_strict} two-topic instances, smallest gap {worst_gap:.3g}; "
                            f"one-topic max |gap| {tight:.2g}; {elapsed:.0f}s")
    assert not failures, failures[:3]
    assert tight <= 1e-12
    assert elapsed < 60


def test_criterion_3_recovery():
    t0 = time.perf_counter()
    maes = []
    for seed in range(10):
        hyper = Hyperparams.symmetric(3, 100, alpha_precision=1.0, kappa_value=0.1, epsilon=1e-5)
        graph, behaviors, truth = generate_dataset(
            SimConfig(500, hyper, selections_mean=20, seed=seed, beta=0.3))
        model, _, _ = fit(graph, behaviors, FitConfig(3, seed=seed))
        maes.append(topic_recovery_mae(truth.theta_true, model.theta_hat))
    elapsed = time.perf_counter() - t0
    good = sum(m <= 0.15 for m in maes)
    ok = good >= 9 and elapsed < 600
    record_criterion(3, ok, f"{good}/10 seeds with MAE <= 0.15, worst {max(maes):.3f}, "
                            f"{elapsed:.0f}s")
    assert good >= 9
    assert elapsed < 600


def test_criterion_4_overlap_robustness():
    t0 = time.perf_counter()
    V, width = 1500, 150
    gaps = (2 * width, 3 * width // 2, width, width // 2, 0)  # disjoint .. coincident
    hyper = Hyperparams(alpha=[0.3, 0.3], eta=(1, 1), kappa=np.full(V, 0.1), epsilon=1e-5)
    maes = []
    for gap in gaps:
        graph, behaviors, truth = generate_dataset(SimConfig(
            800, hyper, selections_mean=20, seed=0, beta=0.1, topics="overlap",
            peak_gap=gap, peak_width=width))
        model, _, _ = fit(graph, behaviors, FitConfig(2, alpha_precision=0.6))
        maes.append(topic_recovery_mae(truth.theta_true, model.theta_hat))
    elapsed = time.perf_counter() - t0
    ratio = max(maes) / min(maes)
    ok = ratio <= 2.0 and elapsed < 900
    record_criterion(4, ok, "MAE by gap " + ", ".join(f"{g}:{m:.3f}" for g, m in zip(gaps, maes))
                     + f"; max/min {ratio:.2f}, {elapsed:.0f}s")
    assert ratio <= 2.0
    assert elapsed < 900


def _null_dataset(seed=0, N=500, V=100, avg_degree=50, selections=20):
    rng = np.random.default_rng(seed)
    p = avg_degree / (N - 1)
    iu = np.triu_indices(N, 1)
    keep = rng.random(iu[0].size) < p
    graph = Graph(N, np.stack([iu[0][keep], iu[1][keep]], axis=1))
    lists = [rng.integers(0, V, rng.poisson(selections)) for _ in range(N)]
    return graph, BehaviorData.from_token_lists(N, V, lists)


def test_criterion_5_predictive_lift():
    t0 = time.perf_counter()
    hyper = Hyperparams.symmetric(3, 100, alpha_precision=1.0, kappa_value=0.1, epsilon=1e-5)
    graph, behaviors, _ = generate_dataset(SimConfig(500, hyper, selections_mean=20, seed=0,
                                                     beta=0.3))
    cfg = FitConfig(3)
    links = summarize(run_link_prediction_cv(graph, behaviors, cfg, k_grid=[3])[0])
    attrs = summarize(run_attribute_prediction_cv(graph, behaviors, cfg, k_grid=[3])[0])
    ng, nb = _null_dataset()
    null_links = summarize(run_link_prediction_cv(ng, nb, cfg, k_grid=[3])[0])
    null_attrs = summarize(run_attribute_prediction_cv(ng, nb, cfg, k_grid=[3])[0])
    elapsed = time.perf_counter() - t0
    la, aa = links[("links", 3)]["auc"], attrs[("attrs", 3)]["auc"]
    nla, naa = null_links[("links", 3)]["auc"], null_attrs[("attrs", 3)]["auc"]
    checks = {"link AUC >= 0.80": la >= 0.80, "attribute AUC >= 0.80": aa >= 0.80,
              "null link AUC in [0.45, 0.55]": 0.45 <= nla <= 0.55,
              "null attribute AUC in [0.45, 0.55]": 0.45 <= naa <= 0.55,
              "under 20 min": elapsed < 1200}
    failed = [name for name, ok in checks.items() if not ok]
    record_criterion(5, not failed, f"link {la:.3f}, attrs {aa:.3f}, null link {nla:.3f}, "
                                    f"null attrs {naa:.3f}, {elapsed:.0f}s"
                     + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed, failed


def test_criterion_6_linear_scaling():
    t0 = time.perf_counter()
    rows = run_scaling_benchmark([1000, 2000, 4000], avg_degree=10, vocab_size=200)
    elapsed = time.perf_counter() - t0
    ratios = [t1 / t0_ for (_, t0_), (_, t1) in zip(rows, rows[1:])]
    ok = max(ratios) <= 2.6 and elapsed < 600
    record_criterion(6, ok, "per-sweep seconds " + ", ".join(f"{n}:{t:.4f}" for n, t in rows)
                     + "; ratios " + ", ".join(f"{r:.2f}" for r in ratios) + f"; {elapsed:.0f}s")
    assert max(ratios) <= 2.6
    assert elapsed < 600


def test_criterion_7_protocol_constants():
    t0 = time.perf_counter()
    args = cli.build_parser().parse_args(["evaluate", "--edges", "e", "--behaviors", "b",
                                          "--task", "links", "--out-csv", "o"])
    grid = cli.parse_k_grid(args.k_grid)
    cfg = cli._fit_config(args, num_topics=grid[0])
    hyper = cfg.hyperparams(10)
    found = dict(folds=args.folds, k_grid=grid, rel_tol=cfg.rel_tol,
                 alpha_precision=float(hyper.alpha.sum()))
    expected = dict(folds=5, k_grid=(5, 10, 15, 20, 25), rel_tol=1e-8, alpha_precision=1.0)
    elapsed = time.perf_counter() - t0
    ok = found == expected and evaluation.DEFAULT_FOLDS == 5 and elapsed < 1
    record_criterion(7, ok, ", ".join(f"{k}={v}" for k, v in found.items()))
    assert found == expected
    assert elapsed < 1


def test_criterion_8_property_suites():
    t0 = time.perf_counter()
    suite = Path(__file__).with_name("test_properties.py")
    proc = subprocess.run([sys.executable, "-m", "pytest", str(suite), "-q", "-p",
                           "no:cacheprovider", "--hypothesis-show-statistics"],
                          capture_output=True, text=True, cwd=suite.parent.parent)
    elapsed = time.perf_counter() - t0
    counts = [int(n) for n in re.findall(r"(\d+) passing examples", proc.stdout)]
    tests = len(re.findall(r"test_properties\.py::\w+:", proc.stdout))
    ok = proc.returncode == 0 and tests > 0 and len(counts) == tests and min(counts) >= 1000 \
        and elapsed < 300
    record_criterion(8, ok, f"{tests} suites, fewest passing cases {min(counts, default=0)}, "
                            f"{elapsed:.0f}s")
    assert proc.returncode == 0, proc.stdout[-2000:]
    assert len(counts) == tests > 0 and min(counts) >= 1000
    assert elapsed < 300
