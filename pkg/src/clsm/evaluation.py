"""Held-out evaluation: node-level cross-validation for link and attribute
prediction, ranking metrics, and topic-recovery error."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from . import inference
from .core import BehaviorData, Graph, Hyperparams
from .generative import SimConfig, generate_dataset
from .inference import FitConfig, fold_in_theta_from_attributes, fold_in_theta_from_links

log = logging.getLogger(__name__)

DEFAULT_FOLDS = 5
DEFAULT_K_GRID = (5, 10, 15, 20, 25)
DEFAULT_REPEATS = 10
MODEL_NAME = "CLSM"


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class FoldSplit:
    fold_assignments: np.ndarray

    @property
    def num_folds(self) -> int:
        return int(self.fold_assignments.max()) + 1

    def test_nodes(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.fold_assignments == f)

    def train_nodes(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.fold_assignments != f)


@dataclass
class RankedPrediction:
    candidates: np.ndarray
    scores: np.ndarray
    positives: frozenset

    def __post_init__(self):
        self.candidates = np.asarray(self.candidates)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        order = np.argsort(-self.scores, kind="stable")
        self.candidates, self.scores = self.candidates[order], self.scores[order]
        self.positives = frozenset(self.positives)
        if not self.positives <= set(self.candidates.tolist()):
            raise ValueError("positives must be a subset of the candidates")


def kfold_split(num_nodes: int, k: int = DEFAULT_FOLDS, seed: int = 0) -> FoldSplit:
    """Random node partition into k folds whose sizes differ by at most one."""
    if num_nodes < k:
        raise ValueError(f"cannot split {num_nodes} nodes into {k} folds")
    perm = np.random.default_rng(seed).permutation(num_nodes)
    assign = np.empty(num_nodes, dtype=np.int64)
    assign[perm] = np.arange(num_nodes) % k
    return FoldSplit(assign)


def predict_link_prob(theta_a, theta_b, beta_hat, epsilon: float) -> float:
    same = np.asarray(theta_a) * np.asarray(theta_b)
    return float(same @ np.asarray(beta_hat) + (1.0 - same.sum()) * epsilon)


def predict_link_probs(theta_a, thetas_b, beta_hat, epsilon: float) -> np.ndarray:
    """Vectorised :func:`predict_link_prob` against many partners."""
    same = np.asarray(thetas_b) * np.asarray(theta_a)[None, :]
    return same @ np.asarray(beta_hat) + (1.0 - same.sum(axis=1)) * epsilon


def predict_attribute_dist(theta, omega_hat) -> np.ndarray:
    return np.asarray(theta) @ np.asarray(omega_hat)


def average_rank_score(prediction: RankedPrediction) -> float:
    """Mean 1-based rank of the positives (ties share their mean rank)."""
    if not prediction.positives:
        raise UndefinedMetricError("average rank needs at least one positive")
    ranks = rankdata(-prediction.scores, method="average")
    mask = np.fromiter((c in prediction.positives for c in prediction.candidates.tolist()),
                       dtype=bool, count=len(prediction.candidates))
    return float(ranks[mask].mean())


def _mean_positive_rank(scores: np.ndarray, positive_mask: np.ndarray) -> float:
    return float(rankdata(-scores, method="average")[positive_mask].mean())


def auc(positive_scores, negative_scores) -> float:
    """Probability a positive outscores a negative; ties count one half."""
    pos = np.asarray(positive_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(negative_scores, dtype=np.float64).reshape(-1)
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def topic_recovery_mae(theta_true, theta_hat) -> float:
    """Mean absolute error after the best relabelling of the topics."""
    a = np.asarray(theta_true, dtype=np.float64)
    b = np.asarray(theta_hat, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    N, K = a.shape
    # cost[i, j] = sum_n |a[n, i] - b[n, j]|
    cost = np.abs(a[:, :, None] - b[:, None, :]).sum(axis=0)
    if K <= 8:
        cols = np.arange(K)
        best = min(cost[cols, list(p)].sum() for p in itertools.permutations(range(K)))
    else:
        rows, cols = linear_sum_assignment(cost)
        best = cost[rows, cols].sum()
    return float(best / (N * K))


# ---------------------------------------------------------------------------
# cross-validation harnesses
# ---------------------------------------------------------------------------


def _k_values(k_grid):
    return tuple(DEFAULT_K_GRID if k_grid is None else k_grid)


def _rows(dataset, task, K, fold, repeat, values):
    return [dict(dataset=dataset, task=task, model=MODEL_NAME, K=K, fold=fold,
                 repeat=repeat, metric=name, value=float(v)) for name, v in values.items()]


def _train_view(graph: Graph, behaviors: BehaviorData, train: np.ndarray):
    return graph.subgraph(train), behaviors.subset(train)


def run_link_prediction_cv(graph: Graph, behaviors: BehaviorData, fit_config: FitConfig,
                           folds: int = DEFAULT_FOLDS, repeats: int = 1, k_grid=None,
                           dataset: str = "data", seed: int = 0):
    """Hide every link of the test nodes, infer their memberships from their
    selections, and rank all training nodes as link candidates.

    Returns ``(rows, skipped)``: metric rows (mean per-node AUC and average
    rank for each K/fold/repeat) and the number of test nodes skipped for
    lacking a held-out link or a non-link.
    """
    rows, skipped = [], 0
    for repeat in range(repeats):
        split = kfold_split(graph.num_nodes, folds, seed + repeat)
        for f in range(folds):
            train, test = split.train_nodes(f), split.test_nodes(f)
            g_tr, b_tr = _train_view(graph, behaviors, train)
            local = np.full(graph.num_nodes, -1)
            local[train] = np.arange(len(train))
            for K in _k_values(k_grid):
                cfg = replace(fit_config, num_topics=K, seed=fit_config.seed + 1000 * repeat + f)
                model, _, _ = inference.fit(g_tr, b_tr, cfg)
                aucs, ranks = [], []
                for n in test:
                    nb = local[graph.adjacency(n)]
                    nb = nb[nb >= 0]
                    if nb.size == 0 or nb.size == len(train):
                        skipped += 1
                        continue
                    theta = fold_in_theta_from_attributes(model, behaviors.token_list(n))
                    scores = predict_link_probs(theta, model.theta_hat, model.beta_hat,
                                                model.hyper.epsilon)
                    mask = np.zeros(len(train), dtype=bool)
                    mask[nb] = True
                    aucs.append(auc(scores[mask], scores[~mask]))
                    ranks.append(_mean_positive_rank(scores, mask))
                if aucs:
                    rows += _rows(dataset, "links", K, f, repeat,
                                  {"auc": np.mean(aucs), "avg_rank": np.mean(ranks)})
    if skipped:
        log.warning("link prediction: skipped %d test nodes without held-out links", skipped)
    return rows, skipped


def run_attribute_prediction_cv(graph: Graph, behaviors: BehaviorData, fit_config: FitConfig,
                                folds: int = DEFAULT_FOLDS, repeats: int = 1, k_grid=None,
                                dataset: str = "data", seed: int = 0):
    """Hide every selection of the test nodes, infer their memberships from
    their links to training nodes, and rank the whole vocabulary."""
    V = behaviors.vocab_size
    rows, skipped = [], 0
    for repeat in range(repeats):
        split = kfold_split(graph.num_nodes, folds, seed + repeat)
        for f in range(folds):
            train, test = split.train_nodes(f), split.test_nodes(f)
            g_tr, b_tr = _train_view(graph, behaviors, train)
            local = np.full(graph.num_nodes, -1)
            local[train] = np.arange(len(train))
            for K in _k_values(k_grid):
                cfg = replace(fit_config, num_topics=K, seed=fit_config.seed + 1000 * repeat + f)
                model, _, _ = inference.fit(g_tr, b_tr, cfg)
                aucs, ranks = [], []
                for n in test:
                    s = slice(behaviors.indptr[n], behaviors.indptr[n + 1])
                    true_tokens = behaviors.tokens[s]
                    if true_tokens.size == 0 or true_tokens.size == V:
                        skipped += 1
                        continue
                    nb = local[graph.adjacency(n)]
                    theta = fold_in_theta_from_links(model, nb[nb >= 0])
                    scores = predict_attribute_dist(theta, model.omega_hat)
                    mask = np.zeros(V, dtype=bool)
                    mask[true_tokens] = True
                    aucs.append(auc(scores[mask], scores[~mask]))
                    ranks.append(_mean_positive_rank(scores, mask))
                if aucs:
                    rows += _rows(dataset, "attrs", K, f, repeat,
                                  {"auc": np.mean(aucs), "avg_rank": np.mean(ranks)})
    if skipped:
        log.warning("attribute prediction: skipped %d test nodes without selections", skipped)
    return rows, skipped


def summarize(rows):
    """Mean of each metric per (task, K)."""
    out: dict = {}
    for r in rows:
        out.setdefault((r["task"], r["K"]), {}).setdefault(r["metric"], []).append(r["value"])
    return {key: {m: float(np.mean(v)) for m, v in d.items()} for key, d in out.items()}


def scaling_dataset(num_nodes: int, avg_degree: float, vocab_size: int, num_topics: int = 5,
                    selections_mean: float = 20.0, seed: int = 0):
    """Synthetic data whose expected degree stays fixed as N grows.

    With alpha precision 1 two nodes share a topic draw with probability
    1/K, so beta = avg_degree * K / (N - 1) keeps the mean degree constant.
    """
    hyper = Hyperparams.symmetric(num_topics, vocab_size, 1.0)
    beta = min(1.0, avg_degree * num_topics / (num_nodes - 1))
    cfg = SimConfig(num_nodes, hyper, selections_mean=selections_mean, seed=seed, beta=beta)
    graph, behaviors, _ = generate_dataset(cfg)
    return graph, behaviors


def time_sweeps(graph: Graph, behaviors: BehaviorData, config: FitConfig, sweeps: int = 10,
                rounds: int = 5) -> float:
    """Wall time of one coordinate sweep, after one untimed warm-up.

    Each round averages ``sweeps`` consecutive sweeps; the fastest round is
    reported, which filters out scheduler and cache noise.
    """
    lay = inference.Layout(graph, behaviors)
    hyper = config.hyperparams(behaviors.vocab_size)
    state = inference.init_state(graph, behaviors, config, layout=lay)
    inference.sweep(state, lay, hyper, config)
    best = float("inf")
    for _ in range(max(1, rounds)):
        t0 = time.perf_counter()
        for _ in range(sweeps):
            inference.sweep(state, lay, hyper, config)
        best = min(best, (time.perf_counter() - t0) / sweeps)
    return best


def run_scaling_benchmark(sizes, avg_degree: float = 10.0, vocab_size: int = 200,
                          num_topics: int = 5, sweeps: int = 10, seed: int = 0):
    """Rows of ``(N, seconds_per_sweep)`` for each size."""
    sizes = [int(n) for n in sizes]
    if len(sizes) < 2:
        raise ValueError("scaling needs at least two sizes")
    rows = []
    for n in sizes:
        graph, behaviors = scaling_dataset(n, avg_degree, vocab_size, num_topics, seed=seed)
        cfg = FitConfig(num_topics, seed=seed)
        rows.append((n, time_sweeps(graph, behaviors, cfg, sweeps)))
    return rows
