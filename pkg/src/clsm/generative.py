"""Forward sampler for networks and behaviors, with ground truth retained.

Randomness is drawn from Philox (counter-based) generators keyed by
``(seed, stream, index)``:

==========  =====  ======================================
stream      tag    index
==========  =====  ======================================
beta        1      0
membership  2      node
pairs       3      first node of the pair row (n1 < n2)
totals      4      0
topics      5      0
behaviors   6      node
fresh       7      node (extra indicator of isolated nodes)
==========  =====  ======================================

Each stream is independent of how the others are consumed, so rows of the
pair loop can be sampled in any order (or in parallel) with identical
results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import BehaviorData, Graph, Hyperparams

STREAM_BETA, STREAM_MEMBERSHIP, STREAM_PAIRS = 1, 2, 3
STREAM_TOTALS, STREAM_TOPICS, STREAM_BEHAVIORS, STREAM_FRESH = 4, 5, 6, 7


class DegenerateNodeError(ValueError):
    """A node must emit selections but has no indicator to reuse."""


class ConfigError(ValueError):
    pass


def stream(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    """Counter-based generator for one named stream."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag, index])
    return np.random.Generator(np.random.Philox(ss))


def _as_seed(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63))
    return int(rng)


@dataclass
class GroundTruth:
    theta_true: np.ndarray
    beta_true: np.ndarray
    omega_true: np.ndarray
    # topic index of every retained indicator, ordered like the node's
    # adjacency list (i.e. by partner id)
    indicator_sets: list
    # extra indicator drawn for nodes that must emit selections without links
    fresh_indicators: dict = field(default_factory=dict)

    def indicator_onehots(self, n: int) -> np.ndarray:
        K = self.theta_true.shape[1]
        return np.eye(K, dtype=np.int64)[self.indicator_sets[n]]


@dataclass
class SimConfig:
    """Simulation settings.

    ``beta`` fixes the community strengths instead of drawing them from
    Beta(eta).  ``topics`` selects Dirichlet(kappa) topics or the
    two-peak ``"overlap"`` pair (K = 2 only).
    """

    num_nodes: int
    hyper: Hyperparams
    selections_mean: float = 20.0
    seed: int = 0
    retain_link_indicators_only: bool = True
    beta: np.ndarray | None = None
    topics: str = "dirichlet"
    peak_gap: int = 0
    peak_width: int = 50

    def __post_init__(self):
        if self.num_nodes < 2:
            raise ConfigError("num_nodes must be >= 2")
        if not self.selections_mean >= 0:
            raise ConfigError("selections_mean must be >= 0")
        if self.beta is not None:
            b = np.asarray(self.beta, dtype=np.float64).reshape(-1)
            if b.size == 1:
                b = np.full(self.hyper.num_topics, b[0])
            if b.size != self.hyper.num_topics or np.any(b < 0) or np.any(b > 1):
                raise ConfigError("beta must hold K values in [0, 1]")
            self.beta = b
        if self.topics not in ("dirichlet", "overlap"):
            raise ConfigError("topics must be 'dirichlet' or 'overlap'")
        if self.topics == "overlap" and self.hyper.num_topics != 2:
            raise ConfigError("overlap topics need exactly two topics")


def sample_membership(alpha, rng) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size < 1 or not np.all(alpha > 0):
        raise ValueError("alpha must be a positive vector")
    if alpha.size == 1:
        return np.ones(1)
    theta = rng.dirichlet(alpha)
    return theta / theta.sum()


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Categorical draws: row i of cdf (cumulative probs) with uniform u[i]."""
    z = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(z, cdf.shape[1] - 1)


def sample_network(thetas, beta, epsilon: float, rng, retain_link_indicators_only: bool = True):
    """Sample links for every unordered pair and collect the indicators.

    Returns ``(graph, indicator_sets)``; ``indicator_sets[n]`` lists the
    topics of n's retained indicators ordered by partner id.
    """
    thetas = np.asarray(thetas, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    N, K = thetas.shape
    seed = _as_seed(rng)
    cdf = np.cumsum(thetas, axis=1)
    cdf[:, -1] = 1.0

    edges = []
    owners, partners, topics = [], [], []
    for n1 in range(N - 1):
        g = stream(seed, STREAM_PAIRS, n1)
        n2 = np.arange(n1 + 1, N)
        m = n2.size
        u = g.random((3, m))
        z_out = _inverse_cdf(np.broadcast_to(cdf[n1], (m, K)), u[0])
        z_in = _inverse_cdf(cdf[n2], u[1])
        p = np.where(z_out == z_in, beta[z_out], epsilon)
        y = u[2] < p
        if y.any():
            edges.append(np.stack([np.full(int(y.sum()), n1), n2[y]], axis=1))
        keep = y if retain_link_indicators_only else slice(None)
        kept = n2[keep]
        owners += [np.full(kept.size, n1), kept]
        partners += [kept, np.full(kept.size, n1)]
        topics += [z_out[keep], z_in[keep]]
    edge_arr = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    graph = Graph(N, edge_arr)
    if owners:
        owners = np.concatenate(owners)
        partners = np.concatenate(partners)
        topics = np.concatenate(topics).astype(np.int64)
    else:
        owners = partners = topics = np.zeros(0, dtype=np.int64)
    order = np.lexsort((partners, owners))
    bounds = np.searchsorted(owners[order], np.arange(N + 1))
    sorted_topics = topics[order]
    indicator_sets = [sorted_topics[bounds[n]:bounds[n + 1]] for n in range(N)]
    return graph, indicator_sets


def sample_behaviors(indicator_sets, omegas, totals, rng) -> BehaviorData:
    """Each selection reuses a uniformly chosen indicator of its node."""
    omegas = np.asarray(omegas, dtype=np.float64)
    K, V = omegas.shape
    totals = np.asarray(totals, dtype=np.int64)
    seed = _as_seed(rng)
    cdf = np.cumsum(omegas, axis=1)
    cdf[:, -1] = 1.0
    token_lists = []
    for n, (Z, M) in enumerate(zip(indicator_sets, totals)):
        if M == 0:
            token_lists.append(np.zeros(0, dtype=np.int64))
            continue
        Z = np.asarray(Z, dtype=np.int64)
        if Z.size == 0:
            raise DegenerateNodeError(f"node {n} has {M} selections but no indicators")
        g = stream(seed, STREAM_BEHAVIORS, n)
        picked = Z[g.integers(0, Z.size, size=M)]
        token_lists.append(_inverse_cdf(cdf[picked], g.random(M)))
    return BehaviorData.from_token_lists(len(totals), V, token_lists)


def make_overlap_topic_pair(vocab_size: int, peak_gap: int, peak_width: int):
    """Two triangular bumps of half-width ``peak_width`` centred at
    ``V/2 -+ peak_gap/2``, each normalised to sum to one."""
    V = int(vocab_size)
    if peak_width < 1 or peak_gap < 0:
        raise ConfigError("peak_width must be >= 1 and peak_gap >= 0")
    c1 = V / 2 - peak_gap / 2
    c2 = V / 2 + peak_gap / 2
    if c1 - peak_width < -1 or c2 + peak_width > V:
        raise ConfigError(f"peaks (gap {peak_gap}, width {peak_width}) do not fit in [0, {V})")
    v = np.arange(V, dtype=np.float64)
    out = []
    for c in (c1, c2):
        w = np.maximum(0.0, 1.0 - np.abs(v - c) / peak_width)
        out.append(w / w.sum())
    return out[0], out[1]


def generate_dataset(config: SimConfig):
    """Sample ``(graph, behaviors, ground_truth)`` deterministically from the seed."""
    hyper = config.hyper
    K, V, N, seed = hyper.num_topics, hyper.vocab_size, config.num_nodes, config.seed

    if config.beta is not None:
        beta = config.beta.copy()
    else:
        beta = stream(seed, STREAM_BETA).beta(hyper.eta[0], hyper.eta[1], size=K)
    thetas = np.stack([sample_membership(hyper.alpha, stream(seed, STREAM_MEMBERSHIP, n))
                       for n in range(N)])
    graph, indicators = sample_network(thetas, beta, hyper.epsilon, seed,
                                       config.retain_link_indicators_only)

    if config.topics == "overlap":
        omegas = np.stack(make_overlap_topic_pair(V, config.peak_gap, config.peak_width))
    else:
        g = stream(seed, STREAM_TOPICS)
        omegas = np.stack([sample_membership(hyper.kappa, g) for _ in range(K)])

    totals = stream(seed, STREAM_TOTALS).poisson(config.selections_mean, size=N)
    behavior_sets = list(indicators)
    fresh = {}
    for n in range(N):
        if totals[n] > 0 and len(indicators[n]) == 0:
            g = stream(seed, STREAM_FRESH, n)
            z = int(_inverse_cdf(np.cumsum(thetas[n])[None, :], g.random(1))[0])
            fresh[n] = z
            behavior_sets[n] = np.array([z])
    behaviors = sample_behaviors(behavior_sets, omegas, totals, seed)
    truth = GroundTruth(theta_true=thetas, beta_true=beta, omega_true=omegas,
                        indicator_sets=indicators, fresh_indicators=fresh)
    return graph, behaviors, truth
