"""Coordinate-ascent variational EM for the constrained latent space model.

Every step of a sweep maximises the evidence lower bound exactly in the
block it touches, so the bound never decreases.  The quadratic number of
non-link pairs is never enumerated: each node's non-link indicators share
one responsibility vector ``phi_bar`` and all pair sums over non-links are
obtained from per-topic aggregates.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.special import gammaln

from .core import (
    BehaviorData,
    FittedModel,
    Graph,
    Hyperparams,
    StateError,
    VariationalState,
    beta_expect_logs_rows,
    dirichlet_expect_log,
    normalize_log_simplex,
)

log = logging.getLogger(__name__)

OMEGA_MODES = ("variational_rho", "direct_with_smoothing")
PHI_BAR_MODES = ("optimal", "mean")


class NumericalError(RuntimeError):
    def __init__(self, iteration: int, message: str = "non-finite evidence lower bound"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class FitConfig:
    num_topics: int
    max_iterations: int = 500
    rel_tol: float = 1e-8
    alpha_precision: float = 1.0
    eta: tuple = (1.0, 1.0)
    kappa_value: float = 0.1
    epsilon: float = 1e-5
    omega_mode: str = "variational_rho"
    smoothing_pseudocount: float = 0.01
    seed: int = 0
    # "optimal" maximises the bound in phi_bar; "mean" averages incident
    # edge responsibilities (cheaper, but the bound may then dip)
    phi_bar_mode: str = "optimal"
    # restarts: each runs init_sweeps sweeps, the best bound is continued
    n_init: int = 1
    init_sweeps: int = 20

    def __post_init__(self):
        if self.num_topics < 1:
            raise ValueError("num_topics must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.omega_mode not in OMEGA_MODES:
            raise ValueError(f"omega_mode must be one of {OMEGA_MODES}")
        if self.phi_bar_mode not in PHI_BAR_MODES:
            raise ValueError(f"phi_bar_mode must be one of {PHI_BAR_MODES}")
        if not self.smoothing_pseudocount > 0:
            raise ValueError("smoothing_pseudocount must be positive")
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")

    def hyperparams(self, vocab_size: int) -> Hyperparams:
        return Hyperparams.symmetric(self.num_topics, vocab_size, self.alpha_precision,
                                     self.eta, self.kappa_value, self.epsilon)


@dataclass
class FitReport:
    elbo_trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    wall_time_per_iteration: float = 0.0


# ---------------------------------------------------------------------------
# index layout
# ---------------------------------------------------------------------------


class Layout:
    """Index arrays tying selections to incident edges.

    A *pair* is one (stored entry, incident edge) combination; pair ``p``
    carries one selector weight ``lam[p]``.  Pairs are ordered entry-major,
    which is also the layout of ``VariationalState.lam``.
    """

    def __init__(self, graph: Graph, behaviors: BehaviorData):
        if graph.num_nodes != behaviors.num_nodes:
            raise ValueError(f"graph has {graph.num_nodes} nodes but behaviors "
                             f"have {behaviors.num_nodes}")
        self.graph = graph
        self.behaviors = behaviors
        N = graph.num_nodes
        deg = graph.degrees
        self.deg = deg
        self.non_links = (N - 1 - deg).astype(np.float64)
        self.u = graph.edges[:, 0]
        self.v = graph.edges[:, 1]

        ent_node = behaviors.entry_nodes
        ent_deg = deg[ent_node]
        self.ent_node = ent_node
        self.lam_indptr = np.zeros(len(ent_node) + 1, dtype=np.int64)
        np.cumsum(ent_deg, out=self.lam_indptr[1:])
        P = int(self.lam_indptr[-1])
        self.pair_entry = np.repeat(np.arange(len(ent_node)), ent_deg)
        slot = np.arange(P) - np.repeat(self.lam_indptr[:-1], ent_deg)
        self.pair_edge = graph.incident[np.repeat(graph.indptr[ent_node], ent_deg) + slot]
        self.pair_tok = behaviors.tokens[self.pair_entry]
        self.pair_w = behaviors.counts[self.pair_entry].astype(np.float64)
        self.pair_logdeg = np.log(np.maximum(deg[ent_node[self.pair_entry]], 1)).astype(np.float64)
        linked = ent_deg > 0
        self.group_starts = self.lam_indptr[:-1][linked]
        self.group_len = ent_deg[linked]
        # degree-0 nodes with selections: one fresh indicator each
        loose = np.flatnonzero(~linked)
        self.fresh_nodes, fresh_row = np.unique(ent_node[loose], return_inverse=True)
        self.fresh_counts = sp.csr_matrix(
            (behaviors.counts[loose].astype(np.float64), (fresh_row, behaviors.tokens[loose])),
            shape=(len(self.fresh_nodes), behaviors.vocab_size))

        # pairs regrouped by edge, for edge x token aggregation
        self.edge_perm = np.argsort(self.pair_edge, kind="stable")
        self.edge_ptr = np.zeros(graph.num_edges + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.pair_edge, minlength=graph.num_edges), out=self.edge_ptr[1:])
        # node x edge incidence
        E = graph.num_edges
        rows = np.concatenate([self.u, self.v])
        cols = np.concatenate([np.arange(E), np.arange(E)])
        self.incidence = sp.csr_matrix((np.ones(2 * E), (rows, cols)), shape=(N, E))
        F = len(self.fresh_nodes)
        self.fresh_incidence = sp.csr_matrix((np.ones(F), (self.fresh_nodes, np.arange(F))),
                                             shape=(N, F))

    @property
    def num_pairs(self) -> int:
        return int(self.lam_indptr[-1])

    def edge_token_matrix(self, lam: np.ndarray) -> sp.csr_matrix:
        """Sparse (E, V) matrix of count-weighted selector mass per edge/token."""
        data = (self.pair_w * lam)[self.edge_perm]
        return sp.csr_matrix((data, self.pair_tok[self.edge_perm], self.edge_ptr),
                             shape=(self.graph.num_edges, self.behaviors.vocab_size))


def _segment_softmax(logits: np.ndarray, starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    if logits.size == 0:
        return logits.copy()
    m = np.maximum.reduceat(logits, starts)
    w = np.exp(logits - np.repeat(m, lengths))
    s = np.add.reduceat(w, starts)
    return w / np.repeat(s, lengths)


def _xlogx(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    pos = a > 0
    out[pos] = a[pos] * np.log(a[pos])
    return out


def _elog_omega(state: VariationalState) -> np.ndarray:
    if state.omega is not None:
        return np.log(state.omega)
    return dirichlet_expect_log(state.rho)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def init_state(graph: Graph, behaviors: BehaviorData, config: FitConfig,
               rng: np.random.Generator | None = None,
               layout: Layout | None = None) -> VariationalState:
    """Starting point for coordinate ascent.

    gamma is alpha plus a degree-proportional random perturbation, edge
    responsibilities are uniform plus jitter, selector rows are uniform,
    tau copies eta and rho copies kappa plus a small positive jitter.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    lay = layout or Layout(graph, behaviors)
    K, N, V = config.num_topics, graph.num_nodes, behaviors.vocab_size
    hyper = config.hyperparams(V)
    deg = lay.deg.astype(np.float64)

    gamma = hyper.alpha + (deg[:, None] + 1.0) * rng.uniform(0.0, 0.1, size=(N, K))
    phi_edge = normalize_log_simplex(np.log1p(rng.uniform(0.0, 1.0, size=(graph.num_edges, K))))
    lam = 1.0 / np.repeat(lay.group_len.astype(np.float64), lay.group_len)
    loose = np.full((len(lay.fresh_nodes), K), 1.0 / K)
    tau = np.tile(np.asarray(hyper.eta, dtype=np.float64), (K, 1))
    totals = behaviors.totals
    scale = max(float(totals.sum()) / (K * V), 1.0)
    rho = hyper.kappa[None, :] + scale * rng.uniform(0.0, 1.0, size=(K, V))
    state = VariationalState(gamma=gamma, phi_edge=phi_edge,
                             phi_bar=np.zeros((N, K)), lam=lam, lam_indptr=lay.lam_indptr,
                             loose=loose, fresh_nodes=lay.fresh_nodes, tau=tau, rho=rho)
    state.phi_bar = _phi_bar_means(state, lay)
    if config.omega_mode == "direct_with_smoothing":
        state.omega = rho / rho.sum(axis=1, keepdims=True)
        state.omega_prior = 1.0 + config.smoothing_pseudocount
    return state


# ---------------------------------------------------------------------------
# single-element updates
# ---------------------------------------------------------------------------


def update_edge_phi(edge, state: VariationalState, graph: Graph,
                    behaviors: BehaviorData) -> np.ndarray:
    """Responsibility vector of one undirected edge, given as (a, b) or id."""
    if np.ndim(edge) == 0:
        e = int(edge)
        if not 0 <= e < graph.num_edges:
            raise IndexError(f"edge id {e} out of range")
        a, b = (int(x) for x in graph.edges[e])
    else:
        a, b = (int(x) for x in edge)
        try:
            e = graph.edge_index(a, b)
        except KeyError:
            raise IndexError(f"edge ({a}, {b}) not in graph") from None
    elt = dirichlet_expect_log(state.gamma[[a, b]])
    eb, _ = beta_expect_logs_rows(state.tau)
    ew = _elog_omega(state)
    logits = elt[0] + elt[1] + eb
    for n in (a, b):
        slot = int(np.flatnonzero(graph.incident_edges(n) == e)[0])
        block = state.lambda_block(n, graph, behaviors)
        s = slice(behaviors.indptr[n], behaviors.indptr[n + 1])
        toks, cnts = behaviors.tokens[s], behaviors.counts[s]
        if len(toks):
            logits = logits + (cnts * block[:, slot]) @ ew[:, toks].T
    return normalize_log_simplex(logits)


def update_lambda_row(n: int, m: int, state: VariationalState, graph: Graph,
                      behaviors: BehaviorData) -> np.ndarray:
    """Selector weights of node n's m-th stored entry over its incident edges.

    Returns an empty vector for degree-0 nodes (there is nothing to select).
    """
    if not 0 <= m < behaviors.indptr[n + 1] - behaviors.indptr[n]:
        raise IndexError(f"node {n} has no entry {m}")
    d = graph.degree(n)
    if d == 0:
        return np.zeros(0)
    tok = behaviors.tokens[behaviors.indptr[n] + m]
    ew = _elog_omega(state)[:, tok]
    return normalize_log_simplex(state.phi_edge[graph.incident_edges(n)] @ ew)


def update_gamma(n: int, state: VariationalState, graph: Graph, hyper: Hyperparams,
                 behaviors: BehaviorData | None = None) -> np.ndarray:
    """Exact gamma step for node n given its phi_bar (``behaviors`` is unused
    and kept for call-site symmetry)."""
    g = hyper.alpha + state.phi_edge[graph.incident_edges(n)].sum(axis=0)
    g = g + (graph.num_nodes - 1 - graph.degree(n)) * state.phi_bar[n]
    return g + _fresh_mass(n, state)


def _fresh_mass(n: int, state: VariationalState) -> np.ndarray:
    # responsibility of node n's fresh indicator, or zeros if it has none
    row = np.searchsorted(state.fresh_nodes, n)
    if row < len(state.fresh_nodes) and state.fresh_nodes[row] == n:
        return state.loose[row]
    return np.zeros(state.num_topics)


def update_phi_bar(n: int, state: VariationalState, graph: Graph) -> np.ndarray:
    """Mean responsibility of node n's incident edges.

    Degree-0 nodes fall back to exp(E[log theta_n]) normalised.
    """
    inc = graph.incident_edges(n)
    if len(inc) == 0:
        return normalize_log_simplex(dirichlet_expect_log(state.gamma[n]))
    return state.phi_edge[inc].mean(axis=0)


def optimal_phi_bar(n: int, state: VariationalState, graph: Graph,
                    hyper: Hyperparams) -> np.ndarray:
    """Maximiser of the bound in node n's shared non-link responsibility."""
    c = graph.num_nodes - 1 - graph.degree(n)
    if c <= 0:
        return update_phi_bar(n, state, graph)
    _, e1b = beta_expect_logs_rows(state.tau)
    D = e1b - np.log1p(-hyper.epsilon)
    partners = state.phi_bar.sum(axis=0) - state.phi_bar[n] - state.phi_bar[graph.adjacency(n)].sum(axis=0)
    return normalize_log_simplex(dirichlet_expect_log(state.gamma[n]) + partners * D / c)


def update_node_block(n: int, state: VariationalState, graph: Graph, behaviors: BehaviorData,
                      hyper: Hyperparams) -> tuple[np.ndarray, np.ndarray]:
    """Jointly optimal ``(gamma_n, phi_bar_n)`` with everything else fixed.

    This is the membership step the sweep applies node by node.
    """
    base = hyper.alpha + state.phi_edge[graph.incident_edges(n)].sum(axis=0) + _fresh_mass(n, state)
    c = float(graph.num_nodes - 1 - graph.degree(n))
    if c <= 0:
        return base, state.phi_bar[n].copy()
    _, e1b = beta_expect_logs_rows(state.tau)
    D = e1b - np.log1p(-hyper.epsilon)
    partners = state.phi_bar.sum(axis=0) - state.phi_bar[n] - state.phi_bar[graph.adjacency(n)].sum(axis=0)
    b = np.maximum(partners, 0.0) * D / c
    x = state.phi_bar[n].copy()
    K = x.size
    _solve_block(x, base, b, c, _MAX_INNER, _INNER_TOL, np.empty(K), np.empty(K), np.empty(K))
    return base + c * x, x


def non_link_overlap(phi_bar: np.ndarray, graph: Graph) -> np.ndarray:
    """Per-topic sum over non-linked pairs of phi_bar[a, k] * phi_bar[b, k].

    Uses all-pairs minus linked pairs, O((N + E) K).
    """
    col = phi_bar.sum(axis=0)
    allpairs = 0.5 * (col * col - (phi_bar * phi_bar).sum(axis=0))
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    return allpairs - (phi_bar[u] * phi_bar[v]).sum(axis=0)


def update_tau(state: VariationalState, graph: Graph, hyper: Hyperparams) -> np.ndarray:
    tau = np.empty((state.num_topics, 2))
    tau[:, 0] = hyper.eta[0] + state.phi_edge.sum(axis=0)
    tau[:, 1] = hyper.eta[1] + np.maximum(non_link_overlap(state.phi_bar, graph), 0.0)
    return tau


def _topic_token_stats(state: VariationalState, lay: Layout) -> np.ndarray:
    stats = np.asarray((lay.edge_token_matrix(state.lam).T @ state.phi_edge).T)
    if len(lay.fresh_nodes):
        stats += np.asarray(lay.fresh_counts.T @ state.loose).T
    return stats


def topic_token_stats(state: VariationalState, graph: Graph,
                      behaviors: BehaviorData) -> np.ndarray:
    """Expected (K, V) topic/token counts implied by phi and lambda."""
    return _topic_token_stats(state, Layout(graph, behaviors))


def update_rho(state: VariationalState, behaviors: BehaviorData, graph: Graph,
               hyper: Hyperparams) -> np.ndarray:
    return hyper.kappa[None, :] + topic_token_stats(state, graph, behaviors)


def update_omega_direct(state: VariationalState, behaviors: BehaviorData, graph: Graph,
                        smoothing_pseudocount: float) -> np.ndarray:
    if not smoothing_pseudocount > 0:
        raise ValueError("smoothing_pseudocount must be positive")
    w = smoothing_pseudocount + topic_token_stats(state, graph, behaviors)
    return w / w.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# bound
# ---------------------------------------------------------------------------


def _log_dirichlet_norm(conc: np.ndarray) -> np.ndarray:
    """log Gamma(sum) - sum log Gamma along the last axis."""
    return gammaln(conc.sum(axis=-1)) - gammaln(conc).sum(axis=-1)


def _elbo(state: VariationalState, lay: Layout, hyper: Hyperparams) -> float:
    graph = lay.graph
    K = state.num_topics
    elt = dirichlet_expect_log(state.gamma)
    eb, e1b = beta_expect_logs_rows(state.tau)
    ew = _elog_omega(state)
    phi, pbar = state.phi_edge, state.phi_bar
    log1m_eps = np.log1p(-hyper.epsilon)

    # links: likelihood, indicator prior, entropy of the joint indicator
    total = float((phi * eb).sum())
    total += float((phi * (elt[lay.u] + elt[lay.v])).sum())
    total -= float(_xlogx(phi).sum())
    # non-links through the shared responsibilities
    overlap = non_link_overlap(pbar, graph)
    total += float(overlap @ (e1b - log1m_eps)) + graph.num_non_links() * log1m_eps
    c = lay.non_links
    total += float((c[:, None] * pbar * elt).sum())
    total -= float((c * _xlogx(pbar).sum(axis=1)).sum())
    # selections explained by incident links
    if lay.num_pairs:
        ewt = ew.T
        score = np.einsum("pk,pk->p", phi[lay.pair_edge], ewt[lay.pair_tok])
        total += float((lay.pair_w * state.lam * (score - lay.pair_logdeg)).sum())
        total -= float((lay.pair_w * _xlogx(state.lam)).sum())
    # selections of isolated nodes, all through one fresh indicator per node
    if len(lay.fresh_nodes):
        r = state.loose
        total += float((r * (elt[lay.fresh_nodes] + lay.fresh_counts @ ew.T)).sum())
        total -= float(_xlogx(r).sum())
    # theta
    total += graph.num_nodes * float(_log_dirichlet_norm(hyper.alpha)) + float(((hyper.alpha - 1) * elt).sum())
    total -= float(_log_dirichlet_norm(state.gamma).sum()) + float(((state.gamma - 1) * elt).sum())
    # beta
    eta = np.asarray(hyper.eta)
    total += K * float(_log_dirichlet_norm(eta)) + float(((eta[0] - 1) * eb + (eta[1] - 1) * e1b).sum())
    total -= float(_log_dirichlet_norm(state.tau).sum())
    total -= float(((state.tau[:, 0] - 1) * eb + (state.tau[:, 1] - 1) * e1b).sum())
    # omega
    if state.omega is None:
        total += K * float(_log_dirichlet_norm(hyper.kappa)) + float(((hyper.kappa - 1) * ew).sum())
        total -= float(_log_dirichlet_norm(state.rho).sum()) + float(((state.rho - 1) * ew).sum())
    else:
        a = state.omega_prior
        V = ew.shape[1]
        total += K * float(gammaln(V * a) - V * gammaln(a)) + (a - 1) * float(ew.sum())
    return total


def compute_elbo(state: VariationalState, graph: Graph, behaviors: BehaviorData,
                 hyper: Hyperparams, check: bool = True) -> float:
    """Evidence lower bound of the state (raises StateError if invalid)."""
    if check:
        state.check(graph, behaviors)
    return _elbo(state, Layout(graph, behaviors), hyper)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


@njit(cache=True)
def _psi(x):
    acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    f = 1.0 / (x * x)
    series = f * (1.0 / 12 - f * (1.0 / 120 - f * (1.0 / 252 - f * (1.0 / 240 - f * (1.0 / 132)))))
    return acc + np.log(x) - 0.5 / x - series


@njit(cache=True)
def _psi1(x):
    acc = 0.0
    while x < 6.0:
        acc += 1.0 / (x * x)
        x += 1.0
    f = 1.0 / (x * x)
    tail = 1.0 / x + f / 2 + f / x * (1.0 / 6 - f * (1.0 / 30 - f * (1.0 / 42 - f / 30)))
    return acc + tail


@njit(cache=True)
def _block_objective(x, a, b, c):
    # bound as a function of phi_bar alone, gamma profiled out (up to a constant)
    val = 0.0
    for k in range(x.size):
        val += math.lgamma(a[k] + c * x[k]) + c * x[k] * (b[k] - math.log(x[k]))
    return val


@njit(cache=True)
def _fixed_point_step(x, a, b, c):
    # exact phi_bar step given gamma = a + c * x
    K = x.size
    m = -np.inf
    for k in range(K):
        x[k] = _psi(a[k] + c * x[k]) + b[k]
        if x[k] > m:
            m = x[k]
    z = 0.0
    for k in range(K):
        x[k] = math.exp(x[k] - m)
        z += x[k]
    for k in range(K):
        x[k] /= z


@njit(cache=True)
def _block_guess(a, b, c, out):
    """Approximate stationary point of the profiled objective.

    With psi(y) ~ log(y - 1/2) the stationarity conditions give
    x_k = (a_k - 1/2) / (Z exp(-b_k) - c) for the coordinates with
    a_k > 1/2, leaving a monotone scalar equation in Z.  The remaining
    coordinates get their small-x limit.  Returns False if no coordinate
    exceeds one half.
    """
    K = a.size
    lo = 0.0
    for k in range(K):
        if a[k] > 0.5:
            lo = max(lo, c * math.exp(b[k]))
    if lo == 0.0:
        return False
    small = 0.0
    for k in range(K):
        if a[k] <= 0.5:
            out[k] = math.exp(_psi(a[k]) + b[k]) / (lo + c)
            small += out[k]
    target = 1.0 - min(small, 0.5)
    # sum_k (a_k - 1/2) / (Z exp(-b_k) - c) decreases from +inf on Z > lo
    hi = lo + 1.0
    while _guess_mass(a, b, c, hi) > target:
        hi = lo + 2.0 * (hi - lo)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if _guess_mass(a, b, c, mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    z = 0.0
    for k in range(K):
        if a[k] > 0.5:
            out[k] = (a[k] - 0.5) / (hi * math.exp(-b[k]) - c)
        z += out[k]
    for k in range(K):
        out[k] /= z
    return True


@njit(cache=True)
def _guess_mass(a, b, c, zval):
    m = 0.0
    for k in range(a.size):
        if a[k] > 0.5:
            m += (a[k] - 0.5) / (zval * math.exp(-b[k]) - c)
    return m


@njit(cache=True)
def _block_newton(x, a, b, c, max_iter, tol, g, h, trial):
    """Safeguarded Newton ascent of the profiled objective on the simplex.

    Only steps that raise the objective are taken, and the loop stops as
    soon as a coordinate leaves the concave region.
    """
    K = x.size
    f0 = _block_objective(x, a, b, c)
    for _ in range(max_iter):
        num = 0.0
        den = 0.0
        for k in range(K):
            y = a[k] + c * x[k]
            g[k] = c * (_psi(y) + b[k] - math.log(x[k]) - 1.0)
            h[k] = c * c * _psi1(y) - c / x[k]
            if not h[k] < 0.0:
                return
            num += g[k] / h[k]
            den += 1.0 / h[k]
        mu = num / den
        t = 1.0
        size = 0.0
        for k in range(K):
            g[k] = -(g[k] - mu) / h[k]
            size = max(size, abs(g[k]))
            if g[k] < 0.0:
                t = min(t, 0.5 * x[k] / -g[k])
        if size < tol:
            return
        for _ in range(30):
            z = 0.0
            for k in range(K):
                trial[k] = x[k] + t * g[k]
                z += trial[k]
            for k in range(K):
                trial[k] /= z
            f1 = _block_objective(trial, a, b, c)
            if f1 > f0:
                break
            t *= 0.5
        else:
            return
        f0 = f1
        for k in range(K):
            x[k] = trial[k]
        if t * size < tol:
            return


@njit(cache=True)
def _solve_block(x, a, b, c, max_iter, tol, prev, work, trial):
    """Alternate the exact gamma and phi_bar steps of one node.

    The pair contracts slowly when c dominates, so the iteration starts
    from a closed-form approximation of the stationary point (when that
    raises the profiled objective) refined by Newton steps.
    """
    K = x.size
    if _block_guess(a, b, c, trial):
        if _block_objective(trial, a, b, c) > _block_objective(x, a, b, c):
            for k in range(K):
                x[k] = trial[k]
    _block_newton(x, a, b, c, 50, tol, prev, work, trial)
    last = np.inf
    for _ in range(max_iter):
        for k in range(K):
            prev[k] = x[k]
        _fixed_point_step(x, a, b, c)
        size = 0.0
        for k in range(K):
            size = max(size, abs(x[k] - prev[k]))
        # a small step is not enough when the map contracts slowly: bound
        # the remaining distance by the geometric tail of the steps
        rate = size / last
        last = size
        if size < 1e-15 or (size < tol and rate < 1.0 and size * rate / (1.0 - rate) < tol):
            return


@njit(cache=True)
def _node_block_pass(gamma, phi_bar, base, D, c, indptr, nbr, max_inner, tol):
    """Sequentially maximise each node's (gamma, phi_bar) block.

    ``base`` holds alpha plus the link and isolated-selection counts, so the
    gamma step is ``base + c * phi_bar``.
    """
    N, K = phi_bar.shape
    total = np.zeros(K)
    for n in range(N):
        total += phi_bar[n]
    b = np.empty(K)
    x = np.empty(K)
    old = np.empty(K)
    prev = np.empty(K)
    work = np.empty(K)
    trial = np.empty(K)
    for n in range(N):
        if c[n] <= 0:
            for k in range(K):
                gamma[n, k] = base[n, k]
            continue
        for k in range(K):
            b[k] = total[k] - phi_bar[n, k]
        for i in range(indptr[n], indptr[n + 1]):
            for k in range(K):
                b[k] -= phi_bar[nbr[i], k]
        for k in range(K):
            b[k] = max(b[k], 0.0) * D[k] / c[n]
            x[k] = phi_bar[n, k]
            old[k] = phi_bar[n, k]
        _solve_block(x, base[n], b, c[n], max_inner, tol, prev, work, trial)
        for k in range(K):
            phi_bar[n, k] = x[k]
            total[k] += x[k] - old[k]
            gamma[n, k] = base[n, k] + c[n] * phi_bar[n, k]


_MAX_INNER = 200
_INNER_TOL = 1e-12


def _phi_bar_means(state: VariationalState, lay: Layout) -> np.ndarray:
    deg = lay.deg
    sums = lay.incidence @ state.phi_edge
    out = sums / np.maximum(deg, 1)[:, None]
    iso = deg == 0
    if iso.any():
        out[iso] = normalize_log_simplex(dirichlet_expect_log(state.gamma[iso]))
    return out


def sweep(state: VariationalState, lay: Layout, hyper: Hyperparams,
          config: FitConfig) -> VariationalState:
    """One full round of coordinate updates, in place; returns the state."""
    graph = lay.graph
    alpha = hyper.alpha

    # edge responsibilities
    elt = dirichlet_expect_log(state.gamma)
    eb, _ = beta_expect_logs_rows(state.tau)
    ew = _elog_omega(state)
    logits = elt[lay.u] + elt[lay.v] + eb
    if lay.num_pairs:
        logits += lay.edge_token_matrix(state.lam) @ ew.T
    state.phi_edge = normalize_log_simplex(logits) if graph.num_edges else state.phi_edge

    # selector rows and isolated-node responsibilities
    if lay.num_pairs:
        score = np.einsum("pk,pk->p", state.phi_edge[lay.pair_edge], ew.T[lay.pair_tok])
        state.lam = _segment_softmax(score, lay.group_starts, lay.group_len)
    if len(lay.fresh_nodes):
        state.loose = normalize_log_simplex(elt[lay.fresh_nodes] + lay.fresh_counts @ ew.T)

    # memberships and shared non-link responsibilities
    base = alpha + lay.incidence @ state.phi_edge
    if len(lay.fresh_nodes):
        base += lay.fresh_incidence @ state.loose
    if config.phi_bar_mode == "mean":
        state.gamma = base + lay.non_links[:, None] * state.phi_bar
        state.phi_bar = _phi_bar_means(state, lay)
    else:
        _, e1b = beta_expect_logs_rows(state.tau)
        D = e1b - np.log1p(-hyper.epsilon)
        gamma = np.empty_like(base)
        pb = np.ascontiguousarray(state.phi_bar)
        _node_block_pass(gamma, pb, base, D, lay.non_links.astype(np.float64),
                         graph.indptr, graph.neighbors, _MAX_INNER, _INNER_TOL)
        state.gamma, state.phi_bar = gamma, pb

    # globals
    state.tau = update_tau(state, graph, hyper)
    stats = _topic_token_stats(state, lay)
    if state.omega is None:
        state.rho = hyper.kappa[None, :] + stats
    else:
        w = config.smoothing_pseudocount + stats
        state.omega = w / w.sum(axis=1, keepdims=True)
        state.rho = hyper.kappa[None, :] + stats
    return state


def point_estimates(state: VariationalState, hyper: Hyperparams, elbo_trace=(),
                    iterations: int = 0) -> FittedModel:
    theta = state.gamma / state.gamma.sum(axis=1, keepdims=True)
    beta = state.tau[:, 0] / state.tau.sum(axis=1)
    if state.omega is not None:
        omega = state.omega.copy()
    else:
        omega = state.rho / state.rho.sum(axis=1, keepdims=True)
    return FittedModel(theta_hat=theta, beta_hat=beta, omega_hat=omega, hyper=hyper,
                       elbo_trace=list(elbo_trace), iterations=iterations)


def _run(state, lay, hyper, config, trace, max_sweeps, callback):
    converged = False
    it = 0
    while it < max_sweeps:
        sweep(state, lay, hyper, config)
        it += 1
        val = _elbo(state, lay, hyper)
        if not np.isfinite(val):
            raise NumericalError(len(trace))
        prev = trace[-1]
        trace.append(val)
        if callback is not None:
            callback(len(trace) - 1, state, val)
        if abs(val - prev) <= config.rel_tol * abs(prev):
            converged = True
            break
    return converged


def fit(graph: Graph, behaviors: BehaviorData, config: FitConfig, callback=None):
    """Run variational EM to convergence.

    Returns ``(FittedModel, FitReport, VariationalState)``.  With
    ``n_init > 1``, that many random starts are each run for
    ``init_sweeps`` sweeps and only the one with the highest bound is
    carried on to convergence.
    """
    lay = Layout(graph, behaviors)
    hyper = config.hyperparams(behaviors.vocab_size)
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()
    best = None
    warm = config.max_iterations if config.n_init == 1 else min(config.init_sweeps,
                                                                config.max_iterations)
    for r in range(config.n_init):
        state = init_state(graph, behaviors, config, rng, layout=lay)
        trace = [_elbo(state, lay, hyper)]
        if not np.isfinite(trace[0]):
            raise NumericalError(0)
        converged = _run(state, lay, hyper, config, trace, warm, callback)
        log.debug("start %d: bound %.6f after %d sweeps", r, trace[-1], len(trace) - 1)
        if best is None or trace[-1] > best[1][-1]:
            best = (state, trace, converged)
    state, trace, converged = best
    if not converged:
        converged = _run(state, lay, hyper, config, trace,
                         config.max_iterations - (len(trace) - 1), callback)
    sweeps = config.n_init * warm + (len(trace) - 1 - warm) if config.n_init > 1 else len(trace) - 1
    report = FitReport(trace, converged, len(trace) - 1,
                       (time.perf_counter() - t0) / max(sweeps, 1))
    model = point_estimates(state, hyper, trace, len(trace) - 1)
    return model, report, state


# ---------------------------------------------------------------------------
# fold-in for held-out nodes
# ---------------------------------------------------------------------------


def _prior_mean(alpha: np.ndarray) -> np.ndarray:
    return alpha / alpha.sum()


def fold_in_theta_from_attributes(model: FittedModel, selections, tol: float = 1e-6,
                                  max_iter: int = 1000) -> np.ndarray:
    """Membership of a new node from its selections alone, topics held fixed.

    ``selections`` is a flat token list (repeats allowed).
    """
    alpha = model.hyper.alpha
    toks = np.asarray(selections, dtype=np.int64).reshape(-1)
    if toks.size == 0:
        return _prior_mean(alpha)
    V = model.omega_hat.shape[1]
    if toks.min() < 0 or toks.max() >= V:
        raise ValueError(f"tokens must lie in [0, {V})")
    uniq, cnt = np.unique(toks, return_counts=True)
    logw = np.log(model.omega_hat[:, uniq]).T  # (U, K)
    gamma = alpha + toks.size / alpha.size
    for _ in range(max_iter):
        r = normalize_log_simplex(logw + dirichlet_expect_log(gamma))
        new = alpha + cnt @ r
        done = np.max(np.abs(new - gamma)) < tol
        gamma = new
        if done:
            break
    return gamma / gamma.sum()


def fold_in_theta_from_links(model: FittedModel, neighbor_list, state=None,
                             tol: float = 1e-6, max_iter: int = 1000) -> np.ndarray:
    """Membership of a new node from its links to training nodes."""
    alpha = model.hyper.alpha
    nbrs = np.asarray(neighbor_list, dtype=np.int64).reshape(-1)
    if nbrs.size == 0:
        return _prior_mean(alpha)
    base = np.log(np.maximum(model.theta_hat[nbrs], 1e-300)) + np.log(model.beta_hat)
    gamma = alpha + nbrs.size / alpha.size
    for _ in range(max_iter):
        phi = normalize_log_simplex(base + dirichlet_expect_log(gamma))
        new = alpha + phi.sum(axis=0)
        done = np.max(np.abs(new - gamma)) < tol
        gamma = new
        if done:
            break
    return gamma / gamma.sum()


__all__ = [
    "FitConfig", "FitReport", "Layout", "NumericalError", "compute_elbo", "fit",
    "fold_in_theta_from_attributes", "fold_in_theta_from_links", "init_state",
    "non_link_overlap", "optimal_phi_bar", "point_estimates", "sweep", "topic_token_stats",
    "update_edge_phi", "update_gamma", "update_lambda_row", "update_node_block", "update_omega_direct",
    "update_phi_bar", "update_rho", "update_tau",
]
