"""Shared domain types and the special-function / simplex helpers used by
every update in the model.

Graphs and behaviors are stored in compressed (CSR-like) form so that the
inference code can address a node's incident edges and its selections with
plain slices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EULER_GAMMA = 0.57721566490153286061


class DomainError(ValueError):
    """Argument outside the domain of a math routine."""


class DegenerateError(ValueError):
    """Input that carries no usable mass (e.g. all weights are -inf)."""


class StateError(ValueError):
    """Variational state that violates its invariants."""


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------

# Bernoulli-number coefficients of the asymptotic expansion of psi(x) in
# powers of 1/x^2: B_{2j} / (2j).
_ASYMP = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
)


def _digamma_unchecked(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=np.float64, copy=True)
    acc = np.zeros_like(x)
    # upward recurrence psi(x) = psi(x + 1) - 1/x until every entry is >= 6
    small = x < 6.0
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < 6.0
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for c in reversed(_ASYMP):
        series = (series + c) * inv2
    return acc + np.log(x) - 0.5 / x - series


def digamma(x):
    """Digamma function psi(x) for positive arguments (scalar or array)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and not np.all(arr > 0):
        raise DomainError("digamma is only defined here for x > 0")
    out = _digamma_unchecked(arr)
    if np.ndim(x) == 0:
        return float(out)
    return out


def dirichlet_expect_log(params) -> np.ndarray:
    """E[log x] under Dirichlet(params); the last axis is the simplex axis."""
    p = np.asarray(params, dtype=np.float64)
    if p.size == 0 or p.shape[-1] == 0:
        raise DomainError("empty Dirichlet parameter vector")
    if not np.all(p > 0):
        raise DomainError("Dirichlet parameters must be positive")
    return _digamma_unchecked(p) - _digamma_unchecked(p.sum(axis=-1, keepdims=True))


def beta_expect_logs(tau_row) -> tuple[float, float]:
    """(E[log b], E[log(1 - b)]) for b ~ Beta(tau_row[0], tau_row[1])."""
    a, b = (float(v) for v in tau_row)
    if not (a > 0 and b > 0):
        raise DomainError("Beta parameters must be positive")
    d = _digamma_unchecked(np.array([a, b, a + b]))
    return float(d[0] - d[2]), float(d[1] - d[2])


def beta_expect_logs_rows(tau: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`beta_expect_logs` over the rows of a (K, 2) array."""
    tau = np.asarray(tau, dtype=np.float64)
    if not np.all(tau > 0):
        raise DomainError("Beta parameters must be positive")
    tot = _digamma_unchecked(tau.sum(axis=1))
    d = _digamma_unchecked(tau)
    return d[:, 0] - tot, d[:, 1] - tot


def normalize_log_simplex(log_weights) -> np.ndarray:
    """Softmax along the last axis, computed with a max shift."""
    lw = np.asarray(log_weights, dtype=np.float64)
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise DomainError("log weights must be finite or -inf")
    m = lw.max(axis=-1, keepdims=True)
    if np.any(m == -np.inf):
        raise DegenerateError("all log weights are -inf")
    w = np.exp(lw - m)
    return w / w.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


class Graph:
    """Undirected simple graph with stable edge ids.

    ``edges`` is an (E, 2) array with ``u < v`` in each row, sorted
    lexicographically; edge ``e`` is row ``e``.  ``indptr``/``neighbors``/
    ``incident`` give, for each node, its sorted neighbours and the id of the
    edge joining it to each neighbour.
    """

    def __init__(self, num_nodes: int, edges: Iterable[Sequence[int]] = ()):
        num_nodes = int(num_nodes)
        if num_nodes < 1:
            raise ValueError("num_nodes must be positive")
        arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges,
                         dtype=np.int64).reshape(-1, 2)
        if arr.size:
            if arr.min() < 0 or arr.max() >= num_nodes:
                raise ValueError("edge endpoint out of range [0, num_nodes)")
            if np.any(arr[:, 0] == arr[:, 1]):
                raise ValueError("self-loops are not allowed")
            arr = np.sort(arr, axis=1)
            arr = np.unique(arr, axis=0)
        self.num_nodes = num_nodes
        self.edges = arr
        self.edges.setflags(write=False)

        n_e = len(arr)
        ends = np.concatenate([arr[:, 0], arr[:, 1]])
        other = np.concatenate([arr[:, 1], arr[:, 0]])
        eids = np.concatenate([np.arange(n_e), np.arange(n_e)])
        order = np.lexsort((other, ends))
        self.neighbors = other[order]
        self.incident = eids[order]
        counts = np.bincount(ends, minlength=num_nodes)
        self.indptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=self.indptr[1:])
        for a in (self.neighbors, self.incident, self.indptr):
            a.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def degree(self, n: int) -> int:
        return int(self.indptr[n + 1] - self.indptr[n])

    def adjacency(self, n: int) -> np.ndarray:
        return self.neighbors[self.indptr[n]:self.indptr[n + 1]]

    def incident_edges(self, n: int) -> np.ndarray:
        return self.incident[self.indptr[n]:self.indptr[n + 1]]

    def edge_index(self, a: int, b: int) -> int:
        """Id of the edge {a, b}; raises KeyError if absent."""
        nb = self.adjacency(a)
        i = int(np.searchsorted(nb, b))
        if i < len(nb) and nb[i] == b:
            return int(self.incident[self.indptr[a] + i])
        raise KeyError(f"no edge between {a} and {b}")

    def has_edge(self, a: int, b: int) -> bool:
        try:
            self.edge_index(a, b)
        except KeyError:
            return False
        return True

    def num_non_links(self) -> int:
        n = self.num_nodes
        return n * (n - 1) // 2 - self.num_edges

    def subgraph(self, nodes: Sequence[int]) -> "Graph":
        """Induced subgraph, relabelled so that ``nodes[i]`` becomes ``i``."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = np.full(self.num_nodes, -1, dtype=np.int64)
        remap[nodes] = np.arange(len(nodes))
        e = remap[self.edges]
        keep = (e >= 0).all(axis=1)
        return Graph(len(nodes), e[keep])

    def __eq__(self, other) -> bool:
        return (isinstance(other, Graph) and self.num_nodes == other.num_nodes
                and np.array_equal(self.edges, other.edges))

    def __repr__(self) -> str:
        return f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges})"


class BehaviorData:
    """Per-node multisets of token selections.

    Stored as distinct ``(token, count)`` entries per node, node-major, with
    ``indptr`` delimiting each node's entries.  Tokens within a node are
    sorted and unique.
    """

    def __init__(self, num_nodes: int, vocab_size: int, selections=None):
        self.num_nodes = int(num_nodes)
        self.vocab_size = int(vocab_size)
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        selections = selections if selections is not None else [[] for _ in range(self.num_nodes)]
        if len(selections) != self.num_nodes:
            raise ValueError("need one selection list per node")
        toks, cnts, lens = [], [], []
        for n, sel in enumerate(selections):
            agg: dict[int, int] = {}
            for tok, cnt in sel:
                tok, cnt = int(tok), int(cnt)
                if not 0 <= tok < self.vocab_size:
                    raise ValueError(f"token {tok} of node {n} outside [0, {self.vocab_size})")
                if cnt < 1:
                    raise ValueError(f"count {cnt} of node {n} must be >= 1")
                agg[tok] = agg.get(tok, 0) + cnt
            keys = sorted(agg)
            toks.extend(keys)
            cnts.extend(agg[k] for k in keys)
            lens.append(len(keys))
        self.tokens = np.asarray(toks, dtype=np.int64)
        self.counts = np.asarray(cnts, dtype=np.int64)
        self.indptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        np.cumsum(lens, out=self.indptr[1:])
        for a in (self.tokens, self.counts, self.indptr):
            a.setflags(write=False)

    @classmethod
    def from_token_lists(cls, num_nodes: int, vocab_size: int, token_lists) -> "BehaviorData":
        """Build from one flat token list (with repeats) per node."""
        sel = []
        for toks in token_lists:
            u, c = np.unique(np.asarray(toks, dtype=np.int64), return_counts=True)
            sel.append(list(zip(u.tolist(), c.tolist())))
        return cls(num_nodes, vocab_size, sel)

    @classmethod
    def empty(cls, num_nodes: int, vocab_size: int) -> "BehaviorData":
        return cls(num_nodes, vocab_size)

    @property
    def entry_nodes(self) -> np.ndarray:
        """Owning node of every stored entry."""
        return np.repeat(np.arange(self.num_nodes), np.diff(self.indptr))

    @property
    def totals(self) -> np.ndarray:
        """M_n for every node."""
        return np.bincount(self.entry_nodes, weights=self.counts,
                           minlength=self.num_nodes).astype(np.int64)

    @property
    def num_entries(self) -> int:
        return len(self.tokens)

    def selections(self, n: int) -> list[tuple[int, int]]:
        s = slice(self.indptr[n], self.indptr[n + 1])
        return list(zip(self.tokens[s].tolist(), self.counts[s].tolist()))

    def token_list(self, n: int) -> np.ndarray:
        """Node n's selections expanded into a flat token array."""
        s = slice(self.indptr[n], self.indptr[n + 1])
        return np.repeat(self.tokens[s], self.counts[s])

    def subset(self, nodes: Sequence[int]) -> "BehaviorData":
        return BehaviorData(len(nodes), self.vocab_size, [self.selections(int(n)) for n in nodes])

    def __eq__(self, other) -> bool:
        return (isinstance(other, BehaviorData) and self.num_nodes == other.num_nodes
                and self.vocab_size == other.vocab_size
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.tokens, other.tokens)
                and np.array_equal(self.counts, other.counts))

    def __repr__(self) -> str:
        return (f"BehaviorData(num_nodes={self.num_nodes}, vocab_size={self.vocab_size}, "
                f"total={int(self.counts.sum())})")


@dataclass(frozen=True)
class Hyperparams:
    """Fixed priors: alpha (K,), eta = (eta1, eta0), kappa (V,), epsilon."""

    alpha: np.ndarray
    eta: tuple[float, float]
    kappa: np.ndarray
    epsilon: float

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        kappa = np.asarray(self.kappa, dtype=np.float64).reshape(-1)
        eta = (float(self.eta[0]), float(self.eta[1]))
        if alpha.size < 1 or not np.all(alpha > 0):
            raise ValueError("alpha must be a nonempty positive vector")
        if kappa.size < 1 or not np.all(kappa > 0):
            raise ValueError("kappa must be a nonempty positive vector")
        if not (eta[0] > 0 and eta[1] > 0):
            raise ValueError("eta entries must be positive")
        if not 0.0 < float(self.epsilon) < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        alpha.setflags(write=False)
        kappa.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def num_topics(self) -> int:
        return self.alpha.size

    @property
    def vocab_size(self) -> int:
        return self.kappa.size

    @classmethod
    def symmetric(cls, num_topics: int, vocab_size: int, alpha_precision: float = 1.0,
                  eta=(1.0, 1.0), kappa_value: float = 0.1, epsilon: float = 1e-5) -> "Hyperparams":
        return cls(alpha=np.full(num_topics, alpha_precision / num_topics),
                   eta=tuple(eta), kappa=np.full(vocab_size, kappa_value), epsilon=epsilon)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Hyperparams) and np.array_equal(self.alpha, other.alpha)
                and self.eta == other.eta and np.array_equal(self.kappa, other.kappa)
                and self.epsilon == other.epsilon)


@dataclass
class FittedModel:
    """Point estimates recovered from a converged variational state."""

    theta_hat: np.ndarray
    beta_hat: np.ndarray
    omega_hat: np.ndarray
    hyper: Hyperparams
    elbo_trace: list = field(default_factory=list)
    iterations: int = 0

    @property
    def num_topics(self) -> int:
        return self.beta_hat.size

    def __eq__(self, other) -> bool:
        return (isinstance(other, FittedModel)
                and np.array_equal(self.theta_hat, other.theta_hat)
                and np.array_equal(self.beta_hat, other.beta_hat)
                and np.array_equal(self.omega_hat, other.omega_hat)
                and self.hyper == other.hyper
                and list(self.elbo_trace) == list(other.elbo_trace)
                and self.iterations == other.iterations)


@dataclass
class VariationalState:
    """Free parameters of the factorised posterior.

    ``lam`` holds every node's selector responsibilities in one flat array:
    stored entry ``j`` (a distinct token of node ``n``) owns the slice
    ``lam[lam_indptr[j]:lam_indptr[j + 1]]``, one weight per edge incident
    to ``n`` in adjacency order.  Entries of degree-0 nodes own no slice:
    such a node explains all its selections with one fresh indicator whose
    responsibilities are the rows of ``loose`` (one per node listed in
    ``fresh_nodes``).  ``omega`` is set only when topics are point
    estimates instead of Dirichlet posteriors.
    """

    gamma: np.ndarray
    phi_edge: np.ndarray
    phi_bar: np.ndarray
    lam: np.ndarray
    lam_indptr: np.ndarray
    loose: np.ndarray
    fresh_nodes: np.ndarray
    tau: np.ndarray
    rho: np.ndarray
    omega: np.ndarray | None = None
    omega_prior: float | None = None

    @property
    def num_topics(self) -> int:
        return self.gamma.shape[1]

    def copy(self) -> "VariationalState":
        return VariationalState(
            gamma=self.gamma.copy(), phi_edge=self.phi_edge.copy(),
            phi_bar=self.phi_bar.copy(), lam=self.lam.copy(),
            lam_indptr=self.lam_indptr, loose=self.loose.copy(),
            fresh_nodes=self.fresh_nodes, tau=self.tau.copy(), rho=self.rho.copy(),
            omega=None if self.omega is None else self.omega.copy(),
            omega_prior=self.omega_prior)

    def permute_topics(self, perm) -> "VariationalState":
        """Copy with topic ``k`` relabelled as ``perm[k]``'s old column."""
        perm = np.asarray(perm)
        out = self.copy()
        out.gamma = out.gamma[:, perm]
        out.phi_edge = out.phi_edge[:, perm]
        out.phi_bar = out.phi_bar[:, perm]
        out.loose = out.loose[:, perm]
        out.tau = out.tau[perm]
        out.rho = out.rho[perm]
        if out.omega is not None:
            out.omega = out.omega[perm]
        return out

    def lambda_block(self, n: int, graph: Graph, behaviors: BehaviorData) -> np.ndarray:
        """Node n's (entries x degree) row-stochastic selector matrix."""
        j0, j1 = behaviors.indptr[n], behaviors.indptr[n + 1]
        block = self.lam[self.lam_indptr[j0]:self.lam_indptr[j1]]
        return block.reshape(j1 - j0, graph.degree(n))

    def check(self, graph: Graph, behaviors: BehaviorData, atol: float = 1e-10) -> None:
        """Raise StateError if any invariant is violated."""
        K = self.num_topics
        if self.gamma.shape != (graph.num_nodes, K) or not np.all(self.gamma > 0):
            raise StateError("gamma must be a positive N x K matrix")
        if self.phi_edge.shape != (graph.num_edges, K):
            raise StateError("phi_edge must have one row per edge")
        if self.loose.shape != (len(self.fresh_nodes), K):
            raise StateError("loose must have one row per fresh node")
        for name, m in (("phi_edge", self.phi_edge), ("phi_bar", self.phi_bar),
                        ("loose", self.loose)):
            if m.size and (np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1) > atol)):
                raise StateError(f"{name} rows must lie on the simplex")
        if self.tau.shape != (K, 2) or not np.all(self.tau > 0):
            raise StateError("tau must be a positive K x 2 matrix")
        if self.rho.shape != (K, behaviors.vocab_size) or not np.all(self.rho > 0):
            raise StateError("rho must be a positive K x V matrix")
        if self.omega is not None and (not np.all(self.omega > 0)
                                       or np.any(np.abs(self.omega.sum(1) - 1) > atol)):
            raise StateError("omega rows must be strictly positive simplex vectors")
        lens = np.diff(self.lam_indptr)
        expect = graph.degrees[behaviors.entry_nodes]
        if not np.array_equal(lens, expect):
            raise StateError("lambda column counts must equal node degrees")
        if np.any(self.lam < 0):
            raise StateError("lambda entries must be non-negative")
        linked = lens > 0
        if linked.any():
            sums = np.add.reduceat(self.lam, self.lam_indptr[:-1][linked])
            if np.any(np.abs(sums - 1) > atol):
                raise StateError("lambda rows must sum to one")
        if not np.all(np.isfinite(self.gamma)) or not np.all(np.isfinite(self.rho)):
            raise StateError("non-finite parameters")
