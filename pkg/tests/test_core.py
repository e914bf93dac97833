import math

import numpy as np
import pytest
import scipy.special as sc

from clsm.core import (BehaviorData, DegenerateError, DomainError, Graph, Hyperparams,
                       StateError, beta_expect_logs, digamma, dirichlet_expect_log,
                       normalize_log_simplex)
from clsm.inference import FitConfig, init_state


@pytest.mark.parametrize("x, expected", [
    (1.0, -0.5772156649),
    (2.0, 0.4227843351),
    (0.5, -1.9635100260),
])
def test_digamma_reference_values(x, expected):
    assert digamma(x) == pytest.approx(expected, abs=1e-10)


def test_digamma_against_scipy_on_wide_grid():
    x = np.concatenate([np.geomspace(1e-6, 1.0, 400), np.linspace(1.0, 1e4, 400)])
    assert np.max(np.abs(digamma(x) - sc.digamma(x))) <= 1e-10 * np.maximum(1, np.abs(sc.digamma(x))).max()


def test_digamma_absolute_error_for_moderate_arguments():
    x = np.linspace(1e-3, 50, 2000)
    assert np.max(np.abs(digamma(x) - sc.digamma(x))) <= 1e-10


def test_digamma_recurrence_on_random_grid():
    x = np.random.default_rng(0).uniform(0.1, 100, 5000)
    assert np.max(np.abs(digamma(x + 1) - digamma(x) - 1 / x)) <= 1e-9


@pytest.mark.parametrize("bad", [0.0, -1.0, -0.5, float("nan")])
def test_digamma_rejects_non_positive(bad):
    with pytest.raises(DomainError):
        digamma(bad)


@pytest.mark.parametrize("params, expected", [
    ([1, 1], [-1.0, -1.0]),
    ([2, 2], [-5 / 6, -5 / 6]),
    ([3], [0.0]),
])
def test_dirichlet_expect_log_examples(params, expected):
    np.testing.assert_allclose(dirichlet_expect_log(params), expected, atol=1e-12)


def test_dirichlet_expect_log_is_negative_for_several_components():
    p = np.random.default_rng(1).uniform(0.01, 50, (200, 4))
    assert np.all(dirichlet_expect_log(p) < 0)


@pytest.mark.parametrize("bad", [[], [1.0, 0.0], [-2.0, 1.0]])
def test_dirichlet_expect_log_errors(bad):
    with pytest.raises(DomainError):
        dirichlet_expect_log(bad)


@pytest.mark.parametrize("tau, expected", [
    ((1, 1), (-1.0, -1.0)),
    ((2, 1), (-0.5, -1.5)),
    ((1, 2), (-1.5, -0.5)),
])
def test_beta_expect_logs_examples(tau, expected):
    assert beta_expect_logs(tau) == pytest.approx(expected, abs=1e-12)


def test_beta_expect_logs_matches_numerical_integration():
    from scipy import integrate, stats
    a, b = 2.7, 0.6
    dist = stats.beta(a, b)
    l1 = integrate.quad(lambda t: np.log(t) * dist.pdf(t), 0, 1)[0]
    l0 = integrate.quad(lambda t: np.log1p(-t) * dist.pdf(t), 0, 1)[0]
    assert beta_expect_logs((a, b)) == pytest.approx((l1, l0), abs=1e-7)


@pytest.mark.parametrize("bad", [(0, 1), (1, -1)])
def test_beta_expect_logs_errors(bad):
    with pytest.raises(DomainError):
        beta_expect_logs(bad)


@pytest.mark.parametrize("logw, expected", [
    ([0, 0], [0.5, 0.5]),
    ([math.log(3), 0.0], [0.75, 0.25]),
    ([1000, 1000 + math.log(4)], [0.2, 0.8]),
])
def test_normalize_log_simplex_examples(logw, expected):
    np.testing.assert_allclose(normalize_log_simplex(logw), expected, atol=1e-12)


def test_normalize_log_simplex_handles_large_magnitudes():
    out = normalize_log_simplex([-700.0, 700.0, 699.0])
    assert np.isfinite(out).all() and abs(out.sum() - 1) <= 1e-12


def test_normalize_log_simplex_all_minus_infinity():
    with pytest.raises(DegenerateError):
        normalize_log_simplex([-np.inf, -np.inf])


def test_normalize_log_simplex_keeps_exact_ties():
    out = normalize_log_simplex([0.3, 0.3, 0.3])
    assert out[0] == out[1] == out[2]


def test_graph_dedups_and_builds_sorted_adjacency():
    g = Graph(4, [(2, 0), (0, 2), (1, 2), (3, 2)])
    assert g.num_edges == 3
    assert g.adjacency(2).tolist() == [0, 1, 3]
    assert g.degrees.tolist() == [1, 1, 3, 1]
    assert g.has_edge(0, 2) and g.has_edge(2, 0) and not g.has_edge(0, 1)
    assert g.num_non_links() == 6 - 3
    for n in range(4):
        for e in g.incident_edges(n):
            assert n in g.edges[e]


def test_graph_rejects_self_loops_and_out_of_range():
    with pytest.raises(ValueError):
        Graph(3, [(1, 1)])
    with pytest.raises(ValueError):
        Graph(3, [(0, 3)])


def test_graph_edge_index_round_trip():
    g = Graph(5, [(0, 4), (1, 3), (3, 4)])
    for e, (a, b) in enumerate(g.edges):
        assert g.edge_index(a, b) == e == g.edge_index(b, a)


def test_subgraph_keeps_only_internal_edges():
    g = Graph(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    sub = g.subgraph([1, 2, 4])
    assert sub.num_nodes == 3
    assert sub.edges.tolist() == [[0, 1]]


def test_behavior_data_aggregates_and_totals():
    b = BehaviorData(3, 6, [[(5, 3), (1, 1), (5, 2)], [], [(0, 1)]])
    assert b.selections(0) == [(1, 1), (5, 5)]
    assert b.totals.tolist() == [6, 0, 1]
    assert sorted(b.token_list(0).tolist()) == [1] + [5] * 5


@pytest.mark.parametrize("sel", [[[(6, 1)]], [[(0, 0)]], [[(-1, 1)]]])
def test_behavior_data_rejects_bad_entries(sel):
    with pytest.raises(ValueError):
        BehaviorData(1, 6, sel)


def test_hyperparams_validation():
    Hyperparams.symmetric(2, 3)
    with pytest.raises(ValueError):
        Hyperparams.symmetric(2, 3, epsilon=0.5)
    with pytest.raises(ValueError):
        Hyperparams.symmetric(2, 3, epsilon=0.0)
    with pytest.raises(ValueError):
        Hyperparams(alpha=[1, 0], eta=(1, 1), kappa=[1], epsilon=0.1)
    with pytest.raises(ValueError):
        Hyperparams(alpha=[1], eta=(0, 1), kappa=[1], epsilon=0.1)


def test_symmetric_alpha_has_unit_precision():
    h = Hyperparams.symmetric(4, 3)
    np.testing.assert_allclose(h.alpha, 0.25)
    assert h.alpha.sum() == pytest.approx(1.0)


def test_state_check_detects_violations(small_data):
    graph, behaviors, _ = small_data
    state = init_state(graph, behaviors, FitConfig(3, seed=2))
    state.check(graph, behaviors)
    bad = state.copy()
    bad.gamma[0, 0] = 0.0
    with pytest.raises(StateError):
        bad.check(graph, behaviors)
    bad = state.copy()
    bad.phi_edge[0] *= 2
    with pytest.raises(StateError):
        bad.check(graph, behaviors)
    bad = state.copy()
    bad.lam[:2] = 0.7
    with pytest.raises(StateError):
        bad.check(graph, behaviors)
    bad = state.copy()
    bad.rho[1, 1] = -1.0
    with pytest.raises(StateError):
        bad.check(graph, behaviors)


def test_lambda_block_shape_is_entries_by_degree(small_data):
    graph, behaviors, _ = small_data
    state = init_state(graph, behaviors, FitConfig(3))
    for n in range(graph.num_nodes):
        block = state.lambda_block(n, graph, behaviors)
        entries = behaviors.indptr[n + 1] - behaviors.indptr[n]
        assert block.shape == (entries, graph.degree(n))
