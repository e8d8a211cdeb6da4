"""Walk expectations, Markov model, and estimator covariance."""

import math

import numpy as np
import pytest

from bayesloss import (
    WalkConfig,
    build_transition_model,
    composition_estimator,
    covariance_ratio,
    expected_queries_closed_form,
    expected_queries_fixed_budget,
    expected_queries_markov,
    forward_probability_matrix,
    inverse_probability_matrix,
    markov_expectation,
    simulate_walk_steps,
    state_space_size,
)
from bayesloss.analysis import MAX_STATES


# ---- state space and transition model ----


def test_state_space_size_small_cases():
    # m=2, k=2: transient (0,0),(0,1),(1,0); terminal (2,0),(0,2)
    assert state_space_size(2, 2) == 5
    assert state_space_size(2, 1) == 3
    assert state_space_size(3, 2) == 7 + 3 * 3


@pytest.mark.parametrize("m,k", [(2, 2), (2, 5), (3, 3), (4, 2)])
def test_model_matches_size_formula(m, k):
    model = build_transition_model(WalkConfig(m, k, 0.5))
    assert len(model.states) == state_space_size(m, k)
    n_terminal = m * (k ** (m - 1) - (k - 1) ** (m - 1))
    assert int(model.terminal.sum()) == n_terminal
    assert model.states[model.initial] == (0,) * m


@pytest.mark.parametrize("m,k", [(2, 3), (3, 2)])
def test_model_columns_are_stochastic_and_absorbing(m, k):
    model = build_transition_model(WalkConfig(m, k, 1.0))
    col_sums = np.asarray(model.matrix.sum(axis=0)).ravel()
    assert np.allclose(col_sums, 1.0, atol=1e-12)
    # terminal states only map to themselves
    dense = model.matrix.toarray()
    for z in np.flatnonzero(model.terminal):
        col = dense[:, z]
        assert col[z] == 1.0 and col.sum() == 1.0


def test_model_first_step_probabilities():
    model = build_transition_model(WalkConfig(2, 3, 1.0))
    e = math.e
    idx = {s: i for i, s in enumerate(model.states)}
    dense = model.matrix.toarray()
    j = idx[(0, 0)]
    assert dense[idx[(1, 0)], j] == pytest.approx(e / (1 + e), abs=1e-12)
    assert dense[idx[(0, 1)], j] == pytest.approx(1 / (1 + e), abs=1e-12)


def test_state_space_guard_trips():
    cfg = WalkConfig(6, 20, 0.5)
    assert state_space_size(6, 20) > MAX_STATES
    with pytest.raises(ValueError):
        build_transition_model(cfg)


# ---- closed forms ----


def test_closed_form_values():
    assert expected_queries_closed_form(1, 0.3) == 1.0
    assert expected_queries_closed_form(2, 1.0) == pytest.approx(
        3.2961085473277714, rel=1e-12)


def test_closed_form_large_k_slope():
    # E[n]/k approaches coth(eps/2) = (e^eps + 1)/(e^eps - 1) as k grows
    eps = 1.0
    value = expected_queries_closed_form(200, eps)
    limit = (math.exp(eps) + 1.0) / (math.exp(eps) - 1.0)
    assert value / 200 == pytest.approx(limit, abs=1e-9)


def test_closed_form_validation():
    with pytest.raises(ValueError):
        expected_queries_closed_form(0, 1.0)
    with pytest.raises(ValueError):
        expected_queries_closed_form(2, 0.0)
    with pytest.raises(ValueError):
        expected_queries_fixed_budget(0, 1.0)
    with pytest.raises(ValueError):
        expected_queries_fixed_budget(2, -1.0)


def test_fixed_budget_values():
    assert expected_queries_fixed_budget(1, 1.0) == 1.0
    assert expected_queries_fixed_budget(3, 1.0) == pytest.approx(
        8.394986104417486, rel=1e-12)
    # the small-budget limit of E[n] with per-query eps = eps_g/k is k^2
    assert expected_queries_fixed_budget(5, 1e-4) == pytest.approx(25.0,
                                                                   abs=0.01)
    assert expected_queries_fixed_budget(8, 1e-4) == pytest.approx(64.0,
                                                                   abs=0.01)


# ---- markov vs closed form ----


@pytest.mark.parametrize("eps", [0.25, 0.5, 1.0, 2.0])
def test_markov_matches_closed_form(eps):
    for k in range(1, 16):
        closed = expected_queries_closed_form(k, eps)
        markov = expected_queries_markov(WalkConfig(2, k, eps))
        assert markov == pytest.approx(closed, rel=1e-4)


def test_markov_diagnostics():
    res = markov_expectation(WalkConfig(2, 3, 0.5, theta=1e-6))
    assert res.converged
    assert res.iterations >= 3  # absorption needs at least k steps
    assert res.absorbed_mass == pytest.approx(1.0, abs=1e-5)


# ---- simulation ----


def test_simulation_agrees_with_closed_form():
    cfg = WalkConfig(2, 3, 0.5)
    steps = simulate_walk_steps(cfg, 40_000, np.random.default_rng(7))
    closed = expected_queries_closed_form(3, 0.5)
    se = steps.std(ddof=1) / math.sqrt(steps.size)
    assert abs(steps.mean() - closed) <= 3.0 * se
    assert steps.min() >= 3  # k accepted queries are needed to stop


def test_simulation_agrees_with_markov_m3():
    cfg = WalkConfig(3, 2, 0.8)
    steps = simulate_walk_steps(cfg, 40_000, np.random.default_rng(11))
    markov = expected_queries_markov(cfg)
    se = steps.std(ddof=1) / math.sqrt(steps.size)
    assert abs(steps.mean() - markov) <= 3.0 * se


def test_simulation_step_cap_raises():
    with pytest.raises(RuntimeError):
        simulate_walk_steps(WalkConfig(2, 2, 0.5), 10,
                            np.random.default_rng(0), step_cap=1)


# ---- probability matrices and the frequency estimator ----


@pytest.mark.parametrize("m,eps", [(2, 0.5), (3, 1.0), (5, 2.0)])
def test_inverse_matrix_inverts_forward(m, eps):
    fwd = forward_probability_matrix(m, eps)
    inv = inverse_probability_matrix(m, eps)
    assert np.allclose(fwd @ inv, np.eye(m), atol=1e-9)
    assert np.allclose(inv @ fwd, np.eye(m), atol=1e-9)


def test_inverse_matrix_m2_ln3():
    inv = inverse_probability_matrix(2, math.log(3.0))
    assert np.allclose(inv, [[1.5, -0.5], [-0.5, 1.5]], atol=1e-12)


def test_matrix_validation():
    with pytest.raises(ValueError):
        forward_probability_matrix(1, 1.0)
    with pytest.raises(ValueError):
        inverse_probability_matrix(3, 0.0)


def test_estimator_single_response():
    est = composition_estimator([2], 4, 1.0)
    e = math.e
    expect = np.full(4, -1.0 / (e - 1.0))
    expect[2] = (e + 2.0) / (e - 1.0)
    assert np.allclose(est, expect, atol=1e-12)
    assert est.sum() == pytest.approx(1.0, abs=1e-9)


def test_estimator_validation():
    with pytest.raises(ValueError):
        composition_estimator([], 3, 1.0)
    with pytest.raises(ValueError):
        composition_estimator([3], 3, 1.0)
    with pytest.raises(ValueError):
        composition_estimator([-1], 3, 1.0)


def test_estimator_is_unbiased_monte_carlo():
    m, eps, true = 4, 1.0, 2
    rng = np.random.default_rng(21)
    probs = forward_probability_matrix(m, eps)[true]
    responses = rng.choice(m, size=1_000_000, p=probs)
    est = composition_estimator(responses, m, eps)
    target = np.zeros(m)
    target[true] = 1.0
    assert np.allclose(est, target, atol=0.01)


# ---- covariance ratio ----


def test_covariance_ratio_values():
    assert covariance_ratio(2, 1, 1.0) == 1.0
    assert covariance_ratio(5, 1, 0.3) == 1.0
    assert covariance_ratio(2, 3, 1.0) == pytest.approx(1.0720684808833874,
                                                        rel=1e-12)


def test_covariance_ratio_never_below_one():
    for m in (2, 3):
        for k in (2, 3, 4):
            assert covariance_ratio(m, k, 1.0) >= 1.0 - 1e-9


def test_covariance_ratio_m3_uses_markov():
    ratio = covariance_ratio(3, 2, 1.0)
    expected = 4.0 / expected_queries_markov(WalkConfig(3, 2, 0.5))
    assert ratio == pytest.approx(expected, rel=1e-12)


# ---- config validation ----


def test_walk_config_validation():
    with pytest.raises(ValueError):
        WalkConfig(1, 2, 0.5)
    with pytest.raises(ValueError):
        WalkConfig(2, 0, 0.5)
    with pytest.raises(ValueError):
        WalkConfig(2, 2, 0.0)
    with pytest.raises(ValueError):
        WalkConfig(2, 2, 0.5, theta=0.0)
    with pytest.raises(ValueError):
        WalkConfig(2, 2, 0.5, theta=0.01)
