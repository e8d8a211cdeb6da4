"""Composing identical randomized responses: expectations and estimator variance.

A greedy stream of identical epsilon-DP randomized responses against one
object, gated by a (simplified) Bayesian privacy filter with budget k*eps,
is a random walk over the normalized exponent tuple of the likelihood map P:
output y bumps the exponent of candidate y, the tuple is re-normalized so its
minimum is zero, and the walk stops once one entry reaches k.  This module
computes the expected number of accepted queries three ways (closed form for
m=2, absorbing Markov chain for general m, Monte Carlo simulation) and the
covariance comparison between a single randomized response and a Bayesian
composition of weaker ones.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

__all__ = [
    "WalkConfig",
    "TransitionModel",
    "MarkovResult",
    "build_transition_model",
    "expected_queries_closed_form",
    "expected_queries_markov",
    "expected_queries_fixed_budget",
    "markov_expectation",
    "simulate_walk_steps",
    "inverse_probability_matrix",
    "forward_probability_matrix",
    "composition_estimator",
    "covariance_ratio",
    "state_space_size",
]

MAX_STATES = 10**6


@dataclass(frozen=True)
class WalkConfig:
    """Random-walk parameters: universe size m, budget multiplier k, per-query eps."""

    m: int
    k: int
    eps: float
    theta: float = 1e-9
    max_iter: int = 10**6

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("universe size must be >= 2")
        if self.k < 1:
            raise ValueError("budget multiplier must be >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.theta <= 1e-3:
            raise ValueError("theta must lie in (0, 1e-3]")


@dataclass
class TransitionModel:
    """Enumerated walk states with a column-stochastic transition matrix.

    matrix[i, j] is the probability of moving from state j to state i in one
    step; terminal states are absorbing (unit diagonal).
    """

    states: list
    matrix: sp.csr_matrix
    terminal: np.ndarray
    initial: int


@dataclass(frozen=True)
class MarkovResult:
    value: float
    iterations: int
    converged: bool
    absorbed_mass: float


def state_space_size(m: int, k: int) -> int:
    """Transient plus terminal state count of the exponent-tuple walk."""
    transient = k**m - (k - 1) ** m
    terminal = m * (k ** (m - 1) - (k - 1) ** (m - 1))
    return transient + terminal


def _normalize(tup):
    mn = min(tup)
    return tuple(v - mn for v in tup)


def build_transition_model(cfg: WalkConfig) -> TransitionModel:
    """Enumerate normalized exponent tuples and their transition matrix.

    Transient states have entries in 0..k-1 with minimum zero; terminal
    states have exactly one entry equal to k and minimum zero.  Transition
    probabilities are taken from the true value's perspective (candidate 0):
    output 0 occurs with probability e^eps / (m - 1 + e^eps), any other
    output with probability 1 / (m - 1 + e^eps).
    """
    m, k = cfg.m, cfg.k
    if state_space_size(m, k) > MAX_STATES:
        raise ValueError(
            f"state space {state_space_size(m, k)} exceeds guard {MAX_STATES}"
        )

    transient = [t for t in itertools.product(range(k), repeat=m) if min(t) == 0]
    terminal = []
    for pos in range(m):
        for rest in itertools.product(range(k), repeat=m - 1):
            if min(rest) != 0:
                continue
            state = rest[:pos] + (k,) + rest[pos:]
            terminal.append(state)
    states = transient + terminal
    index = {s: i for i, s in enumerate(states)}
    n_transient = len(transient)

    e = math.exp(cfg.eps)
    p_match = e / (m - 1 + e)
    p_other = 1.0 / (m - 1 + e)

    rows, cols, data = [], [], []
    for j, s in enumerate(transient):
        for y in range(m):
            bumped = list(s)
            bumped[y] += 1
            nxt = _normalize(bumped)
            rows.append(index[nxt])
            cols.append(j)
            data.append(p_match if y == 0 else p_other)
    for z in range(n_transient, len(states)):
        rows.append(z)
        cols.append(z)
        data.append(1.0)

    n = len(states)
    matrix = sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    terminal_mask = np.zeros(n, dtype=bool)
    terminal_mask[n_transient:] = True
    return TransitionModel(states, matrix, terminal_mask, index[(0,) * m])


def markov_expectation(cfg: WalkConfig) -> MarkovResult:
    """Expected steps to absorption, summed as sum_z sum_n n (s_n[z] - s_{n-1}[z]).

    Iterates the state distribution until max |s_n - s_{n-1}| <= theta or the
    iteration cap is hit.
    """
    model = build_transition_model(cfg)
    t_mat = model.matrix
    s = np.zeros(len(model.states))
    s[model.initial] = 1.0
    terminal = model.terminal
    expectation = 0.0
    absorbed = 0.0
    converged = False
    n = 0
    for n in range(1, cfg.max_iter + 1):
        s_next = t_mat @ s
        new_absorbed = float(s_next[terminal].sum())
        expectation += n * (new_absorbed - absorbed)
        delta = float(np.max(np.abs(s_next - s)))
        absorbed = new_absorbed
        s = s_next
        if delta <= cfg.theta:
            converged = True
            break
    return MarkovResult(expectation, n, converged, absorbed)


def expected_queries_markov(cfg: WalkConfig) -> float:
    """Expected accepted identical randomized responses, via the Markov chain."""
    return markov_expectation(cfg).value


def expected_queries_closed_form(k: int, eps: float) -> float:
    """Expected accepted queries for m = 2 with budget k*eps.

    Algebraically equal to
        (-k e^{-2 k eps} + 2 k e^{-k eps} - k)
        / (((e^eps - 1)/(e^eps + 1)) (e^{-2 k eps} - 1))
    rewritten with expm1/tanh so it stays stable for small k*eps.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if k == 1:
        return 1.0
    num = k * math.expm1(-k * eps) ** 2
    den = math.tanh(eps / 2.0) * (-math.expm1(-2.0 * k * eps))
    return num / den


def expected_queries_fixed_budget(k: int, eps_total: float) -> float:
    """Closed form with per-query eps = eps_total / k; tends to k^2 as eps_total -> 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if eps_total <= 0:
        raise ValueError("eps_total must be positive")
    if k == 1:
        return 1.0
    num = k * math.expm1(-eps_total) ** 2
    den = math.tanh(eps_total / (2.0 * k)) * (-math.expm1(-2.0 * eps_total))
    return num / den


def simulate_walk_steps(cfg: WalkConfig, trials: int, rng,
                        step_cap: Optional[int] = None) -> np.ndarray:
    """Monte Carlo accepted-query counts of the greedy identical-RR stream.

    Vectorized across trials; each trial walks the normalized exponent tuple
    until one entry reaches k.  Returns the per-trial step counts.
    """
    m, k = cfg.m, cfg.k
    e = math.exp(cfg.eps)
    probs = np.full(m, 1.0 / (m - 1 + e))
    probs[0] = e / (m - 1 + e)
    cum = np.cumsum(probs)
    cap = step_cap if step_cap is not None else max(100_000, 1000 * k * m)

    state = np.zeros((trials, m), dtype=np.int64)
    steps = np.zeros(trials, dtype=np.int64)
    active = np.arange(trials)
    for _ in range(cap):
        if active.size == 0:
            return steps
        y = np.searchsorted(cum, rng.random(active.size), side="right")
        sub = state[active]
        sub[np.arange(active.size), y] += 1
        sub -= sub.min(axis=1, keepdims=True)
        state[active] = sub
        steps[active] += 1
        done = sub.max(axis=1) == k
        active = active[~done]
    raise RuntimeError("walk simulation exceeded its step cap")


# ---- single response vs composition (estimator covariance) ----


def forward_probability_matrix(m: int, eps: float) -> np.ndarray:
    """P[i, j] = Pr(response x_j | true value x_i) of randomized response."""
    if m < 2 or eps <= 0:
        raise ValueError("need m >= 2 and eps > 0")
    e = math.exp(eps)
    mat = np.full((m, m), 1.0 / (m - 1 + e))
    np.fill_diagonal(mat, e / (m - 1 + e))
    return mat


def inverse_probability_matrix(m: int, eps: float) -> np.ndarray:
    """Inverse of the randomized-response probability matrix.

    With P = ((e^eps - 1) I + J) / (m - 1 + e^eps) and J the all-ones matrix,
    Sherman-Morrison gives P^-1 = ((m - 1 + e^eps) I - J) / (e^eps - 1), i.e.
    diagonal entries (e^eps + m - 2)/(e^eps - 1), off-diagonal -1/(e^eps - 1).
    These are the coefficients of the standard unbiased frequency estimator
    u_hat_j = (v_j - n/(m - 1 + e^eps)) / ((e^eps - 1)/(m - 1 + e^eps)).
    """
    if m < 2 or eps <= 0:
        raise ValueError("need m >= 2 and eps > 0")
    e = math.exp(eps)
    mat = np.full((m, m), -1.0 / (e - 1.0))
    np.fill_diagonal(mat, (e + m - 2.0) / (e - 1.0))
    return mat


def composition_estimator(responses, m: int, eps_per_query: float) -> np.ndarray:
    """Mean of per-response inverse-matrix estimates, (1/n) sum P^-1 v_i.

    Args:
        responses: sequence of response indices in [0, m).
        m: universe size.
        eps_per_query: DP bound of each composed randomized response.
    """
    responses = np.asarray(responses, dtype=int)
    if responses.size == 0:
        raise ValueError("at least one response is required")
    if np.any(responses < 0) or np.any(responses >= m):
        raise ValueError("response index out of range")
    inv = inverse_probability_matrix(m, eps_per_query)
    counts = np.bincount(responses, minlength=m).astype(float)
    return inv @ (counts / responses.size)


def covariance_ratio(m: int, k: int, eps_total: float) -> float:
    """Analytic covariance ratio k^2 / E[n] of composition vs single response.

    E[n] is the expected number of accepted eps_total/k responses: the m = 2
    closed form when available, otherwise the Markov expectation.
    """
    if k == 1:
        return 1.0
    if m == 2:
        expected = expected_queries_fixed_budget(k, eps_total)
    else:
        expected = expected_queries_markov(WalkConfig(m, k, eps_total / k))
    return k * k / expected
