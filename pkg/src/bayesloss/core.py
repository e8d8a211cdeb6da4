"""Domains, beliefs, statements, and the log-domain likelihood state.

The accounting machinery measures what an adversary learns about an object
from accepted query outputs.  Everything here is expressed over a candidate
universe: a prior belief assigns probability to each candidate, a statement
scores each candidate in [0, 1], and the likelihood state accumulates
log Pr(y_i | x) per candidate across accepted queries.

API summary:
    DiscreteDomain(candidates)          finite ordered candidate universe
    BoxDomain(lower, upper)             per-dimension bounds of a vector object
    Belief.uniform(domain) / from_probs normalized prior/posterior belief
    Statement(domain, correctness)      correctness function f: X -> [0, 1]
    LikelihoodState(domain)             accumulated log P(x) with query log
    posterior_belief(prior, mech, y)    Bayes update on one observed output
    statement_confidence(belief, f)     Q(f) = sum_x f(x) Q(x)
    knowledge_gain(prior, f, mech, y)   Q(f | y) / Q(f)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "DiscreteDomain",
    "BoxDomain",
    "Belief",
    "Statement",
    "LikelihoodState",
    "posterior_belief",
    "statement_confidence",
    "knowledge_gain",
]


# ---- domains ----


@dataclass(frozen=True)
class DiscreteDomain:
    """Ordered finite universe of candidate values.

    Candidates are opaque labels or numeric tuples; ordering is fixed at
    construction and shared by every array aligned with the domain.
    """

    candidates: tuple

    def __init__(self, candidates: Sequence[Any]):
        candidates = tuple(candidates)
        if not candidates:
            raise ValueError("domain must contain at least one candidate")
        if len(set(candidates)) != len(candidates):
            raise ValueError("candidates must be distinct")
        object.__setattr__(self, "candidates", candidates)

    def __len__(self) -> int:
        return len(self.candidates)

    def index(self, candidate) -> int:
        return self.candidates.index(candidate)

    def candidate_array(self) -> np.ndarray:
        """Candidates as an array (last axis = feature dim for tuples)."""
        return np.asarray(self.candidates)


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box of vector values: lower[i] <= x[i] <= upper[i]."""

    lower: np.ndarray
    upper: np.ndarray

    def __init__(self, lower, upper):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if lower.ndim != 1 or lower.shape != upper.shape:
            raise ValueError("lower and upper must be equal-length vectors")
        if lower.size < 1:
            raise ValueError("domain dimension must be >= 1")
        if np.any(lower > upper):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def grid(self, points_per_dim: int) -> np.ndarray:
        """Dense evaluation grid of shape (points_per_dim**dim, dim)."""
        axes = [
            np.linspace(lo, hi, points_per_dim)
            for lo, hi in zip(self.lower, self.upper)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


# ---- beliefs and statements ----


@dataclass
class Belief:
    """Normalized belief over a discrete domain, stored in log domain.

    Attributes:
        domain: the candidate universe the weights are aligned with.
        log_weights: array of log Q(x), normalized so sum exp = 1.
            Entries may be -inf (zero mass) but never NaN or +inf.
    """

    domain: DiscreteDomain
    log_weights: np.ndarray

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float)
        if lw.shape != (len(self.domain),):
            raise ValueError("log_weights length must match the domain")
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise ValueError("log weights must be finite or -inf")
        total = logsumexp(lw)
        if total == -np.inf:
            raise ValueError("belief has no mass")
        self.log_weights = lw - total

    @classmethod
    def uniform(cls, domain: DiscreteDomain) -> "Belief":
        return cls(domain, np.zeros(len(domain)))

    @classmethod
    def from_probs(cls, domain: DiscreteDomain, probs) -> "Belief":
        probs = np.asarray(probs, dtype=float)
        if np.any(probs < 0):
            raise ValueError("probabilities must be non-negative")
        with np.errstate(divide="ignore"):
            return cls(domain, np.log(probs))

    def probs(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def log_weight(self, candidate) -> float:
        return float(self.log_weights[self.domain.index(candidate)])


@dataclass(frozen=True)
class Statement:
    """Correctness function f: candidate -> [0, 1].

    f(x) is the degree to which the statement is true of candidate x; the
    confidence of a belief in the statement is sum_x f(x) Q(x).
    """

    domain: DiscreteDomain
    correctness: np.ndarray

    def __init__(self, domain: DiscreteDomain, correctness):
        f = np.asarray(correctness, dtype=float)
        if f.shape != (len(domain),):
            raise ValueError("correctness length must match the domain")
        if np.any(f < 0) or np.any(f > 1):
            raise ValueError("correctness values must lie in [0, 1]")
        if not np.any(f > 0):
            raise ValueError("statement must be true of at least one candidate")
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "correctness", f)

    @classmethod
    def indicator(cls, domain: DiscreteDomain, members) -> "Statement":
        members = set(members)
        return cls(domain, [1.0 if c in members else 0.0 for c in domain.candidates])


# ---- accumulated likelihood ----


@dataclass
class LikelihoodState:
    """Accumulated log P(x) = sum_i log Pr(M_i(x) = y_i | x) per candidate.

    P(x) = 1 for every candidate at initialization.  After each accepted
    query the state is renormalized by subtracting the finite minimum of
    log_p; realized loss (max - min) is invariant to the shift and the
    entries stay small over long compositions.

    Attributes:
        domain: candidate universe.
        log_p: array of accumulated log-likelihoods, finite or -inf.
        query_log: one (mechanism, output) record per accepted query; the
            full mechanism is kept because grouped loss bounds need the
            likelihoods, not just the declared epsilon.
    """

    domain: DiscreteDomain
    log_p: np.ndarray = field(default=None)
    query_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.log_p is None:
            self.log_p = np.zeros(len(self.domain))
        else:
            self.log_p = np.asarray(self.log_p, dtype=float)
            if self.log_p.shape != (len(self.domain),):
                raise ValueError("log_p length must match the domain")

    def update(self, mech, output) -> None:
        """Fold log Pr(output | x) into the state and renormalize."""
        ll = np.asarray(
            mech.log_likelihood(output, self.domain.candidate_array()), dtype=float
        )
        if ll.shape != self.log_p.shape:
            raise ValueError("mechanism likelihood shape does not match domain")
        self.log_p = self.log_p + ll
        finite = np.isfinite(self.log_p)
        if not np.any(finite):
            raise ValueError("output has zero probability under every candidate")
        self.log_p = self.log_p - np.min(self.log_p[finite])
        self.query_log.append((mech, output))

    def log_loss(self) -> float:
        """log L = max log_p - min log_p; +inf if any candidate is ruled out."""
        finite = np.isfinite(self.log_p)
        if not np.all(finite):
            return np.inf
        return float(np.max(self.log_p) - np.min(self.log_p))

    def copy(self) -> "LikelihoodState":
        return LikelihoodState(self.domain, self.log_p.copy(), list(self.query_log))


# ---- belief operations ----


def posterior_belief(prior: Belief, mech, output) -> Belief:
    """Bayes update of a belief on one observed mechanism output.

    Args:
        prior: normalized belief over the mechanism's candidate domain.
        mech: mechanism exposing outputs and log_likelihood(output, values).
        output: the observed value; must be in mech's output set.

    Returns:
        Normalized posterior, proportional to Pr(output | x) Q(x).

    Raises:
        ValueError: output outside the mechanism's range, or the posterior
            has zero total mass (degenerate evidence).
    """
    if output not in mech.outputs:
        raise ValueError(f"output {output!r} not in mechanism range")
    ll = np.asarray(
        mech.log_likelihood(output, prior.domain.candidate_array()), dtype=float
    )
    log_post = prior.log_weights + ll
    if logsumexp(log_post) == -np.inf:
        raise ValueError("degenerate evidence: posterior mass is zero")
    return Belief(prior.domain, log_post)


def statement_confidence(belief: Belief, stmt: Statement) -> float:
    """Q(f) = sum_x f(x) Q(x), in [0, 1]."""
    value = float(np.exp(belief.log_weights) @ stmt.correctness)
    return min(max(value, 0.0), 1.0)


def knowledge_gain(prior: Belief, stmt: Statement, mech, output) -> float:
    """Ratio of posterior to prior confidence, Q(f | y) / Q(f).

    Raises:
        ValueError: the prior confidence Q(f) is zero (the ratio is
            undefined; the learning limit quantifies over Q(f) > 0).
    """
    q_prior = statement_confidence(prior, stmt)
    if q_prior == 0.0:
        raise ValueError("prior confidence is zero; knowledge gain undefined")
    q_post = statement_confidence(posterior_belief(prior, mech, output), stmt)
    return q_post / q_prior
