"""Privacy filters and odometer over fully adaptive query compositions.

The accounting unit is realized loss L(y) = max_x P(x) / min_x P(x), where
P(x) multiplies the likelihoods of every accepted output.  A filter admits a
query only while L stays within exp(budget_eps) for every output the query
could produce; the odometer reports the budget actually consumed so far.

Discrete domains track L exactly through a LikelihoodState.  Box domains
track a certified upper bound through a ContinuousLedger, which groups
accepted queries and prices each group with one branch-and-bound solve.

Checks are pure (dry-run safe); executes re-verify the decision and raise
ContractViolation if called on a query the filter would reject.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import BoxDomain, DiscreteDomain, LikelihoodState
from .dcopt import (
    DEFAULT_DELTA,
    DEFAULT_GROUP_SIZE,
    DEFAULT_NODE_BUDGET,
    DcObjective,
    EnvelopeError,
    Infeasible,
    branch_and_bound_min,
)
from .mechanisms import MechanismSpec, dc_decompose, sample

__all__ = [
    "ACCEPT",
    "REJECT",
    "BAYESIAN",
    "SIMPLIFIED",
    "ContractViolation",
    "DecisionRecord",
    "QueryRecord",
    "ContinuousLedger",
    "FilterState",
    "BasicCompositionFilter",
    "ApproxFilterState",
    "OdometerReading",
    "fresh_filter",
    "approx_filter",
    "realized_loss",
    "bayesian_filter_check",
    "simplified_filter_check",
    "filter_execute",
    "submit",
    "approx_filter_check",
    "approx_submit",
    "odometer",
    "grouped_loss_upper_bound",
    "discrete_bound_oracle",
    "dc_bound_oracle",
    "trace_json_lines",
]

logger = logging.getLogger(__name__)

ACCEPT = "accept"
REJECT = "reject"
BAYESIAN = "bayesian"
SIMPLIFIED = "simplified"

# Non-strict budget comparisons get this much slack so boundary ties accept.
_TIE_SLACK = 1e-12


class ContractViolation(RuntimeError):
    """Execute was called for a query the filter did not accept."""


@dataclass
class DecisionRecord:
    """One filter decision, exportable as a JSON line."""

    query_id: str
    epsilon: float
    decision: str
    output: object
    log_loss_after: float

    def to_json(self) -> str:
        return json.dumps({
            "query_id": self.query_id,
            "epsilon": self.epsilon,
            "decision": self.decision,
            "output": self.output,
            "log_loss_after": self.log_loss_after,
        })


def trace_json_lines(records: Sequence[DecisionRecord]) -> str:
    return "\n".join(r.to_json() for r in records)


@dataclass(frozen=True)
class QueryRecord:
    """An accepted continuous query: DC terms of log Pr(output | x) plus metadata."""

    mech_id: str
    epsilon: float
    output: object
    f_terms: tuple
    g_terms: tuple

    @classmethod
    def from_mechanism(cls, mech: MechanismSpec, output) -> "QueryRecord":
        f_terms, g_terms = dc_decompose(mech.kind, mech.params, mech.epsilon, output)
        return cls(mech.id, mech.epsilon, output, tuple(f_terms), tuple(g_terms))


def _term_key(term) -> tuple:
    return (term.kind, tuple(np.asarray(term.theta, dtype=float).tolist()),
            term.offset, term.alpha, term.beta, term.cap, term.quad)


def _group_key(records) -> tuple:
    return tuple(_term_key(t) for q in records for t in q.f_terms + q.g_terms)


def _affine_image(theta, offset, domain: BoxDomain):
    theta = np.asarray(theta, dtype=float)
    center = theta @ domain.center() + offset
    half = np.abs(theta) @ ((domain.upper - domain.lower) / 2.0)
    return center - half, center + half


def _term_shape(t, u):
    if t.kind == "affine":
        return np.full_like(u, t.offset) if not np.any(t.theta) else u
    if t.kind == "neg-log-affine":
        return -np.log(t.alpha * u + t.beta)
    if t.kind == "neg-log-min-affine":
        return -np.log(np.minimum(t.alpha * u + t.beta, t.cap))
    if t.kind == "log-sum-exp-affine":
        return np.logaddexp(math.log(t.alpha) + u, math.log(t.beta))
    if t.kind == "log-square-reg":
        return np.log(t.alpha * u * u + t.beta) + t.quad * u * u
    if t.kind == "square":
        return t.quad * u * u
    raise ValueError(f"unknown term kind {t.kind!r}")


def record_log_range(record: QueryRecord, domain: BoxDomain) -> float:
    """Exact spread of the record's log-likelihood over the domain.

    Every supported likelihood rides one ramp direction u = theta.x + c and
    is monotone in u, or unimodal with its peak at u = 0, so the spread
    follows from the composite value at the u-interval endpoints (plus 0).
    Falls back to the declared epsilon, which bounds the spread of any
    epsilon-LDP output.
    """
    direction = None
    for t in record.f_terms + record.g_terms:
        if t.kind == "affine" and not np.any(t.theta):
            continue
        key = (tuple(np.asarray(t.theta, dtype=float).tolist()), float(t.offset))
        if direction is None:
            direction = key
        elif key != direction:
            return float(record.epsilon)
    if direction is None:
        return 0.0
    theta, offset = np.array(direction[0]), direction[1]
    ulo, uhi = _affine_image(theta, offset, domain)
    cand = [ulo, uhi] + ([0.0] if ulo <= 0.0 <= uhi else [])
    u = np.asarray(cand, dtype=float)
    vals = np.zeros_like(u)
    for t in record.f_terms:
        vals += (np.full_like(u, t.offset)
                 if t.kind == "affine" and not np.any(t.theta) else _term_shape(t, u))
    for t in record.g_terms:
        vals -= _term_shape(t, u)
    spread = float(vals.max() - vals.min())
    return min(spread, float(record.epsilon))


@dataclass
class ContinuousLedger:
    """Certified log-loss bound for accepted queries over a box domain.

    Queries are grouped in acceptance order; each full group's log spread
    (max - min of the summed log-likelihood) is priced once by
    branch-and-bound and folded into closed_log_bound.  The open partial
    group is priced on demand, optionally extended with hypothetical
    records for dry-run checks.  Solves are cached by term content, so an
    execute right after a check reuses the check's bound.
    """

    domain: BoxDomain
    group_size: int = DEFAULT_GROUP_SIZE
    bnb_delta: float = DEFAULT_DELTA
    node_budget: int = DEFAULT_NODE_BUDGET
    records: list = field(default_factory=list)
    closed_log_bound: float = 0.0
    _bound_cache: dict = field(default_factory=dict, repr=False)

    def open_records(self) -> list:
        n_closed = (len(self.records) // self.group_size) * self.group_size
        return self.records[n_closed:]

    def _group_bound(self, group) -> float:
        """Certified upper bound on the group's log spread over the domain."""
        key = _group_key(group)
        hit = self._bound_cache.get(key)
        if hit is not None:
            return hit
        f_terms = [t for q in group for t in q.f_terms]
        g_terms = [t for q in group for t in q.g_terms]
        obj = DcObjective(f_terms, g_terms, self.domain)
        res_min = branch_and_bound_min(obj, self.bnb_delta, self.node_budget)
        res_max = branch_and_bound_min(obj.swapped(), self.bnb_delta, self.node_budget)
        bound = (-res_max.lb) - res_min.lb
        if not (res_min.converged and res_max.converged):
            logger.warning("group bound solve hit the node budget; bound stays "
                           "sound but may be loose (%.6f)", bound)
        # per-query spreads are sound for the summed spread too, and can win
        # when the solve stopped early
        bound = min(bound, sum(record_log_range(q, self.domain) for q in group))
        self._bound_cache[key] = bound
        return bound

    def append(self, record: QueryRecord) -> None:
        self.records.append(record)
        if len(self.records) % self.group_size == 0:
            self.closed_log_bound += self._group_bound(self.records[-self.group_size:])

    def open_log_range(self, extra: Sequence[QueryRecord] = ()) -> float:
        """Sum of per-query log spreads over the open group plus extras.

        Solve-free and sound: the spread of a sum never exceeds the sum of
        spreads.  Exact when each query saturates its range in the same
        direction, loose when outputs cancel.
        """
        return sum(record_log_range(q, self.domain)
                   for q in self.open_records() + list(extra))

    def log_loss_bound(self, extra: Sequence[QueryRecord] = (),
                       lazy: bool = False) -> float:
        """Bound with hypothetical extra records joined to the open group.

        lazy=True prices the open group by per-query spreads instead of a
        branch-and-bound solve; still certified, just possibly looser.
        """
        open_group = self.open_records() + list(extra)
        if not open_group:
            return self.closed_log_bound
        if lazy:
            return self.closed_log_bound + self.open_log_range(extra)
        return self.closed_log_bound + self._group_bound(open_group)

    def epsilon_open(self) -> float:
        return sum(q.epsilon for q in self.open_records())

    def copy(self) -> "ContinuousLedger":
        dup = ContinuousLedger(self.domain, self.group_size, self.bnb_delta,
                               self.node_budget, list(self.records),
                               self.closed_log_bound)
        dup._bound_cache = self._bound_cache  # shared cache is read/write safe
        return dup


@dataclass
class FilterState:
    """Budget plus accumulated evidence for one protected object.

    state is a LikelihoodState (discrete domain, exact loss) or a
    ContinuousLedger (box domain, certified bound).  halted is set by the
    driver on the first rejection; checks themselves never mutate.
    """

    budget_eps: float
    state: object
    mode: str = BAYESIAN
    halted: bool = False

    def __post_init__(self):
        if self.budget_eps <= 0:
            raise ValueError("budget_eps must be positive")
        if self.mode not in (BAYESIAN, SIMPLIFIED):
            raise ValueError(f"unknown filter mode {self.mode!r}")

    @property
    def discrete(self) -> bool:
        return isinstance(self.state, LikelihoodState)

    def log_loss(self) -> float:
        """Exact log loss (discrete) or certified upper bound (continuous)."""
        if self.discrete:
            return self.state.log_loss()
        return self.state.log_loss_bound()

    def halt(self) -> None:
        self.halted = True


def fresh_filter(budget_eps: float, domain, mode: str = BAYESIAN,
                 group_size: int = DEFAULT_GROUP_SIZE,
                 bnb_delta: float = DEFAULT_DELTA,
                 node_budget: int = DEFAULT_NODE_BUDGET) -> FilterState:
    """Filter with no accepted queries; ledger kind follows the domain."""
    if isinstance(domain, DiscreteDomain):
        return FilterState(budget_eps, LikelihoodState(domain), mode)
    if isinstance(domain, BoxDomain):
        ledger = ContinuousLedger(domain, group_size, bnb_delta, node_budget)
        return FilterState(budget_eps, ledger, mode)
    raise TypeError("domain must be DiscreteDomain or BoxDomain")


def realized_loss(state: LikelihoodState) -> float:
    """L = max_x P(x) / min_x P(x); 1 with no accepted queries, +inf if any
    candidate has been ruled out."""
    return float(math.exp(state.log_loss())) if math.isfinite(state.log_loss()) \
        else math.inf


# ---- filter checks (pure) ----


def _discrete_post_losses(state: LikelihoodState, mech: MechanismSpec):
    """Post-acceptance log loss per output, skipping outputs no candidate
    can produce (they occur with probability zero unconditionally)."""
    x = state.domain.candidate_array()
    for y in mech.outputs:
        ll = np.asarray(mech.log_likelihood(y, x), dtype=float)
        log_p = state.log_p + ll
        finite = np.isfinite(log_p)
        if not np.any(finite):
            continue
        if not np.all(finite):
            yield y, math.inf
        else:
            yield y, float(np.max(log_p) - np.min(log_p))


def bayesian_filter_check(fs: FilterState, mech: MechanismSpec) -> str:
    """ACCEPT iff every output the query could produce keeps the realized
    loss (or its certified bound) within exp(budget_eps)."""
    if fs.halted:
        return REJECT
    budget = fs.budget_eps + _TIE_SLACK
    if fs.discrete:
        return ACCEPT if all(loss <= budget for _, loss
                             in _discrete_post_losses(fs.state, mech)) else REJECT

    ledger: ContinuousLedger = fs.state
    # Cheap sufficient condition: per-query spreads never exceed epsilon,
    # so the open group plus the newcomer is covered by the epsilon sum.
    if (ledger.closed_log_bound + ledger.epsilon_open()
            + mech.epsilon <= budget):
        return ACCEPT
    recs = []
    try:
        for y in mech.outputs:
            recs.append(QueryRecord.from_mechanism(mech, y))
    except (EnvelopeError, Infeasible, ValueError) as exc:
        logger.warning("cannot decompose %s (%s); rejecting", mech.id, exc)
        return REJECT
    # Still solve-free: exact per-query spreads, worst case over the
    # newcomer's outputs.
    base = ledger.closed_log_bound + ledger.open_log_range()
    worst = max(record_log_range(r, ledger.domain) for r in recs)
    if base + worst <= budget:
        return ACCEPT
    # One solve pair for the open group, newcomer priced by its spread; the
    # open-group bound is shared across outputs and cached across steps.
    open_group = ledger.open_records()
    if open_group:
        try:
            mid = ledger.closed_log_bound + ledger._group_bound(open_group) + worst
        except (EnvelopeError, Infeasible):
            mid = math.inf
        if mid <= budget:
            return ACCEPT
    for rec in recs:
        try:
            bound = ledger.log_loss_bound(extra=[rec])
        except (EnvelopeError, Infeasible) as exc:
            logger.warning("loss bound for %s output %r is unbounded (%s); "
                           "rejecting", mech.id, rec.output, exc)
            return REJECT
        if not math.isfinite(bound) or bound > budget:
            return REJECT
    return ACCEPT


def simplified_filter_check(fs: FilterState, mech: MechanismSpec) -> str:
    """ACCEPT iff current log loss + the query's declared epsilon fits the
    budget.  Never accepts a query the Bayesian check would reject."""
    if fs.halted:
        return REJECT
    return ACCEPT if fs.log_loss() + mech.epsilon <= fs.budget_eps + _TIE_SLACK \
        else REJECT


def _check_for_mode(fs: FilterState) -> Callable:
    return bayesian_filter_check if fs.mode == BAYESIAN else simplified_filter_check


def filter_execute(fs: FilterState, mech: MechanismSpec, x, rng) -> object:
    """Sample the query on the true value x and fold it into the state.

    Re-runs the mode's check; a REJECT decision raises ContractViolation
    (the check is pure, so callers that already checked pay only a cache
    hit in continuous mode).
    """
    if _check_for_mode(fs)(fs, mech) is not ACCEPT:
        raise ContractViolation(f"query {mech.id} was not accepted")
    y = sample(mech, x, rng)
    if fs.discrete:
        fs.state.update(mech, y)
    else:
        fs.state.append(QueryRecord.from_mechanism(mech, y))
    return y


def submit(fs: FilterState, mech: MechanismSpec, x, rng,
           trace: Optional[list] = None):
    """Check-then-execute; halts the filter on the first rejection.

    Returns (decision, output or None) and appends a DecisionRecord to
    trace when given.
    """
    decision = _check_for_mode(fs)(fs, mech)
    output = None
    if decision is ACCEPT:
        output = filter_execute(fs, mech, x, rng)
    else:
        fs.halt()
    if trace is not None:
        trace.append(DecisionRecord(mech.id, mech.epsilon, decision, output,
                                    fs.log_loss()))
    return decision, output


# ---- approximate (eps, delta) filter ----


@dataclass
class BasicCompositionFilter:
    """Output-independent baseline: accept while the epsilon sum fits.

    Valid as the F0 slot for any delta_g; swap in a stronger
    output-independent filter by matching check/note.
    """

    budget_eps: float
    eps_sum: float = 0.0

    def check(self, mech: MechanismSpec) -> str:
        return ACCEPT if self.eps_sum + mech.epsilon <= self.budget_eps + _TIE_SLACK \
            else REJECT

    def note(self, mech: MechanismSpec) -> None:
        self.eps_sum += mech.epsilon


@dataclass
class ApproxFilterState:
    """Two-phase filter: output-independent F0 first, Bayesian after.

    The Bayesian FilterState accumulates likelihoods from the start, so the
    post-halt phase knows the loss realized during the F0 phase.  f0_halted
    flips on submit (not on dry-run checks) the first time F0 rejects.
    """

    budget: tuple
    f0: object
    bayes: FilterState
    f0_halted: bool = False


def approx_filter(budget: tuple, domain, f0=None,
                  group_size: int = DEFAULT_GROUP_SIZE,
                  bnb_delta: float = DEFAULT_DELTA,
                  node_budget: int = DEFAULT_NODE_BUDGET) -> ApproxFilterState:
    eps_g, delta_g = budget
    if delta_g < 0:
        raise ValueError("delta_g must be nonnegative")
    if f0 is None:
        f0 = BasicCompositionFilter(eps_g)
    bayes = fresh_filter(eps_g, domain, BAYESIAN, group_size, bnb_delta,
                         node_budget)
    return ApproxFilterState((eps_g, delta_g), f0, bayes)


def _post_halt_decision(afs: ApproxFilterState, mech: MechanismSpec) -> str:
    # Good-faith rejection: once the bound is blown nothing gets through,
    # even though the loss can later shrink on its own.
    if afs.bayes.log_loss() > afs.budget[0] + _TIE_SLACK:
        return REJECT
    return bayesian_filter_check(afs.bayes, mech)


def approx_filter_check(afs: ApproxFilterState, mech: MechanismSpec) -> str:
    """Pure decision: F0's answer while it is active, the Bayesian branch
    once it halts (including for the query whose rejection halts it)."""
    if not afs.f0_halted:
        if afs.f0.check(mech) is ACCEPT:
            return ACCEPT
    return _post_halt_decision(afs, mech)


def approx_submit(afs: ApproxFilterState, mech: MechanismSpec, x, rng,
                  trace: Optional[list] = None):
    """Stateful step: advances F0, flips f0_halted on its first rejection,
    then defers to the Bayesian filter for this and all later queries."""
    if not afs.f0_halted:
        if afs.f0.check(mech) is ACCEPT:
            afs.f0.note(mech)
            y = filter_execute(afs.bayes, mech, x, rng)
            if trace is not None:
                trace.append(DecisionRecord(mech.id, mech.epsilon, ACCEPT, y,
                                            afs.bayes.log_loss()))
            return ACCEPT, y
        afs.f0_halted = True
    if _post_halt_decision(afs, mech) is REJECT:
        afs.bayes.halt()
        if trace is not None:
            trace.append(DecisionRecord(mech.id, mech.epsilon, REJECT, None,
                                        afs.bayes.log_loss()))
        return REJECT, None
    return submit(afs.bayes, mech, x, rng, trace)


# ---- odometer ----


@dataclass(frozen=True)
class OdometerReading:
    """Budget consumed so far and what is left of the guarantee."""

    log_loss: float
    headroom: float


def odometer(fs: FilterState) -> OdometerReading:
    """log loss of the accepted prefix (certified bound in continuous mode)
    and the remaining headroom; any query with epsilon <= headroom passes
    the simplified check."""
    log_loss = fs.log_loss()
    return OdometerReading(log_loss, fs.budget_eps - log_loss)


# ---- grouped bounds ----


def grouped_loss_upper_bound(query_records, group_size: int,
                             bound_oracle: Callable) -> float:
    """Upper bound on log realized loss from per-group extrema.

    bound_oracle(group) returns (max, min) of the group's summed
    log-likelihood over the domain; the bound sums max - min per group.
    With a single group this is the exact log loss; with singleton groups
    and budget-saturating queries it degrades to the epsilon sum.
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    records = list(query_records)
    total = 0.0
    for i in range(0, len(records), group_size):
        hi, lo = bound_oracle(records[i:i + group_size])
        total += hi - lo
    return total


def discrete_bound_oracle(domain: DiscreteDomain) -> Callable:
    """Exact group extrema by enumeration; records are (mechanism, output)
    pairs as stored in LikelihoodState.query_log."""
    x = domain.candidate_array()

    def oracle(group):
        total = np.zeros(len(domain))
        for mech, y in group:
            total = total + np.asarray(mech.log_likelihood(y, x), dtype=float)
        finite = total[np.isfinite(total)]
        if finite.size == 0:
            raise ValueError("group output impossible for every candidate")
        lo = float(np.min(total))  # -inf when a candidate is ruled out
        return float(np.max(finite)), lo

    return oracle


def dc_bound_oracle(domain: BoxDomain, delta: float = DEFAULT_DELTA,
                    node_budget: int = DEFAULT_NODE_BUDGET) -> Callable:
    """Certified group extrema by branch-and-bound; records are
    QueryRecords.  Returned (max, min) over-cover the true extrema, so the
    grouped bound stays an upper bound."""

    def oracle(group):
        f_terms = [t for q in group for t in q.f_terms]
        g_terms = [t for q in group for t in q.g_terms]
        obj = DcObjective(f_terms, g_terms, domain)
        res_min = branch_and_bound_min(obj, delta, node_budget)
        res_max = branch_and_bound_min(obj.swapped(), delta, node_budget)
        return -res_max.lb, res_min.lb

    return oracle
