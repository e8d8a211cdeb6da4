"""Filters, odometer, grouping, and the continuous ledger."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesloss import (
    ACCEPT,
    REJECT,
    BasicCompositionFilter,
    BoxDomain,
    ContractViolation,
    DiscreteDomain,
    QueryRecord,
    RegressionParams,
    approx_filter,
    approx_filter_check,
    approx_submit,
    bayesian_filter_check,
    dc_bound_oracle,
    discrete_bound_oracle,
    filter_execute,
    fresh_filter,
    grouped_loss_upper_bound,
    linear_mechanism,
    logistic_mechanism,
    odometer,
    randomized_response,
    realized_loss,
    record_log_range,
    simplified_filter_check,
    submit,
    truncated_linear_mechanism,
)
from bayesloss.accounting import DecisionRecord, trace_json_lines

TWO = DiscreteDomain((0, 1))


def _make_record(rng, domain, eps, kind=None):
    """Random accepted-query record over the box domain."""
    dim = domain.dim
    kind = kind or rng.choice(["linear", "truncated-linear", "logistic"])
    if kind == "linear":
        theta = rng.uniform(-1.0, 1.0, size=dim + 1)
        theta = theta / np.abs(theta).sum()
        params = RegressionParams(theta[1:], theta[0], -1.0, 1.0)
        mech = linear_mechanism(params, eps, domain=domain)
    elif kind == "truncated-linear":
        params = RegressionParams(rng.uniform(-1.0, 1.0, size=dim),
                                  float(rng.uniform(-0.5, 0.5)), 0.0, 1.0)
        mech = truncated_linear_mechanism(params, eps)
    else:
        params = RegressionParams(rng.uniform(-4.0, 4.0, size=dim),
                                  float(rng.uniform(-2.0, 2.0)), -1.0, 1.0)
        mech = logistic_mechanism(params, eps)
    output = mech.outputs[int(rng.integers(2))]
    return QueryRecord.from_mechanism(mech, output)


def _record_grid_spread(record, domain, points=4000):
    if domain.dim == 1:
        x = np.linspace(domain.lower[0], domain.upper[0], points)[:, None]
    else:
        axes = [np.linspace(lo, hi, int(points ** (1 / domain.dim)) + 1)
                for lo, hi in zip(domain.lower, domain.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        x = np.stack([m.ravel() for m in mesh], axis=-1)
    vals = np.zeros(x.shape[0])
    for t in record.f_terms:
        vals += t.value(x)
    for t in record.g_terms:
        vals -= t.value(x)
    return float(vals.max() - vals.min())


# ---- realized loss ----


def test_realized_loss_empty_is_one():
    fs = fresh_filter(1.0, TWO)
    assert realized_loss(fs.state) == 1.0


def test_realized_loss_single_rr_uses_full_budget():
    fs = fresh_filter(2.0, TWO)
    fs.state.update(randomized_response(2, 0.5), 1)
    assert realized_loss(fs.state) == pytest.approx(math.exp(0.5), rel=1e-12)


def test_realized_loss_balanced_sequence_is_one():
    fs = fresh_filter(10.0, TWO)
    mech = randomized_response(2, 0.5)
    for y in (1, 1, 0, 0):
        fs.state.update(mech, y)
    assert realized_loss(fs.state) == 1.0


# ---- filter checks, discrete ----


def test_bayesian_vs_simplified_on_rr():
    fs = fresh_filter(1.0, TWO)
    mech = randomized_response(2, 1.0)
    assert bayesian_filter_check(fs, mech) is ACCEPT
    assert simplified_filter_check(fs, mech) is ACCEPT
    filter_execute(fs, mech, 0, np.random.default_rng(1))
    # the worst output of a second identical query doubles the log loss
    assert simplified_filter_check(fs, mech) is REJECT
    assert bayesian_filter_check(fs, mech) is REJECT


def test_bayesian_accepts_beyond_simplified_headroom():
    # declared eps 0.6, but the regression only uses the middle of its
    # output ramp, so every output realizes log loss ~0.293 < 0.5
    dom = BoxDomain([-1.0], [1.0])
    mech = linear_mechanism(RegressionParams([1.0], 0.0, -2.0, 2.0), 0.6,
                            domain=dom)
    fs = fresh_filter(0.5, dom)
    assert simplified_filter_check(fs, mech) is REJECT
    assert bayesian_filter_check(fs, mech) is ACCEPT
    y = filter_execute(fs, mech, 0.0, np.random.default_rng(0))
    assert y in mech.outputs
    assert fs.log_loss() <= 0.5


def test_zero_probability_output_rejected():
    class RevealingMech:
        id = "reveal"
        outputs = (0, 1)
        epsilon = 0.2

        def log_likelihood(self, output, x):
            x = np.asarray(x)
            return np.where(x == output, math.log(0.9), -np.inf)

    fs = fresh_filter(5.0, TWO)
    assert bayesian_filter_check(fs, RevealingMech()) is REJECT


def test_checks_are_pure():
    fs = fresh_filter(1.0, TWO)
    mech = randomized_response(2, 0.4)
    before = fs.state.log_p.copy()
    for _ in range(5):
        bayesian_filter_check(fs, mech)
        simplified_filter_check(fs, mech)
    assert np.array_equal(fs.state.log_p, before)
    assert fs.state.query_log == []


def test_simplified_boundary_tie_accepts():
    fs = fresh_filter(1.0, TWO)
    mech = randomized_response(2, 0.5)
    filter_execute(fs, mech, 0, np.random.default_rng(2))
    assert fs.log_loss() == pytest.approx(0.5, abs=1e-12)
    assert simplified_filter_check(fs, mech) is ACCEPT  # 0.5 + 0.5 <= 1.0


def test_execute_without_accept_is_a_contract_violation():
    fs = fresh_filter(0.5, TWO)
    mech = randomized_response(2, 1.0)  # worst output exceeds e^{0.5}
    with pytest.raises(ContractViolation):
        filter_execute(fs, mech, 0, np.random.default_rng(0))


def test_submit_halts_on_first_rejection():
    fs = fresh_filter(1.0, TWO)
    mech = randomized_response(2, 1.0)
    trace = []
    decision, output = submit(fs, mech, 0, np.random.default_rng(3), trace)
    assert decision is ACCEPT and output in (0, 1)
    decision, output = submit(fs, mech, 0, np.random.default_rng(3), trace)
    assert decision is REJECT and output is None and fs.halted
    # once halted, even a tiny query is rejected
    assert submit(fs, randomized_response(2, 1e-3), 0,
                  np.random.default_rng(3))[0] is REJECT
    assert [t.decision for t in trace] == [ACCEPT, REJECT]


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_simplified_acceptance_implies_bayesian(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 5))
    dom = DiscreteDomain(tuple(range(m)))
    fs = fresh_filter(float(rng.uniform(0.5, 2.0)), dom)
    for _ in range(10):
        mech = randomized_response(m, float(rng.uniform(0.05, 0.8)))
        if simplified_filter_check(fs, mech) is ACCEPT:
            assert bayesian_filter_check(fs, mech) is ACCEPT
        if bayesian_filter_check(fs, mech) is ACCEPT:
            filter_execute(fs, mech, 0, rng)
        else:
            break


# ---- odometer ----


def test_odometer_fresh_and_after_updates():
    fs = fresh_filter(2.0, TWO)
    reading = odometer(fs)
    assert reading.log_loss == 0.0 and reading.headroom == 2.0
    mech = randomized_response(2, 0.3)
    for j in range(1, 5):
        fs.state.update(mech, 1)
        assert odometer(fs).log_loss == pytest.approx(j * 0.3, abs=1e-12)


def test_odometer_headroom_guarantees_simplified_acceptance():
    fs = fresh_filter(1.0, TWO)
    fs.state.update(randomized_response(2, 0.55), 1)
    headroom = odometer(fs).headroom
    assert simplified_filter_check(
        fs, randomized_response(2, headroom * 0.999)) is ACCEPT


def test_odometer_staircase_returns_to_zero():
    """Half matching then half opposing outputs walk the loss up and back."""
    eps, k = 0.5, 8
    fs = fresh_filter(k * eps, TWO)
    mech = randomized_response(2, eps)
    seen = []
    for i in range(k):
        fs.state.update(mech, 1 if i < k // 2 else 0)
        seen.append(odometer(fs).log_loss)
    assert max(seen) == (k // 2) * eps
    assert seen[-1] == 0.0
    assert realized_loss(fs.state) == 1.0


# ---- grouping ----


def test_grouped_bound_single_group_is_exact():
    fs = fresh_filter(10.0, TWO)
    mech = randomized_response(2, 0.6)
    rng = np.random.default_rng(4)
    for _ in range(6):
        filter_execute(fs, mech, 0, rng)
    oracle = discrete_bound_oracle(TWO)
    exact = fs.state.log_loss()
    assert grouped_loss_upper_bound(fs.state.query_log, 6, oracle) == \
        pytest.approx(exact, abs=1e-12)
    # singleton groups degrade to the epsilon sum on full-budget queries
    singles = grouped_loss_upper_bound(fs.state.query_log, 1, oracle)
    assert singles == pytest.approx(6 * 0.6, abs=1e-9)
    assert singles >= exact - 1e-12
    with pytest.raises(ValueError):
        grouped_loss_upper_bound(fs.state.query_log, 0, oracle)


def test_grouped_bound_continuous_ordering():
    delta = 0.005
    rng = np.random.default_rng(9)
    dom = BoxDomain([-1.0, -1.0], [1.0, 1.0])
    records = [_make_record(rng, dom, 0.5) for _ in range(4)]
    oracle = dc_bound_oracle(dom, delta=delta)
    whole = grouped_loss_upper_bound(records, 4, oracle)
    pairs = grouped_loss_upper_bound(records, 2, oracle)
    singles = grouped_loss_upper_bound(records, 1, oracle)

    axes = [np.linspace(-1.0, 1.0, 161)] * 2
    mesh = np.meshgrid(*axes, indexing="ij")
    x = np.stack([m.ravel() for m in mesh], axis=-1)
    total = np.zeros(x.shape[0])
    for rec in records:
        for t in rec.f_terms:
            total += t.value(x)
        for t in rec.g_terms:
            total -= t.value(x)
    grid = float(total.max() - total.min())

    # every grouping over-covers the exact spread; coarser groupings are
    # tighter up to the solver tolerance spent on each group
    assert whole >= grid - 1e-9
    assert whole <= grid + 2 * delta + 1e-9
    assert whole <= pairs + 2 * delta + 1e-9
    assert pairs <= singles + 4 * delta + 1e-9


# ---- per-record log ranges ----


def test_record_log_range_caps_at_epsilon():
    rng = np.random.default_rng(2)
    dom = BoxDomain(np.full(3, -1.0), np.full(3, 1.0))
    for kind in ("linear", "truncated-linear", "logistic"):
        rec = _make_record(rng, dom, 0.3, kind)
        assert record_log_range(rec, dom) <= 0.3 + 1e-12


def test_record_log_range_logistic_saturation_caps():
    """A steep sigmoid saturates both ends of its value range."""
    eps = 0.1
    e = math.exp(eps)
    dom = BoxDomain(np.full(9, -1.0), np.full(9, 1.0))
    mech = logistic_mechanism(RegressionParams(np.full(9, 5.0), 0.0, -1.0, 1.0),
                              eps)
    r1 = QueryRecord.from_mechanism(mech, 1)
    r0 = QueryRecord.from_mechanism(mech, 0)
    assert record_log_range(r1, dom) == pytest.approx(
        math.log(2.0 * e / (e + 1.0)), abs=1e-12)
    assert record_log_range(r0, dom) == pytest.approx(
        math.log((e + 1.0) / 2.0), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1),
       kind=st.sampled_from(("linear", "truncated-linear", "logistic")))
def test_record_log_range_matches_dense_grid(seed, kind):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(1, 3))
    lo = rng.uniform(-1.5, 0.0, size=dim)
    dom = BoxDomain(lo, lo + rng.uniform(0.5, 2.0, size=dim))
    if kind == "linear":
        theta = rng.uniform(-1.0, 1.0, size=dim)
        c = float(rng.uniform(-0.2, 0.2))
        reach = float(np.abs(theta) @ (dom.upper - dom.lower) / 2.0
                      + abs(theta @ dom.center() + c))
        params = RegressionParams(theta, c, -(reach + 0.1), reach + 0.1)
        mech = linear_mechanism(params, 0.4, domain=dom)
    elif kind == "truncated-linear":
        params = RegressionParams(rng.uniform(-1.0, 1.0, size=dim),
                                  float(rng.uniform(-0.5, 0.5)), 0.0, 1.0)
        mech = truncated_linear_mechanism(params, 0.4)
    else:
        params = RegressionParams(rng.uniform(-4.0, 4.0, size=dim),
                                  float(rng.uniform(-1.0, 1.0)), -1.0, 1.0)
        mech = logistic_mechanism(params, 0.4)
    rec = QueryRecord.from_mechanism(mech, mech.outputs[int(rng.integers(2))])
    spread = record_log_range(rec, dom)
    grid = _record_grid_spread(rec, dom, points=20000 if dim == 1 else 40000)
    assert grid <= spread + 1e-9
    assert spread <= grid + 1e-3  # grid resolution slack


# ---- continuous filter ----


def test_continuous_filter_certifies_within_budget():
    rng = np.random.default_rng(6)
    dom = BoxDomain([-1.0, -1.0], [1.0, 1.0])
    fs = fresh_filter(0.6, dom, group_size=3)
    accepted = []
    while True:
        theta = rng.uniform(-1.0, 1.0, size=3)
        theta = theta / np.abs(theta).sum()
        mech = linear_mechanism(RegressionParams(theta[1:], theta[0], -1.0, 1.0),
                                0.1, f"q{len(accepted)}", dom)
        decision, output = submit(fs, mech, dom.center(), rng)
        if decision is REJECT:
            break
        accepted.append((mech, output))
    assert len(accepted) >= 6  # the bound beats the epsilon sum

    # the realized loss over a dense grid never exceeds the budget
    axes = [np.linspace(-1.0, 1.0, 201)] * 2
    mesh = np.meshgrid(*axes, indexing="ij")
    x = np.stack([m.ravel() for m in mesh], axis=-1)
    total = np.zeros(x.shape[0])
    for mech, y in accepted:
        total += np.asarray(mech.log_likelihood(y, x), dtype=float)
    assert float(total.max() - total.min()) <= 0.6 + 1e-9
    # the certified ledger bound covers the grid spread
    assert fs.log_loss() >= float(total.max() - total.min()) - 1e-9


def test_continuous_ledger_groups_and_cache():
    rng = np.random.default_rng(8)
    dom = BoxDomain([-1.0], [1.0])
    fs = fresh_filter(2.0, dom, group_size=2)
    ledger = fs.state
    for i in range(5):
        mech = linear_mechanism(RegressionParams([0.8], 0.1, -1.0, 1.0), 0.3,
                                f"q{i}", dom)
        filter_execute(fs, mech, 0.0, rng)
    assert len(ledger.open_records()) == 1  # two groups closed, one open
    assert ledger.closed_log_bound > 0.0
    lazy = ledger.log_loss_bound(lazy=True)
    solved = ledger.log_loss_bound()
    assert solved <= lazy + 1e-12
    assert ledger.log_loss_bound() == solved  # cache returns the same number
    # a copy shares the solve cache and reports the same bound
    assert ledger.copy().log_loss_bound() == solved


def test_continuous_rejects_undecomposable_query():
    dom = BoxDomain([-1.0], [1.0])
    fs = fresh_filter(0.05, dom)

    class OddMech:
        id = "odd"
        outputs = (0.0, 1.0)
        epsilon = 0.2
        kind = "cubic"
        params = RegressionParams([1.0], 0.0, 0.0, 1.0)

    assert bayesian_filter_check(fs, OddMech()) is REJECT


# ---- approximate filter ----


def test_basic_composition_filter_tie():
    f0 = BasicCompositionFilter(1.0)
    mech = randomized_response(2, 0.5)
    assert f0.check(mech) is ACCEPT
    f0.note(mech)
    assert f0.check(mech) is ACCEPT  # 0.5 + 0.5 == budget accepts
    f0.note(mech)
    assert f0.check(mech) is REJECT


def test_approx_filter_phases():
    rng = np.random.default_rng(12)
    afs = approx_filter((1.0, 0.1), TWO)
    mech = randomized_response(2, 0.4)
    trace = []
    d1, y1 = approx_submit(afs, mech, 0, rng, trace)
    d2, y2 = approx_submit(afs, mech, 0, rng, trace)
    assert (d1, d2) == (ACCEPT, ACCEPT) and not afs.f0_halted

    # third query: 1.2 > 1.0 halts f0; the bayesian branch now governs and
    # its verdict depends on the loss realized so far
    loss_before = afs.bayes.log_loss()
    d3, _ = approx_submit(afs, mech, 0, rng, trace)
    assert afs.f0_halted
    if y1 == y2:
        assert loss_before == pytest.approx(0.8, abs=1e-12)
        assert d3 is REJECT  # worst output would reach 1.2
    else:
        assert loss_before == 0.0
        assert d3 is ACCEPT
    assert len(trace) == 3


def test_approx_filter_good_faith_rejection():
    afs = approx_filter((1.0, 0.0), TWO)
    mech = randomized_response(2, 0.6)
    # exhaust the bayesian loss past the budget by hand
    afs.bayes.state.update(mech, 1)
    afs.bayes.state.update(mech, 1)
    afs.f0_halted = True
    assert afs.bayes.log_loss() > 1.0
    assert approx_filter_check(afs, randomized_response(2, 1e-4)) is REJECT


def test_approx_filter_delegates_to_f0_while_active():
    afs = approx_filter((1.0, 0.0), TWO)
    mech = randomized_response(2, 0.9)
    assert approx_filter_check(afs, mech) is ACCEPT
    assert not afs.f0_halted  # pure check does not advance the phase


def test_approx_filter_rejects_negative_delta():
    with pytest.raises(ValueError):
        approx_filter((1.0, -0.1), TWO)


# ---- trace export ----


def test_trace_json_lines_roundtrip():
    records = [
        DecisionRecord("q0", 0.5, ACCEPT, 1, 0.5),
        DecisionRecord("q1", 0.5, REJECT, None, 0.5),
    ]
    lines = trace_json_lines(records).splitlines()
    parsed = [json.loads(line) for line in lines]
    assert parsed[0] == {"query_id": "q0", "epsilon": 0.5, "decision": "accept",
                         "output": 1, "log_loss_after": 0.5}
    assert parsed[1]["output"] is None
