"""Experiment harness and command-line interface.

Scenarios compose streams of LDP queries against a single protected object
behind a Bayesian privacy filter and report per-query traces, or evaluate
the closed-form/Markov/Monte-Carlo expectations for identical randomized
responses.  Output is CSV (tables) or JSON lines (traces); identical config
and seed give byte-identical output.

Exit codes: 0 success, 2 configuration error, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import sys
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .accounting import ACCEPT, QueryRecord, fresh_filter, submit
from .analysis import (
    WalkConfig,
    covariance_ratio,
    expected_queries_closed_form,
    expected_queries_markov,
    simulate_walk_steps,
)
from .core import BoxDomain, DiscreteDomain
from .dcopt import DEFAULT_DELTA, DEFAULT_NODE_BUDGET, realized_loss_bounds
from .mechanisms import (
    RegressionParams,
    linear_mechanism,
    logistic_mechanism,
    randomized_response,
    truncated_linear_mechanism,
)

__all__ = [
    "SCENARIOS",
    "ExperimentConfig",
    "TraceRow",
    "run_composition_experiment",
    "percentile_curve",
    "healthcare_scenario",
    "meanvar_scenario",
    "estimator_compare",
    "walk_expected_report",
    "config_from_json",
    "main",
]

SCENARIOS = (
    "rr-compose",
    "walk-expected",
    "linreg-compose",
    "logreg-compose",
    "healthcare",
    "meanvar",
    "estimator-compare",
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

# Hard cap on queries per trial; the filter halts long before this for any
# sane budget, the cap only guards against misconfiguration.
_MAX_STREAM = 10_000

# Larger linear groups price cross-query cancellation that disjoint groups
# of 10 provably cannot see; 20 reproduces the published median.
_GROUP_SIZE_DEFAULTS = {"linreg-compose": 20}
_FALLBACK_GROUP_SIZE = 10

# Scenario-specific budget defaults (the generic default is 1.0 / 0.1).
_SCENARIO_DEFAULTS = {
    "meanvar": {"budget_eps": 2.0, "per_query_eps": 1.0},
    "healthcare": {"budget_eps": 4.0, "per_query_eps": 1.0},
}


def _default_domain(scenario: str):
    if scenario in ("linreg-compose", "logreg-compose"):
        return BoxDomain(np.full(9, -1.0), np.full(9, 1.0))
    if scenario in ("rr-compose", "walk-expected", "estimator-compare"):
        return DiscreteDomain((0, 1))
    if scenario == "meanvar":
        return BoxDomain([-1.0], [1.0])
    return None


@dataclass(frozen=True)
class ExperimentConfig:
    """One scenario run: stream parameters plus accounting knobs.

    group_size None picks the scenario default (20 for linreg-compose,
    otherwise 10).  domain None picks the scenario default as well; the true
    value defaults to the domain center (first candidate when discrete).
    """

    scenario: str
    budget_eps: float = 1.0
    per_query_eps: float = 0.1
    trials: int = 50
    seed: int = 0
    group_size: Optional[int] = None
    bnb_delta: float = DEFAULT_DELTA
    domain: object = None
    regressions: Optional[tuple] = None
    true_value: object = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.budget_eps <= 0:
            raise ValueError("budget_eps must be positive")
        if self.per_query_eps <= 0:
            raise ValueError("per_query_eps must be positive")
        if self.group_size is not None and self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.domain is None:
            object.__setattr__(self, "domain", _default_domain(self.scenario))

    def resolved_group_size(self) -> int:
        if self.group_size is not None:
            return self.group_size
        return _GROUP_SIZE_DEFAULTS.get(self.scenario, _FALLBACK_GROUP_SIZE)

    def resolved_true_value(self):
        if self.true_value is not None:
            return self.true_value
        if isinstance(self.domain, DiscreteDomain):
            return self.domain.candidates[0]
        return self.domain.center()


@dataclass(frozen=True)
class TraceRow:
    """One filter decision inside one trial; reject ends the trial."""

    trial: int
    query_index: int
    epsilon: float
    decision: str
    output: object
    log_loss_ub: float


def _trial_rng(seed: int, trial: int) -> np.random.Generator:
    # spawn-free independent streams keyed on (seed, trial)
    return np.random.default_rng([seed, trial])


def _query_stream(cfg: ExperimentConfig, rng: np.random.Generator):
    """Yield the scenario's mechanisms; generation draws precede sampling
    draws on the shared per-trial stream, so traces are seed-deterministic."""
    fixed = cfg.regressions
    for t in itertools.count():
        if t >= _MAX_STREAM:
            raise RuntimeError("query stream exceeded the safety cap")
        if fixed is not None:
            if t >= len(fixed):
                return
            kind, params, eps = fixed[t]
            yield _regression_mechanism(kind, params, eps, f"{kind}-{t}", cfg.domain)
        elif cfg.scenario == "rr-compose":
            m = len(cfg.domain)
            yield randomized_response(m, cfg.per_query_eps, f"rr-{t}",
                                      candidates=cfg.domain.candidates)
        elif cfg.scenario == "linreg-compose":
            theta = rng.uniform(-1.0, 1.0, size=cfg.domain.dim + 1)
            theta = theta / np.abs(theta).sum()
            params = RegressionParams(theta[1:], theta[0], -1.0, 1.0)
            yield linear_mechanism(params, cfg.per_query_eps, f"linreg-{t}",
                                   cfg.domain)
        elif cfg.scenario == "logreg-compose":
            theta = rng.uniform(-10.0, 10.0, size=cfg.domain.dim + 1)
            params = RegressionParams(theta[1:], theta[0], -1.0, 1.0)
            yield logistic_mechanism(params, cfg.per_query_eps, f"logreg-{t}")
        else:
            raise ValueError(f"{cfg.scenario} is not a composition scenario")


def _regression_mechanism(kind, params, eps, mech_id, domain):
    if kind == "linear":
        return linear_mechanism(params, eps, mech_id, domain)
    if kind == "truncated-linear":
        return truncated_linear_mechanism(params, eps, mech_id)
    if kind == "logistic":
        return logistic_mechanism(params, eps, mech_id)
    raise ValueError(f"unknown regression kind {kind!r}")


def run_composition_experiment(cfg: ExperimentConfig) -> list:
    """Greedy filtered composition, one trace per trial.

    Every trial streams scenario queries at the true value until the filter
    rejects one (the reject row is kept, ending the trial).  log_loss_ub is
    the certified bound after the decision, so accepted rows always satisfy
    log_loss_ub <= budget_eps.
    """
    rows = []
    x = cfg.resolved_true_value()
    for trial in range(cfg.trials):
        rng = _trial_rng(cfg.seed, trial)
        fs = fresh_filter(cfg.budget_eps, cfg.domain,
                          group_size=cfg.resolved_group_size(),
                          bnb_delta=cfg.bnb_delta)
        for index, mech in enumerate(_query_stream(cfg, rng)):
            decision, output = submit(fs, mech, x, rng)
            rows.append(TraceRow(trial, index, mech.epsilon, decision, output,
                                 fs.log_loss()))
            if decision is not ACCEPT:
                break
    return rows


def percentile_curve(rows: Sequence[TraceRow], eps_grid) -> list:
    """Accepted-query percentiles as a function of the budget.

    Per trial, the accepted count at budget eps is the first crossing of the
    running max of log_loss_ub, linearly interpolated between successive
    accepted queries; counts are clamped to the trial length since nothing
    is known beyond the recorded trace.  Needs at least two trials.
    """
    by_trial = {}
    for r in rows:
        by_trial.setdefault(r.trial, []).append(r)
    if len(by_trial) < 2:
        raise ValueError("percentile_curve needs at least 2 trials")
    eps_grid = np.asarray(list(eps_grid), dtype=float)

    counts = np.empty((len(by_trial), eps_grid.size))
    for i, trial in enumerate(sorted(by_trial)):
        trial_rows = sorted(by_trial[trial], key=lambda r: r.query_index)
        bounds = [r.log_loss_ub for r in trial_rows if r.decision == ACCEPT]
        # strictly increasing running max, first occurrence wins so flat
        # stretches resolve to the earliest count reaching that loss
        xs, ys = [0.0], [0.0]
        for n, b in enumerate(np.maximum.accumulate(bounds), start=1):
            if b > xs[-1]:
                xs.append(float(b))
                ys.append(float(n))
        counts[i] = np.interp(eps_grid, xs, ys)
    out = []
    for j, eps in enumerate(eps_grid):
        p10, p50, p90 = np.percentile(counts[:, j], [10, 50, 90])
        out.append({"eps": float(eps), "p10": float(p10), "p50": float(p50),
                    "p90": float(p90)})
    return out


# ---- healthcare scenario ----

# Four checkup-data regressions over (age, sex, blood pressure, BMI); the
# sleep regression is truncated to [0, 12], the rest are logistic over [0, 1].
HEALTH_DOMAIN = {"lower": [10.0, 0.0, 50.0, 10.0],
                 "upper": [100.0, 1.0, 200.0, 50.0]}
HEALTH_REGRESSIONS = (
    {"kind": "logistic", "theta": [-0.059, -1.456, -0.0134, 0.0],
     "intercept": 6.177, "out_low": 0.0, "out_high": 1.0, "epsilon": 1.0},
    {"kind": "logistic", "theta": [0.0761, 0.0952, 0.0, 0.0163],
     "intercept": -7.989, "out_low": 0.0, "out_high": 1.0, "epsilon": 1.0},
    {"kind": "truncated-linear", "theta": [0.0855, 0.4617, -0.07, 0.0],
     "intercept": 12.323, "out_low": 0.0, "out_high": 12.0, "epsilon": 1.0},
    {"kind": "logistic", "theta": [0.0491, 0.0, -0.0091, 0.1039],
     "intercept": -5.07, "out_low": 0.0, "out_high": 1.0, "epsilon": 1.0},
)


def _health_config() -> dict:
    return {"scenario": "healthcare", "budget_eps": 4.0, "per_query_eps": 1.0,
            "trials": 1, "seed": 0, "bnb_delta": 0.01,
            "domain": dict(HEALTH_DOMAIN),
            "regressions": [dict(r) for r in HEALTH_REGRESSIONS]}


def healthcare_scenario(config: Optional[dict] = None,
                        node_budget: int = DEFAULT_NODE_BUDGET) -> list:
    """Realized loss of the four checkup regressions, all 2^4 output combos.

    Each combination is priced as a single branch-and-bound group (the four
    queries jointly); rows report the certified bracket midpoint plus the
    bracket itself and a convergence flag.
    """
    if config is None:
        config = _health_config()
    domain = BoxDomain(config["domain"]["lower"], config["domain"]["upper"])
    delta = float(config.get("bnb_delta", DEFAULT_DELTA))
    regs = [(r["kind"],
             RegressionParams(r["theta"], r["intercept"], r["out_low"],
                              r["out_high"]),
             float(r["epsilon"]))
            for r in config["regressions"]]

    output_sets = []
    for kind, params, eps in regs:
        if kind == "logistic":
            output_sets.append((0, 1))
        else:
            output_sets.append((params.out_low, params.out_high))

    rows = []
    for combo in itertools.product(*output_sets):
        records = []
        for (kind, params, eps), out in zip(regs, combo):
            mech = _regression_mechanism(kind, params, eps, kind, domain)
            records.append(QueryRecord.from_mechanism(mech, out))
        res = realized_loss_bounds(records, domain, group_size=len(records),
                                   delta=delta, node_budget=node_budget)
        lo, hi = res.log_interval
        rows.append({"o1": combo[0], "o2": combo[1], "o3": combo[2],
                     "o4": combo[3], "log_loss": 0.5 * (lo + hi),
                     "log_lo": lo, "log_hi": hi, "converged": res.converged})
    return rows


# ---- mean/variance scenario ----


def meanvar_scenario(eps: float, grid_points: int = 1_000_000) -> list:
    """Mean then variance of a scalar in [-1, 1], all four output pairs.

    The mean query perturbs y = x over [-1, 1], the variance query y = x^2
    over [0, 1]; with a scalar domain the extrema come from a dense grid.
    Rows: (o1, o2, max log Pr, min log Pr, log loss).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    e = math.exp(eps)
    low_p, high_p = 1.0 / (e + 1.0), e / (e + 1.0)
    span = high_p - low_p
    x = np.linspace(-1.0, 1.0, grid_points)
    p_mean = low_p + span * (x + 1.0) / 2.0
    p_var = low_p + span * x * x
    rows = []
    for o1 in (1.0, -1.0):
        for o2 in (1, 0):
            lp = np.log(p_mean if o1 == 1.0 else 1.0 - p_mean)
            lp = lp + np.log(p_var if o2 == 1 else 1.0 - p_var)
            rows.append({"o1": o1, "o2": o2,
                         "max_log_pr": float(lp.max()),
                         "min_log_pr": float(lp.min()),
                         "log_loss": float(lp.max() - lp.min())})
    return rows


# ---- identical-response expectations ----


def walk_expected_report(m: int, k: int, eps: float, trials: int,
                         seed: int) -> dict:
    """Expected accepted identical randomized responses, three ways."""
    cfg = WalkConfig(m, k, eps)
    markov = expected_queries_markov(cfg)
    steps = simulate_walk_steps(cfg, trials, _trial_rng(seed, 0))
    row = {
        "m": m, "k": k, "eps": eps,
        "closed_form": expected_queries_closed_form(k, eps) if m == 2 else None,
        "markov": markov,
        "mc_mean": float(steps.mean()),
        "mc_se": float(steps.std(ddof=1) / math.sqrt(len(steps))),
        "trials": trials,
    }
    return row


def estimator_compare(m: int, k: int, eps_total: float, trials: int,
                      rng: np.random.Generator) -> dict:
    """Composition-vs-single variance ratio k^2 / E[n], analytic and MC.

    Both columns evaluate the same ratio; the analytic one takes E[n] from
    the closed form or Markov chain, the Monte Carlo one replaces it with
    the simulated mean accepted count.
    """
    analytic = covariance_ratio(m, k, eps_total)
    if k == 1:
        return {"m": m, "k": k, "eps_total": eps_total, "analytic": 1.0,
                "monte_carlo": 1.0, "mc_mean_n": 1.0, "trials": trials}
    steps = simulate_walk_steps(WalkConfig(m, k, eps_total / k), trials, rng)
    mean_n = float(steps.mean())
    return {"m": m, "k": k, "eps_total": eps_total, "analytic": analytic,
            "monte_carlo": k * k / mean_n, "mc_mean_n": mean_n,
            "trials": trials}


# ---- configuration and output plumbing ----


def _domain_from_json(obj) -> object:
    if obj is None:
        return None
    if "candidates" in obj:
        return DiscreteDomain(tuple(obj["candidates"]))
    return BoxDomain(obj["lower"], obj["upper"])


def config_from_json(data: dict) -> ExperimentConfig:
    """Build a config from the JSON schema used by --config files."""
    regs = None
    if data.get("regressions"):
        regs = tuple(
            (r["kind"],
             RegressionParams(r["theta"], r["intercept"], r["out_low"],
                              r["out_high"]),
             float(r.get("epsilon", data.get("per_query_eps", 0.1))))
            for r in data["regressions"])
    return ExperimentConfig(
        scenario=data["scenario"],
        budget_eps=float(data.get("budget_eps", 1.0)),
        per_query_eps=float(data.get("per_query_eps", 0.1)),
        trials=int(data.get("trials", 50)),
        seed=int(data.get("seed", 0)),
        group_size=data.get("group_size"),
        bnb_delta=float(data.get("bnb_delta", DEFAULT_DELTA)),
        domain=_domain_from_json(data.get("domain")),
        regressions=regs,
        true_value=data.get("true_value"),
    )


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return format(value, ".12g")
    if value is None:
        return ""
    return str(value)


def _emit(rows, columns, fmt: str, out) -> None:
    if fmt == "json":
        for row in rows:
            out.write(json.dumps({c: row[c] for c in columns}) + "\n")
        return
    out.write(",".join(columns) + "\n")
    for row in rows:
        out.write(",".join(_fmt(row[c]) for c in columns) + "\n")


def _trace_dicts(rows):
    return [{"trial": r.trial, "query_index": r.query_index,
             "epsilon": r.epsilon, "decision": r.decision, "output": r.output,
             "log_loss_ub": r.log_loss_ub} for r in rows]


_TRACE_COLUMNS = ("trial", "query_index", "epsilon", "decision", "output",
                  "log_loss_ub")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bayesloss",
        description="Privacy-filter composition experiments and loss tables")
    sub = parser.add_subparsers(dest="scenario", required=True)
    for name in SCENARIOS:
        p = sub.add_parser(name)
        p.add_argument("--budget-eps", type=float, default=None)
        p.add_argument("--query-eps", type=float, default=None)
        p.add_argument("--trials", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--group-size", type=int, default=None)
        p.add_argument("--bnb-delta", type=float, default=None)
        p.add_argument("--m", type=int, default=None,
                       help="universe size for discrete scenarios")
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--output", type=str, default=None)
        p.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    if args.config is not None:
        with open(args.config) as fh:
            cfg = config_from_json(json.load(fh))
        if cfg.scenario != args.scenario:
            raise ValueError(
                f"config scenario {cfg.scenario!r} does not match the "
                f"{args.scenario!r} subcommand")
    else:
        cfg = ExperimentConfig(scenario=args.scenario,
                               **_SCENARIO_DEFAULTS.get(args.scenario, {}))
    updates = {}
    if args.budget_eps is not None:
        updates["budget_eps"] = args.budget_eps
    if args.query_eps is not None:
        updates["per_query_eps"] = args.query_eps
    if args.trials is not None:
        updates["trials"] = args.trials
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.group_size is not None:
        updates["group_size"] = args.group_size
    if args.bnb_delta is not None:
        updates["bnb_delta"] = args.bnb_delta
    if args.m is not None:
        updates["domain"] = DiscreteDomain(tuple(range(args.m)))
    return replace(cfg, **updates) if updates else cfg


def _budget_multiplier(cfg: ExperimentConfig) -> int:
    k = cfg.budget_eps / cfg.per_query_eps
    if abs(k - round(k)) > 1e-9 or round(k) < 1:
        raise ValueError("budget_eps must be a positive integer multiple of "
                         "per_query_eps for walk scenarios")
    return int(round(k))


def _run(args) -> int:
    cfg = _config_from_args(args)
    out = open(args.output, "w") if args.output else sys.stdout
    try:
        if cfg.scenario in ("rr-compose", "linreg-compose", "logreg-compose"):
            rows = _trace_dicts(run_composition_experiment(cfg))
            _emit(rows, _TRACE_COLUMNS, args.format, out)
        elif cfg.scenario == "walk-expected":
            row = walk_expected_report(len(cfg.domain), _budget_multiplier(cfg),
                                       cfg.per_query_eps, cfg.trials, cfg.seed)
            _emit([row], tuple(row), args.format, out)
        elif cfg.scenario == "estimator-compare":
            k_max = _budget_multiplier(cfg)
            rows = [estimator_compare(len(cfg.domain), k, cfg.budget_eps,
                                      cfg.trials, _trial_rng(cfg.seed, k))
                    for k in range(1, k_max + 1)]
            _emit(rows, tuple(rows[0]), args.format, out)
        elif cfg.scenario == "meanvar":
            rows = meanvar_scenario(cfg.per_query_eps)
            _emit(rows, tuple(rows[0]), args.format, out)
        elif cfg.scenario == "healthcare":
            config = None
            if args.config is not None:
                with open(args.config) as fh:
                    config = json.load(fh)
            rows = healthcare_scenario(config)
            _emit(rows, tuple(rows[0]), args.format, out)
            if not all(r["converged"] for r in rows):
                return EXIT_SOLVER
        return EXIT_OK
    finally:
        if out is not sys.stdout:
            out.close()


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _run(args)
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
