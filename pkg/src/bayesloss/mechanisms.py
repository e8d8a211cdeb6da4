"""LDP query implementations and their difference-of-convex decompositions.

Four mechanism kinds are supported: randomized response over a finite
universe, and three binary mechanisms obtained by discretizing-and-perturbing
a regression value (linear, truncated linear, logistic).  Every binary
mechanism maps the regression value y in [a, b] to output `b` with
probability

    Pr(b | y) = (1 / (b - a)) ((e^eps - 1) / (e^eps + 1)) (y - a) + 1 / (e^eps + 1)

and to output `a` otherwise, so the output probability ramps linearly from
1/(e^eps+1) at y=a up to e^eps/(e^eps+1) at y=b.

The log-likelihood of each binary mechanism, as a function of the object
x, splits into a difference of convex functions of the scalar u = theta.x + c
(dc_decompose); those terms drive the branch-and-bound bounds in dcopt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from bayesloss.core import BoxDomain

__all__ = [
    "MechanismSpec",
    "RegressionParams",
    "RrParams",
    "DcTerm",
    "rr_log_likelihood",
    "perturb_continuous",
    "mean_estimate",
    "regression_log_likelihood",
    "dc_decompose",
    "square_log_decompose",
    "sample",
    "randomized_response",
    "linear_mechanism",
    "truncated_linear_mechanism",
    "logistic_mechanism",
    "affine_image",
]

_TINY = np.finfo(float).tiny


# ---- parameter records ----


@dataclass(frozen=True)
class RrParams:
    """Randomized-response parameters.

    component selects one coordinate of tuple-valued candidates; None means
    candidates are compared to outputs directly.
    """

    m: int
    component: Optional[int] = None

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("universe size must be >= 2")


@dataclass(frozen=True)
class RegressionParams:
    """Regression y = theta.x + intercept with output range [out_low, out_high]."""

    theta: np.ndarray
    intercept: float
    out_low: float
    out_high: float

    def __init__(self, theta, intercept, out_low, out_high):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if not out_low < out_high:
            raise ValueError("output range must satisfy out_low < out_high")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "intercept", float(intercept))
        object.__setattr__(self, "out_low", float(out_low))
        object.__setattr__(self, "out_high", float(out_high))


# ---- dc terms ----

_TERM_KINDS = (
    "affine",
    "neg-log-affine",
    "neg-log-min-affine",
    "log-sum-exp-affine",
    "square",
    "log-square-reg",
)


@dataclass(frozen=True)
class DcTerm:
    """One convex-of-affine term F(theta.x + offset).

    kind selects the scalar shape F:
        affine              F(u) = u
        neg-log-affine      F(u) = -log(alpha u + beta)
        neg-log-min-affine  F(u) = -log(min(cap, alpha u + beta))
        log-sum-exp-affine  F(u) = log(alpha e^u + beta)
        square              F(u) = quad u^2
        log-square-reg      F(u) = log(alpha u^2 + beta) + quad u^2

    F must be convex on the image of the box domain under theta.x + offset;
    the square kinds carry the regularization weight quad that makes this
    hold on a stated interval.
    """

    kind: str
    theta: np.ndarray
    offset: float
    alpha: float = 0.0
    beta: float = 0.0
    cap: float = np.inf
    quad: float = 0.0

    def __init__(self, kind, theta, offset, alpha=0.0, beta=0.0, cap=np.inf, quad=0.0):
        if kind not in _TERM_KINDS:
            raise ValueError(f"unknown term kind {kind!r}")
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "offset", float(offset))
        object.__setattr__(self, "alpha", float(alpha))
        object.__setattr__(self, "beta", float(beta))
        object.__setattr__(self, "cap", float(cap))
        object.__setattr__(self, "quad", float(quad))

    # scalar shape F and its first two derivatives, vectorized over u

    def shape_value(self, u):
        u = np.asarray(u, dtype=float)
        k = self.kind
        if k == "affine":
            return u
        if k == "neg-log-affine":
            return -np.log(np.maximum(self.alpha * u + self.beta, _TINY))
        if k == "neg-log-min-affine":
            v = np.minimum(self.cap, self.alpha * u + self.beta)
            return -np.log(np.maximum(v, _TINY))
        if k == "log-sum-exp-affine":
            return _log_alpha_exp_beta(u, self.alpha, self.beta)
        if k == "square":
            return self.quad * u * u
        v = self.alpha * u * u + self.beta
        return np.log(np.maximum(v, _TINY)) + self.quad * u * u

    def shape_deriv(self, u):
        u = np.asarray(u, dtype=float)
        k = self.kind
        if k == "affine":
            return np.ones_like(u)
        if k == "neg-log-affine":
            return -self.alpha / (self.alpha * u + self.beta)
        if k == "neg-log-min-affine":
            raw = self.alpha * u + self.beta
            grad = -self.alpha / raw
            return np.where(raw < self.cap, grad, 0.0)
        if k == "log-sum-exp-affine":
            s = _exp_fraction(u, self.alpha, self.beta)
            return s
        if k == "square":
            return 2.0 * self.quad * u
        v = self.alpha * u * u + self.beta
        return 2.0 * self.alpha * u / v + 2.0 * self.quad * u

    def shape_deriv2(self, u):
        u = np.asarray(u, dtype=float)
        k = self.kind
        if k in ("affine",):
            return np.zeros_like(u)
        if k == "neg-log-affine":
            v = self.alpha * u + self.beta
            return (self.alpha / v) ** 2
        if k == "neg-log-min-affine":
            raw = self.alpha * u + self.beta
            curv = (self.alpha / raw) ** 2
            return np.where(raw < self.cap, curv, 0.0)
        if k == "log-sum-exp-affine":
            s = _exp_fraction(u, self.alpha, self.beta)
            return s * (1.0 - s)
        if k == "square":
            return np.full_like(u, 2.0 * self.quad)
        v = self.alpha * u * u + self.beta
        return 2.0 * self.alpha * (self.beta - self.alpha * u * u) / (v * v) + 2.0 * self.quad

    def value(self, x) -> np.ndarray:
        """F(theta.x + offset) for x of shape (..., dim)."""
        return self.shape_value(self.u_of(x))

    def u_of(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.theta.size == 1 and x.ndim <= 1:
            return self.theta[0] * x + self.offset
        return x @ self.theta + self.offset

    def is_convex_on(self, lo: float, hi: float, points: int = 100, tol: float = 1e-9) -> bool:
        """Second-difference convexity check of F on [lo, hi]."""
        u = np.linspace(lo, hi, points)
        if points < 3 or hi - lo < 1e-14:
            return True
        f = self.shape_value(u)
        second = f[2:] - 2.0 * f[1:-1] + f[:-2]
        return bool(np.all(second >= -tol * max(1.0, np.max(np.abs(f)))))


def _log_alpha_exp_beta(u, alpha, beta):
    """log(alpha e^u + beta) without overflow, for alpha, beta >= 0."""
    if alpha == 0.0:
        return np.full_like(np.asarray(u, dtype=float), math.log(beta))
    if beta == 0.0:
        return math.log(alpha) + np.asarray(u, dtype=float)
    return np.logaddexp(math.log(alpha) + u, math.log(beta))


def _exp_fraction(u, alpha, beta):
    """alpha e^u / (alpha e^u + beta), computed as a stable sigmoid."""
    if alpha == 0.0:
        return np.zeros_like(np.asarray(u, dtype=float))
    if beta == 0.0:
        return np.ones_like(np.asarray(u, dtype=float))
    z = np.asarray(u, dtype=float) + (math.log(alpha) - math.log(beta))
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    enz = np.exp(z[~pos])
    out[~pos] = enz / (1.0 + enz)
    return out


def affine_image(theta, offset, domain: BoxDomain) -> tuple:
    """Interval-arithmetic bounds of theta.x + offset over a box."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    lo = float(offset + np.sum(np.where(theta >= 0, theta * domain.lower, theta * domain.upper)))
    hi = float(offset + np.sum(np.where(theta >= 0, theta * domain.upper, theta * domain.lower)))
    return lo, hi


# ---- mechanism spec ----


@dataclass(frozen=True)
class MechanismSpec:
    """An LDP query: finite outputs, likelihood, and declared DP bound.

    Attributes:
        id: opaque identifier used in query logs and traces.
        outputs: finite output values in a fixed order.
        epsilon: declared DP bound (not recomputed tightness).
        kind: one of randomized-response, linear, truncated-linear, logistic.
        params: RrParams or RegressionParams matching the kind.
    """

    id: str
    outputs: tuple
    epsilon: float
    kind: str
    params: object

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def log_likelihood(self, output, x) -> np.ndarray:
        """log Pr(output | x), vectorized over candidate values x."""
        if self.kind == "randomized-response":
            return _rr_log_likelihood_values(self.params, self.epsilon, output, x)
        return regression_log_likelihood(self.kind, self.params, self.epsilon, output, x)

    def output_index(self, output) -> int:
        return self.outputs.index(output)


def _rr_log_likelihood_values(params: RrParams, epsilon, output, x):
    x = np.asarray(x)
    if params.component is not None:
        x = x[..., params.component]
    log_denom = math.log(params.m - 1 + math.exp(epsilon))
    match = epsilon - log_denom
    mismatch = -log_denom
    return np.where(x == output, match, mismatch)


# ---- spec operations ----


def rr_log_likelihood(m: int, epsilon: float, y: int, x: int) -> float:
    """log Pr(y | x) of an epsilon-DP randomized response on m candidates.

    Args:
        m: universe size, >= 2.
        epsilon: DP bound, > 0.
        y: output index in [0, m).
        x: candidate index in [0, m).

    Returns:
        log(e^eps / (m - 1 + e^eps)) when y == x, else log(1 / (m - 1 + e^eps)).
    """
    if m < 2:
        raise ValueError("universe size must be >= 2")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not (0 <= y < m and 0 <= x < m):
        raise ValueError("candidate index out of range")
    log_denom = math.log(m - 1 + math.exp(epsilon))
    return epsilon - log_denom if y == x else -log_denom


def perturb_continuous(y: float, a: float, b: float, epsilon: float, rng) -> float:
    """Discretize-and-perturb a bounded value to one of its range endpoints.

    Returns b with probability (1/(b-a)) ((e^eps - 1)/(e^eps + 1)) (y - a)
    + 1/(e^eps + 1), else a.  The output distribution depends linearly on y,
    which is what makes the mechanism epsilon-LDP on [a, b].
    """
    if not a <= y <= b:
        raise ValueError("value outside its declared range")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    p_high = _ramp_probability(y, a, b, epsilon)
    return b if rng.random() < p_high else a


def _ramp_probability(y, a, b, epsilon):
    e = math.exp(epsilon)
    return ((e - 1.0) / (e + 1.0)) * (y - a) / (b - a) + 1.0 / (e + 1.0)


def mean_estimate(freq_b: float, a: float, b: float, epsilon: float) -> float:
    """Invert the perturbation ramp: mean estimate from the frequency of b.

    Unbiased for the population mean of the perturbed values; the result may
    fall outside [a, b] due to sampling noise and is deliberately not clamped.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    e = math.exp(epsilon)
    return a + (b - a) * ((e + 1.0) * freq_b - 1.0) / (e - 1.0)


def _ramp_coefficients(params: RegressionParams, epsilon: float, high: bool):
    """Slope/intercept (alpha, beta) of Pr(output | u) = alpha u + beta."""
    a, b = params.out_low, params.out_high
    e = math.exp(epsilon)
    low_p = 1.0 / (e + 1.0)
    slope = (e - 1.0) / ((e + 1.0) * (b - a))
    if high:
        return slope, low_p - slope * a
    return -slope, (e / (e + 1.0)) + slope * a


def _logistic_coefficients(params: RegressionParams, epsilon: float, output) -> tuple:
    """(alpha, beta) of Pr(output | u) = (alpha e^u + beta) / (e^u + 1).

    The sigmoid value sits in [0, 1] but is discretized by the ramp over
    [out_low, out_high]; a wider ramp interval leaves the per-query
    likelihood ratio strictly below e^epsilon.
    """
    a, b = params.out_low, params.out_high
    e = math.exp(epsilon)
    low_p = 1.0 / (e + 1.0)
    slope = (e - 1.0) / ((e + 1.0) * (b - a))
    alpha_high = slope * (1.0 - a) + low_p
    beta_high = low_p - slope * a
    if output == 1:
        return alpha_high, beta_high
    return 1.0 - alpha_high, 1.0 - beta_high


def regression_log_likelihood(kind, params: RegressionParams, epsilon, output, x):
    """log Pr(output | x) of an LDP-wrapped regression.

    The regression value u = theta.x + intercept is mapped through the
    perturbation ramp; `linear` requires u within [out_low, out_high],
    `truncated-linear` clamps u into that range first, and `logistic` maps
    u through a sigmoid onto [0, 1] with outputs {0, 1}.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(x, dtype=float)
    if params.theta.size == 1 and x.ndim <= 1:
        u = params.theta[0] * x + params.intercept
    else:
        u = x @ params.theta + params.intercept
    e = math.exp(epsilon)
    low_p, high_p = 1.0 / (e + 1.0), e / (e + 1.0)

    if kind == "linear":
        if np.any(u < params.out_low - 1e-9) or np.any(u > params.out_high + 1e-9):
            raise ValueError("regression value outside [out_low, out_high]")
        high = output == params.out_high
        if not high and output != params.out_low:
            raise ValueError(f"output {output!r} not in mechanism range")
        alpha, beta = _ramp_coefficients(params, epsilon, high)
        return np.log(np.clip(alpha * u + beta, low_p, high_p))

    if kind == "truncated-linear":
        high = output == params.out_high
        if not high and output != params.out_low:
            raise ValueError(f"output {output!r} not in mechanism range")
        alpha, beta = _ramp_coefficients(params, epsilon, high)
        return np.log(np.clip(alpha * u + beta, low_p, high_p))

    if kind == "logistic":
        if output not in (0, 1):
            raise ValueError(f"output {output!r} not in mechanism range")
        alpha, beta = _logistic_coefficients(params, epsilon, output)
        return _log_alpha_exp_beta(u, alpha, beta) - np.logaddexp(u, 0.0)

    raise ValueError(f"unsupported regression kind {kind!r}")


def dc_decompose(kind, params: RegressionParams, epsilon, output):
    """Split log Pr(output | x) into convex f and g term lists (f - g).

    Returns:
        (f_terms, g_terms): DcTerm sequences with f(x) - g(x) equal to
        regression_log_likelihood at every x, each term convex.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    e = math.exp(epsilon)
    low_p, high_p = 1.0 / (e + 1.0), e / (e + 1.0)
    theta, c = params.theta, params.intercept

    if kind == "linear":
        alpha, beta = _ramp_coefficients(params, epsilon, output == params.out_high)
        _require_output(output, (params.out_low, params.out_high))
        return (), (DcTerm("neg-log-affine", theta, c, alpha=alpha, beta=beta),)

    if kind == "truncated-linear":
        _require_output(output, (params.out_low, params.out_high))
        alpha, beta = _ramp_coefficients(params, epsilon, output == params.out_high)
        f_terms = (
            DcTerm("affine", np.zeros_like(theta), math.log(low_p)),
            DcTerm("neg-log-min-affine", theta, c, alpha=alpha, beta=beta, cap=low_p),
        )
        g_terms = (
            DcTerm("neg-log-min-affine", theta, c, alpha=alpha, beta=beta, cap=high_p),
        )
        return f_terms, g_terms

    if kind == "logistic":
        _require_output(output, (0, 1))
        alpha, beta = _logistic_coefficients(params, epsilon, output)
        f_terms = (DcTerm("log-sum-exp-affine", theta, c, alpha=alpha, beta=beta),)
        g_terms = (DcTerm("log-sum-exp-affine", theta, c, alpha=1.0, beta=1.0),)
        return f_terms, g_terms

    raise ValueError(f"unsupported regression kind {kind!r}")


def _require_output(output, outputs):
    if output not in outputs:
        raise ValueError(f"output {output!r} not in mechanism range")


def square_log_decompose(alpha: float, beta: float, theta, offset: float,
                         domain: BoxDomain):
    """DC split of log(alpha u^2 + beta), u = theta.x + offset, on a box.

    log(alpha u^2 + beta) is neither convex nor concave, so a quadratic
    regularizer q u^2 is added to both sides: the returned pair
    (f, g) = (log(alpha u^2 + beta) + q u^2, q u^2) has f - g equal to the
    original and both terms convex on the image of the box.  q is the
    smallest weight flipping the sign of the most negative curvature, which
    sits at u^2 = min(max image of u^2, 3 beta / alpha).
    """
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    lo, hi = affine_image(theta, offset, domain)
    s_max = max(lo * lo, hi * hi)
    s_star = min(s_max, 3.0 * beta / alpha)
    quad = max(0.0, alpha * (alpha * s_star - beta) / (alpha * s_star + beta) ** 2)
    f = DcTerm("log-square-reg", theta, offset, alpha=alpha, beta=beta, quad=quad)
    g = DcTerm("square", theta, offset, quad=quad)
    return f, g


def sample(mech: MechanismSpec, x, rng) -> object:
    """Draw one output of mech applied to object value x.

    The caller owns the rng handle; fixed seeds give fixed output sequences.
    """
    log_probs = np.array(
        [np.asarray(mech.log_likelihood(y, x), dtype=float).item() for y in mech.outputs]
    )
    probs = np.exp(log_probs)
    total = probs.sum()
    if not math.isclose(total, 1.0, abs_tol=1e-6):
        raise ValueError("likelihoods do not sum to 1; x outside mechanism domain")
    probs = probs / total
    idx = rng.choice(len(mech.outputs), p=probs)
    return mech.outputs[int(idx)]


# ---- factories ----


def randomized_response(m: int, epsilon: float, mech_id: str = "rr",
                        candidates: Optional[Sequence] = None,
                        component: Optional[int] = None) -> MechanismSpec:
    """Randomized response over m candidates (default universe 0..m-1)."""
    outputs = tuple(candidates) if candidates is not None else tuple(range(m))
    if len(outputs) != m:
        raise ValueError("candidate list length must equal m")
    return MechanismSpec(mech_id, outputs, float(epsilon), "randomized-response",
                         RrParams(m, component))


def _check_linear_image(params: RegressionParams, domain: Optional[BoxDomain]):
    if domain is None:
        return
    lo, hi = affine_image(params.theta, params.intercept, domain)
    if lo < params.out_low - 1e-9 or hi > params.out_high + 1e-9:
        raise ValueError("regression image exceeds [out_low, out_high] on the domain")


def linear_mechanism(params: RegressionParams, epsilon: float, mech_id: str = "linreg",
                     domain: Optional[BoxDomain] = None) -> MechanismSpec:
    """Linear regression wrapped in the perturbation ramp; outputs the range endpoints."""
    _check_linear_image(params, domain)
    return MechanismSpec(mech_id, (params.out_low, params.out_high), float(epsilon),
                         "linear", params)


def truncated_linear_mechanism(params: RegressionParams, epsilon: float,
                               mech_id: str = "truncreg") -> MechanismSpec:
    return MechanismSpec(mech_id, (params.out_low, params.out_high), float(epsilon),
                         "truncated-linear", params)


def logistic_mechanism(params: RegressionParams, epsilon: float,
                       mech_id: str = "logreg") -> MechanismSpec:
    """Logistic regression: sigmoid of theta.x + c perturbed onto outputs {0, 1}.

    The ramp interval [out_low, out_high] must cover the sigmoid image [0, 1];
    a wider interval keeps the mechanism epsilon-LDP but leaves part of the
    likelihood-ratio budget unused.
    """
    if params.out_low > 0.0 or params.out_high < 1.0:
        raise ValueError("logistic ramp interval must contain [0, 1]")
    return MechanismSpec(mech_id, (0, 1), float(epsilon), "logistic", params)
