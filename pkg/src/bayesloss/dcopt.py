"""Certified extrema of summed log-likelihoods over box domains.

Each accepted query contributes log Pr(y_i | x) = f_i(x) - g_i(x) with both
sides convex functions of an affine value u_i = theta_i . x + c_i
(mechanisms.dc_decompose).  Bounding the realized privacy loss needs the
global max and min of the sum, which this module brackets by branch and
bound over the box of the distinct affine values: on every sub-box the
concave side of each term is replaced by its secant, leaving a convex
subproblem whose solution certifies a lower bound, while evaluating the true
objective at the subproblem's argmin yields an upper bound.  Subproblems are
solved with a log-barrier damped-Newton scheme; a difference-of-convex local
search (DCA) seeds the incumbent.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.special import expit

from bayesloss.core import BoxDomain
from bayesloss.mechanisms import DcTerm, affine_image

__all__ = [
    "Infeasible",
    "EnvelopeError",
    "Envelope",
    "YBox",
    "DcObjective",
    "BnbNode",
    "BnbResult",
    "LossBoundsResult",
    "concave_envelope",
    "solve_convex_subproblem",
    "dca_local_minimize",
    "branch",
    "branch_and_bound_min",
    "realized_loss_bounds",
]

DEFAULT_DELTA = 0.01
DEFAULT_NODE_BUDGET = 10**5
DEFAULT_GROUP_SIZE = 10
_PRESPLIT_CAP = 512
_SLAB_PAD = 1e-9


class Infeasible(Exception):
    """The constraint polytope has no interior point."""


class EnvelopeError(ValueError):
    """Secant envelope undefined (F infinite at an interval endpoint)."""


# ---- envelopes ----


@dataclass(frozen=True)
class Envelope:
    """Affine dominator H(y) = slope*y + const of a convex F on an interval."""

    slope: float
    const: float

    def __call__(self, y):
        return self.slope * np.asarray(y, dtype=float) + self.const


def concave_envelope(term: DcTerm, interval) -> Envelope:
    """Secant of F over [a, b]: matches F at the endpoints, dominates inside.

    A degenerate interval (width < 1e-12) collapses to the constant F(a).
    """
    a, b = float(interval[0]), float(interval[1])
    if a > b:
        raise ValueError("interval endpoints out of order")
    fa = float(term.shape_value(a))
    fb = float(term.shape_value(b))
    if not (math.isfinite(fa) and math.isfinite(fb)):
        raise EnvelopeError("F infinite at an interval endpoint")
    if b - a < 1e-12:
        return Envelope(0.0, fa)
    slope = (fb - fa) / (b - a)
    return Envelope(slope, fa - slope * a)


# ---- y boxes ----


@dataclass(frozen=True)
class YBox:
    """Intervals bounding the distinct affine values y_j = theta_j . x + c_j."""

    thetas: np.ndarray  # (n_y, dim)
    offsets: np.ndarray  # (n_y,)
    lower: np.ndarray
    upper: np.ndarray

    @property
    def size(self) -> int:
        return self.lower.size

    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def with_interval(self, j: int, lo: float, hi: float) -> "YBox":
        lower = self.lower.copy()
        upper = self.upper.copy()
        lower[j], upper[j] = lo, hi
        return YBox(self.thetas, self.offsets, lower, upper)


def _index_terms(terms: Sequence[DcTerm], keys: list, dim: int) -> list:
    """Map each term to the index of its distinct (theta, offset), -1 if constant."""
    idx = []
    for t in terms:
        if t.theta.size != dim:
            raise ValueError("term direction does not match the domain dimension")
        if not np.any(t.theta):
            idx.append(-1)
            continue
        key = (tuple(t.theta.tolist()), t.offset)
        if key not in keys:
            keys.append(key)
        idx.append(keys.index(key))
    return idx


@dataclass(frozen=True)
class _SoftplusPair:
    """Fused f/g log-sum-exp terms sharing one affine direction.

    p(u) = softplus(u + af) - softplus(u + ag) + const is the pair's exact
    contribution to the objective: an S-curve whose total variation is
    |af - ag|, far smaller than either softplus alone.  Node relaxations
    replace it by its convex envelope instead of secanting the g side,
    which keeps the bound gap proportional to the pair's own range.
    """

    j: int
    theta: np.ndarray
    offset: float
    af: float
    ag: float
    const: float

    def p(self, u):
        u = np.asarray(u, dtype=float)
        return (np.logaddexp(0.0, u + self.af) - np.logaddexp(0.0, u + self.ag)
                + self.const)

    def dp(self, u):
        u = np.asarray(u, dtype=float)
        return expit(u + self.af) - expit(u + self.ag)

    def d2p(self, u):
        u = np.asarray(u, dtype=float)
        sa = expit(u + self.af)
        sg = expit(u + self.ag)
        return sa * (1.0 - sa) - sg * (1.0 - sg)

    @property
    def inflection(self) -> float:
        return -0.5 * (self.af + self.ag)


class DcObjective:
    """Minimization target sum(f) - sum(g) of convex-of-affine terms on a box.

    Construction validates term dimensions and checks each term's convexity
    on the image of the box (second differences over 100 points), and builds
    the root YBox over the distinct affine directions.  f/g log-sum-exp
    terms sharing a direction are fused into softplus pairs so node
    relaxations can bound their difference directly.
    """

    def __init__(self, f_terms: Sequence[DcTerm], g_terms: Sequence[DcTerm],
                 domain: BoxDomain, validate: bool = True):
        self.f_terms = tuple(f_terms)
        self.g_terms = tuple(g_terms)
        self.domain = domain
        keys: list = []
        self.f_index = _index_terms(self.f_terms, keys, domain.dim)
        self.g_index = _index_terms(self.g_terms, keys, domain.dim)
        thetas = np.array([k[0] for k in keys], dtype=float).reshape(len(keys), domain.dim)
        offsets = np.array([k[1] for k in keys], dtype=float)
        bounds = [affine_image(th, off, domain) for th, off in zip(thetas, offsets)]
        lower = np.array([b[0] for b in bounds], dtype=float)
        upper = np.array([b[1] for b in bounds], dtype=float)
        self.root_ybox = YBox(thetas, offsets, lower, upper)
        if validate:
            self._check_convexity()
        self._finalize_pairs()

    def _finalize_pairs(self):
        """Match f and g log-sum-exp terms per direction, one to one."""
        def eligible(terms, index):
            found: dict = {}
            for pos, (t, j) in enumerate(zip(terms, index)):
                if j >= 0 and t.kind == "log-sum-exp-affine" \
                        and t.alpha > 0 and t.beta > 0:
                    found.setdefault(j, []).append(pos)
            return found

        f_at = eligible(self.f_terms, self.f_index)
        g_at = eligible(self.g_terms, self.g_index)
        pairs = []
        used_f: set = set()
        used_g: set = set()
        for j in sorted(set(f_at) & set(g_at)):
            for fp, gp in zip(f_at[j], g_at[j]):
                ft, gt = self.f_terms[fp], self.g_terms[gp]
                pairs.append(_SoftplusPair(
                    j, ft.theta, ft.offset,
                    math.log(ft.alpha / ft.beta), math.log(gt.alpha / gt.beta),
                    math.log(ft.beta) - math.log(gt.beta)))
                used_f.add(fp)
                used_g.add(gp)
        self.pairs = tuple(pairs)
        self._loose_f = tuple(t for p, t in enumerate(self.f_terms)
                              if p not in used_f)
        self._loose_g = tuple((t, j) for p, (t, j)
                              in enumerate(zip(self.g_terms, self.g_index))
                              if p not in used_g)

    def _check_convexity(self):
        for terms, index in ((self.f_terms, self.f_index), (self.g_terms, self.g_index)):
            for t, j in zip(terms, index):
                if j < 0:
                    continue
                lo, hi = self.root_ybox.lower[j], self.root_ybox.upper[j]
                if not t.is_convex_on(lo, hi):
                    raise ValueError(f"term {t.kind} not convex on [{lo:.6g}, {hi:.6g}]")

    def evaluate(self, x) -> np.ndarray:
        """sum f - sum g at x (vectorized over leading axes)."""
        x = np.asarray(x, dtype=float)
        total = np.zeros(x.shape[:-1]) if x.ndim > 1 else np.zeros(())
        for t in self.f_terms:
            total = total + t.value(x)
        for t in self.g_terms:
            total = total - t.value(x)
        return total

    def swapped(self) -> "DcObjective":
        """Objective for the maximization: min(g - f) = -max(f - g)."""
        out = DcObjective.__new__(DcObjective)
        out.f_terms, out.g_terms = self.g_terms, self.f_terms
        out.f_index, out.g_index = self.g_index, self.f_index
        out.domain = self.domain
        out.root_ybox = self.root_ybox
        out._finalize_pairs()
        return out


# ---- convex relaxation of a node ----


class _Relaxation:
    """Convex surrogate sum_f F_t(u_t) + w.x + const with value/grad/hess."""

    def __init__(self, f_terms, lin_w, lin_const):
        self.f_terms = tuple(f_terms)
        self.lin_w = np.asarray(lin_w, dtype=float)
        self.lin_const = float(lin_const)

    def value(self, x) -> float:
        total = self.lin_const + float(self.lin_w @ x)
        for t in self.f_terms:
            total += float(np.asarray(t.shape_value(t.u_of(x))).item())
        return total

    def grad(self, x) -> np.ndarray:
        g = self.lin_w.copy()
        for t in self.f_terms:
            g += float(np.asarray(t.shape_deriv(t.u_of(x))).item()) * t.theta
        return g

    def hess(self, x) -> np.ndarray:
        h = np.zeros((self.lin_w.size, self.lin_w.size))
        for t in self.f_terms:
            h += (float(np.asarray(t.shape_deriv2(t.u_of(x))).item())
                  * np.outer(t.theta, t.theta))
        return h


class _EnvelopePiece:
    """Convex envelope of a softplus pair on one node interval.

    DcTerm-shaped (theta/offset/u_of/shape_*) so _Relaxation treats it like
    an exact convex f term.  The envelope follows the pair's curve on its
    convex side and a junction-tangent line across the concave side; the
    line is shifted down by the tangency residual so the piece never rises
    above the true pair value.
    """

    def __init__(self, pair: _SoftplusPair, t_break: float, m: float,
                 q: float, curve_side: str):
        self.pair = pair
        self.theta = pair.theta
        self.offset = pair.offset
        self.t_break = t_break
        self.m = m
        self.q = q
        self.curve_side = curve_side

    def u_of(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.theta + self.offset

    def _on_curve(self, u):
        if self.curve_side == "left":
            return u <= self.t_break
        return u >= self.t_break

    def shape_value(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(self._on_curve(u), self.pair.p(u), self.m * u + self.q)

    def shape_deriv(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(self._on_curve(u), self.pair.dp(u), self.m)

    def shape_deriv2(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(self._on_curve(u), self.pair.d2p(u), 0.0)


def _chord(pair: _SoftplusPair, l: float, h: float):
    """(slope, intercept) of the secant of p over [l, h]."""
    pl, ph = float(pair.p(l)), float(pair.p(h))
    if h - l <= 1e-12:
        return 0.0, min(pl, ph) - 1e-12
    m = (ph - pl) / (h - l)
    return m, pl - m * l


def _pair_envelope(pair: _SoftplusPair, l: float, h: float):
    """Convex envelope of the pair over [l, h].

    Returns an _EnvelopePiece, or ("linear", slope, intercept) when the
    envelope is a single line (foldable into the relaxation's linear part).
    Chords are only used where they provably minorize p: over the pure
    concave side, or across the whole interval when no interior tangency
    exists.  Tangency junctions keep the residual p(h)-p(t)-p'(t)(h-t) >= 0
    side so the piece stays convex; the residual is subtracted back out of
    the line to preserve the lower bound.
    """
    if pair.af == pair.ag or h - l <= 1e-12:
        return ("linear",) + _chord(pair, l, h)
    u0 = pair.inflection
    increasing = pair.af > pair.ag

    if increasing:
        if h <= u0:
            return _EnvelopePiece(pair, math.inf, 0.0, 0.0, "left")
        if l >= u0:
            return ("linear",) + _chord(pair, l, h)
        anchor = h

        def resid(t):
            return float(pair.p(anchor) - pair.p(t)
                         - pair.dp(t) * (anchor - t))

        a, b = l, min(u0, h)
        if resid(a) <= 0.0:
            return ("linear",) + _chord(pair, l, h)
        for _ in range(90):
            mid = 0.5 * (a + b)
            if resid(mid) >= 0.0:
                a = mid
            else:
                b = mid
        t = a
        m = (float(pair.p(anchor)) - float(pair.p(t))) / (anchor - t)
        shift = max(resid(t), 0.0) + 1e-12 * (1.0 + abs(float(pair.p(t))))
        q = float(pair.p(t)) - m * t - shift
        return _EnvelopePiece(pair, t, m, q, "left")

    # decreasing pair: concave then convex, anchor on the left
    if l >= u0:
        return _EnvelopePiece(pair, -math.inf, 0.0, 0.0, "right")
    if h <= u0:
        return ("linear",) + _chord(pair, l, h)
    anchor = l

    def resid(t):
        return float(pair.p(anchor) - pair.p(t) - pair.dp(t) * (anchor - t))

    a, b = max(u0, l), h
    if resid(b) <= 0.0:
        return ("linear",) + _chord(pair, l, h)
    for _ in range(90):
        mid = 0.5 * (a + b)
        if resid(mid) >= 0.0:
            b = mid
        else:
            a = mid
    t = b
    m = (float(pair.p(t)) - float(pair.p(anchor))) / (t - anchor)
    shift = max(resid(t), 0.0) + 1e-12 * (1.0 + abs(float(pair.p(t))))
    q = float(pair.p(anchor)) - m * anchor - shift
    return _EnvelopePiece(pair, t, m, q, "right")


def _relax_node(obj: DcObjective, ybox: YBox) -> _Relaxation:
    """Secant the unpaired g terms, envelope the softplus pairs."""
    lin_w = np.zeros(obj.domain.dim)
    lin_const = 0.0
    for t, j in obj._loose_g:
        if j < 0:
            interval = (t.offset, t.offset)
        else:
            interval = (ybox.lower[j], ybox.upper[j])
        env = concave_envelope(t, interval)
        # -H(theta.x + c) folded into the linear part
        lin_w -= env.slope * t.theta
        lin_const -= env.slope * t.offset + env.const
    pieces = []
    for pair in obj.pairs:
        piece = _pair_envelope(pair, ybox.lower[pair.j], ybox.upper[pair.j])
        if isinstance(piece, tuple):
            _, m, q = piece
            lin_w += m * pair.theta
            lin_const += m * pair.offset + q
        else:
            pieces.append(piece)
    return _Relaxation(obj._loose_f + tuple(pieces), lin_w, lin_const)


def _tangent_relaxation(obj: DcObjective, x0: np.ndarray) -> _Relaxation:
    """DCA step surrogate: g linearized at x0 (a global under-estimator of g)."""
    lin_w = np.zeros(obj.domain.dim)
    lin_const = 0.0
    for t in obj.g_terms:
        u0 = float(np.asarray(t.u_of(x0)).item())
        slope = float(t.shape_deriv(u0))
        const = float(t.shape_value(u0)) - slope * u0
        lin_w -= slope * t.theta
        lin_const -= slope * t.offset + const
    return _Relaxation(obj.f_terms, lin_w, lin_const)


# ---- polytope and barrier solver ----


def _constraint_rows(xbox: BoxDomain, ybox: Optional[YBox]):
    """Rows (A, b) with the polytope interior given by A x - b > 0."""
    d = xbox.dim
    rows = [np.eye(d), -np.eye(d)]
    rhs = [xbox.lower, -xbox.upper]
    if ybox is not None and ybox.size:
        # pad keeps a strict interior even when branching pins an interval
        rows.append(ybox.thetas)
        rhs.append(ybox.lower - ybox.offsets - _SLAB_PAD)
        rows.append(-ybox.thetas)
        rhs.append(-(ybox.upper - ybox.offsets + _SLAB_PAD))
    return np.vstack(rows), np.concatenate(rhs)


def _strictly_feasible(A, b, x, margin: float) -> bool:
    return bool(np.all(A @ x - b > margin))


def _phase_one(A, b, xbox: BoxDomain, warm: Optional[np.ndarray]) -> np.ndarray:
    """Strictly feasible start: warm point, box center, else a margin LP."""
    margin = 1e-10
    if warm is not None and xbox.contains(warm) and _strictly_feasible(A, b, warm, margin):
        return np.asarray(warm, dtype=float).copy()
    center = xbox.center()
    if _strictly_feasible(A, b, center, margin):
        return center
    d = xbox.dim
    n_rows = A.shape[0]
    # maximize tau s.t. A x - b >= tau  (x kept inside the box via bounds)
    A_ub = np.hstack([-A, np.ones((n_rows, 1))])
    b_ub = -b
    cost = np.zeros(d + 1)
    cost[-1] = -1.0
    tau_max = max(1e-6, 0.5 * float(np.min(np.maximum(xbox.upper - xbox.lower, 2e-9))))
    bounds = [(lo, hi) for lo, hi in zip(xbox.lower, xbox.upper)] + [(0.0, tau_max)]
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0 or res.x is None or res.x[-1] <= 1e-12:
        raise Infeasible("empty constraint polytope")
    return res.x[:d]


def _newton_center(objective, A, b, x, t, max_iter=60):
    """Damped Newton on t*objective + barrier; returns the centered point."""
    def merit(z, r):
        return t * objective.value(z) - float(np.sum(np.log(r)))

    r = A @ x - b
    for _ in range(max_iter):
        inv_r = 1.0 / r
        grad = t * objective.grad(x) - A.T @ inv_r
        hess = t * objective.hess(x) + A.T @ (inv_r[:, None] ** 2 * A)
        try:
            step = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
        decrement = -float(grad @ step)
        if decrement <= 2e-10:
            break
        base = merit(x, r)
        # fraction-to-boundary start: cap the step at 99% of the distance to
        # the nearest constraint so backtracking never probes infeasible
        # points or the blow-up region of the log barrier
        s = A @ step
        shrinking = s < -1e-300
        alpha = 1.0
        if np.any(shrinking):
            alpha = min(1.0, 0.99 * float(np.min(-r[shrinking] / s[shrinking])))
        accepted = False
        while alpha > 1e-16:
            xn = x + alpha * step
            rn = A @ xn - b
            if np.all(rn > 0) and merit(xn, rn) <= base - 0.25 * alpha * decrement:
                x, r = xn, rn
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            break
    return x


def _barrier_minimize(objective, A, b, x0, tol):
    """Path-following minimize; returns (x, value, certified_gap)."""
    m_rows = A.shape[0]
    x = x0
    t = 1.0
    while True:
        x = _newton_center(objective, A, b, x, t)
        if m_rows / t <= 0.5 * tol:
            break
        t *= 20.0
    value = objective.value(x)
    gap = m_rows / t + 1e-8 * (1.0 + abs(value))
    return x, value, gap


def solve_convex_subproblem(objective, xbox: BoxDomain, ybox: Optional[YBox],
                            tol: float = 1e-6, warm: Optional[np.ndarray] = None):
    """Minimize a convex objective over {x in xbox, y intervals of ybox}.

    objective must expose value/grad/hess.  Returns (x, value) with value
    within tol of the constrained minimum; raises Infeasible when the
    polytope is empty.
    """
    A, b = _constraint_rows(xbox, ybox)
    x0 = _phase_one(A, b, xbox, warm)
    x, value, _ = _barrier_minimize(objective, A, b, x0, tol)
    return x, value


# ---- DCA local search ----


def _dca(obj: DcObjective, xbox: BoxDomain, ybox: YBox, iters: int, tol: float,
         inner_tol: float = 1e-7):
    A, b = _constraint_rows(xbox, ybox)
    x = _phase_one(A, b, xbox, None)
    best = float(np.asarray(obj.evaluate(x)).item())
    for _ in range(iters):
        surrogate = _tangent_relaxation(obj, x)
        xn, _, _ = _barrier_minimize(surrogate, A, b, x, inner_tol)
        vn = float(np.asarray(obj.evaluate(xn)).item())
        if vn > best - tol * max(1.0, abs(best)):
            if vn < best:
                x, best = xn, vn
            break
        x, best = xn, vn
    return x, best


def dca_local_minimize(obj: DcObjective, xbox: Optional[BoxDomain] = None,
                       ybox: Optional[YBox] = None, iters: int = 50) -> float:
    """Local difference-of-convex descent; returns f - g at the final iterate.

    Each step minimizes f minus the tangent of g at the current point, so the
    value sequence is non-increasing; stops after `iters` linearizations or
    relative improvement below 1e-9.
    """
    xbox = xbox if xbox is not None else obj.domain
    ybox = ybox if ybox is not None else obj.root_ybox
    _, value = _dca(obj, xbox, ybox, iters, 1e-9)
    return value


# ---- branch and bound ----


@dataclass
class BnbNode:
    """Queue entry: a y sub-box and the certified lower bound on it."""

    ybox: YBox
    lb: float
    x_at: Optional[np.ndarray] = None


def branch(node: BnbNode, root: YBox):
    """Split the interval of maximal length relative to the root at its midpoint.

    Ties take the lowest index.  Returns (left, right); None when every
    interval is degenerate (no-split signal, the node is terminal).
    """
    root_w = root.widths()
    rel = np.where(root_w > 0, node.ybox.widths() / np.where(root_w > 0, root_w, 1.0), 0.0)
    j = int(np.argmax(rel))
    if rel[j] <= 0 or node.ybox.widths()[j] < 1e-12:
        return None
    lo, hi = node.ybox.lower[j], node.ybox.upper[j]
    mid = 0.5 * (lo + hi)
    left = BnbNode(node.ybox.with_interval(j, lo, mid), node.lb, node.x_at)
    right = BnbNode(node.ybox.with_interval(j, mid, hi), node.lb, node.x_at)
    return left, right


@dataclass
class BnbResult:
    """Certified bracket of the global minimum plus solver diagnostics."""

    lb: float
    ub: float
    x_best: Optional[np.ndarray]
    converged: bool
    nodes: int
    gap: float
    wall_time: float

    def __iter__(self):
        yield self.lb
        yield self.ub


def _kink_points(obj: DcObjective) -> dict:
    """Y-dim -> sorted u values where a min-capped term changes branch.

    Pair envelopes are C1 across their junctions, so pairs need no presplit;
    only the hard cap kinks of truncated terms defeat the smooth solver.
    """
    kinks: dict = {}
    for terms, index in ((obj.f_terms, obj.f_index), (obj.g_terms, obj.g_index)):
        for t, j in zip(terms, index):
            if j < 0 or t.kind != "neg-log-min-affine" or t.alpha == 0.0:
                continue
            u = (t.cap - t.beta) / t.alpha
            kinks.setdefault(j, set()).add(u)
    return {j: sorted(v) for j, v in kinks.items()}


def _presplit_root(obj: DcObjective) -> list:
    """Kink-free starting boxes so node subproblems stay smooth."""
    boxes = [obj.root_ybox]
    for j, points in sorted(_kink_points(obj).items()):
        for u in points:
            out = []
            for bx in boxes:
                if bx.lower[j] + 1e-12 < u < bx.upper[j] - 1e-12 and len(boxes) < _PRESPLIT_CAP:
                    out.append(bx.with_interval(j, bx.lower[j], u))
                    out.append(bx.with_interval(j, u, bx.upper[j]))
                else:
                    out.append(bx)
            boxes = out
    return boxes


def branch_and_bound_min(obj: DcObjective, delta: float = DEFAULT_DELTA,
                         node_budget: int = DEFAULT_NODE_BUDGET,
                         tol: Optional[float] = None) -> BnbResult:
    """Bracket min over the box of sum(f) - sum(g) to within delta.

    Best-first over y sub-boxes: each node's convex relaxation (g replaced by
    secants) certifies a lower bound, the true objective at the relaxation's
    argmin updates the incumbent.  Stops when the incumbent is within delta
    of the smallest outstanding lower bound; if the node budget runs out the
    best bounds so far are returned with converged=False.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    start = time.perf_counter()
    sub_tol = tol if tol is not None else max(min(0.05 * delta, 1e-4), 1e-9)
    xbox = obj.domain

    ub_g = np.inf
    x_best: Optional[np.ndarray] = None
    heap: list = []
    counter = 0
    nodes_solved = 0
    floor_lb = np.inf  # min lb over regions retired from the queue

    def solve_node(ybox: YBox, inherit_lb: float, warm) -> Optional[BnbNode]:
        nonlocal ub_g, x_best, nodes_solved, floor_lb
        nodes_solved += 1
        relax = _relax_node(obj, ybox)
        A, b = _constraint_rows(xbox, ybox)
        try:
            x0 = _phase_one(A, b, xbox, warm)
        except Infeasible:
            return None
        x, value, gap = _barrier_minimize(relax, A, b, x0, sub_tol)
        lb = max(value - gap, inherit_lb)
        true_val = float(np.asarray(
            obj.evaluate(np.clip(x, xbox.lower, xbox.upper))).item())
        if true_val < ub_g:
            ub_g = true_val
            x_best = x.copy()
        return BnbNode(ybox, lb, x)

    # incumbent seed: one local DC descent from the root.  The incumbent only
    # prunes nodes, so its tolerances track delta instead of machine accuracy;
    # the value recorded is exact at the final iterate either way.
    try:
        x_dca, v_dca = _dca(obj, xbox, obj.root_ybox, 50,
                            max(0.01 * delta, 1e-9),
                            inner_tol=max(0.05 * delta, 1e-7))
        if v_dca < ub_g:
            ub_g, x_best = v_dca, x_dca
    except Infeasible:
        pass

    for ybox in _presplit_root(obj):
        node = solve_node(ybox, -np.inf, None)
        if node is None:
            continue
        if node.lb >= ub_g - delta:
            floor_lb = min(floor_lb, node.lb)
            continue
        heapq.heappush(heap, (node.lb, counter, node))
        counter += 1

    budget_hit = False
    while heap:
        lb_now, _, node = heapq.heappop(heap)
        if ub_g - lb_now <= delta:
            floor_lb = min(floor_lb, lb_now)
            break
        if nodes_solved >= node_budget:
            floor_lb = min(floor_lb, lb_now)
            budget_hit = True
            break
        children = branch(node, obj.root_ybox)
        if children is None:
            floor_lb = min(floor_lb, node.lb)
            continue
        for child in children:
            solved = solve_node(child.ybox, child.lb, child.x_at)
            if solved is None:
                continue
            if solved.lb >= ub_g - delta:
                floor_lb = min(floor_lb, solved.lb)
                continue
            heapq.heappush(heap, (solved.lb, counter, solved))
            counter += 1

    if heap:
        floor_lb = min(floor_lb, heap[0][0])
    lb = min(floor_lb, ub_g)
    gap = ub_g - lb
    return BnbResult(
        lb=float(lb),
        ub=float(ub_g),
        x_best=x_best,
        converged=bool(not budget_hit and gap <= delta + 1e-12),
        nodes=nodes_solved,
        gap=float(gap),
        wall_time=time.perf_counter() - start,
    )


# ---- realized loss bounds over grouped queries ----


@dataclass
class LossBoundsResult:
    """Sandwich of the realized loss with per-group diagnostics.

    loss_ub is certified; loss_lb comes from evaluating the full objective at
    the incumbent points of every group solve, so both bracket the exact
    loss.  log_interval is the certified bracket of the grouped log bound
    itself (for a single group this brackets the exact log loss).
    """

    loss_lb: float
    loss_ub: float
    log_interval: tuple
    converged: bool
    groups: list = field(default_factory=list)

    def __iter__(self):
        yield self.loss_lb
        yield self.loss_ub


def realized_loss_bounds(queries, domain: BoxDomain,
                         group_size: int = DEFAULT_GROUP_SIZE,
                         delta: float = DEFAULT_DELTA,
                         node_budget: int = DEFAULT_NODE_BUDGET) -> LossBoundsResult:
    """Bracket L = max_x P(x) / min_x P(x) for DC-decomposed query records.

    queries carry f_terms/g_terms for their observed outputs; they are
    partitioned in order into groups of group_size and the per-group extrema
    bounds are summed in log domain (partitioning can only loosen the upper
    bound, never break it).
    """
    queries = list(queries)
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    if not queries:
        return LossBoundsResult(1.0, 1.0, (0.0, 0.0), True)

    log_ub_hi = 0.0
    log_ub_lo = 0.0
    all_converged = True
    diagnostics = []
    incumbents = []
    for g0 in range(0, len(queries), group_size):
        group = queries[g0:g0 + group_size]
        f_terms = [t for q in group for t in q.f_terms]
        g_terms = [t for q in group for t in q.g_terms]
        obj = DcObjective(f_terms, g_terms, domain)
        res_min = branch_and_bound_min(obj, delta, node_budget)
        res_max = branch_and_bound_min(obj.swapped(), delta, node_budget)
        # max log P in [-res_max.ub, -res_max.lb], min log P in [lb, ub]
        log_ub_hi += (-res_max.lb) - res_min.lb
        log_ub_lo += (-res_max.ub) - res_min.ub
        all_converged = all_converged and res_min.converged and res_max.converged
        for r in (res_min, res_max):
            if r.x_best is not None:
                incumbents.append(r.x_best)
        diagnostics.append({
            "queries": len(group),
            "log_max": (-res_max.ub, -res_max.lb),
            "log_min": (res_min.lb, res_min.ub),
            "nodes": res_min.nodes + res_max.nodes,
            "converged": res_min.converged and res_max.converged,
        })

    loss_lb = 1.0
    if incumbents:
        vals = []
        for p in incumbents:
            total = 0.0
            for q in queries:
                for t in q.f_terms:
                    total += float(np.asarray(t.value(p)).item())
                for t in q.g_terms:
                    total -= float(np.asarray(t.value(p)).item())
            vals.append(total)
        loss_lb = float(np.exp(max(vals) - min(vals)))
    return LossBoundsResult(
        loss_lb=loss_lb,
        loss_ub=float(np.exp(log_ub_hi)),
        log_interval=(log_ub_lo, log_ub_hi),
        converged=all_converged,
        groups=diagnostics,
    )
