"""Evaluation metrics: NMSE, accuracy at a tolerance, term recall, t intervals, diversity."""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .exprlang import Expr, Term, canonicalize, parse_expr, print_expr, skeletonize, symbol_bag


def nmse(y, yhat) -> float:
    """``sum((y - yhat)^2) / sum((y - mean(y))^2)``; multi-output inputs average per column."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    if y.ndim == 2:
        return float(np.mean([nmse(y[:, j], yhat[:, j]) for j in range(y.shape[1])]))
    if len(y) < 2:
        raise ValueError("NMSE needs at least two samples")
    denom = float(np.sum((y - y.mean()) ** 2))
    if denom == 0.0:
        raise ValueError("NMSE is undefined for a constant target")
    return float(np.sum((y - yhat) ** 2)) / denom


def acc_at_tol(values: Sequence[float], tol: float = 0.1) -> float:
    """Fraction of runs whose NMSE is strictly below ``tol``."""
    values = list(values)
    if not values:
        raise ValueError("no runs")
    return sum(1 for v in values if v < tol) / len(values)


def _skeleton_key(term: str | Expr | Term) -> str:
    if isinstance(term, Term):
        e = term.ast
    elif isinstance(term, Expr):
        e = term
    else:
        e = parse_expr(term)
    return print_expr(skeletonize(canonicalize(e)))


def term_recall(gt_terms: Iterable, pred_terms: Iterable) -> float:
    gt = {_skeleton_key(t) for t in gt_terms}
    if not gt:
        raise ValueError("ground truth has no terms")
    pred = {_skeleton_key(t) for t in pred_terms}
    return len(gt & pred) / len(gt)


# ---------------------------------------------------------------------------
# Student t quantile


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 500):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lbt) * _betacf(a, b, x) / a
    return 1.0 - math.exp(lbt) * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, df: float) -> float:
    x = df / (df + t * t)
    tail = 0.5 * betainc(df / 2.0, 0.5, x)
    return 1.0 - tail if t >= 0 else tail


def t_quantile(p: float, df: float) -> float:
    """Inverse Student t CDF by bracketing and bisection on :func:`t_cdf`."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, df)
    lo, hi = 0.0, 1.0
    while t_cdf(hi, df) < p:
        lo, hi = hi, hi * 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class MetricSummary:
    values: tuple[float, ...]
    mean: float
    half_width: float
    n: int

    def __str__(self) -> str:
        return f"{self.mean:.6g} ± {self.half_width:.3g} (n={self.n})"


def confidence_interval(samples: Sequence[float], level: float = 0.95) -> MetricSummary:
    """Mean and t-based half-width ``t_{(1+level)/2, n-1} s / sqrt(n)``."""
    x = np.asarray(list(samples), dtype=float)
    n = len(x)
    if n < 2:
        raise ValueError("a confidence interval needs at least two samples")
    s = float(np.std(x, ddof=1))
    t = t_quantile(0.5 + level / 2.0, n - 1)
    return MetricSummary(tuple(float(v) for v in x), float(x.mean()), t * s / math.sqrt(n), n)


# ---------------------------------------------------------------------------
# diversity


@dataclass(frozen=True)
class Diversity:
    index: float | None
    distinct_ratio: float


def _bag(term) -> frozenset[str]:
    if isinstance(term, Term):
        return symbol_bag(term.ast)
    if isinstance(term, Expr):
        return symbol_bag(term)
    return symbol_bag(parse_expr(term))


def diversity_index(terms: Sequence) -> Diversity:
    """``1 - mean pairwise Jaccard`` over the symbol bags of unique terms, plus the distinct ratio."""
    texts = [t.source if isinstance(t, Term) else str(t) for t in terms]
    if not texts:
        raise ValueError("no terms")
    unique = list(dict.fromkeys(texts))
    ratio = len(unique) / len(texts)
    if len(unique) < 2:
        return Diversity(None, ratio)
    bags = [_bag(t) for t in unique]
    sims = [len(a & b) / len(a | b) for a, b in combinations(bags, 2)]
    return Diversity(1.0 - float(np.mean(sims)), ratio)
