"""Student t distribution and the centroid one-sample t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
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
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_cdf(t: float, df: float) -> float:
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    tail = 0.5 * betainc_regularized(df / 2.0, 0.5, df / (df + t * t))
    return 1.0 - tail if t > 0 else tail


def t_ppf(p: float, df: float) -> float:
    """Quantile function by root finding on :func:`t_cdf`."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_ppf(1.0 - p, df)
    hi = 1.0
    while t_cdf(hi, df) < p:
        hi *= 2.0
    return brentq(lambda x: t_cdf(x, df) - p, 0.0, hi, xtol=1e-13, rtol=1e-13)


def t_critical(alpha: float, df: float) -> float:
    """Upper ``alpha / 2`` quantile (two-sided critical value)."""
    return t_ppf(1.0 - alpha / 2.0, df)


@dataclass(frozen=True)
class TTestResult:
    statistics: np.ndarray
    passed: bool
    abstained: bool
    threshold: float = float("nan")


def t_test(
    centroids,
    c_d,
    alpha: float = 0.05,
    m_min: int = 5,
    familywise: bool = True,
) -> TTestResult:
    """Per-axis one-sample t-test of a detection centroid against the centroid history.

    ``t_a = (mean(C)_a - c_d,a) / (std(C)_a / sqrt(m))`` with ``m - 1``
    degrees of freedom; the test passes when every informative axis stays
    within the critical value. With ``familywise`` the per-axis level is
    Sidak-adjusted over the informative axes so the joint test keeps size
    ``alpha``. An axis with zero spread and zero deviation is uninformative
    (``t = 0``); zero spread with a nonzero deviation abstains.
    """
    C = np.asarray(centroids, dtype=np.float64)
    C = C.reshape(len(C), -1)
    c = np.asarray(c_d, dtype=np.float64).reshape(-1)
    m = len(C)
    if m < max(m_min, 2):
        return TTestResult(np.full(c.shape, np.nan), False, True)
    mu = C.mean(axis=0)
    sd = C.std(axis=0, ddof=1)
    dev = mu - c
    stats = np.zeros_like(mu)
    informative = sd > 0
    if np.any(~informative & (dev != 0)):
        return TTestResult(np.full(c.shape, np.nan), False, True)
    stats[informative] = dev[informative] / (sd[informative] / math.sqrt(m))
    k = int(informative.sum())
    if k == 0:
        return TTestResult(stats, True, False, float("inf"))
    level = 1.0 - (1.0 - alpha) ** (1.0 / k) if familywise else alpha
    crit = t_critical(level, m - 1)
    return TTestResult(stats, bool(np.all(np.abs(stats) <= crit)), False, crit)
