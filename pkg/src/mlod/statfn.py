"""Chi-square and Cauchy distribution helpers for the fusion rules.

The chi-square routines only need even degrees of freedom (Fisher's statistic
has df = 2m), which admits the closed form

    CDF(x; df) = 1 - exp(-x/2) * sum_{j=0}^{df/2 - 1} (x/2)^j / j!

The sum is evaluated with the term recurrence t_{j+1} = t_j * (x/2) / (j+1),
seeded with exp(-x/2) folded into t_0 so no intermediate term can overflow.
For df/2 beyond 150 the accumulation moves to log space, which stays accurate
for arbitrarily large arguments.
"""

from __future__ import annotations

import math

from .errors import OddDf

_LOGSPACE_HALF_DF = 150


def _check_even_df(df: int) -> int:
    if df < 2 or df % 2 != 0:
        raise OddDf(f"degrees of freedom must be even and >= 2, got {df}")
    return df // 2


def chi2_cdf_even(x: float, df: int) -> float:
    """CDF of the chi-square distribution with even df, evaluated at x >= 0."""
    half = _check_even_df(df)
    if x < 0:
        raise ValueError(f"x must be nonnegative, got {x}")
    if x == 0.0:
        return 0.0
    h = x / 2.0
    if half <= _LOGSPACE_HALF_DF:
        term = math.exp(-h)
        if term > 0.0:
            total = term
            for j in range(1, half):
                term *= h / j
                total += term
            return max(0.0, min(1.0, 1.0 - total))
        # exp(-x/2) underflowed; the survival mass is below float resolution
        # unless the log-space path says otherwise, so fall through.
    log_h = math.log(h)
    log_terms = [j * log_h - math.lgamma(j + 1) for j in range(half)]
    peak = max(log_terms)
    lse = peak + math.log(math.fsum(math.exp(t - peak) for t in log_terms))
    survival = math.exp(min(0.0, -h + lse))
    return max(0.0, min(1.0, 1.0 - survival))


def chi2_quantile(q: float, df: int) -> float:
    """Inverse of chi2_cdf_even: the x with CDF(x; df) = q, for q in (0, 1).

    Solved by bracketing and bisection; the result satisfies
    |chi2_cdf_even(result, df) - q| <= 1e-12 over the supported df range.
    """
    _check_even_df(df)
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    lo = 0.0
    hi = df + 10.0 * math.sqrt(2.0 * df) + 10.0
    while chi2_cdf_even(hi, df) < q:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if chi2_cdf_even(mid, df) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def cauchy_quantile(q: float) -> float:
    """Quantile of the standard Cauchy distribution: tan(pi * (q - 1/2))."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    return math.tan(math.pi * (q - 0.5))
