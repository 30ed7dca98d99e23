"""Fusion of per-layer p-values into one OOD verdict.

Every rule takes a vector of m per-layer p-values and a level alpha.

Step-up rules (bh, adabh, by) flag the sample when any sorted p-value falls
under its rank-scaled threshold and additionally localize which layers drove
the rejection. bh uses thresholds alpha*k/m; by divides them by the harmonic
sum f(m) = sum_{i<=m} 1/i, which buys validity under arbitrary dependence;
adabh first estimates the number of null layers m0 from the slope of the
sorted p-values and reruns the step-up with m replaced by m0.

Global rules reduce the vector to one statistic: fisher uses
F = -2 * sum(ln p_i), compared against the chi-square 1-alpha quantile with
2m degrees of freedom; cauchy uses T = sum(w_i * tan((0.5 - p_i) * pi)),
compared against the standard Cauchy 1-alpha quantile, and is insensitive to
dependence between layers. Neither localizes layers, so their rejected-layer
sets are Bonferroni flags (p_i < alpha/m) reported as diagnostics only.

Baselines: naive_and rejects when any p_i < alpha without correction (its ID
pass rate decays as (1-alpha)^m), last_layer looks at the final layer only.

`combined_score` maps a p-vector to a scalar where lower means more OOD, so
generic threshold metrics can run on fused output; adabh has no such scalar
(its decision is not a threshold on any per-sample statistic at fixed m0),
and its ROC comes from an alpha sweep instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .calibrator import Decision
from .errors import BadWeights, ConfigError, EmptyPVector, UnsupportedMethod
from .statfn import chi2_quantile

METHODS = ("bh", "adabh", "by", "fisher", "cauchy", "naive_and", "last_layer")
SCORED_METHODS = ("bh", "by", "fisher", "cauchy", "naive_and", "last_layer")


@dataclass(frozen=True)
class CombinerConfig:
    """Method selection, level, and optional cauchy weights."""

    method: str
    alpha: float = 0.05
    weights: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.weights is not None and self.method != "cauchy":
            raise ConfigError(f"weights only apply to cauchy, not {self.method!r}")


@dataclass
class PValueVector:
    """Per-layer p-values for one sample, with the layer names in order."""

    values: np.ndarray
    layers: list[str]


@dataclass
class DetectionResult:
    """Verdict of one fusion rule on one sample.

    `rejected_layers` holds 1-based layer indices: the localized rejection
    set for step-up rules, threshold exceedances for the baselines, and
    Bonferroni diagnostics for fisher and cauchy. `m0_hat` is only set when
    adabh ran its estimation stage.
    """

    method: str
    decision: Decision
    statistic: float
    rejected_layers: tuple[int, ...]
    m0_hat: int | None = None


def _as_p(p: PValueVector | np.ndarray, strict_open: bool) -> np.ndarray:
    values = p.values if isinstance(p, PValueVector) else p
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ConfigError(f"p-vector must be 1-D, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptyPVector("cannot combine an empty p-value vector")
    hi_ok = np.all(arr < 1.0) if strict_open else np.all(arr <= 1.0)
    if not (np.all(arr > 0.0) and hi_ok):
        interval = "(0, 1)" if strict_open else "(0, 1]"
        raise ValueError(f"p-values must lie in {interval}")
    return arr


def _check_alpha(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    return float(alpha)


def _stepup(p: np.ndarray, thresholds: np.ndarray, scale: float,
            method: str, m0_hat: int | None = None) -> DetectionResult:
    """Shared step-up logic: thresholds are per-rank, scale sets the statistic."""
    m = p.shape[0]
    order = np.argsort(p, kind="stable")
    psort = p[order]
    ranks = np.arange(1, m + 1, dtype=np.float64)
    passing = psort <= thresholds
    statistic = float(min(1.0, max(0.0, np.min(psort * scale / ranks))))
    if passing.any():
        kstar = int(np.flatnonzero(passing)[-1])
        cutoff = psort[kstar]
        rejected = tuple(int(i) + 1 for i in np.flatnonzero(p <= cutoff))
        return DetectionResult(method=method, decision=Decision.OOD, statistic=statistic,
                               rejected_layers=rejected, m0_hat=m0_hat)
    return DetectionResult(method=method, decision=Decision.ID, statistic=statistic,
                           rejected_layers=(), m0_hat=m0_hat)


def combine_bh(p: PValueVector | np.ndarray, alpha: float = 0.05) -> DetectionResult:
    """Benjamini-Hochberg step-up across layers, valid under PRDS dependence."""
    alpha = _check_alpha(alpha)
    arr = _as_p(p, strict_open=False)
    m = arr.shape[0]
    ranks = np.arange(1, m + 1, dtype=np.float64)
    return _stepup(arr, alpha * ranks / m, float(m), "bh")


def _harmonic(m: int) -> float:
    return float(sum(1.0 / i for i in range(1, m + 1)))


def combine_by(p: PValueVector | np.ndarray, alpha: float = 0.05) -> DetectionResult:
    """Benjamini-Yekutieli step-up, valid under arbitrary dependence."""
    alpha = _check_alpha(alpha)
    arr = _as_p(p, strict_open=False)
    m = arr.shape[0]
    f = _harmonic(m)
    ranks = np.arange(1, m + 1, dtype=np.float64)
    return _stepup(arr, alpha * ranks / (m * f), m * f, "by")


def _adabh_m0(psort: np.ndarray) -> int:
    """Slope-based estimate of the number of null layers from sorted p-values."""
    m = psort.shape[0]
    slopes = (1.0 - psort) / (m + 1.0 - np.arange(1, m + 1, dtype=np.float64))
    for j in range(1, m):
        if slopes[j] < slopes[j - 1]:
            if slopes[j] <= 0.0:
                return m
            return min(int(math.floor(1.0 / slopes[j])) + 1, m)
    return m


def combine_adabh(p: PValueVector | np.ndarray, alpha: float = 0.05) -> DetectionResult:
    """Two-stage adaptive BH: estimate m0, then step up against alpha*k/m0.

    Stage one returns ID when every sorted p-value clears its plain BH
    threshold; otherwise m0 is estimated and the step-up reruns with the
    sharper thresholds, which mainly widens the localized rejection set.
    """
    alpha = _check_alpha(alpha)
    arr = _as_p(p, strict_open=False)
    m = arr.shape[0]
    psort = np.sort(arr)
    ranks = np.arange(1, m + 1, dtype=np.float64)
    if np.all(psort >= alpha * ranks / m):
        statistic = float(min(1.0, max(0.0, np.min(psort * m / ranks))))
        return DetectionResult(method="adabh", decision=Decision.ID, statistic=statistic,
                               rejected_layers=(), m0_hat=None)
    m0 = _adabh_m0(psort)
    return _stepup(arr, alpha * ranks / m0, float(m0), "adabh", m0_hat=m0)


def combine_fisher(p: PValueVector | np.ndarray, alpha: float = 0.05) -> DetectionResult:
    """Fisher's combination: F = -2 * sum(ln p_i) against chi-square(2m)."""
    alpha = _check_alpha(alpha)
    arr = _as_p(p, strict_open=True)
    m = arr.shape[0]
    statistic = float(-2.0 * np.log(arr).sum())
    ood = statistic > chi2_quantile(1.0 - alpha, 2 * m)
    rejected = tuple(int(i) + 1 for i in np.flatnonzero(arr < alpha / m)) if ood else ()
    return DetectionResult(method="fisher",
                           decision=Decision.OOD if ood else Decision.ID,
                           statistic=statistic, rejected_layers=rejected)


def cauchy_threshold(alpha: float) -> float:
    """The 1-alpha standard Cauchy quantile, written as tan((0.5 - alpha) * pi).

    Same expression shape as the statistic's per-layer terms, so at m=1 the
    decision degenerates to p < alpha exactly, boundary included.
    """
    return float(np.tan((0.5 - alpha) * math.pi))


def _cauchy_weights(weights: tuple[float, ...] | np.ndarray | None, m: int) -> np.ndarray:
    if weights is None:
        return np.full(m, 1.0 / m)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (m,):
        raise BadWeights(f"need {m} weights, got shape {w.shape}")
    if np.any(w < 0.0):
        raise BadWeights("weights must be nonnegative")
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise BadWeights(f"weights must sum to 1, got {float(w.sum())!r}")
    return w


def combine_cauchy(p: PValueVector | np.ndarray, alpha: float = 0.05,
                   weights: tuple[float, ...] | np.ndarray | None = None) -> DetectionResult:
    """Cauchy combination: T = sum(w_i * tan((0.5 - p_i) * pi)) against the
    standard Cauchy quantile. Exact under independence and robust to
    dependence between layers."""
    alpha = _check_alpha(alpha)
    arr = _as_p(p, strict_open=True)
    m = arr.shape[0]
    w = _cauchy_weights(weights, m)
    statistic = float((w * np.tan((0.5 - arr) * math.pi)).sum())
    ood = statistic > cauchy_threshold(alpha)
    rejected = tuple(int(i) + 1 for i in np.flatnonzero(arr < alpha / m)) if ood else ()
    return DetectionResult(method="cauchy",
                           decision=Decision.OOD if ood else Decision.ID,
                           statistic=statistic, rejected_layers=rejected)


def combine_naive_and(p: PValueVector | np.ndarray, alpha: float = 0.05) -> DetectionResult:
    """Uncorrected union: OOD when any layer has p_i < alpha.

    The ID pass rate is (1 - alpha)^m, so the false-alarm rate grows with
    depth; kept as the baseline the corrected rules are measured against.
    """
    alpha = _check_alpha(alpha)
    arr = _as_p(p, strict_open=False)
    rejected = tuple(int(i) + 1 for i in np.flatnonzero(arr < alpha))
    return DetectionResult(method="naive_and",
                           decision=Decision.OOD if rejected else Decision.ID,
                           statistic=float(arr.min()), rejected_layers=rejected)


def combine_last_layer(p: PValueVector | np.ndarray, alpha: float = 0.05) -> DetectionResult:
    """Single-layer baseline: test only the final layer at level alpha."""
    alpha = _check_alpha(alpha)
    arr = _as_p(p, strict_open=False)
    m = arr.shape[0]
    ood = arr[-1] < alpha
    return DetectionResult(method="last_layer",
                           decision=Decision.OOD if ood else Decision.ID,
                           statistic=float(arr[-1]),
                           rejected_layers=(m,) if ood else ())


_COMBINERS = {
    "bh": combine_bh,
    "adabh": combine_adabh,
    "by": combine_by,
    "fisher": combine_fisher,
    "cauchy": combine_cauchy,
    "naive_and": combine_naive_and,
    "last_layer": combine_last_layer,
}


def combine(p: PValueVector | np.ndarray, config: CombinerConfig) -> DetectionResult:
    """Dispatch to the configured fusion rule."""
    if config.method == "cauchy":
        return combine_cauchy(p, config.alpha, config.weights)
    return _COMBINERS[config.method](p, config.alpha)


def combined_score(p: PValueVector | np.ndarray, config: CombinerConfig) -> float:
    """Scalar summary where lower means more OOD; thresholding it at alpha
    reproduces the method's decision. adabh has no such scalar."""
    return float(score_batch(_as_p(p, strict_open=config.method in ("fisher", "cauchy"))[None, :],
                             config)[0])


# batch API ----------------------------------------------------------------
#
# The evaluator and the Monte Carlo tests push millions of p-vectors through
# the rules, so each rule also has a row-wise vectorized form. Decisions are
# defined to match the scalar functions exactly.

def _as_p_rows(P: np.ndarray, strict_open: bool) -> np.ndarray:
    arr = np.asarray(P, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise EmptyPVector(f"need a (n, m) p-value matrix with m >= 1, got {arr.shape}")
    hi_ok = np.all(arr < 1.0) if strict_open else np.all(arr <= 1.0)
    if not (np.all(arr > 0.0) and hi_ok):
        interval = "(0, 1)" if strict_open else "(0, 1]"
        raise ValueError(f"p-values must lie in {interval}")
    return arr


def decide_batch(P: np.ndarray, config: CombinerConfig,
                 alpha: float | None = None) -> np.ndarray:
    """Row-wise decisions on an (n, m) p-value matrix; True marks OOD.

    `alpha` overrides the config level, and may touch 0 or 1 (reject nothing
    or everything) so bisection over levels can probe the endpoints.
    """
    a = config.alpha if alpha is None else float(alpha)
    if not 0.0 <= a <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {a}")
    method = config.method
    arr = _as_p_rows(P, strict_open=method in ("fisher", "cauchy"))
    n, m = arr.shape
    if a == 0.0:
        return np.zeros(n, dtype=bool)
    if a == 1.0:
        return np.ones(n, dtype=bool)
    ranks = np.arange(1, m + 1, dtype=np.float64)
    if method == "bh":
        return (np.sort(arr, axis=1) <= a * ranks / m).any(axis=1)
    if method == "by":
        return (np.sort(arr, axis=1) <= a * ranks / (m * _harmonic(m))).any(axis=1)
    if method == "adabh":
        psort = np.sort(arr, axis=1)
        stage1_fail = (psort < a * ranks / m).any(axis=1)
        if not stage1_fail.any():
            return stage1_fail
        m0 = np.full(n, m, dtype=np.int64)
        if m >= 2:
            slopes = (1.0 - psort) / (m + 1.0 - ranks)
            drops = slopes[:, 1:] < slopes[:, :-1]
            has_drop = drops.any(axis=1)
            j = drops.argmax(axis=1) + 1
            sj = slopes[np.arange(n), j]
            with np.errstate(divide="ignore"):
                est = np.where(sj > 0.0, np.floor(1.0 / np.maximum(sj, 1e-300)) + 1.0, m)
            m0 = np.where(has_drop, np.minimum(est, m), m).astype(np.int64)
        reject = (psort <= a * ranks / m0[:, None]).any(axis=1)
        return stage1_fail & reject
    if method == "fisher":
        stat = -2.0 * np.log(arr).sum(axis=1)
        return stat > chi2_quantile(1.0 - a, 2 * m)
    if method == "cauchy":
        w = _cauchy_weights(config.weights, m)
        # elementwise product, not matmul: keeps the per-row reduction order
        # identical to the scalar path regardless of batch shape
        stat = (np.tan((0.5 - arr) * math.pi) * w).sum(axis=1)
        return stat > cauchy_threshold(a)
    if method == "naive_and":
        return arr.min(axis=1) < a
    if method == "last_layer":
        return arr[:, -1] < a
    raise ConfigError(f"unknown method {method!r}")


def score_batch(P: np.ndarray, config: CombinerConfig) -> np.ndarray:
    """Row-wise combined_score; lower means more OOD. adabh is unsupported."""
    method = config.method
    if method == "adabh":
        raise UnsupportedMethod(
            "adabh has no per-sample combined score; build its ROC by sweeping alpha")
    arr = _as_p_rows(P, strict_open=method in ("fisher", "cauchy"))
    m = arr.shape[1]
    ranks = np.arange(1, m + 1, dtype=np.float64)
    if method == "bh":
        return np.clip((np.sort(arr, axis=1) * m / ranks).min(axis=1), 0.0, 1.0)
    if method == "by":
        f = _harmonic(m)
        return np.clip((np.sort(arr, axis=1) * m * f / ranks).min(axis=1), 0.0, 1.0)
    if method == "fisher":
        return 2.0 * np.log(arr).sum(axis=1)
    if method == "cauchy":
        w = _cauchy_weights(config.weights, m)
        return -((np.tan((0.5 - arr) * math.pi) * w).sum(axis=1))
    if method == "naive_and":
        return arr.min(axis=1)
    if method == "last_layer":
        return arr[:, -1].copy()
    raise ConfigError(f"unknown method {method!r}")
