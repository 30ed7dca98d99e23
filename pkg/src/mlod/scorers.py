"""Per-layer scoring functions, oriented so that higher means more in-distribution.

Logit-based scorers (msp, energy, odin) act on "logits" layers; the k-NN
scorer acts on "features" layers and returns the negative Euclidean distance
to the k-th nearest calibration point. All arithmetic is in float64.

The k-NN search is exact. The fast path computes squared distances with a
GEMM expansion, which rounds differently from a plain scan, so it is only
used to preselect candidates with a provably safe margin; the returned
distances are recomputed from (q - p)**2 sums and therefore match a naive
O(n*d) scan bit for bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DegenerateLogits,
    DimMismatch,
    KindMismatch,
    TooFewPoints,
    ZeroVector,
)
from .featurepack import FeatureMatrix

METHODS = ("msp", "energy", "odin", "knn")
_DEFAULT_TEMPERATURE = {"energy": 1.0, "odin": 1000.0}
_BLOCK_BUDGET_BYTES = 128 * 1024 * 1024


@dataclass(frozen=True)
class ScorerConfig:
    """Scorer selection plus its knobs.

    `temperature` defaults to 1 for energy and 1000 for odin when left None.
    `k` and `normalize` only matter for the knn scorer.
    """

    method: str
    temperature: float | None = None
    k: int = 50
    normalize: bool = True

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown scorer {self.method!r}, expected one of {METHODS}")
        if self.temperature is not None and not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")

    def effective_temperature(self) -> float:
        if self.temperature is not None:
            return float(self.temperature)
        return _DEFAULT_TEMPERATURE.get(self.method, 1.0)


@dataclass
class ScoreVector:
    """Float64 scores for one layer under one scorer."""

    values: np.ndarray
    layer: str
    scorer: str


# logit scorers ----------------------------------------------------------

def _as_logit_rows(logits: np.ndarray, min_classes: int) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] < min_classes:
        raise DegenerateLogits(
            f"need logit rows with at least {min_classes} classes, got shape {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise DegenerateLogits("logits contain NaN or infinite entries")
    return arr


def _msp_rows(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e.max(axis=1) / e.sum(axis=1)


def msp_score(logits: np.ndarray) -> float:
    """Maximum softmax probability of one logit vector."""
    rows = _as_logit_rows(logits, min_classes=2)
    return float(_msp_rows(rows, 1.0)[0])


def energy_score(logits: np.ndarray, temperature: float = 1.0) -> float:
    """T * logsumexp(logits / T), computed with max subtraction."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    rows = _as_logit_rows(logits, min_classes=1)
    return float(_energy_rows(rows, temperature)[0])


def _energy_rows(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    zmax = z.max(axis=1)
    lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
    return temperature * lse


def odin_score(logits: np.ndarray, temperature: float = 1000.0) -> float:
    """Maximum softmax probability after temperature scaling; odin(l, 1) == msp(l)."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    rows = _as_logit_rows(logits, min_classes=2)
    return float(_msp_rows(rows, temperature)[0])


# k-NN scorer ------------------------------------------------------------

def _normalize_rows(rows: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt((rows * rows).sum(axis=1))
    if np.any(norms == 0.0):
        raise ZeroVector(f"{what} contains zero rows; cannot L2-normalize")
    return rows / norms[:, None]


class KnnIndex:
    """Exact nearest-neighbor index over float64 calibration points."""

    def __init__(self, points: np.ndarray, normalize: bool):
        pts = np.ascontiguousarray(np.asarray(points), dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise TooFewPoints(f"index needs a nonempty 2-D point set, got shape {pts.shape}")
        if normalize:
            pts = _normalize_rows(pts, "calibration set")
        self.points = pts
        self.normalize = normalize
        self._p2 = (pts * pts).sum(axis=1)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def kth_distances(self, queries: np.ndarray, k: int,
                      threads: int | None = None) -> np.ndarray:
        """Euclidean distance from each query to its k-th nearest indexed point.

        Exact: distances equal sqrt of the k-th smallest ((q - p)**2).sum()
        over all indexed points, bit for bit.
        """
        q = np.asarray(queries, dtype=np.float64)
        single = q.ndim == 1
        if single:
            q = q[None, :]
        if q.ndim != 2 or q.shape[1] != self.dim:
            raise DimMismatch(f"queries have shape {q.shape}, index dim is {self.dim}")
        if not 1 <= k <= self.n:
            raise TooFewPoints(f"k={k} but index holds {self.n} points")
        if self.normalize:
            q = _normalize_rows(q, "query set")
        block = max(1, min(q.shape[0], _BLOCK_BUDGET_BYTES // (8 * max(1, self.n))))
        starts = range(0, q.shape[0], block)
        out = np.empty(q.shape[0], dtype=np.float64)
        if threads and threads > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futs = {pool.submit(self._block_kth, q[s:s + block], k): s for s in starts}
                for fut, s in futs.items():
                    res = fut.result()
                    out[s:s + len(res)] = res
        else:
            for s in starts:
                res = self._block_kth(q[s:s + block], k)
                out[s:s + len(res)] = res
        return out[0] if single else out

    def _block_kth(self, qb: np.ndarray, k: int) -> np.ndarray:
        p = self.points
        q2 = (qb * qb).sum(axis=1)
        # GEMM expansion is approximate in the last ulps; rank with it, then
        # recompute candidates exactly. The margin bounds the rounding gap
        # between the two formulas, so the candidate set provably contains
        # the true k nearest points.
        approx = q2[:, None] + self._p2[None, :] - 2.0 * (qb @ p.T)
        margin = 64.0 * p.shape[1] * np.finfo(np.float64).eps * \
            (q2.max(initial=0.0) + self._p2.max() + 1.0)
        kth_approx = np.partition(approx, k - 1, axis=1)[:, k - 1]
        out = np.empty(qb.shape[0], dtype=np.float64)
        for i in range(qb.shape[0]):
            cand = np.flatnonzero(approx[i] <= kth_approx[i] + margin)
            diff = p[cand] - qb[i]
            d2 = (diff * diff).sum(axis=1)
            out[i] = np.sqrt(np.partition(d2, k - 1)[k - 1])
        return out


def build_knn_index(calibration: FeatureMatrix | np.ndarray,
                    config: ScorerConfig) -> KnnIndex:
    """Build the exact index over the calibration rows of one layer."""
    data = calibration.data if isinstance(calibration, FeatureMatrix) else calibration
    data = np.asarray(data)
    if data.ndim != 2 or data.shape[0] < config.k:
        raise TooFewPoints(
            f"calibration set of shape {data.shape} cannot answer k={config.k} queries")
    return KnnIndex(data, normalize=config.normalize)


def knn_score(index: KnnIndex, feature: np.ndarray, k: int) -> float:
    """Negative distance to the k-th nearest calibration point."""
    return -float(index.kth_distances(np.asarray(feature), k))


# layer-level entry point -------------------------------------------------

def score_layer(matrix: FeatureMatrix, config: ScorerConfig,
                calibration: FeatureMatrix | KnnIndex | None = None,
                exclude_self: bool = False,
                threads: int | None = None) -> ScoreVector:
    """Score every row of one (layer, split) matrix.

    For knn, `calibration` supplies the reference points (or a prebuilt
    index). Set `exclude_self` when scoring the same rows the index was built
    on: the k-th neighbor is then taken among the other points, which keeps
    calibration scores exchangeable with held-out scores.
    """
    kind = matrix.layer.kind
    if config.method == "knn":
        if kind != "features":
            raise KindMismatch(f"knn scores features layers, got kind {kind!r}")
        if calibration is None:
            raise ConfigError("knn scoring needs a calibration matrix or index")
        index = calibration if isinstance(calibration, KnnIndex) \
            else build_knn_index(calibration, config)
        k = config.k + 1 if exclude_self else config.k
        values = -index.kth_distances(matrix.data, k, threads=threads)
    else:
        if kind != "logits":
            raise KindMismatch(f"{config.method} scores logits layers, got kind {kind!r}")
        rows = _as_logit_rows(matrix.data, min_classes=1 if config.method == "energy" else 2)
        if config.method == "msp":
            values = _msp_rows(rows, 1.0)
        elif config.method == "odin":
            values = _msp_rows(rows, config.effective_temperature())
        else:
            values = _energy_rows(rows, config.effective_temperature())
    return ScoreVector(values=np.asarray(values, dtype=np.float64),
                       layer=matrix.layer.name, scorer=config.method)
