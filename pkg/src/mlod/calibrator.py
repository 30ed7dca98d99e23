"""Empirical calibration: thresholds and p-values from held-out ID scores.

A calibration table is just the sorted score sample for one (layer, scorer)
pair. The detection threshold at level alpha is the empirical alpha-quantile

    lambda = inf{ s : Fhat(s) >= alpha },

that is, the smallest calibration score whose empirical CDF reaches alpha;
a test score is flagged OOD when it falls strictly below lambda, which keeps
the fraction of calibration scores flagged at roughly alpha and the ID pass
rate at 1 - alpha. P-values use the add-one (Laplace) estimator

    p = (c + 1) / (n + 2),    c = #{calibration scores <= score},

which is strictly inside (0, 1) so downstream log and tan transforms stay
finite. Ties count inclusively. Resolution is 1/(n+2): p-values from a small
table are coarse, which is why fewer than 20 samples are rejected outright
and fewer than 1000 draw a warning.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IoFailure, ShapeMismatch, TooFewSamples
from .scorers import ScoreVector

MIN_SAMPLES = 20
COMFORTABLE_SAMPLES = 1000


class Decision(enum.Enum):
    ID = "ID"
    OOD = "OOD"


@dataclass
class CalibrationTable:
    """Sorted calibration scores for one (layer, scorer) pair."""

    sorted_scores: np.ndarray
    layer: str
    scorer: str

    @property
    def n(self) -> int:
        return int(self.sorted_scores.shape[0])

    @property
    def resolution(self) -> float:
        """Smallest possible gap between distinct p-values: 1/(n+2)."""
        return 1.0 / (self.n + 2)


def fit_calibration(scores: ScoreVector | np.ndarray,
                    layer: str | None = None,
                    scorer: str | None = None,
                    min_samples: int = MIN_SAMPLES) -> CalibrationTable:
    """Sort calibration scores into a table.

    Raises TooFewSamples below `min_samples` (lower it only in tests) and
    warns when the sample is large enough to work but too small for stable
    tail quantiles.
    """
    if isinstance(scores, ScoreVector):
        layer = layer if layer is not None else scores.layer
        scorer = scorer if scorer is not None else scores.scorer
        values = scores.values
    else:
        values = np.asarray(scores, dtype=np.float64)
    if values.ndim != 1:
        raise ShapeMismatch(f"calibration scores must be 1-D, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise ValueError("calibration scores contain non-finite values")
    if values.shape[0] < min_samples:
        raise TooFewSamples(
            f"need at least {min_samples} calibration scores, got {values.shape[0]}")
    if values.shape[0] < COMFORTABLE_SAMPLES:
        warnings.warn(
            f"calibration table has only {values.shape[0]} scores; "
            f"p-value resolution is {1.0 / (values.shape[0] + 2):.2e}",
            UserWarning, stacklevel=2)
    return CalibrationTable(sorted_scores=np.sort(values.astype(np.float64)),
                            layer=layer or "", scorer=scorer or "")


def _rank_at_least(alpha: float, n: int) -> int:
    # Smallest r with r/n >= alpha. The 1e-9 nudge keeps decimal alphas such
    # as 0.05 from rounding up through an extra rank when alpha*n lands a few
    # ulps above an integer.
    return max(1, math.ceil(alpha * n - 1e-9))


def threshold_at(table: CalibrationTable, alpha: float) -> float:
    """The empirical alpha-quantile of the table: smallest score with CDF >= alpha."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    return float(table.sorted_scores[_rank_at_least(alpha, table.n) - 1])


def decide_threshold(score: float, lam: float) -> Decision:
    """OOD when the score falls strictly below the threshold."""
    return Decision.OOD if score < lam else Decision.ID


def p_value(table: CalibrationTable, score: float) -> float:
    """Add-one-smoothed empirical p-value of one score against the table."""
    c = int(np.searchsorted(table.sorted_scores, score, side="right"))
    return (c + 1) / (table.n + 2)


def p_values(table: CalibrationTable, scores: ScoreVector | np.ndarray) -> np.ndarray:
    """Vectorized p_value over a score array."""
    values = scores.values if isinstance(scores, ScoreVector) else np.asarray(scores)
    c = np.searchsorted(table.sorted_scores, values, side="right")
    return (c + 1.0) / (table.n + 2.0)


def p_matrix(tables: list[CalibrationTable],
             layer_scores: list[ScoreVector | np.ndarray]) -> np.ndarray:
    """Stack per-layer p-values into an (n_samples, m) matrix, layers as given."""
    if len(tables) != len(layer_scores):
        raise ShapeMismatch(
            f"{len(tables)} tables but {len(layer_scores)} score vectors")
    if not tables:
        raise ShapeMismatch("p_matrix needs at least one layer")
    cols = [p_values(t, s) for t, s in zip(tables, layer_scores)]
    lengths = {c.shape[0] for c in cols}
    if len(lengths) != 1:
        raise ShapeMismatch(f"score vectors disagree on sample count: {sorted(lengths)}")
    return np.column_stack(cols)


# persistence --------------------------------------------------------------

def table_filename(layer: str, scorer: str) -> str:
    return f"calib_{layer}_{scorer}.bin"


def save_table(table: CalibrationTable, directory: str | Path) -> Path:
    """Persist as raw float64 little-endian; round-trips exactly."""
    directory = Path(directory)
    path = directory / table_filename(table.layer, table.scorer)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        path.write_bytes(np.ascontiguousarray(table.sorted_scores, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def load_table(directory: str | Path, layer: str, scorer: str) -> CalibrationTable:
    path = Path(directory) / table_filename(layer, scorer)
    if not path.is_file():
        raise IoFailure(f"no calibration table at {path}")
    try:
        values = np.fromfile(path, dtype="<f8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if values.shape[0] == 0:
        raise IoFailure(f"{path} is empty")
    if np.any(np.diff(values) < 0):
        raise IoFailure(f"{path} is corrupt: scores are not sorted")
    return CalibrationTable(sorted_scores=values.astype(np.float64),
                            layer=layer, scorer=scorer)
