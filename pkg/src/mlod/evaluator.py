"""Evaluation pipeline: score, calibrate, fuse, and measure.

Scores and p-values are oriented so that higher means more in-distribution,
and "positive" below means ID. TPR is the fraction of ID samples kept and
FPR the fraction of OOD samples kept, so both metrics improve downward for
FPR and upward for AUROC.

FPR95 for a fusion rule is found operationally: binary-search the largest
level alpha whose empirical ID-keep rate on the held-out test_id split still
reaches the target, then read the OOD keep rate at that level. That keeps
the metric meaningful for rules whose decisions are not a fixed threshold on
any scalar (adabh), and matches the thresholded metric for the rest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import calibrator
from .combiner import CombinerConfig, decide_batch, score_batch
from .errors import ConfigError, EmptyInput
from .featurepack import FeaturePack, load_pack
from .scorers import ScorerConfig, build_knn_index, score_layer

CALIBRATION_SPLIT = "calibration"
ID_TEST_SPLIT = "test_id"
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


# metrics ------------------------------------------------------------------

def _check_scores(scores: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64).ravel()
    if arr.shape[0] == 0:
        raise EmptyInput(f"{name} score array is empty")
    return arr


def _rank_with_ties(values: np.ndarray) -> np.ndarray:
    """Ascending 1-based ranks, ties sharing their average rank."""
    uniq, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts).astype(np.float64)
    avg = upper - (counts - 1) / 2.0
    return avg[inverse]


def auroc(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """P(ID score > OOD score) + 0.5 * P(tie), via the rank-sum identity."""
    ids = _check_scores(id_scores, "ID")
    oods = _check_scores(ood_scores, "OOD")
    ranks = _rank_with_ties(np.concatenate([ids, oods]))
    n_id, n_ood = ids.shape[0], oods.shape[0]
    rank_sum = float(ranks[:n_id].sum())
    return (rank_sum - n_id * (n_id + 1) / 2.0) / (n_id * n_ood)


def _fpr_point(id_scores: np.ndarray, ood_scores: np.ndarray,
               target_tpr: float) -> tuple[float, float, float]:
    """(fpr, threshold, achieved_tpr) at the largest threshold keeping the
    ID rate at or above target; samples are kept when score >= threshold."""
    ids = _check_scores(id_scores, "ID")
    oods = _check_scores(ood_scores, "OOD")
    if not 0.0 < target_tpr <= 1.0:
        raise ConfigError(f"target TPR must lie in (0, 1], got {target_tpr}")
    n = ids.shape[0]
    keep = max(1, int(np.ceil(target_tpr * n - 1e-9)))
    lam = float(np.partition(ids, n - keep)[n - keep])
    fpr = float(np.mean(oods >= lam))
    achieved = float(np.mean(ids >= lam))
    return fpr, lam, achieved


def fpr_at_tpr(id_scores: np.ndarray, ood_scores: np.ndarray,
               target_tpr: float = 0.95) -> float:
    """OOD keep rate at the largest score threshold whose ID keep rate
    still reaches target_tpr."""
    return _fpr_point(id_scores, ood_scores, target_tpr)[0]


def calibrate_alpha_for_tpr(id_pmatrix: np.ndarray, config: CombinerConfig,
                            target_tpr: float = 0.95,
                            tol: float | None = None) -> float:
    """Largest level alpha at which the rule keeps at least target_tpr of the
    held-out ID p-vectors, by bisection to within tol (default 1/(2n))."""
    P = np.asarray(id_pmatrix, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise EmptyInput(f"need a nonempty (n, m) ID p-value matrix, got shape {P.shape}")
    if not 0.0 < target_tpr <= 1.0:
        raise ConfigError(f"target TPR must lie in (0, 1], got {target_tpr}")
    if tol is None:
        tol = 1.0 / (2.0 * P.shape[0])
    lo, hi = 0.0, 1.0  # keep rate is 1 at level 0 and nonincreasing in alpha
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        tpr = 1.0 - float(decide_batch(P, config, alpha=mid).mean())
        if tpr >= target_tpr:
            lo = mid
        else:
            hi = mid
    return lo


def _keep_rates(P: np.ndarray, config: CombinerConfig, alphas: np.ndarray) -> np.ndarray:
    """Fraction of rows kept (decided ID) at each level, vectorized over levels."""
    from .combiner import cauchy_threshold
    from .statfn import chi2_quantile
    method = config.method
    m = P.shape[1]
    if method in ("bh", "by"):
        stat = score_batch(P, config)
        kept = stat[:, None] > alphas[None, :]
    elif method == "adabh":
        stat = score_batch(P, CombinerConfig("bh", alpha=config.alpha))
        kept = stat[:, None] >= alphas[None, :]
    elif method in ("naive_and", "last_layer"):
        stat = score_batch(P, config)
        kept = stat[:, None] >= alphas[None, :]
    elif method == "fisher":
        stat = -score_batch(P, config)
        thr = np.array([chi2_quantile(1.0 - a, 2 * m) for a in alphas])
        kept = stat[:, None] <= thr[None, :]
    elif method == "cauchy":
        stat = -score_batch(P, config)
        thr = np.array([cauchy_threshold(a) for a in alphas])
        kept = stat[:, None] <= thr[None, :]
    else:
        raise ConfigError(f"unknown method {method!r}")
    return kept.mean(axis=0)


def roc_by_alpha_sweep(id_pmatrix: np.ndarray, ood_pmatrix: np.ndarray,
                       config: CombinerConfig,
                       grid_size: int = 2001) -> tuple[np.ndarray, np.ndarray, float]:
    """ROC traced by sweeping the level over a log-spaced grid.

    Returns (fpr, tpr, auc) where the curve always contains the corner
    points (0, 0) and (1, 1); grid_size counts all curve points, so
    grid_size=2 yields the corners alone and an AUC of one half. Works for
    every rule, including adabh, which has no per-sample score to threshold.
    """
    if grid_size < 2:
        raise ConfigError(f"grid_size must be at least 2, got {grid_size}")
    P_id = np.asarray(id_pmatrix, dtype=np.float64)
    P_ood = np.asarray(ood_pmatrix, dtype=np.float64)
    if P_id.ndim != 2 or P_ood.ndim != 2 or P_id.shape[1] != P_ood.shape[1]:
        raise EmptyInput("ID and OOD p-value matrices must be 2-D with equal layer count")
    if grid_size > 2:
        alphas = np.logspace(np.log10(1e-6), np.log10(1.0 - 1e-6), grid_size - 2)
        tpr_mid = _keep_rates(P_id, config, alphas)
        fpr_mid = _keep_rates(P_ood, config, alphas)
    else:
        tpr_mid = np.empty(0)
        fpr_mid = np.empty(0)
    fpr = np.concatenate([[0.0], fpr_mid, [1.0]])
    tpr = np.concatenate([[0.0], tpr_mid, [1.0]])
    order = np.lexsort((tpr, fpr))
    fpr, tpr = fpr[order], tpr[order]
    auc = float(_trapezoid(tpr, fpr))
    return fpr, tpr, auc


# full pipeline -------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-method, per-dataset metrics plus the configuration that made them."""

    config_echo: dict
    methods: dict[str, dict]
    per_layer: dict[str, dict] = field(default_factory=dict)
    curves: dict[str, dict[str, dict[str, list[float]]]] | None = None
    p_matrices: dict[str, np.ndarray] | None = None

    def to_dict(self) -> dict:
        out = {"config": self.config_echo, "methods": self.methods}
        if self.per_layer:
            out["per_layer"] = self.per_layer
        return out

    def save_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    def csv_text(self) -> str:
        """Methods (and per-layer baselines) by datasets, FPR95 and AUROC."""
        datasets = list(self.config_echo.get("ood_datasets", []))
        header = ["row"]
        for ds in datasets:
            header += [f"{ds}_fpr95", f"{ds}_auroc"]
        header += ["average_fpr95", "average_auroc"]
        lines = [",".join(header)]

        def emit(name: str, block: dict) -> None:
            cells = [name]
            for ds in datasets:
                met = block["datasets"][ds]
                cells += [f"{met['fpr95']:.6f}", f"{met['auroc']:.6f}"]
            avg = block["average"]
            cells += [f"{avg['fpr95']:.6f}", f"{avg['auroc']:.6f}"]
            lines.append(",".join(cells))

        for name, block in self.methods.items():
            emit(name, block)
        for layer, block in self.per_layer.items():
            emit(f"layer:{layer}", block)
        return "\n".join(lines) + "\n"

    def save_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.csv_text())
        return path


def _default_scorer(kind: str) -> ScorerConfig:
    return ScorerConfig("knn") if kind == "features" else ScorerConfig("msp")


def _average(blocks: dict[str, dict]) -> dict:
    keys = ("fpr95", "auroc", "fpr_at_alpha", "achieved_tpr")
    return {k: float(np.mean([b[k] for b in blocks.values()])) for k in keys}


def evaluate(pack: FeaturePack | str | Path,
             layer_configs: dict[str, ScorerConfig] | None = None,
             methods: list[CombinerConfig] | None = None,
             target_tpr: float = 0.95,
             grid_size: int = 2001,
             threads: int | None = None,
             min_samples: int = calibrator.MIN_SAMPLES,
             want_curves: bool = False) -> EvalReport:
    """Run the full score -> calibrate -> p-value -> fuse -> metric pipeline.

    The pack must hold a `calibration` split, a `test_id` split, and at least
    one further split, each of which is treated as an OOD dataset. Layers
    default to knn on features and msp on logits; pass `layer_configs` keyed
    by layer name to override individual layers.
    """
    if isinstance(pack, (str, Path)):
        pack = load_pack(pack)
    manifest = pack.manifest
    for split in (CALIBRATION_SPLIT, ID_TEST_SPLIT):
        if split not in manifest.splits:
            raise ConfigError(f"pack lacks required split {split!r}")
    ood_names = sorted(s for s in manifest.splits
                       if s not in (CALIBRATION_SPLIT, ID_TEST_SPLIT))
    if not ood_names:
        raise ConfigError("pack declares no OOD splits to evaluate")
    if manifest.splits[ID_TEST_SPLIT] == 0:
        raise EmptyInput("test_id split is empty")
    for name in ood_names:
        if manifest.splits[name] == 0:
            raise EmptyInput(f"OOD split {name!r} is empty")
    if methods is None:
        methods = [CombinerConfig(m) for m in
                   ("bh", "adabh", "by", "fisher", "cauchy", "naive_and", "last_layer")]
    if len({cfg.method for cfg in methods}) != len(methods):
        raise ConfigError("each method may appear only once per evaluation")
    layer_configs = dict(layer_configs or {})

    tables = []
    p_cols: dict[str, list[np.ndarray]] = {ID_TEST_SPLIT: [], **{n: [] for n in ood_names}}
    used_configs = {}
    for layer in manifest.layers:
        cfg = layer_configs.get(layer.name, _default_scorer(layer.kind))
        used_configs[layer.name] = cfg
        cal = pack.matrix(layer.name, CALIBRATION_SPLIT)
        if cfg.method == "knn":
            reference = build_knn_index(cal, cfg)
            cal_scores = score_layer(cal, cfg, reference, exclude_self=True, threads=threads)
        else:
            reference = None
            cal_scores = score_layer(cal, cfg)
        table = calibrator.fit_calibration(cal_scores, min_samples=min_samples)
        tables.append(table)
        for split in p_cols:
            sv = score_layer(pack.matrix(layer.name, split), cfg, reference, threads=threads)
            p_cols[split].append(calibrator.p_values(table, sv))

    P = {split: np.column_stack(cols) for split, cols in p_cols.items()}
    P_id = P[ID_TEST_SPLIT]

    method_blocks: dict[str, dict] = {}
    curves: dict[str, dict] = {}
    for cfg in methods:
        per_ds = {}
        curves[cfg.method] = {}
        alpha95 = calibrate_alpha_for_tpr(P_id, cfg, target_tpr)
        achieved = 1.0 - float(decide_batch(P_id, cfg, alpha=alpha95).mean())
        for ds in ood_names:
            P_ood = P[ds]
            fpr95 = 1.0 - float(decide_batch(P_ood, cfg, alpha=alpha95).mean())
            fpr_at_alpha = 1.0 - float(decide_batch(P_ood, cfg).mean())
            if cfg.method == "adabh" or want_curves:
                fpr_c, tpr_c, auc_sweep = roc_by_alpha_sweep(P_id, P_ood, cfg, grid_size)
                if want_curves:
                    curves[cfg.method][ds] = {"fpr": fpr_c.tolist(), "tpr": tpr_c.tolist()}
            if cfg.method == "adabh":
                auc = auc_sweep
            else:
                auc = auroc(score_batch(P_id, cfg), score_batch(P_ood, cfg))
            per_ds[ds] = {"fpr95": fpr95, "auroc": auc,
                          "fpr_at_alpha": fpr_at_alpha, "achieved_tpr": achieved}
        method_blocks[cfg.method] = {"alpha95": alpha95, "datasets": per_ds,
                                     "average": _average(per_ds)}

    baseline_alpha = methods[0].alpha
    per_layer: dict[str, dict] = {}
    for j, layer in enumerate(manifest.layers):
        per_ds = {}
        for ds in ood_names:
            fpr95, lam, achieved = _fpr_point(P_id[:, j], P[ds][:, j], target_tpr)
            per_ds[ds] = {
                "fpr95": fpr95,
                "auroc": auroc(P_id[:, j], P[ds][:, j]),
                "fpr_at_alpha": float(np.mean(P[ds][:, j] >= baseline_alpha)),
                "achieved_tpr": achieved,
            }
        per_layer[layer.name] = {"datasets": per_ds, "average": _average(per_ds)}

    config_echo = {
        "pack": str(manifest.root) if manifest.root else None,
        "splits": dict(manifest.splits),
        "layers": [layer.name for layer in manifest.layers],
        "ood_datasets": ood_names,
        "target_tpr": target_tpr,
        "grid_size": grid_size,
        "methods": [{"method": c.method, "alpha": c.alpha,
                     **({"weights": list(c.weights)} if c.weights else {})}
                    for c in methods],
        "scorers": {name: {"method": c.method, "k": c.k, "normalize": c.normalize,
                           "temperature": c.temperature}
                    for name, c in used_configs.items()},
    }
    return EvalReport(config_echo=config_echo, methods=method_blocks,
                      per_layer=per_layer, curves=curves if want_curves else None,
                      p_matrices=P if want_curves else None)
