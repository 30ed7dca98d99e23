"""Layer-wise out-of-distribution detection with multiple-testing fusion.

Workflow: score each tapped layer of a network (knn on features, msp/energy/
odin on logits), calibrate the scores into per-layer p-values against a held
out ID sample, then fuse the p-value vector with a multiple-testing rule
(bh, adabh, by, fisher, cauchy) that keeps the ID pass rate at 1 - alpha
regardless of how many layers are tested.
"""

from .calibrator import (
    CalibrationTable,
    Decision,
    decide_threshold,
    fit_calibration,
    load_table,
    p_matrix,
    p_value,
    p_values,
    save_table,
    threshold_at,
)
from .combiner import (
    CombinerConfig,
    DetectionResult,
    PValueVector,
    combine,
    combine_adabh,
    combine_bh,
    combine_by,
    combine_cauchy,
    combine_fisher,
    combine_last_layer,
    cauchy_threshold,
    combine_naive_and,
    combined_score,
    decide_batch,
    score_batch,
)
from .evaluator import (
    EvalReport,
    auroc,
    calibrate_alpha_for_tpr,
    evaluate,
    fpr_at_tpr,
    roc_by_alpha_sweep,
)
from .featurepack import (
    FeatureMatrix,
    FeaturePack,
    LayerSpec,
    PackManifest,
    load_pack,
    load_split,
    read_manifest,
    write_pack,
)
from .scorers import (
    KnnIndex,
    ScorerConfig,
    ScoreVector,
    build_knn_index,
    energy_score,
    knn_score,
    msp_score,
    odin_score,
    score_layer,
)
from .statfn import cauchy_quantile, chi2_cdf_even, chi2_quantile
from .synthgen import SCENARIOS, SynthSpec, generate, scenario

__version__ = "0.1.0"
