"""Detection of adversarial and out-of-distribution classifier inputs from
class-conditional statistics of layer representations."""

from .dataset import (
    DatasetFormatError,
    FoldSplit,
    LayerBlock,
    LayerDataset,
    load_dataset,
    split_folds,
    validate_dataset,
    write_dataset,
)
from .detector import (
    DetectorConfig,
    DetectorModel,
    ScoredSample,
    adversarial_score,
    calibrate_threshold,
    corrected_predict,
    fit_detector,
    load_detector,
    ood_score,
    save_detector,
    score_dataset,
)
from .dimreduce import (
    DimSearchReport,
    ProjectionModel,
    apply_projection,
    fit_projection,
    intrinsic_dimension,
    lid_mle,
)
from .knn import ClassCounts, KnnIndex, NeighborList, build_index, class_counts, default_k
from .metrics import LabeledScores, average_precision, norm_sweep, pauc, proportion_sweep
from .pvalues import (
    EmpiricalNull,
    PValueBundle,
    aklpe_pvalue,
    aklpe_score,
    bivariate_pvalue,
    combine_bundle,
    empirical_pvalue,
    fisher_combine,
    hmp_combine,
)
from .teststats import (
    MultinomialModel,
    StatModel,
    StatVectorBundle,
    binomial_stat,
    compute_stat_bundle,
    fit_multinomial,
    lid_stat,
    multinomial_lrt,
    trust_stat,
)
from .toynet import (
    ForwardTrace,
    ToyNetwork,
    export_representations,
    forward,
    input_gradient,
    train_toy,
)
from .attack import AttackConfig, AttackResult, KernelScales, kernel_scale, run_attack

__version__ = "0.1.0"
