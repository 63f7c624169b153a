from .folds import fold_indices, make_folds
from .metrics import (
    ClassificationMetrics,
    RocCurve,
    UndefinedAUCError,
    auc,
    classification_metrics,
    mean_roc,
    probability_histogram,
    roc_curve,
)
