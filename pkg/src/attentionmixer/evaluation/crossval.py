"""Patient-exclusive k-fold cross-validation, ablation grid and report files."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..data.cohort import CohortData, CohortManifest, load_cohort
from ..data.metadata import MetadataPreprocessor, column_names, to_arrays
from ..io import write_csv, write_json
from ..model.encoder import ViTEncoder, patchify
from ..model.network import VARIANTS, Batch, ModelVariantConfig, build_model
from ..seeding import derive_seed
from ..training import TrainConfig, TrainLog, predict, pretrain_encoder, train
from .folds import fold_indices, make_folds
from .importance import ImportanceReport, Permuter, column_importance, random_permutation
from .metrics import RocCurve, auc, classification_metrics, mean_roc, probability_histogram, roc_curve

logger = logging.getLogger(__name__)

METRIC_KEYS = ("accuracy", "precision", "f1", "auc")


@dataclass
class FoldResult:
    fold: int
    patient_ids: np.ndarray
    labels: np.ndarray
    probs: np.ndarray
    metrics: dict
    roc: RocCurve
    log: TrainLog
    preprocessing: dict
    model: object = None
    val_batch: Batch | None = None
    importance: np.ndarray | None = None


@dataclass
class CVResult:
    variant: str
    folds: list[FoldResult]
    features: list[str] = field(default_factory=list)

    def mean(self, key: str) -> float:
        return float(np.mean([f.metrics[key] for f in self.folds]))

    @property
    def mean_auc(self) -> float:
        return self.mean("auc")

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "threshold": 0.5,
            "folds": [
                dict(f.metrics, fold=f.fold, n_val=int(f.labels.size), best_epoch=f.log.best_epoch,
                     epochs=f.log.epochs)
                for f in self.folds
            ],
            "mean": {k: self.mean(k) for k in METRIC_KEYS},
        }

    def importance_report(self) -> ImportanceReport:
        return ImportanceReport(self.features, np.stack([f.importance for f in self.folds]))


def prepare_batch(data: CohortData, tokens: np.ndarray | None, pre: MetadataPreprocessor | None) -> Batch:
    meta = missing = None
    if pre is not None:
        meta, missing = to_arrays(pre.transform(data.records))
        meta = meta.astype(np.float32)
    return Batch(tokens, meta, missing, data.labels.astype(np.float64))


def pretrain_on_cohort(manifest: CohortManifest, cfg, steps: int, seed: int, cohort: CohortData | None = None):
    """Masked-patch pretraining on every scan of the cohort (labels unused)."""
    data = cohort if cohort is not None and cohort.volumes is not None else load_cohort(manifest, cfg.side)
    encoder = ViTEncoder(cfg, np.random.default_rng(derive_seed(seed, "encoder-init")))
    losses = pretrain_encoder(encoder, patchify(data.volumes, cfg.patch), steps=steps, seed=derive_seed(seed, "pretrain"))
    return encoder, losses


def _run_fold(args) -> FoldResult:
    (fold, data, tokens, schema, model_cfg, train_cfg, assignment, seed, encoder_state,
     impute_k, importance_repeats, permuter, keep_model) = args
    tr, va = fold_indices(data.patient_ids, assignment, fold)
    train_data, val_data = data.subset(tr), data.subset(va)
    pre = None
    if model_cfg.uses_meta:
        pre = MetadataPreprocessor(schema, k=impute_k).fit(train_data.records)
    tok_tr = tokens[tr] if tokens is not None else None
    tok_va = tokens[va] if tokens is not None else None
    train_batch = prepare_batch(train_data, tok_tr, pre)
    val_batch = prepare_batch(val_data, tok_va, pre)

    model = build_model(model_cfg, derive_seed(seed, "init", fold))
    if encoder_state is not None and model_cfg.uses_hct:
        model.encoder.load_state_dict(encoder_state, strict=True)
    cfg = replace(train_cfg, seed=derive_seed(seed, "train", model_cfg.variant, fold))
    result = train(model, train_batch, val_batch, cfg)
    model.load_state_dict(result.state)
    probs = predict(model, val_batch)
    labels = val_data.labels
    cm = classification_metrics(probs, labels)
    metrics = {
        "accuracy": cm.accuracy,
        "precision": cm.precision,
        "recall": cm.recall,
        "f1": cm.f1,
        "auc": auc(probs, labels),
        "precision_undefined": cm.precision_undefined,
        "f1_undefined": cm.f1_undefined,
    }
    importance = None
    if importance_repeats and model_cfg.uses_meta:
        importance = column_importance(
            model, val_batch, derive_seed(seed, "importance", fold), importance_repeats, permuter
        )
    return FoldResult(
        fold=fold,
        patient_ids=val_data.patient_ids,
        labels=labels,
        probs=probs,
        metrics=metrics,
        roc=roc_curve(probs, labels),
        log=result.log,
        preprocessing=pre.params() if pre is not None else {},
        model=model if keep_model else None,
        val_batch=val_batch if keep_model else None,
        importance=importance,
    )


def cross_validate(
    manifest: CohortManifest,
    model_cfg: ModelVariantConfig,
    train_cfg: TrainConfig,
    k: int = 5,
    seed: int = 0,
    encoder_state: dict | None = None,
    cohort: CohortData | None = None,
    impute_k: int = 5,
    importance_repeats: int = 0,
    permuter: Permuter = random_permutation,
    keep_models: bool = False,
    jobs: int = 1,
) -> CVResult:
    """Train and evaluate one variant on every fold.

    Metadata imputation and scaling are fitted on the training folds only.
    Volumes are read only when the variant uses the imaging branch.
    """
    side, patch = model_cfg.encoder.side, model_cfg.encoder.patch
    if cohort is None or (model_cfg.uses_hct and cohort.volumes is None):
        cohort = load_cohort(manifest, side, load_volumes=model_cfg.uses_hct)
    tokens = patchify(cohort.volumes, patch) if model_cfg.uses_hct else None
    assignment = make_folds(cohort.patient_ids, k, derive_seed(seed, "folds"))
    jobs_args = [
        (f, cohort, tokens, manifest.schema, model_cfg, train_cfg, assignment, seed, encoder_state,
         impute_k, importance_repeats, permuter, keep_models)
        for f in range(k)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold, jobs_args))
    else:
        folds = [_run_fold(a) for a in jobs_args]
    return CVResult(model_cfg.variant, folds, column_names(manifest.schema))


def ablation_grid(
    manifest: CohortManifest,
    model_cfg: ModelVariantConfig,
    train_cfg: TrainConfig,
    k: int = 5,
    seed: int = 0,
    encoder_state: dict | None = None,
    variants=VARIANTS,
    jobs: int = 1,
    impute_k: int = 5,
) -> dict[str, CVResult]:
    cohort = load_cohort(manifest, model_cfg.encoder.side, load_volumes=True)
    out = {}
    for v in variants:
        logger.info("ablation: %s", v)
        out[v] = cross_validate(
            manifest, model_cfg.with_variant(v), train_cfg, k=k, seed=seed,
            encoder_state=encoder_state, cohort=cohort, jobs=jobs, impute_k=impute_k,
        )
    return out


# ---------------------------------------------------------------------------
# report files


def write_cv_reports(out_dir, result: CVResult, bins: int = 10) -> None:
    out = Path(out_dir)
    write_json(out / "metrics.json", result.to_json())
    for f in result.folds:
        write_csv(
            out / f"roc_fold{f.fold}.csv",
            ["fpr", "tpr", "threshold"],
            zip(f.roc.fpr.tolist(), f.roc.tpr.tolist(), f.roc.thresholds.tolist()),
        )
        write_csv(
            out / f"probs_fold{f.fold}.csv",
            ["patient_id", "label", "score"],
            zip(f.patient_ids.tolist(), f.labels.tolist(), f.probs.tolist()),
        )
        write_csv(out / f"trainlog_fold{f.fold}.csv", ["epoch", "train_loss", "val_loss", "val_auc"], f.log.rows())
    grid, tpr, std = mean_roc([f.roc for f in result.folds])
    write_csv(out / "roc_mean.csv", ["fpr", "tpr", "tpr_std"], zip(grid.tolist(), tpr.tolist(), std.tolist()))
    scores = np.concatenate([f.probs for f in result.folds])
    labels = np.concatenate([f.labels for f in result.folds])
    hist = probability_histogram(scores, labels, bins)
    write_csv(
        out / "histogram.csv",
        ["bin_lower", "bin_upper", "negative", "positive"],
        zip(hist["lower"].tolist(), hist["upper"].tolist(), hist["negative"].tolist(), hist["positive"].tolist()),
    )


def write_importance(out_dir, report: ImportanceReport) -> None:
    k = report.per_fold.shape[0]
    write_csv(
        Path(out_dir) / "importance.csv",
        ["feature", "rank", "mean_delta_auc"] + [f"fold{i}" for i in range(k)],
        report.rows(),
    )


def write_ablation(out_dir, results: dict[str, CVResult]) -> None:
    rows = [[v] + [r.mean(key) for key in METRIC_KEYS] for v, r in results.items()]
    write_csv(Path(out_dir) / "ablation.csv", ["variant", "accuracy", "precision", "f1", "auc"], rows)
