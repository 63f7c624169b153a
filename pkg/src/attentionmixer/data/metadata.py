"""Tabular metadata: schema, one-hot expansion, k-NN imputation and standardisation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str = "numeric"  # numeric | categorical
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and len(self.levels) < 1:
            raise SchemaError(f"categorical feature {self.name!r} needs levels")

    @property
    def width(self) -> int:
        return len(self.levels) if self.kind == "categorical" else 1

    def column_names(self) -> list[str]:
        if self.kind == "categorical":
            return [f"{self.name}={lvl}" for lvl in self.levels]
        return [self.name]

    def to_json(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.kind == "categorical":
            out["levels"] = list(self.levels)
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "FeatureSpec":
        return cls(obj["name"], obj.get("kind", "numeric"), tuple(obj.get("levels", ())))


def schema_width(schema: Sequence[FeatureSpec]) -> int:
    return sum(f.width for f in schema)


def column_names(schema: Sequence[FeatureSpec]) -> list[str]:
    return [c for f in schema for c in f.column_names()]


def numeric_columns(schema: Sequence[FeatureSpec]) -> np.ndarray:
    mask = []
    for f in schema:
        mask.extend([f.kind == "numeric"] * f.width)
    return np.array(mask, dtype=bool)


@dataclass
class MetadataRecord:
    patient_id: str
    values: np.ndarray
    observed: np.ndarray
    fully_missing: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.values.shape != self.observed.shape:
            raise ValueError("values and observed mask must have the same length")
        if self.fully_missing and self.observed.any():
            raise ValueError(f"record {self.patient_id}: fully_missing but has observed fields")

    @property
    def complete(self) -> bool:
        return bool(self.observed.all())

    @classmethod
    def missing(cls, patient_id: str, d_m: int) -> "MetadataRecord":
        return cls(patient_id, np.zeros(d_m), np.zeros(d_m, dtype=bool), fully_missing=True)


def one_hot_expand(schema: Sequence[FeatureSpec], patient_id: str, raw: Mapping | None) -> MetadataRecord:
    """Turn a raw ``{name: value}`` map into a flat record; ``None`` means no record at all."""
    d_m = schema_width(schema)
    if raw is None:
        return MetadataRecord.missing(patient_id, d_m)
    values: list[float] = []
    observed: list[bool] = []
    for f in schema:
        v = raw.get(f.name)
        if f.kind == "numeric":
            values.append(0.0 if v is None else float(v))
            observed.append(v is not None)
            continue
        if v is None:
            values.extend([0.0] * f.width)
            observed.extend([False] * f.width)
            continue
        if v not in f.levels:
            raise SchemaError(f"feature {f.name!r}: unknown level {v!r} (levels {list(f.levels)})")
        values.extend(1.0 if lvl == v else 0.0 for lvl in f.levels)
        observed.extend([True] * f.width)
    unknown = set(raw) - {f.name for f in schema}
    if unknown:
        raise SchemaError(f"record {patient_id}: fields not in schema: {sorted(unknown)}")
    return MetadataRecord(patient_id, np.array(values), np.array(observed))


def _stack(records: Sequence[MetadataRecord]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([r.values for r in records]) if records else np.zeros((0, 0))
    m = np.stack([r.observed for r in records]) if records else np.zeros((0, 0), dtype=bool)
    return x, m


@dataclass
class KNNImputer:
    """Fill partially observed fields with the mean over the k nearest donors.

    Distance between two rows uses their mutually observed coordinates,
    ``sqrt(d / n_common * sum((a - b)**2))`` with ``d`` the row width. A donor
    for field ``j`` is a fitted row that observes ``j``; ties in distance keep
    fitted-row order. Fully missing records are neither donors nor targets.
    """

    k: int = 5
    donors_: np.ndarray | None = field(default=None, repr=False)
    donor_mask_: np.ndarray | None = field(default=None, repr=False)
    column_means_: np.ndarray | None = field(default=None, repr=False)

    def fit(self, records: Sequence[MetadataRecord]) -> "KNNImputer":
        if self.k < 1:
            raise ValueError("k must be >= 1")
        pool = [r for r in records if not r.fully_missing]
        if not pool:
            raise ValueError("imputer needs at least one record that is not fully missing")
        x, m = _stack(pool)
        self.donors_ = np.where(m, x, 0.0)
        self.donor_mask_ = m
        counts = m.sum(axis=0)
        sums = self.donors_.sum(axis=0)
        self.column_means_ = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
        return self

    def distances(self, row: np.ndarray, mask: np.ndarray) -> np.ndarray:
        common = self.donor_mask_ & mask
        n_common = common.sum(axis=1)
        diff = np.where(common, self.donors_ - row, 0.0)
        sq = (diff * diff).sum(axis=1)
        width = row.shape[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.sqrt(sq * width / n_common)
        d[n_common == 0] = np.nan
        return d

    def transform_one(self, rec: MetadataRecord) -> MetadataRecord:
        if self.donors_ is None:
            raise RuntimeError("imputer is not fitted")
        if rec.fully_missing or rec.complete:
            return rec
        values = rec.values.copy()
        dist = self.distances(rec.values, rec.observed)
        for j in np.flatnonzero(~rec.observed):
            ok = self.donor_mask_[:, j] & ~np.isnan(dist)
            candidates = np.flatnonzero(ok)
            if candidates.size == 0:
                warnings.warn(
                    f"record {rec.patient_id}: no donor observes column {j}; using training mean",
                    RuntimeWarning,
                    stacklevel=2,
                )
                values[j] = self.column_means_[j]
                continue
            order = np.argsort(dist[candidates], kind="stable")[: self.k]
            values[j] = self.donors_[candidates[order], j].mean()
        return MetadataRecord(rec.patient_id, values, np.ones_like(rec.observed), False)

    def transform(self, records: Sequence[MetadataRecord]) -> list[MetadataRecord]:
        return [self.transform_one(r) for r in records]


def knn_impute(records: Sequence[MetadataRecord], k: int = 5) -> list[MetadataRecord]:
    """Fit on ``records`` and impute them in place of a separate train/apply split."""
    return KNNImputer(k).fit(records).transform(records)


@dataclass
class Standardizer:
    """Z-scores the numeric columns with statistics of the fitted records."""

    numeric: np.ndarray
    mean_: np.ndarray | None = None
    std_: np.ndarray | None = None

    def fit(self, records: Sequence[MetadataRecord]) -> "Standardizer":
        pool = [r for r in records if not r.fully_missing]
        x, _ = _stack(pool)
        self.mean_ = np.where(self.numeric, x.mean(axis=0), 0.0)
        std = x.std(axis=0)
        self.std_ = np.where(self.numeric & (std > 0), std, 1.0)
        return self

    def transform(self, records: Sequence[MetadataRecord]) -> list[MetadataRecord]:
        out = []
        for r in records:
            if r.fully_missing:
                out.append(r)
            else:
                out.append(MetadataRecord(r.patient_id, (r.values - self.mean_) / self.std_, r.observed))
        return out


@dataclass
class MetadataPreprocessor:
    """k-NN imputation followed by numeric z-scoring, fitted on training records only."""

    schema: Sequence[FeatureSpec]
    k: int = 5
    imputer: KNNImputer | None = None
    scaler: Standardizer | None = None

    def fit(self, records: Sequence[MetadataRecord]) -> "MetadataPreprocessor":
        self.imputer = KNNImputer(self.k).fit(records)
        imputed = self.imputer.transform(records)
        self.scaler = Standardizer(numeric_columns(self.schema)).fit(imputed)
        return self

    def transform(self, records: Sequence[MetadataRecord]) -> list[MetadataRecord]:
        return self.scaler.transform(self.imputer.transform(records))

    def params(self) -> dict[str, np.ndarray]:
        return {
            "donors": self.imputer.donors_,
            "donor_mask": self.imputer.donor_mask_,
            "column_means": self.imputer.column_means_,
            "mean": self.scaler.mean_,
            "std": self.scaler.std_,
        }


def to_arrays(records: Sequence[MetadataRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Model inputs: (values with missing rows zeroed, fully-missing flags)."""
    x, m = _stack(records)
    missing = np.array([r.fully_missing for r in records], dtype=bool)
    partial = [r.patient_id for r in records if not r.fully_missing and not r.complete]
    if partial:
        raise ValueError(f"records still partially missing (impute first): {partial[:5]}")
    x = np.where(missing[:, None], 0.0, x)
    return x, missing
