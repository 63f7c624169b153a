"""Cohort manifests, in-memory cohort arrays and the synthetic cohort generator.

Manifest JSON::

    {
      "schema":  [{"name": ..., "kind": "numeric"|"categorical", "levels": [...]}, ...],
      "samples": [{"patient_id": ..., "volume": "volumes/p000_s0.vol", "label": 0|1,
                   "metadata": {name: value | null}}, ...],
      "info":    {...}            # optional generator bookkeeping
    }

A sample without a ``metadata`` key has no record at all (fully missing);
a ``null`` field is an unobserved field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..io import atomic_write_text, dumps_json
from ..seeding import derive_seed, rng_for
from .metadata import FeatureSpec, MetadataRecord, SchemaError, one_hot_expand
from .volume import Volume, load_volume, preprocess_volume, save_volume


class ManifestError(ValueError):
    pass


@dataclass
class PatientSample:
    patient_id: str
    volume_path: str
    metadata: MetadataRecord
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ManifestError(f"sample {self.patient_id}: label must be 0 or 1, got {self.label!r}")


@dataclass
class CohortManifest:
    schema: list[FeatureSpec]
    samples: list[PatientSample]
    root: Path = Path(".")
    info: dict = field(default_factory=dict)

    @property
    def patient_ids(self) -> list[str]:
        return list(dict.fromkeys(s.patient_id for s in self.samples))

    @property
    def d_m(self) -> int:
        return sum(f.width for f in self.schema)

    def volume_file(self, sample: PatientSample) -> Path:
        return self.root / sample.volume_path


def collapse_record(schema: Sequence[FeatureSpec], rec: MetadataRecord) -> dict | None:
    """Inverse of :func:`one_hot_expand`."""
    if rec.fully_missing:
        return None
    out, i = {}, 0
    for f in schema:
        if f.kind == "numeric":
            out[f.name] = float(rec.values[i]) if rec.observed[i] else None
        else:
            block = slice(i, i + f.width)
            if rec.observed[block].all():
                out[f.name] = f.levels[int(np.argmax(rec.values[block]))]
            else:
                out[f.name] = None
        i += f.width
    return out


def manifest_to_json(m: CohortManifest) -> dict:
    samples = []
    for s in m.samples:
        entry = {"patient_id": s.patient_id, "volume": s.volume_path, "label": s.label}
        raw = collapse_record(m.schema, s.metadata)
        if raw is not None:
            entry["metadata"] = raw
        samples.append(entry)
    doc = {"schema": [f.to_json() for f in m.schema], "samples": samples}
    if m.info:
        doc["info"] = m.info
    return doc


def manifest_from_json(doc: dict, root: Path) -> CohortManifest:
    try:
        schema = [FeatureSpec.from_json(f) for f in doc["schema"]]
        samples = []
        for entry in doc["samples"]:
            pid = str(entry["patient_id"])
            rec = one_hot_expand(schema, pid, entry.get("metadata"))
            samples.append(PatientSample(pid, entry["volume"], rec, int(entry["label"])))
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed manifest: {exc!r}") from exc
    except SchemaError as exc:
        raise ManifestError(str(exc)) from exc
    return CohortManifest(schema, samples, Path(root), doc.get("info", {}))


def save_manifest(m: CohortManifest, path) -> None:
    atomic_write_text(Path(path), dumps_json(manifest_to_json(m)))


def load_manifest(path) -> CohortManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON at byte offset {exc.pos}") from exc
    return manifest_from_json(doc, path.parent)


# ---------------------------------------------------------------------------
# in-memory cohort


@dataclass
class CohortData:
    """Per-scan arrays ready for the model."""

    patient_ids: np.ndarray
    labels: np.ndarray
    records: list[MetadataRecord]
    volumes: np.ndarray | None  # (S, side, side, side), preprocessed

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "CohortData":
        idx = np.asarray(idx, dtype=int)
        return CohortData(
            self.patient_ids[idx],
            self.labels[idx],
            [self.records[i] for i in idx],
            None if self.volumes is None else self.volumes[idx],
        )

    def with_records(self, records: list[MetadataRecord]) -> "CohortData":
        return CohortData(self.patient_ids, self.labels, list(records), self.volumes)


def load_cohort(m: CohortManifest, side: int, load_volumes: bool = True) -> CohortData:
    vols = None
    if load_volumes:
        vols = np.stack([preprocess_volume(load_volume(m.volume_file(s)), side) for s in m.samples])
    return CohortData(
        np.array([s.patient_id for s in m.samples]),
        np.array([s.label for s in m.samples], dtype=np.int64),
        [s.metadata for s in m.samples],
        vols,
    )


# ---------------------------------------------------------------------------
# synthetic cohort

META_EFFECT = 2.0  # per informative feature, largest mean shift in feature-sd units at strength 1
HCT_EFFECT = 2.0  # largest blob peak amplitude in noise-sd units at strength 1
BLOB_JITTER = 0.125  # blob centre uniform within +/- this fraction of each extent about the middle
MIN_BLOB_WEIGHT = 0.1


def evidence_weights(w: float) -> tuple[float, float]:
    """Split a positive patient's evidence between imaging and metadata.

    ``w`` ~ U(0, 1): a third of patients show mostly metadata evidence, a
    third mostly imaging evidence, a third both. Every positive keeps a blob
    of at least ``MIN_BLOB_WEIGHT`` of full amplitude.
    """
    hct = max(MIN_BLOB_WEIGHT, min(1.0, 3.0 * w - 1.0))
    meta = max(0.0, min(1.0, 2.0 - 3.0 * w))
    return hct, meta


CATEGORICAL_LEVELS = ("A", "B", "C")


def _blob_volume(rng, dims, spacing, amplitude, sigma_mm):
    d, h, w = dims
    grids = np.meshgrid(
        *[(np.arange(n) + 0.5) * s for n, s in zip(dims, spacing)], indexing="ij"
    )
    extent = [n * s for n, s in zip(dims, spacing)]
    noise = rng.standard_normal((d, h, w))
    # mild low-frequency background shared by all scans
    background = 0.5 * np.cos(np.pi * grids[0] / extent[0]) * np.cos(np.pi * grids[1] / extent[1])
    vol = background + noise
    if amplitude > 0:
        centre = [rng.uniform((0.5 - BLOB_JITTER) * e, (0.5 + BLOB_JITTER) * e) for e in extent]
        r2 = sum((g - c) ** 2 for g, c in zip(grids, centre))
        vol = vol + amplitude * np.exp(-0.5 * r2 / sigma_mm**2)
    return vol


def generate_synthetic_cohort(
    out_dir,
    seed: int = 0,
    n_patients: int = 200,
    side: int = 16,
    d_m: int = 8,
    missing_rate: float = 0.1,
    signal_strength: float = 1.0,
    field_missing_rate: float = 0.05,
    multi_scan_rate: float = 0.15,
    meta_signal: bool = True,
    hct_signal: bool = True,
) -> CohortManifest:
    """Write a balanced synthetic cohort with planted signal in both modalities.

    Each positive patient draws a split of evidence (:func:`evidence_weights`).
    Their scans carry a Gaussian blob of peak ``HCT_EFFECT * signal_strength *
    hct_weight`` noise units at a random location near the centre, and
    features ``f00`` and ``f01`` are shifted up by ``META_EFFECT *
    signal_strength * meta_weight`` standard deviations. All other features
    are noise, so each modality alone misses part of the positives. Scans are
    stored at half depth resolution (``side//2`` slices of 2 mm) so
    preprocessing has real resampling to do.
    """
    if n_patients < 10 or side < 8 or d_m < 4:
        raise ValueError("need n_patients >= 10, side >= 8, d_m >= 4")
    for name, rate in [
        ("missing_rate", missing_rate),
        ("field_missing_rate", field_missing_rate),
        ("multi_scan_rate", multi_scan_rate),
    ]:
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {rate}")
    if signal_strength < 0:
        raise ValueError("signal_strength must be non-negative")

    out_dir = Path(out_dir)
    rng = rng_for(seed, "synth", "labels")
    labels = np.array([0] * (n_patients // 2) + [1] * (n_patients - n_patients // 2))
    labels = rng.permutation(labels)

    n_numeric = d_m - 1 if d_m >= 5 else d_m
    schema = [FeatureSpec(f"f{i:02d}") for i in range(n_numeric)]
    if n_numeric < d_m:
        schema.append(FeatureSpec("site", "categorical", CATEGORICAL_LEVELS))
    informative = ["f00", "f01"]

    mrng = rng_for(seed, "synth", "metadata")
    locs = mrng.uniform(-50, 150, size=n_numeric)
    scales = mrng.uniform(1, 30, size=n_numeric)
    fully_missing = mrng.random(n_patients) < missing_rate
    wrng = rng_for(seed, "synth", "evidence")
    weights = [evidence_weights(w) for w in wrng.random(n_patients)]
    meta_amp = META_EFFECT * signal_strength if meta_signal else 0.0

    raw_records: list[dict | None] = []
    for i in range(n_patients):
        z = mrng.standard_normal(n_numeric)
        z[:2] += meta_amp * weights[i][1] * labels[i]
        raw = {f"f{j:02d}": float(locs[j] + scales[j] * z[j]) for j in range(n_numeric)}
        if n_numeric < d_m:
            raw["site"] = CATEGORICAL_LEVELS[int(mrng.integers(len(CATEGORICAL_LEVELS)))]
        hole = mrng.random(len(schema)) < field_missing_rate
        for f, drop in zip(schema, hole):
            if drop:
                raw[f.name] = None
        raw_records.append(None if fully_missing[i] else raw)

    srng = rng_for(seed, "synth", "scans")
    n_scans = np.where(srng.random(n_patients) < multi_scan_rate, 2, 1)

    dims = (side // 2, side, side)
    spacing = (2.0, 1.0, 1.0)
    sigma_mm = side / 8.0
    amplitude = HCT_EFFECT * signal_strength if hct_signal else 0.0
    samples: list[PatientSample] = []
    for i in range(n_patients):
        pid = f"p{i:04d}"
        rec = one_hot_expand(schema, pid, raw_records[i])
        for s in range(n_scans[i]):
            vrng = np.random.default_rng(derive_seed(seed, "synth", "volume", pid, s))
            vox = _blob_volume(vrng, dims, spacing, amplitude * weights[i][0] * labels[i], sigma_mm)
            rel = f"volumes/{pid}_s{s}.vol"
            save_volume(Volume(vox, spacing), out_dir / rel)
            samples.append(PatientSample(pid, rel, rec, int(labels[i])))

    info = {
        "generator": {
            "seed": int(seed),
            "n_patients": int(n_patients),
            "side": int(side),
            "d_m": int(d_m),
            "missing_rate": float(missing_rate),
            "signal_strength": float(signal_strength),
            "field_missing_rate": float(field_missing_rate),
            "multi_scan_rate": float(multi_scan_rate),
            "meta_signal": bool(meta_signal),
            "hct_signal": bool(hct_signal),
        },
        "informative_features": informative,
        "n_fully_missing": int(fully_missing.sum()),
        "n_scans": int(n_scans.sum()),
    }
    manifest = CohortManifest(schema, samples, out_dir, info)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
