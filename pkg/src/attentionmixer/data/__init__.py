from .cohort import (
    CohortData,
    CohortManifest,
    ManifestError,
    PatientSample,
    generate_synthetic_cohort,
    load_cohort,
    load_manifest,
    save_manifest,
)
from .metadata import (
    FeatureSpec,
    KNNImputer,
    MetadataPreprocessor,
    MetadataRecord,
    SchemaError,
    knn_impute,
    one_hot_expand,
)
from .volume import (
    Volume,
    VolumeFormatError,
    clip_normalize,
    decode_volume,
    encode_volume,
    load_volume,
    resample_volume,
    save_volume,
)
