"""Entity datasets: ingestion, normalization, windowing, injectors and the synthetic generator."""
from .io import (
    CAMELS_CHARACTERISTICS,
    CAMELS_FORCINGS,
    IngestReport,
    camels_groups,
    ingest_csv,
    read_attributes,
    write_attributes,
    write_dataset,
)
from .records import (
    DataError,
    Dataset,
    EntityRecord,
    NormalizationStats,
    SchemaError,
    WindowPair,
    parse_period,
)
from .synthetic import SyntheticConfig, simulate_bucket, synthesize
from .transforms import (
    CorruptionSpec,
    apply_normalization,
    corrupt,
    fit_normalize,
    invert_normalization,
    make_windows,
    mask_missing,
    sample_pairs,
    window_count,
)

__all__ = [
    "CAMELS_CHARACTERISTICS",
    "CAMELS_FORCINGS",
    "CorruptionSpec",
    "DataError",
    "Dataset",
    "EntityRecord",
    "IngestReport",
    "NormalizationStats",
    "SchemaError",
    "SyntheticConfig",
    "WindowPair",
    "apply_normalization",
    "camels_groups",
    "corrupt",
    "fit_normalize",
    "ingest_csv",
    "invert_normalization",
    "make_windows",
    "mask_missing",
    "parse_period",
    "read_attributes",
    "sample_pairs",
    "simulate_bucket",
    "synthesize",
    "window_count",
    "write_attributes",
    "write_dataset",
]
