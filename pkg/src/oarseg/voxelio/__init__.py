"""Volume and RT-structure ingest, per-slice instance annotation, dataset statistics."""

from oarseg.voxelio.formats import (
    read_annotation_manifest,
    read_corpus,
    read_volume,
    write_annotation_manifest,
    write_corpus,
    write_stats_csv,
    write_volume,
)
from oarseg.voxelio.raster import (
    ENLARGE_FACTOR,
    MIN_AREA_PX,
    EmptyMaskError,
    clip_bbox,
    compute_instance_bbox,
    enlarge_bbox,
    rasterize_contour,
    tight_bbox,
)
from oarseg.voxelio.rtstruct import (
    ClassMap,
    ContourReferenceError,
    annotate_instances,
    extract_contours,
    load_dicom_series,
)
from oarseg.voxelio.stats import InsufficientCleanCasesError, compute_dataset_stats, split_dataset
from oarseg.voxelio.types import (
    AnnotationSet,
    CaseInfo,
    ClassStats,
    Contour,
    DatasetStats,
    InstanceRecord,
    Modality,
    Phase,
    SplitManifest,
    VolumeScan,
)
