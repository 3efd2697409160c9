"""Per-class dataset statistics and patient-grouped train/test splits."""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np

from oarseg.taxonomy import FOREGROUND_NAMES
from oarseg.voxelio.types import (
    AnnotationSet,
    CaseInfo,
    ClassStats,
    DatasetStats,
    SplitManifest,
    VolumeScan,
)


def compute_dataset_stats(dataset: Iterable[tuple[VolumeScan, AnnotationSet]]) -> DatasetStats:
    """Table-style statistics over already-filtered instances.

    ``median_relative_area_pct`` uses the instance mask area over the slice
    area; the bounding-box ratio is kept alongside as an auxiliary column.
    Classes that never occur get all-zero rows.
    """
    images: dict[int, set] = defaultdict(set)
    counts: dict[int, int] = defaultdict(int)
    rel_area: dict[int, list[float]] = defaultdict(list)
    rel_box: dict[int, list[float]] = defaultdict(list)
    for volume, ann in dataset:
        rows, cols = ann.grid
        slice_area = rows * cols
        for rec in ann.instances:
            images[rec.class_id].add((volume.case_id, volume.phase, rec.slice_index))
            counts[rec.class_id] += 1
            rel_area[rec.class_id].append(100.0 * rec.area_px / slice_area)
            rel_box[rec.class_id].append(100.0 * rec.bbox_area / slice_area)

    per_class = {}
    for cid, name in enumerate(FOREGROUND_NAMES, start=1):
        if counts[cid] == 0:
            per_class[name] = ClassStats()
            continue
        per_class[name] = ClassStats(
            image_count=len(images[cid]),
            instance_count=counts[cid],
            median_relative_area_pct=float(np.median(rel_area[cid])),
            median_relative_bbox_area_pct=float(np.median(rel_box[cid])),
        )
    return DatasetStats(per_class)


def stats_rows(stats: DatasetStats) -> list[dict]:
    return [
        {
            "class": name,
            "image_count": s.image_count,
            "instance_count": s.instance_count,
            "median_relative_area_pct": round(s.median_relative_area_pct, 6),
            "median_relative_bbox_area_pct": round(s.median_relative_bbox_area_pct, 6),
        }
        for name, s in stats.per_class.items()
    ]


class InsufficientCleanCasesError(ValueError):
    pass


def split_dataset(cases: Sequence[CaseInfo], test_count: int, seed: int = 0) -> SplitManifest:
    """Draw ``test_count`` patients for the test set, only among fully clean patients.

    All scans of one patient (pre- and post-treatment) land in the same split.
    """
    by_patient: dict[str, list[CaseInfo]] = defaultdict(list)
    for c in cases:
        by_patient[c.patient_id].append(c)
    clean_patients = sorted(p for p, cs in by_patient.items() if all(c.clean for c in cs))
    if test_count > len(clean_patients):
        raise InsufficientCleanCasesError(
            f"need {test_count} clean patients for the test split, only {len(clean_patients)} "
            f"available (short by {test_count - len(clean_patients)})"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(clean_patients))
    test_patients = {clean_patients[i] for i in order[:test_count]}
    test = tuple(c.case_id for p in sorted(test_patients) for c in by_patient[p])
    train = tuple(c.case_id for c in cases if c.patient_id not in test_patients)
    return SplitManifest(train, test, {c.case_id: c.clean for c in cases})

