"""Turn volumes and annotations into preprocessed slice samples."""

from __future__ import annotations

from typing import Iterable

from oarseg.phantoms import UnpairedSampler
from oarseg.training.config import PreprocessConfig
from oarseg.training.preprocess import SliceSample, preprocess_annotated_slice
from oarseg.voxelio.types import AnnotationSet, VolumeScan


def slices_from_volumes(
    pairs: Iterable[tuple[VolumeScan, AnnotationSet | None]], config: PreprocessConfig
) -> list[SliceSample]:
    """Every slice of every volume, with labels and instances when annotations are given."""
    out = []
    for volume, ann in pairs:
        for z in range(volume.n_slices):
            out.append(preprocess_annotated_slice(volume, ann, z, config))
    return out


def unpaired_pools(cases, config: PreprocessConfig, seed: int = 0) -> tuple[list[SliceSample], list[SliceSample]]:
    """Split cases into disjoint CT (annotated) and MR (unannotated) pools.

    ``cases`` yields ``(ct, mr, annotations)`` triples.
    """
    cases = [tuple(c) for c in cases]
    sampler = UnpairedSampler(len(cases), 1, seed)
    ct = slices_from_volumes(((cases[i][0], cases[i][2]) for i in sampler.ct_pool), config)
    mr = slices_from_volumes(((cases[i][1], None) for i in sampler.mr_pool), config)
    return ct, mr
