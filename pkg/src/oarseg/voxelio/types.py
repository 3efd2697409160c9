"""Data containers for scans, contours and per-slice instance annotations.

Coordinate convention (used everywhere in the package): points and boxes are
``(x, y) = (col, row)`` in continuous pixel-corner coordinates with the origin
at the top-left corner of the slice.  Pixel ``(c, r)`` covers
``[c, c + 1) x [r, r + 1)`` and its center sits at ``(c + 0.5, r + 0.5)``.
A box ``(x0, y0, x1, y1)`` therefore has width ``x1 - x0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from oarseg.taxonomy import BACKGROUND, NUM_CLASSES


class Modality(str, Enum):
    CT = "CT"
    MR = "MR"


class Phase(str, Enum):
    PRE = "pre_treatment"
    POST = "post_treatment"


@dataclass(frozen=True)
class VolumeScan:
    """A 3D scan stored as ``(slices, rows, cols)``.

    ``spacing`` is ``(dz, dy, dx)`` in mm.  ``origin`` is the patient-space
    ``(x, y, z)`` position of the center of voxel ``(0, 0, 0)``; it is only
    needed to map DICOM contour coordinates onto the grid.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    modality: Modality
    case_id: str
    phase: Phase = Phase.PRE
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    slice_uids: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or vox.size == 0:
            raise ValueError(f"voxel grid must be a non-empty 3D array, got shape {vox.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.slice_uids and len(self.slice_uids) != vox.shape[0]:
            raise ValueError("slice_uids must have one entry per slice")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "modality", Modality(self.modality))
        object.__setattr__(self, "phase", Phase(self.phase))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.voxels.shape[1], self.voxels.shape[2]

    @property
    def intensity_range(self) -> tuple[float, float]:
        return float(self.voxels.min()), float(self.voxels.max())

    def slice_z(self, index: int) -> float:
        return self.origin[2] + index * self.spacing[0]


@dataclass(frozen=True)
class Contour:
    """One closed planar polygon on one slice.  ``points`` is ``(K, 2)`` of ``(x, y)``."""

    slice_index: int
    class_id: int
    points: np.ndarray
    source_name: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise ValueError(f"contour needs >= 3 (x, y) vertices, got shape {pts.shape}")
        if not (0 < self.class_id < NUM_CLASSES):
            raise ValueError(f"contour class id must be a foreground class, got {self.class_id}")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class InstanceRecord:
    """One organ instance on one slice after box enlargement and area filtering."""

    class_id: int
    bbox: tuple[float, float, float, float]
    mask: np.ndarray
    area_px: int
    slice_index: int = -1
    tight_bbox: tuple[int, int, int, int] | None = None

    def __post_init__(self):
        if self.class_id == BACKGROUND:
            raise ValueError("instance class cannot be background")
        x0, y0, x1, y1 = self.bbox
        rows, cols = self.mask.shape
        if x0 < 0 or y0 < 0 or x1 > cols or y1 > rows:
            raise ValueError(f"bbox {self.bbox} not clipped to a {rows}x{cols} slice")

    @property
    def bbox_area(self) -> float:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)


@dataclass
class AnnotationSet:
    """Contours and derived instances for one case."""

    case_id: str
    grid: tuple[int, int]
    contours: list[Contour] = field(default_factory=list)
    instances: list[InstanceRecord] = field(default_factory=list)
    unknown_names: dict[str, int] = field(default_factory=dict)
    rejected: list[tuple[int, int, str]] = field(default_factory=list)

    def instances_on(self, slice_index: int) -> list[InstanceRecord]:
        return [r for r in self.instances if r.slice_index == slice_index]

    def label_map(self, slice_index: int) -> np.ndarray:
        """Integer label raster of one slice; later instances overwrite earlier ones."""
        out = np.zeros(self.grid, dtype=np.int64)
        for rec in self.instances_on(slice_index):
            out[rec.mask] = rec.class_id
        return out


@dataclass(frozen=True)
class ClassStats:
    image_count: int = 0
    instance_count: int = 0
    median_relative_area_pct: float = 0.0
    median_relative_bbox_area_pct: float = 0.0


@dataclass
class DatasetStats:
    per_class: dict[str, ClassStats]

    def __getitem__(self, name: str) -> ClassStats:
        return self.per_class[name]


@dataclass(frozen=True)
class CaseInfo:
    case_id: str
    patient_id: str
    clean: bool = True


@dataclass(frozen=True)
class SplitManifest:
    train_case_ids: tuple[str, ...]
    test_case_ids: tuple[str, ...]
    clean: dict[str, bool]

    def __post_init__(self):
        overlap = set(self.train_case_ids) & set(self.test_case_ids)
        if overlap:
            raise ValueError(f"train/test overlap: {sorted(overlap)}")

    def to_dict(self) -> dict:
        return {
            "train": list(self.train_case_ids),
            "test": list(self.test_case_ids),
            "clean": dict(self.clean),
        }
