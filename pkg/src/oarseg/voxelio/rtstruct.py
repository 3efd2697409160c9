"""DICOM series / RT structure set ingest.

Two structure-set inputs are understood:

* a DICOM RTSTRUCT (pydicom ``Dataset`` or file path), contour vertices in
  patient millimetres;
* a portable JSON document with vertices already in pixel coordinates::

      {"case_id": "p001",
       "structures": [{"name": "Eye_L",
                       "contours": [{"slice": 12, "points": [[x, y], ...]}]}]}
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import pydicom
import yaml

from oarseg.taxonomy import CLASS_IDS
from oarseg.voxelio.raster import EmptyMaskError, compute_instance_bbox, rasterize_contour
from oarseg.voxelio.types import AnnotationSet, Contour, Modality, Phase, VolumeScan

_LATERALITY = {"l", "r", "lt", "rt", "left", "right"}


class ContourReferenceError(ValueError):
    """One or more contours point at slices the volume does not have."""

    def __init__(self, offending: list[str]):
        self.offending = offending
        super().__init__("unresolvable slice reference in: " + "; ".join(offending))


def _key(name: str) -> str:
    tokens = re.split(r"[^a-z0-9]+", name.lower())
    return "".join(t for t in tokens if t and t not in _LATERALITY)


class ClassMap:
    """Maps free-text structure names onto the category taxonomy."""

    def __init__(self, aliases: dict[str, list[str]]):
        self._lookup: dict[str, str] = {}
        for canonical, names in aliases.items():
            if canonical not in CLASS_IDS:
                raise ValueError(f"class map names unknown category {canonical!r}")
            for alias in [canonical, *names]:
                self._lookup[_key(alias)] = canonical

    @classmethod
    def default(cls) -> "ClassMap":
        text = resources.files("oarseg.voxelio").joinpath("class_map.yaml").read_text()
        return cls(yaml.safe_load(text))

    @classmethod
    def from_file(cls, path: str | Path) -> "ClassMap":
        return cls(yaml.safe_load(Path(path).read_text()))

    def resolve(self, name: str) -> str | None:
        return self._lookup.get(_key(name))


@dataclass
class _RawContour:
    name: str
    slice_ref: int | None
    points: np.ndarray
    label: str


def extract_contours(rtstruct, volume: VolumeScan, class_map: ClassMap | None = None) -> AnnotationSet:
    """Collect every labelled polygon of a structure set onto ``volume``'s slices.

    Structures whose name does not resolve through ``class_map`` are counted
    in ``AnnotationSet.unknown_names`` and a warning is issued.  Any contour
    whose slice cannot be resolved aborts with :class:`ContourReferenceError`
    listing all offenders.
    """
    class_map = class_map or ClassMap.default()
    if isinstance(rtstruct, (str, Path)):
        path = Path(rtstruct)
        rtstruct = json.loads(path.read_text()) if path.suffix == ".json" else pydicom.dcmread(path)
    raw = _raw_from_json(rtstruct) if isinstance(rtstruct, dict) else _raw_from_dicom(rtstruct, volume)

    ann = AnnotationSet(case_id=volume.case_id, grid=volume.grid)
    if not raw:
        warnings.warn(f"structure set for case {volume.case_id!r} holds no contour", stacklevel=2)
        return ann

    bad = [c.label for c in raw if c.slice_ref is None or not 0 <= c.slice_ref < volume.n_slices]
    if bad:
        raise ContourReferenceError(bad)

    for c in raw:
        canonical = class_map.resolve(c.name)
        if canonical is None:
            ann.unknown_names[c.name] = ann.unknown_names.get(c.name, 0) + 1
            continue
        ann.contours.append(Contour(c.slice_ref, CLASS_IDS[canonical], c.points, source_name=c.name))
    if ann.unknown_names:
        warnings.warn(
            f"unmapped structure names in case {volume.case_id!r}: {sorted(ann.unknown_names)}",
            stacklevel=2,
        )
    return ann


def _raw_from_json(doc: dict) -> list[_RawContour]:
    out = []
    for s in doc.get("structures", []):
        for k, c in enumerate(s.get("contours", [])):
            out.append(
                _RawContour(
                    name=s["name"],
                    slice_ref=int(c["slice"]),
                    points=np.asarray(c["points"], dtype=np.float64),
                    label=f"{s['name']}[{k}] -> slice {c['slice']}",
                )
            )
    return out


def _raw_from_dicom(ds, volume: VolumeScan) -> list[_RawContour]:
    names = {int(r.ROINumber): str(r.ROIName) for r in getattr(ds, "StructureSetROISequence", [])}
    uid_index = {uid: i for i, uid in enumerate(volume.slice_uids)}
    ox, oy, _ = volume.origin
    _, dy, dx = volume.spacing
    out = []
    for roi in getattr(ds, "ROIContourSequence", []):
        name = names.get(int(roi.ReferencedROINumber), f"ROI#{roi.ReferencedROINumber}")
        for k, item in enumerate(getattr(roi, "ContourSequence", [])):
            data = np.asarray(item.ContourData, dtype=np.float64).reshape(-1, 3)
            ref = None
            images = getattr(item, "ContourImageSequence", None)
            if images and uid_index:
                ref = uid_index.get(str(images[0].ReferencedSOPInstanceUID))
            if ref is None:
                ref = _slice_from_z(float(data[0, 2]), volume)
            pts = np.stack([(data[:, 0] - ox) / dx + 0.5, (data[:, 1] - oy) / dy + 0.5], axis=1)
            out.append(_RawContour(name, ref, pts, f"{name}[{k}] z={data[0, 2]:g}"))
    return out


def _slice_from_z(z: float, volume: VolumeScan) -> int | None:
    pos = (z - volume.origin[2]) / volume.spacing[0]
    idx = int(round(pos))
    if abs(pos - idx) > 0.5 or not 0 <= idx < volume.n_slices:
        return None
    return idx


def annotate_instances(ann: AnnotationSet, enlarge: float = 1.2, min_area: int = 10) -> AnnotationSet:
    """Rasterize every contour and keep the ones passing the box/area rules."""
    ann.instances = []
    ann.rejected = []
    for c in ann.contours:
        mask = rasterize_contour(c, ann.grid)
        try:
            rec = compute_instance_bbox(mask, enlarge, min_area, class_id=c.class_id, slice_index=c.slice_index)
        except EmptyMaskError:
            ann.rejected.append((c.slice_index, c.class_id, "empty"))
            continue
        if rec is None:
            ann.rejected.append((c.slice_index, c.class_id, "min_area"))
            continue
        ann.instances.append(rec)
    return ann


def load_dicom_series(directory: str | Path, phase: Phase = Phase.PRE) -> VolumeScan:
    """Read a single-series DICOM directory into a :class:`VolumeScan` (axial, sorted by z)."""
    slices = []
    for path in sorted(Path(directory).iterdir()):
        if not path.is_file():
            continue
        try:
            ds = pydicom.dcmread(path)
        except pydicom.errors.InvalidDicomError:
            continue
        if "PixelData" in ds:
            slices.append(ds)
    if not slices:
        raise FileNotFoundError(f"no DICOM image found in {directory}")
    slices.sort(key=lambda d: float(d.ImagePositionPatient[2]))
    vox = np.stack(
        [
            d.pixel_array.astype(np.float32) * float(getattr(d, "RescaleSlope", 1))
            + float(getattr(d, "RescaleIntercept", 0))
            for d in slices
        ]
    )
    z = [float(d.ImagePositionPatient[2]) for d in slices]
    dz = float(np.median(np.diff(z))) if len(z) > 1 else float(getattr(slices[0], "SliceThickness", 1.0))
    dy, dx = (float(v) for v in slices[0].PixelSpacing)
    first = slices[0]
    modality = str(getattr(first, "Modality", "CT"))
    return VolumeScan(
        voxels=vox,
        spacing=(dz, dy, dx),
        modality=Modality.MR if modality == "MR" else Modality.CT,
        case_id=str(getattr(first, "PatientID", Path(directory).name)),
        phase=phase,
        origin=tuple(float(v) for v in first.ImagePositionPatient),
        slice_uids=tuple(str(d.SOPInstanceUID) for d in slices),
    )


__all__ = [
    "ClassMap",
    "ContourReferenceError",
    "annotate_instances",
    "extract_contours",
    "load_dicom_series",
]
