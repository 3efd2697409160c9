"""On-disk formats.

Volumes
    ``<stem>.raw`` holds little-endian int16 voxels in ``(slices, rows, cols)``
    order; ``<stem>.json`` is the header (dims, spacing, modality, case id,
    phase, origin, rescale slope/intercept).

Annotations
    ``manifest.jsonl`` with one record per instance
    (``case``, ``slice``, ``class``, ``class_id``, ``bbox``, ``area_px``, ``mask``)
    and one 8-bit single-channel PNG per instance mask (255 = inside).

Statistics
    CSV, one row per category.

Corpus
    A directory with ``cases.json`` listing every case and its files, as
    written by :func:`write_corpus`.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

from oarseg.taxonomy import class_id, class_name
from oarseg.voxelio.raster import tight_bbox
from oarseg.voxelio.stats import stats_rows
from oarseg.voxelio.types import AnnotationSet, DatasetStats, InstanceRecord, Modality, Phase, VolumeScan

_INT16 = np.dtype("<i2")


def write_volume(volume: VolumeScan, stem: str | Path, slope: float = 1.0, intercept: float = 0.0) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stored = np.rint((volume.voxels - intercept) / slope)
    info = np.iinfo(_INT16)
    if stored.min() < info.min or stored.max() > info.max:
        raise ValueError(f"volume {volume.case_id} does not fit int16 with slope {slope}")
    raw = stem.with_suffix(".raw")
    raw.write_bytes(stored.astype(_INT16).tobytes())
    header = {
        "dims": list(volume.voxels.shape),
        "spacing": list(volume.spacing),
        "modality": volume.modality.value,
        "case_id": volume.case_id,
        "phase": volume.phase.value,
        "origin": list(volume.origin),
        "dtype": "int16-le",
        "rescale_slope": slope,
        "rescale_intercept": intercept,
        "data_file": raw.name,
    }
    header_path = stem.with_suffix(".json")
    header_path.write_text(json.dumps(header, indent=2))
    return header_path


def read_volume(header_path: str | Path) -> VolumeScan:
    header_path = Path(header_path)
    h = json.loads(header_path.read_text())
    data = np.frombuffer((header_path.parent / h["data_file"]).read_bytes(), dtype=_INT16)
    dims = tuple(h["dims"])
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{h['data_file']}: expected {np.prod(dims)} voxels, found {data.size}")
    vox = data.reshape(dims).astype(np.float32) * h["rescale_slope"] + h["rescale_intercept"]
    return VolumeScan(
        voxels=vox,
        spacing=tuple(h["spacing"]),
        modality=Modality(h["modality"]),
        case_id=h["case_id"],
        phase=Phase(h.get("phase", Phase.PRE.value)),
        origin=tuple(h.get("origin", (0.0, 0.0, 0.0))),
    )


def write_mask_png(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path)) > 127


def write_annotation_manifest(annotations: list[AnnotationSet], out_dir: str | Path) -> Path:
    """Append-free write of every instance of every case; returns the manifest path."""
    out_dir = Path(out_dir)
    mask_dir = out_dir / "masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with manifest.open("w") as fh:
        for ann in annotations:
            for k, rec in enumerate(ann.instances):
                rel = Path("masks") / f"{ann.case_id}_s{rec.slice_index:03d}_i{k:03d}.png"
                write_mask_png(rec.mask, out_dir / rel)
                fh.write(
                    json.dumps(
                        {
                            "case": ann.case_id,
                            "slice": rec.slice_index,
                            "class": class_name(rec.class_id),
                            "class_id": rec.class_id,
                            "bbox": [round(v, 6) for v in rec.bbox],
                            "area_px": rec.area_px,
                            "grid": list(ann.grid),
                            "mask": rel.as_posix(),
                        }
                    )
                    + "\n"
                )
    return manifest


def read_annotation_manifest(manifest: str | Path) -> dict[str, AnnotationSet]:
    manifest = Path(manifest)
    out: dict[str, AnnotationSet] = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        mask = read_mask_png(manifest.parent / r["mask"])
        ann = out.setdefault(r["case"], AnnotationSet(case_id=r["case"], grid=tuple(r["grid"])))
        ann.instances.append(
            InstanceRecord(
                class_id=int(r.get("class_id", class_id(r["class"]))),
                bbox=tuple(r["bbox"]),
                mask=mask,
                area_px=int(r["area_px"]),
                slice_index=int(r["slice"]),
                tight_bbox=tight_bbox(mask),
            )
        )
    return out


def write_stats_csv(stats: DatasetStats, path: str | Path) -> None:
    rows = stats_rows(stats)
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def write_corpus(cases, out_dir: str | Path) -> Path:
    """Write ``(ct, mr, annotations, info)`` tuples as volumes + one annotation manifest.

    ``info`` is a dict with at least ``patient_id`` and ``clean``.
    """
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    listing = []
    anns = []
    for ct, mr, ann, info in cases:
        entry = {"case_id": ct.case_id, "phase": ct.phase.value, **info}
        entry["ct"] = write_volume(ct, out_dir / "volumes" / f"{ct.case_id}_CT").relative_to(out_dir).as_posix()
        if mr is not None:
            entry["mr"] = write_volume(mr, out_dir / "volumes" / f"{mr.case_id}_MR").relative_to(out_dir).as_posix()
        listing.append(entry)
        anns.append(ann)
    write_annotation_manifest(anns, out_dir / "annotations")
    path = out_dir / "cases.json"
    path.write_text(json.dumps({"cases": listing}, indent=2))
    return path


def read_corpus(directory: str | Path) -> list[dict]:
    """Inverse of :func:`write_corpus`; each item has ``ct``, ``mr`` (or None), ``annotations``, ``info``."""
    directory = Path(directory)
    listing = json.loads((directory / "cases.json").read_text())["cases"]
    manifest = directory / "annotations" / "manifest.jsonl"
    anns = read_annotation_manifest(manifest) if manifest.exists() else {}
    out = []
    for entry in listing:
        ct = read_volume(directory / entry["ct"])
        mr = read_volume(directory / entry["mr"]) if "mr" in entry else None
        ann = anns.get(entry["case_id"], AnnotationSet(case_id=entry["case_id"], grid=ct.grid))
        info = {k: v for k, v in entry.items() if k not in ("ct", "mr")}
        out.append({"ct": ct, "mr": mr, "annotations": ann, "info": info})
    return out
