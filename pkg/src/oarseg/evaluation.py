"""Per-class dice reports and synthesis image export.

Instance predictions are reduced to one binary map per class and case by
taking the union of all detections scoring at least the threshold; the same
per-case dice then applies to semantic and instance models alike.  Class
means are macro averages over the test cases that contain the class.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image

from oarseg.losses import dice_score
from oarseg.taxonomy import NUM_CLASSES, class_name

log = logging.getLogger(__name__)

DEFAULT_SCORE_THRESHOLD = 0.5


@dataclass
class DiceReport:
    """``per_case[class_id][case_id]`` holds the dice of that class on that case."""

    per_case: dict[int, dict[str, float]]
    n_cases: int
    metadata: dict = field(default_factory=dict)

    @property
    def absent(self) -> tuple[int, ...]:
        return tuple(c for c in range(1, NUM_CLASSES) if not self.per_case.get(c))

    def mean(self, cid: int) -> float:
        vals = list(self.per_case.get(cid, {}).values())
        return float(np.mean(vals)) if vals else math.nan

    def means(self) -> dict[str, float]:
        """Class name -> mean dice; absent classes map to NaN rather than 0."""
        return {class_name(c): self.mean(c) for c in range(1, NUM_CLASSES)}

    def rows(self) -> list[dict]:
        rows = []
        for c in range(1, NUM_CLASSES):
            cases = self.per_case.get(c, {})
            rows.append({
                "class": class_name(c),
                "class_id": c,
                "mean_dice": "" if not cases else f"{self.mean(c):.6f}",
                "case_count": len(cases),
                "absent": not cases,
            })
        return rows

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["class", "class_id", "mean_dice", "case_count", "absent"])
            w.writeheader()
            w.writerows(self.rows())
        return path

    def table(self) -> str:
        lines = [f"{'class':<12}{'dice':>8}{'cases':>7}"]
        for r in self.rows():
            dice = "absent" if r["absent"] else r["mean_dice"][:6]
            lines.append(f"{r['class']:<12}{dice:>8}{r['case_count']:>7}")
        return "\n".join(lines)


def _group_by_case(test_set) -> dict[str, list]:
    cases: dict[str, list] = defaultdict(list)
    for s in test_set:
        cases[s.case_id].append(s)
    for v in cases.values():
        v.sort(key=lambda s: s.slice_index)
    return cases


def _evaluate(test_set, predict_masks: Callable, metadata: dict) -> DiceReport:
    test_set = list(test_set)
    if not test_set:
        raise ValueError("empty test set")
    per_case: dict[int, dict[str, float]] = defaultdict(dict)
    cases = _group_by_case(test_set)
    for case_id, samples in cases.items():
        truth = np.stack([s.labels.numpy() for s in samples])
        pred = np.stack([predict_masks(s) for s in samples])  # (S, C, H, W) bool
        for c in range(1, NUM_CLASSES):
            t = truth == c
            if t.any():
                per_case[c][case_id] = dice_score(pred[:, c], t)
    return DiceReport(dict(per_case), len(cases), metadata)


def label_map_to_masks(labels: np.ndarray) -> np.ndarray:
    return np.stack([labels == c for c in range(NUM_CLASSES)])


def union_masks(predictions, shape, score_threshold: float = DEFAULT_SCORE_THRESHOLD) -> np.ndarray:
    """``(NUM_CLASSES, H, W)`` per-class unions of detections scoring at least ``score_threshold``."""
    out = np.zeros((NUM_CLASSES, *shape), dtype=bool)
    for p in predictions:
        if p.score >= score_threshold:
            out[p.class_id] |= np.asarray(p.mask, dtype=bool)
    return out


def evaluate_semantic(model, test_set, metadata: dict | None = None) -> DiceReport:
    """``model`` maps a sample to an integer label map (callable or ``predict_labels``)."""
    fn = model.predict_labels if hasattr(model, "predict_labels") else model
    return _evaluate(test_set, lambda s: label_map_to_masks(np.asarray(fn(s))), metadata or {})


def evaluate_instance(model, test_set, score_threshold: float = DEFAULT_SCORE_THRESHOLD, metadata: dict | None = None) -> DiceReport:
    """``model`` maps a sample to a list of :class:`InstancePrediction` (callable or ``predict``)."""
    fn = model.predict if hasattr(model, "predict") else model
    meta = {"score_threshold": score_threshold, **(metadata or {})}

    def masks(s):
        preds = fn(s, score_threshold=min(score_threshold, 0.05)) if hasattr(model, "predict") else fn(s)
        return union_masks(preds, tuple(s.labels.shape), score_threshold)

    return _evaluate(test_set, masks, meta)


# ---------------------------------------------------------------- synthesis export


def to_uint8(x: torch.Tensor | np.ndarray) -> np.ndarray:
    """Map ``[-1, 1]`` to ``0..255``."""
    a = np.asarray(x, dtype=np.float64)
    return np.clip(np.rint((a + 1.0) * 127.5), 0, 255).astype(np.uint8)


def export_synthesis_panel(generator, ct_slices, out_dir) -> list[Path]:
    """Write ``CT | synthesized MR | cycle reconstruction`` panels plus ``cycle_error.csv``.

    ``generator`` is ``(G_S->T, G_T->S)`` or a single module used for both
    directions.  ``ct_slices`` holds samples (or ``(1, H, W)`` tensors) in
    ``[-1, 1]``.  An empty input writes nothing.
    """
    g_st, g_ts = generator if isinstance(generator, (tuple, list)) else (generator, generator)
    ct_slices = list(ct_slices)
    if not ct_slices:
        log.info("export_synthesis_panel: no input slices, nothing written")
        return []
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    written, rows = [], []
    for i, item in enumerate(ct_slices):
        x = item.image if hasattr(item, "image") else torch.as_tensor(item)
        with torch.no_grad():
            synth = g_st(x[None])
            rec = g_ts(synth)
        err = float((rec - x[None]).abs().mean())
        panel = np.concatenate([to_uint8(x[0]), to_uint8(synth[0, 0]), to_uint8(rec[0, 0])], axis=1)
        path = out_dir / f"panel_{i:04d}.png"
        try:
            Image.fromarray(panel, mode="L").save(path)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        written.append(path)
        rows.append({
            "index": i,
            "case_id": getattr(item, "case_id", ""),
            "slice_index": getattr(item, "slice_index", -1),
            "cycle_l1": f"{err:.8f}",
            "file": path.name,
        })
    csv_path = out_dir / "cycle_error.csv"
    try:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {csv_path}: {exc}") from exc
    written.append(csv_path)
    return written


__all__ = [
    "DEFAULT_SCORE_THRESHOLD",
    "DiceReport",
    "evaluate_instance",
    "evaluate_semantic",
    "export_synthesis_panel",
    "label_map_to_masks",
    "to_uint8",
    "union_masks",
]
