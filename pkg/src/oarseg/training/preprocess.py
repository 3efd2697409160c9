"""Slice preprocessing and augmentation.

Images are ``(C, H, W)`` float32 tensors in ``[-1, 1]``.  Boxes follow the
pixel-corner convention, so a horizontal flip maps ``x`` to ``W - x`` and a
resize by ``s`` maps ``x`` to ``s * x`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from oarseg.training.config import PreprocessConfig
from oarseg.voxelio.types import AnnotationSet, Modality, VolumeScan


@dataclass
class SliceSample:
    image: torch.Tensor                     # (C, H, W)
    labels: torch.Tensor | None = None      # (H, W) int64
    boxes: torch.Tensor = field(default_factory=lambda: torch.zeros(0, 4))
    classes: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.long))
    masks: torch.Tensor | None = None       # (G, H, W) bool
    case_id: str = ""
    slice_index: int = -1

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.image.shape[-2:])

    def instance_masks(self) -> torch.Tensor:
        if self.masks is None:
            return torch.zeros(0, *self.size, dtype=torch.bool)
        return self.masks


def _center_crop(a: torch.Tensor, crop: int) -> torch.Tensor:
    h, w = a.shape[-2:]
    if h < crop or w < crop:
        raise ValueError(f"slice {h}x{w} is smaller than the {crop}x{crop} crop")
    top, left = (h - crop) // 2, (w - crop) // 2
    return a[..., top : top + crop, left : left + crop]


def _resize(a: torch.Tensor, size: tuple[int, int], nearest: bool) -> torch.Tensor:
    if tuple(a.shape[-2:]) == tuple(size):
        return a
    x = a[None] if a.dim() == 3 else a[None, None]
    if nearest:
        out = F.interpolate(x.float(), size=size, mode="nearest-exact")
    else:
        out = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    out = out[0] if a.dim() == 3 else out[0, 0]
    return out.to(a.dtype) if nearest else out


def normalize(x: torch.Tensor | np.ndarray, modality: Modality | str, config: PreprocessConfig) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(x, dtype=np.float32))
    if Modality(modality) == Modality.CT:
        level, width = config.ct_window
        lo, hi = level - width / 2, level + width / 2
    else:
        lo, hi = config.mr_range
    return ((x - lo) / (hi - lo) * 2 - 1).clamp(-1.0, 1.0)


def preprocess_slice(raw: np.ndarray, modality: Modality | str = Modality.CT, config: PreprocessConfig | None = None) -> torch.Tensor:
    """Center crop, resize, normalize; returns ``(1, size, size)``."""
    config = config or PreprocessConfig()
    raw = torch.as_tensor(np.asarray(raw, dtype=np.float32))
    if raw.dim() != 2:
        raise ValueError(f"expected a 2D slice, got shape {tuple(raw.shape)}")
    x = normalize(_center_crop(raw, config.crop), modality, config)
    return _resize(x[None], (config.size, config.size), nearest=False)


def _crop_resize_boxes(boxes: torch.Tensor, shape, config: PreprocessConfig) -> torch.Tensor:
    h, w = shape
    top, left = (h - config.crop) // 2, (w - config.crop) // 2
    s = config.size / config.crop
    out = (boxes - torch.tensor([left, top, left, top], dtype=boxes.dtype)) * s
    return torch.stack(
        [out[:, 0].clamp(0, config.size), out[:, 1].clamp(0, config.size), out[:, 2].clamp(0, config.size), out[:, 3].clamp(0, config.size)],
        dim=1,
    )


def preprocess_annotated_slice(
    volume: VolumeScan, annotations: AnnotationSet | None, z: int, config: PreprocessConfig
) -> SliceSample:
    """Preprocess one slice with its label map and instances, all on the same output grid."""
    image = preprocess_slice(volume.voxels[z], volume.modality, config)
    sample = SliceSample(image, case_id=volume.case_id, slice_index=z)
    if annotations is None:
        return sample
    size = (config.size, config.size)
    labels = torch.from_numpy(annotations.label_map(z))
    sample.labels = _resize(_center_crop(labels, config.crop), size, nearest=True)
    recs = annotations.instances_on(z)
    if recs:
        masks = torch.from_numpy(np.stack([r.mask for r in recs]))
        masks = _resize(_center_crop(masks, config.crop).to(torch.uint8), size, nearest=True).bool()
        boxes = _crop_resize_boxes(torch.tensor([r.bbox for r in recs], dtype=torch.float32), volume.grid, config)
        keep = masks.flatten(1).any(1) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        sample.masks = masks[keep]
        sample.boxes = boxes[keep]
        sample.classes = torch.tensor([r.class_id for r in recs], dtype=torch.long)[keep]
    else:
        sample.masks = torch.zeros(0, *size, dtype=torch.bool)
    return sample


# ---------------------------------------------------------------- augmentation


def hflip(sample: SliceSample) -> SliceSample:
    w = sample.image.shape[-1]
    boxes = sample.boxes.clone()
    if len(boxes):
        boxes[:, 0], boxes[:, 2] = w - sample.boxes[:, 2], w - sample.boxes[:, 0]
    return replace(
        sample,
        image=sample.image.flip(-1),
        labels=None if sample.labels is None else sample.labels.flip(-1),
        masks=None if sample.masks is None else sample.masks.flip(-1),
        boxes=boxes,
    )


def rescale(sample: SliceSample, shorter_edge: int) -> SliceSample:
    """Resize so the shorter edge equals ``shorter_edge``; boxes scale by the realized per-axis factors."""
    h, w = sample.size
    s = shorter_edge / min(h, w)
    nh, nw = int(round(h * s)), int(round(w * s))
    scale = torch.tensor([nw / w, nh / h, nw / w, nh / h], dtype=sample.boxes.dtype)
    return replace(
        sample,
        image=_resize(sample.image, (nh, nw), nearest=False),
        labels=None if sample.labels is None else _resize(sample.labels, (nh, nw), nearest=True),
        masks=None if sample.masks is None else _resize(sample.masks.to(torch.uint8), (nh, nw), nearest=True).bool(),
        boxes=sample.boxes * scale,
    )


def random_crop(sample: SliceSample, pad: int, top: int, left: int) -> SliceSample:
    """Reflect-pad by ``pad`` then crop back to the original size at offset ``(top, left)``."""
    if pad == 0:
        return sample
    h, w = sample.size
    img = F.pad(sample.image[None], (pad, pad, pad, pad), mode="reflect")[0][..., top : top + h, left : left + w]

    def shift(a):
        if a is None:
            return None
        a = F.pad(a, (pad, pad, pad, pad))
        return a[..., top : top + h, left : left + w]

    dx, dy = pad - left, pad - top
    boxes = sample.boxes + torch.tensor([dx, dy, dx, dy], dtype=sample.boxes.dtype)
    boxes = torch.stack([boxes[:, 0].clamp(0, w), boxes[:, 1].clamp(0, h), boxes[:, 2].clamp(0, w), boxes[:, 3].clamp(0, h)], 1)
    return replace(sample, image=img, labels=shift(sample.labels), masks=shift(sample.masks), boxes=boxes)


def augment(sample: SliceSample, mode: str, seed, *, pad: int = 4, scale_jitter=(), flip: bool = True) -> SliceSample:
    """Random flip plus a random pad-and-crop (synthesis) or shorter-edge scale jitter (segmentation).

    Every random choice comes from ``np.random.default_rng(seed)``.
    """
    rng = np.random.default_rng(seed)
    do_flip = flip and bool(rng.integers(2))
    if mode == "synthesis":
        top, left = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2)) if pad else (0, 0)
        out = random_crop(sample, pad, top, left)
    elif mode == "segmentation":
        out = sample
        if scale_jitter:
            out = rescale(out, int(rng.choice(np.asarray(scale_jitter))))
    else:
        raise ValueError(f"unknown augmentation mode {mode!r}")
    return hflip(out) if do_flip else out
