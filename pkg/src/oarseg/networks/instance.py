"""A compact two-stage instance segmentor (region proposals + per-ROI heads).

Single-scale backbone with four stages ``conv1..conv4`` (total stride 4),
a region proposal head over a small anchor set, and per-ROI classification,
class-specific box regression and a 28x28 mask head with one sigmoid channel
per foreground class.  Mask supervision only touches the channel of the ROI's
ground-truth class, so classes never compete inside the mask branch.

Boxes are ``(x0, y0, x1, y1)`` in pixel-corner coordinates (see
:mod:`oarseg.voxelio.types`).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms, nms, roi_align

from oarseg.networks.spec import Fusion, NetworkKind, NetworkSpec

MASK_SIZE = 28
BOX_POOL = 7
MASK_POOL = 14
RCNN_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
_LOG_MAX_RATIO = math.log(1000.0 / 16)


# ---------------------------------------------------------------- box utilities


def box_area(b: torch.Tensor) -> torch.Tensor:
    return (b[:, 2] - b[:, 0]).clamp_min(0) * (b[:, 3] - b[:, 1]).clamp_min(0)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU, ``(N, M)``."""
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp_min(0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp_min(1e-12), torch.zeros_like(inter))


def encode_boxes(ref: torch.Tensor, gt: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = (ref[:, 2] - ref[:, 0]).clamp_min(1e-3)
    rh = (ref[:, 3] - ref[:, 1]).clamp_min(1e-3)
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    gw = (gt[:, 2] - gt[:, 0]).clamp_min(1e-3)
    gh = (gt[:, 3] - gt[:, 1]).clamp_min(1e-3)
    gx, gy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    return torch.stack(
        [wx * (gx - rx) / rw, wy * (gy - ry) / rh, ww * torch.log(gw / rw), wh * torch.log(gh / rh)], dim=1
    )


def decode_boxes(ref: torch.Tensor, deltas: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = (ref[:, 2] - ref[:, 0]).clamp_min(1e-3)
    rh = (ref[:, 3] - ref[:, 1]).clamp_min(1e-3)
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=_LOG_MAX_RATIO)
    dh = (deltas[:, 3] / wh).clamp(max=_LOG_MAX_RATIO)
    cx, cy = rx + dx * rw, ry + dy * rh
    w, h = rw * torch.exp(dw), rh * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(b: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return torch.stack(
        [b[:, 0].clamp(0, width), b[:, 1].clamp(0, height), b[:, 2].clamp(0, width), b[:, 3].clamp(0, height)], dim=1
    )


def make_anchors(feat_h: int, feat_w: int, stride: int, sizes) -> torch.Tensor:
    """Square anchors centred on every feature cell; ``(feat_h * feat_w * len(sizes), 4)``."""
    ys = (torch.arange(feat_h, dtype=torch.float32) + 0.5) * stride
    xs = (torch.arange(feat_w, dtype=torch.float32) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    half = torch.tensor(sizes, dtype=torch.float32) / 2
    cx = cx[..., None].expand(-1, -1, len(sizes))
    cy = cy[..., None].expand(-1, -1, len(sizes))
    return torch.stack([cx - half, cy - half, cx + half, cy + half], dim=-1).reshape(-1, 4)


def anchor_coverage(anchor_sizes, gt_boxes: torch.Tensor) -> float:
    """Fraction of ground-truth boxes whose side (geometric mean) is within x2 of some anchor size."""
    if len(gt_boxes) == 0:
        return 1.0
    side = torch.sqrt(box_area(gt_boxes).clamp_min(1e-6))
    sizes = torch.tensor(anchor_sizes, dtype=side.dtype)
    ratio = torch.abs(torch.log(side[:, None] / sizes[None, :])).min(dim=1).values
    return float((ratio <= math.log(2.0)).float().mean())


# ------------------------------------------------------------------ sampling


def sample_labels(positive: np.ndarray, negative: np.ndarray, batch_size: int, ratio, rng) -> tuple[np.ndarray, np.ndarray]:
    """Pick up to ``batch_size * p/(p+n)`` positives, fill the rest with negatives."""
    pos_idx = np.flatnonzero(positive)
    neg_idx = np.flatnonzero(negative)
    p, n = ratio
    max_pos = int(round(batch_size * p / (p + n)))
    n_pos = min(len(pos_idx), max_pos)
    n_neg = min(len(neg_idx), batch_size - n_pos)
    pos = np.sort(rng.permutation(pos_idx)[:n_pos]) if n_pos else pos_idx[:0]
    neg = np.sort(rng.permutation(neg_idx)[:n_neg]) if n_neg else neg_idx[:0]
    return pos, neg


@dataclass
class RoiBatch:
    rois: torch.Tensor          # (R, 4)
    labels: torch.Tensor        # (R,) class id, 0 = background
    matched_gt: torch.Tensor    # (R,) ground-truth index, -1 for background
    positive: torch.Tensor      # (R,) bool

    def __len__(self) -> int:
        return len(self.rois)

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def sample_rois(
    proposals: torch.Tensor,
    gt_boxes: torch.Tensor,
    gt_labels: torch.Tensor,
    ratio=(1, 3),
    fg_iou: float = 0.5,
    batch_size: int = 256,
    seed=0,
) -> RoiBatch:
    """Label proposals by IoU with ground truth and draw a ``ratio``-balanced batch.

    Positives have IoU >= ``fg_iou`` with some ground-truth box; all others
    are negatives.  Positives are capped at ``batch_size * p / (p + n)`` and
    negatives fill the remainder, so scarce positives do not shrink the batch.
    """
    if len(proposals) == 0:
        warnings.warn("sample_rois received no proposals; returning an empty batch", stacklevel=2)
        empty = torch.zeros(0, dtype=torch.long)
        return RoiBatch(proposals.reshape(0, 4), empty, empty, empty.bool())
    if len(gt_boxes):
        iou = box_iou(proposals, gt_boxes)
        best, match = iou.max(dim=1)
    else:
        best = torch.zeros(len(proposals), dtype=proposals.dtype)
        match = torch.full((len(proposals),), -1, dtype=torch.long)
    positive = (best >= fg_iou).numpy()
    rng = np.random.default_rng(seed)
    pos, neg = sample_labels(positive, ~positive, batch_size, ratio, rng)
    keep = torch.from_numpy(np.concatenate([pos, neg])).long()
    is_pos = torch.zeros(len(keep), dtype=torch.bool)
    is_pos[: len(pos)] = True
    matched = torch.where(is_pos, match[keep], torch.full_like(keep, -1))
    labels = torch.zeros(len(keep), dtype=torch.long)
    if len(pos):
        labels[is_pos] = gt_labels.long()[matched[is_pos]]
    return RoiBatch(proposals[keep], labels, matched, is_pos)


# ------------------------------------------------------------------ mask loss


def mask_loss_for_rois(mask_logits: torch.Tensor, roi_classes: torch.Tensor, gt_instance_masks: torch.Tensor) -> torch.Tensor:
    """Per-pixel binary cross-entropy on the ground-truth class channel of each positive ROI.

    ``mask_logits`` is ``(R, K, 28, 28)`` with channel ``k`` for class id
    ``k + 1``; ``gt_instance_masks`` is ``(P, 28, 28)`` for the ``P`` positive
    ROIs in order.  Background ROIs contribute nothing and the other class
    channels receive exactly zero gradient.
    """
    positive = roi_classes > 0
    n_pos = int(positive.sum())
    if gt_instance_masks.shape[0] != n_pos:
        raise ValueError(
            f"{n_pos} positive ROIs but {gt_instance_masks.shape[0]} ground-truth masks; every positive ROI must be matched"
        )
    if n_pos == 0:
        return mask_logits.sum() * 0.0
    idx = torch.nonzero(positive).squeeze(1)
    channel = roi_classes[idx].long() - 1
    picked = mask_logits[idx, channel]
    return F.binary_cross_entropy_with_logits(picked, gt_instance_masks.to(picked.dtype))


def roi_mask_targets(gt_masks: torch.Tensor, rois: torch.Tensor, matched: torch.Tensor, size: int = MASK_SIZE) -> torch.Tensor:
    """Resample each matched full-slice mask into its ROI box at ``size x size``, thresholded at 0.5."""
    if len(rois) == 0:
        return torch.zeros(0, size, size)
    src = gt_masks[matched].float().unsqueeze(1)
    boxes = torch.cat([torch.arange(len(rois), dtype=rois.dtype)[:, None], rois], dim=1)
    out = roi_align(src, boxes, output_size=size, spatial_scale=1.0, sampling_ratio=2, aligned=True)
    return (out.squeeze(1) >= 0.5).float()


def paste_masks(mask_probs: torch.Tensor, boxes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Resample ``(D, 28, 28)`` box-relative probabilities onto the ``(D, H, W)`` slice grid."""
    if len(boxes) == 0:
        return torch.zeros(0, height, width)
    ys = torch.arange(height, dtype=torch.float32) + 0.5
    xs = torch.arange(width, dtype=torch.float32) + 0.5
    x0, y0, x1, y1 = (boxes[:, i, None] for i in range(4))
    u = 2 * (xs[None, :] - x0) / (x1 - x0).clamp_min(1e-3) - 1
    v = 2 * (ys[None, :] - y0) / (y1 - y0).clamp_min(1e-3) - 1
    grid = torch.stack(
        [u[:, None, :].expand(-1, height, -1), v[:, :, None].expand(-1, -1, width)], dim=-1
    )
    out = F.grid_sample(mask_probs.unsqueeze(1).float(), grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    inside = (u.abs() <= 1)[:, None, :] & (v.abs() <= 1)[:, :, None]
    return out.squeeze(1) * inside


# ------------------------------------------------------------------ modules


def _conv(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(min(8, cout), cout),
        nn.ReLU(),
    )


class Backbone(nn.Module):
    """Four stages, total stride 4."""

    stride = 4

    def __init__(self, in_channels=1, base=16):
        super().__init__()
        self.conv1 = _conv(in_channels, base)
        self.conv2 = _conv(base, 2 * base, stride=2)
        self.conv3 = _conv(2 * base, 4 * base, stride=2)
        self.conv4 = nn.Sequential(_conv(4 * base, 4 * base), _conv(4 * base, 4 * base))
        self.out_channels = 4 * base

    def forward(self, x):
        return self.conv4(self.conv3(self.conv2(self.conv1(x))))


class FeatureFusionBackbone(nn.Module):
    """Independent CT and MR branches through conv1..conv4, concatenated, then a 1x1 reduction."""

    stride = 4

    def __init__(self, base=16):
        super().__init__()
        self.ct_branch = Backbone(1, base)
        self.mr_branch = Backbone(1, base)
        k = self.ct_branch.out_channels
        self.reduce = nn.Conv2d(2 * k, k, 1)
        self.out_channels = k

    def fused_features(self, x):
        return torch.cat([self.ct_branch(x[:, :1]), self.mr_branch(x[:, 1:2])], dim=1)

    def forward(self, x):
        if x.shape[1] != 2:
            raise ValueError("feature fusion expects a 2-channel (CT, synthesized MR) input")
        return self.reduce(self.fused_features(x))


def fuse_inputs(ct: torch.Tensor, synth_mr: torch.Tensor | None, scheme: Fusion | str) -> torch.Tensor:
    """Network input for a fusion scheme.

    ``ct`` alone for the CT-only baseline; the channel concatenation
    ``(CT, synth MR)`` for both fusion schemes (the feature-fusion backbone
    splits the channels into its two branches).
    """
    scheme = Fusion(scheme)
    if scheme == Fusion.NONE:
        return ct
    if synth_mr is None:
        raise ValueError(f"{scheme.value} needs a synthesized MR input")
    if synth_mr.shape != ct.shape:
        raise ValueError(f"CT {tuple(ct.shape)} and synthesized MR {tuple(synth_mr.shape)} shapes differ")
    return torch.cat([ct, synth_mr], dim=1)


def input_channels(scheme: Fusion | str) -> int:
    return 1 if Fusion(scheme) == Fusion.NONE else 2


@dataclass
class InstancePrediction:
    class_id: int
    score: float
    box: tuple[float, float, float, float]
    mask_logits: torch.Tensor  # (28, 28) for this detection's class
    mask: np.ndarray            # (H, W) bool, pasted and thresholded


class InstanceSegmentor(nn.Module):
    def __init__(
        self,
        num_classes: int = 10,
        fusion: Fusion | str = Fusion.NONE,
        base: int = 16,
        anchor_sizes=(6.0, 12.0, 24.0),
        hidden: int = 256,
        rpn_batch: int = 256,
        roi_batch: int = 256,
        ratio=(1, 3),
        fg_iou: float = 0.5,
        rpn_bg_iou: float = 0.3,
        pre_nms: int = 600,
        post_nms_train: int = 300,
        post_nms_test: int = 100,
    ):
        super().__init__()
        self.fusion = Fusion(fusion)
        self.num_classes = num_classes
        if self.fusion == Fusion.FEATURE:
            self.backbone = FeatureFusionBackbone(base)
        else:
            self.backbone = Backbone(input_channels(self.fusion), base)
        k = self.backbone.out_channels
        self.stride = self.backbone.stride
        self.anchor_sizes = tuple(anchor_sizes)
        a = len(self.anchor_sizes)
        self.rpn_conv = nn.Conv2d(k, k, 3, padding=1)
        self.rpn_cls = nn.Conv2d(k, a, 1)
        self.rpn_reg = nn.Conv2d(k, 4 * a, 1)
        self.box_head = nn.Sequential(
            nn.Flatten(), nn.Linear(k * BOX_POOL * BOX_POOL, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU()
        )
        self.cls_score = nn.Linear(hidden, num_classes + 1)
        self.bbox_pred = nn.Linear(hidden, 4 * (num_classes + 1))
        self.mask_convs = nn.Sequential(*[_conv(k if i == 0 else 64, 64) for i in range(3)])
        self.mask_up = nn.Conv2d(64, 64, 3, padding=1)
        self.mask_logits = nn.Conv2d(64, num_classes, 1)
        self.rpn_batch, self.roi_batch, self.ratio = rpn_batch, roi_batch, tuple(ratio)
        self.fg_iou, self.rpn_bg_iou = fg_iou, rpn_bg_iou
        self.pre_nms, self.post_nms_train, self.post_nms_test = pre_nms, post_nms_train, post_nms_test
        nn.init.normal_(self.rpn_cls.weight, std=0.01)
        nn.init.normal_(self.rpn_reg.weight, std=0.01)
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        for m in (self.rpn_cls, self.rpn_reg, self.cls_score, self.bbox_pred):
            nn.init.zeros_(m.bias)

    # -- pieces

    def _roi_features(self, feats, rois, size):
        boxes = torch.cat([torch.zeros(len(rois), 1, dtype=rois.dtype), rois], dim=1)
        return roi_align(feats, boxes, output_size=size, spatial_scale=1.0 / self.stride, sampling_ratio=2, aligned=True)

    def mask_head(self, feats, rois):
        x = self.mask_convs(self._roi_features(feats, rois, MASK_POOL))
        x = F.relu(self.mask_up(F.interpolate(x, scale_factor=2, mode="nearest")))
        return self.mask_logits(x)

    def _rpn(self, feats):
        h = F.relu(self.rpn_conv(feats))
        n, _, fh, fw = h.shape
        a = len(self.anchor_sizes)
        obj = self.rpn_cls(h).permute(0, 2, 3, 1).reshape(n, -1)
        deltas = self.rpn_reg(h).view(n, a, 4, fh, fw).permute(0, 3, 4, 1, 2).reshape(n, -1, 4)
        anchors = make_anchors(fh, fw, self.stride, self.anchor_sizes)
        return obj[0], deltas[0], anchors

    def _proposals(self, obj, deltas, anchors, height, width, post_nms):
        with torch.no_grad():
            boxes = clip_boxes(decode_boxes(anchors, deltas), height, width)
            keep = (boxes[:, 2] - boxes[:, 0] >= 1) & (boxes[:, 3] - boxes[:, 1] >= 1)
            boxes, scores = boxes[keep], obj[keep]
            top = scores.topk(min(self.pre_nms, len(scores))).indices
            boxes, scores = boxes[top], scores[top]
            keep = nms(boxes, scores, 0.7)[:post_nms]
            return boxes[keep]

    # -- training

    def losses(self, image: torch.Tensor, gt_boxes: torch.Tensor, gt_labels: torch.Tensor, gt_masks: torch.Tensor, seed=0) -> dict:
        """Training losses for one image ``(1, C, H, W)``."""
        _, _, height, width = image.shape
        feats = self.backbone(image)
        obj, deltas, anchors = self._rpn(feats)
        rng = np.random.default_rng(seed)

        # region proposal targets
        if len(gt_boxes):
            iou = box_iou(anchors, gt_boxes)
            best, match = iou.max(dim=1)
            pos = best >= self.fg_iou
            per_gt = iou.max(dim=0).values
            pos |= ((iou == per_gt[None, :]) & (per_gt[None, :] > 0)).any(dim=1)
            neg = (best < self.rpn_bg_iou) & ~pos
        else:
            pos = torch.zeros(len(anchors), dtype=torch.bool)
            neg = ~pos
            match = torch.zeros(len(anchors), dtype=torch.long)
        p_idx, n_idx = sample_labels(pos.numpy(), neg.numpy(), self.rpn_batch, self.ratio, rng)
        sampled = torch.from_numpy(np.concatenate([p_idx, n_idx])).long()
        target = torch.zeros(len(sampled))
        target[: len(p_idx)] = 1
        rpn_cls = F.binary_cross_entropy_with_logits(obj[sampled], target)
        if len(p_idx):
            p_t = torch.from_numpy(p_idx).long()
            reg_t = encode_boxes(anchors[p_t], gt_boxes[match[p_t]])
            rpn_box = F.smooth_l1_loss(deltas[p_t], reg_t, beta=1 / 9, reduction="sum") / max(len(sampled), 1)
        else:
            rpn_box = deltas.sum() * 0.0

        # second stage
        proposals = self._proposals(obj, deltas, anchors, height, width, self.post_nms_train)
        if len(gt_boxes):
            proposals = torch.cat([proposals, gt_boxes.to(proposals.dtype)], dim=0)
        batch = sample_rois(proposals, gt_boxes, gt_labels, self.ratio, self.fg_iou, self.roi_batch, rng.integers(2**31))
        x = self.box_head(self._roi_features(feats, batch.rois, BOX_POOL))
        logits = self.cls_score(x)
        rcnn_cls = F.cross_entropy(logits, batch.labels)
        box_deltas = self.bbox_pred(x).view(-1, self.num_classes + 1, 4)
        pos_rois = batch.positive
        if batch.num_positive:
            idx = torch.nonzero(pos_rois).squeeze(1)
            pred = box_deltas[idx, batch.labels[idx]]
            tgt = encode_boxes(batch.rois[idx], gt_boxes[batch.matched_gt[idx]], RCNN_BOX_WEIGHTS)
            rcnn_box = F.smooth_l1_loss(pred, tgt, beta=1.0, reduction="sum") / len(batch)
            mask_logits = self.mask_head(feats, batch.rois[idx])
            targets = roi_mask_targets(gt_masks, batch.rois[idx], batch.matched_gt[idx])
            mask = mask_loss_for_rois(mask_logits, batch.labels[idx], targets)
        else:
            rcnn_box = box_deltas.sum() * 0.0
            mask = rcnn_box * 0.0
        return {
            "rpn_cls": rpn_cls,
            "rpn_box": rpn_box,
            "rcnn_cls": rcnn_cls,
            "rcnn_box": rcnn_box,
            "mask": mask,
            "num_pos": batch.num_positive,
            "num_neg": len(batch) - batch.num_positive,
        }

    # -- inference

    @torch.no_grad()
    def predict(self, image: torch.Tensor, score_threshold: float = 0.05, nms_iou: float = 0.5, max_detections: int = 30):
        _, _, height, width = image.shape
        feats = self.backbone(image)
        obj, deltas, anchors = self._rpn(feats)
        proposals = self._proposals(obj, deltas, anchors, height, width, self.post_nms_test)
        if len(proposals) == 0:
            return []
        x = self.box_head(self._roi_features(feats, proposals, BOX_POOL))
        probs = F.softmax(self.cls_score(x), dim=1)
        box_deltas = self.bbox_pred(x).view(-1, self.num_classes + 1, 4)
        c = self.num_classes
        cls = torch.arange(1, c + 1).repeat(len(proposals))
        ref = proposals.repeat_interleave(c, dim=0)
        boxes = decode_boxes(ref, box_deltas[:, 1:].reshape(-1, 4), RCNN_BOX_WEIGHTS)
        boxes = clip_boxes(boxes, height, width)
        scores = probs[:, 1:].reshape(-1)
        keep = (scores > score_threshold) & (boxes[:, 2] - boxes[:, 0] >= 1) & (boxes[:, 3] - boxes[:, 1] >= 1)
        boxes, scores, cls = boxes[keep], scores[keep], cls[keep]
        keep = batched_nms(boxes, scores, cls, nms_iou)[:max_detections]
        boxes, scores, cls = boxes[keep], scores[keep], cls[keep]
        if len(boxes) == 0:
            return []
        logits = self.mask_head(feats, boxes)[torch.arange(len(boxes)), cls - 1]
        pasted = paste_masks(torch.sigmoid(logits), boxes, height, width) >= 0.5
        return [
            InstancePrediction(int(cls[i]), float(scores[i]), tuple(float(v) for v in boxes[i]), logits[i], pasted[i].numpy())
            for i in range(len(boxes))
        ]


def build_instance_segmentor(spec: NetworkSpec) -> InstanceSegmentor:
    if spec.kind != NetworkKind.INSTANCE_SEG:
        raise ValueError(f"build_instance_segmentor needs an instance_seg spec, got {spec.kind.value}")
    if spec.in_channels != input_channels(spec.fusion):
        raise ValueError(f"{spec.fusion.value} expects {input_channels(spec.fusion)} input channels, spec has {spec.in_channels}")
    return InstanceSegmentor(
        num_classes=spec.num_classes,
        fusion=spec.fusion,
        base=spec.base_channels,
        anchor_sizes=spec.anchor_sizes,
        **spec.extra,
    )
