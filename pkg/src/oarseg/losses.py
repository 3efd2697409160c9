"""Objectives and metrics.

Tensors are channels-first: logits/probabilities ``(N, C, H, W)``, labels
``(N, H, W)`` integer, images ``(N, 1, H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from statistics import median
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

PROB_EPS = 1e-7


def dice_score(pred, truth, empty_value: float = 1.0) -> float:
    """``2|P & T| / (|P| + |T|)`` for binary masks.

    When both masks are empty the score is ``empty_value`` (perfect agreement
    by default); callers that report per-class scores flag those cases.
    """
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs truth {t.shape}")
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return float(empty_value)
    return 2.0 * int((p & t).sum()) / denom


@dataclass(frozen=True)
class ClassWeights:
    """Median-frequency balancing weights.

    ``frequencies`` are exact rationals; classes that never occur are listed
    in ``absent`` and carry no weight.
    """

    weights: dict[int, float]
    frequencies: dict[int, Fraction]
    median_frequency: Fraction
    absent: tuple[int, ...] = ()
    num_classes: int = 0

    def as_tensor(self, num_classes: int | None = None, dtype=torch.float32) -> torch.Tensor:
        n = num_classes or self.num_classes
        w = torch.full((n,), float("nan"), dtype=dtype)
        for c, v in self.weights.items():
            if c < n:
                w[c] = v
        return w

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassWeights":
        return cls({c: 1.0 for c in range(num_classes)}, {}, Fraction(1), (), num_classes)


def median_frequency_weights(label_maps: Iterable[np.ndarray], num_classes: int) -> ClassWeights:
    """``alpha_c = median_freq / freq(c)``.

    ``freq(c)`` is the pixel count of class ``c`` over the total pixel count of
    the images in which ``c`` appears.  With an even number of present
    classes the median is the mean of the two middle frequencies.
    """
    class_px = np.zeros(num_classes, dtype=np.int64)
    image_px = np.zeros(num_classes, dtype=np.int64)
    for lab in label_maps:
        lab = np.asarray(lab)
        counts = np.bincount(lab.ravel(), minlength=num_classes)
        if counts.size > num_classes:
            raise ValueError(f"label value {counts.size - 1} >= num_classes {num_classes}")
        class_px += counts
        image_px[counts > 0] += lab.size
    present = [c for c in range(num_classes) if class_px[c] > 0]
    if not present:
        raise ValueError("no class present in the label maps")
    freqs = {c: Fraction(int(class_px[c]), int(image_px[c])) for c in present}
    med = median(sorted(freqs.values()))
    med = Fraction(med)
    weights = {c: float(med / f) for c, f in freqs.items()}
    absent = tuple(c for c in range(num_classes) if c not in freqs)
    return ClassWeights(weights, freqs, med, absent, num_classes)


def _weight_vector(weights, num_classes: int, ref: torch.Tensor) -> torch.Tensor:
    if weights is None:
        return torch.ones(num_classes, dtype=ref.dtype, device=ref.device)
    if isinstance(weights, ClassWeights):
        return weights.as_tensor(num_classes, dtype=ref.dtype).to(ref.device)
    w = torch.as_tensor(weights, dtype=ref.dtype, device=ref.device)
    if w.shape != (num_classes,):
        raise ValueError(f"expected {num_classes} class weights, got shape {tuple(w.shape)}")
    return w


def _check_logits(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    if logits.dim() != labels.dim() + 1 or logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"label values must lie in [0, {logits.shape[1]})")


def _pixel_nll(logits, labels, weights):
    _check_logits(logits, labels)
    labels = labels.long()
    w = _weight_vector(weights, logits.shape[1], logits)
    wy = w[labels]
    if torch.isnan(wy).any():
        missing = sorted(set(labels[torch.isnan(wy)].unique().tolist()))
        raise ValueError(f"no class weight for present classes {missing}")
    logp = F.log_softmax(logits, dim=1)
    logp_y = logp.gather(1, labels.unsqueeze(1)).squeeze(1)
    return wy, logp_y


def weighted_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, weights=None) -> torch.Tensor:
    """Mean over pixels of ``alpha_y * -log softmax(logits)_y`` (plain mean, not weight-normalized)."""
    wy, logp_y = _pixel_nll(logits, labels, weights)
    return (wy * -logp_y).mean()


def focal_loss(logits: torch.Tensor, labels: torch.Tensor, gamma: float = 2.0, class_weights=None) -> torch.Tensor:
    """Mean of ``alpha_y * (1 - p_y)**gamma * -log p_y``; ``gamma = 0`` is exactly weighted CE."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    wy, logp_y = _pixel_nll(logits, labels, class_weights)
    if gamma == 0:
        return (wy * -logp_y).mean()
    modulating = (1.0 - logp_y.exp()).clamp_min(0.0) ** gamma
    return (wy * modulating * -logp_y).mean()


def generalized_dice_loss(probs: torch.Tensor, labels: torch.Tensor, atol: float = 1e-6) -> torch.Tensor:
    """``1 - GDS`` with per-class weights ``1 / (sum_i t_ci)**2``.

    Classes absent from ``labels`` get weight 0 and drop out of both sums.
    """
    if probs.dim() != 4:
        raise ValueError("probs must be (N, C, H, W)")
    sums = probs.sum(dim=1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=atol) or (probs < -atol).any():
        raise ValueError("probabilities must be non-negative and sum to 1 over classes")
    C = probs.shape[1]
    t = F.one_hot(labels.long(), C).permute(0, 3, 1, 2).to(probs.dtype)
    ref = t.sum(dim=(0, 2, 3))
    w = torch.where(ref > 0, 1.0 / ref.clamp_min(1.0) ** 2, torch.zeros_like(ref))
    intersect = (probs * t).sum(dim=(0, 2, 3))
    total = (probs + t).sum(dim=(0, 2, 3))
    return 1.0 - 2.0 * (w * intersect).sum() / (w * total).sum()


def _check_prob(x: torch.Tensor, name: str) -> torch.Tensor:
    if (x < 0).any() or (x > 1).any() or not torch.isfinite(x).all():
        raise ValueError(f"{name} must hold probabilities in [0, 1] for the log-form GAN loss")
    return x.clamp(PROB_EPS, 1.0 - PROB_EPS)


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor, form: str = "lsgan") -> torch.Tensor:
    if form == "log":
        r, f = _check_prob(d_real, "d_real"), _check_prob(d_fake, "d_fake")
        return -torch.log(r).mean() - torch.log(1.0 - f).mean()
    if form == "lsgan":
        return ((d_real - 1.0) ** 2).mean() + (d_fake**2).mean()
    raise ValueError(f"unknown GAN form {form!r}")


def generator_adversarial_loss(d_fake: torch.Tensor, form: str = "lsgan") -> torch.Tensor:
    """Non-saturating ``-log D(G(x))`` in log form; ``(D(G(x)) - 1)**2`` in least-squares form."""
    if form == "log":
        return -torch.log(_check_prob(d_fake, "d_fake")).mean()
    if form == "lsgan":
        return ((d_fake - 1.0) ** 2).mean()
    raise ValueError(f"unknown GAN form {form!r}")


def gan_losses(d_real: torch.Tensor, d_fake: torch.Tensor, form: str = "lsgan") -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(generator_loss, discriminator_loss)``."""
    return generator_adversarial_loss(d_fake, form), discriminator_loss(d_real, d_fake, form)


def content_consistency_loss(x_s, rec_s, x_t, rec_t, organ_mask) -> torch.Tensor:
    """Cycle L1 with the source-domain term up-weighted by ``1 + organ_mask``.

    Both terms are per-pixel means, so an organ pixel's error counts exactly
    twice as much as a non-organ pixel's.
    """
    m = torch.as_tensor(organ_mask, dtype=x_s.dtype, device=x_s.device)
    if m.shape != x_s.shape:
        raise ValueError(f"organ mask shape {tuple(m.shape)} differs from image shape {tuple(x_s.shape)}")
    if ((m != 0) & (m != 1)).any():
        raise ValueError("organ mask must be binary")
    if rec_s.shape != x_s.shape or rec_t.shape != x_t.shape:
        raise ValueError("reconstructions must match their inputs")
    return ((rec_s - x_s).abs() * (1.0 + m)).mean() + (rec_t - x_t).abs().mean()


def task_loss(synth_mr, x_s, labels, seg_subnetwork, weights=None) -> torch.Tensor:
    """Weighted CE of the segmentation subnetwork on channel-concatenated (CT, synthesized MR)."""
    if synth_mr.shape[0] != x_s.shape[0] or synth_mr.shape[2:] != x_s.shape[2:]:
        raise ValueError("synthesized MR and CT must share batch and spatial dims")
    logits = seg_subnetwork(torch.cat([x_s, synth_mr], dim=1))
    return weighted_cross_entropy(logits, labels, weights)


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


@dataclass
class LossBreakdown:
    gan_forward: torch.Tensor
    gan_backward: torch.Tensor
    content: torch.Tensor
    task: torch.Tensor
    total: torch.Tensor
    lambda_content: float
    lambda_task: float
    extra: dict = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        row = {
            "gan_forward": _scalar(self.gan_forward),
            "gan_backward": _scalar(self.gan_backward),
            "content": _scalar(self.content),
            "task": _scalar(self.task),
            "total": _scalar(self.total),
            "lambda_content": self.lambda_content,
            "lambda_task": self.lambda_task,
        }
        row.update({k: _scalar(v) for k, v in self.extra.items()})
        return row


def total_objective(gan_forward, gan_backward, content, task, lambda_content: float = 10.0, lambda_task: float = 1.0) -> LossBreakdown:
    """Both adversarial terms plus weighted content-consistency and task terms."""
    parts = {"gan_forward": gan_forward, "gan_backward": gan_backward, "content": content, "task": task}
    for name, v in parts.items():
        if not math.isfinite(_scalar(v)):
            raise FloatingPointError(f"non-finite {name} loss term: {_scalar(v)}")
    parts = {k: v if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.float64) for k, v in parts.items()}
    total = parts["gan_forward"] + parts["gan_backward"] + lambda_content * parts["content"] + lambda_task * parts["task"]
    return LossBreakdown(total=total, lambda_content=lambda_content, lambda_task=lambda_task, **parts)
