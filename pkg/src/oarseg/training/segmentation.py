"""Instance-segmentor training (CT-only or fused with synthesized MR) and the semantic baseline."""

from __future__ import annotations

import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from oarseg.losses import weighted_cross_entropy
from oarseg.networks.instance import anchor_coverage, build_instance_segmentor, fuse_inputs, input_channels
from oarseg.networks.spec import Fusion, NetworkKind, NetworkSpec
from oarseg.networks.unet import UNet
from oarseg.taxonomy import NUM_CLASSES, NUM_FOREGROUND
from oarseg.training.config import SegTrainConfig, SemanticConfig, config_to_dict
from oarseg.training.preprocess import SliceSample, augment
from oarseg.training.state import CsvLog, TrainingDiverged, TrainState, lr_schedule, param_digest
from oarseg.training.synthesis import class_weights_for

LOSS_TERMS = ("rpn_cls", "rpn_box", "rcnn_cls", "rcnn_box", "mask")


def instance_spec(config: SegTrainConfig) -> NetworkSpec:
    return NetworkSpec(
        NetworkKind.INSTANCE_SEG,
        in_channels=input_channels(config.fusion),
        base_channels=config.base_channels,
        num_classes=NUM_FOREGROUND,
        fusion=config.fusion,
        anchor_sizes=config.anchor_sizes,
        extra={
            "rpn_batch": config.rpn_batch,
            "roi_batch": config.roi_batch,
            "ratio": list(config.roi_ratio),
            "fg_iou": config.fg_iou,
        },
    )


class SynthesisInputs:
    """Produces network inputs for a fusion scheme from CT samples.

    The synthesized MR comes from a frozen generator, recomputed on every
    request unless ``cache`` is set.
    """

    def __init__(self, fusion: Fusion | str, generator: nn.Module | None = None, cache: bool = False):
        self.fusion = Fusion(fusion)
        if self.fusion != Fusion.NONE and generator is None:
            raise ValueError(f"{self.fusion.value} needs a synthesis generator")
        self.generator = generator
        if generator is not None:
            generator.eval()
            for p in generator.parameters():
                p.requires_grad_(False)
        self.cache = {} if cache else None

    def synth(self, sample: SliceSample) -> torch.Tensor:
        key = (sample.case_id, sample.slice_index)
        if self.cache is not None and key in self.cache:
            return self.cache[key]
        with torch.no_grad():
            out = self.generator(sample.image[None])[0]
        if self.cache is not None:
            self.cache[key] = out
        return out

    def __call__(self, sample: SliceSample) -> SliceSample:
        if self.fusion == Fusion.NONE:
            return sample
        image = fuse_inputs(sample.image[None], self.synth(sample)[None], self.fusion)[0]
        return replace(sample, image=image)


def train_segmentation(
    train_set: list[SliceSample],
    config: SegTrainConfig,
    generator: nn.Module | None = None,
    *,
    val_set: list[SliceSample] | None = None,
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
    resume_from: str | Path | None = None,
    stop_at: int | None = None,
    checkpoint_every: int = 0,
) -> TrainState:
    """SGD over shuffled slices with warmup + step decay and scale-jitter augmentation.

    ``generator`` is required for the fusion schemes and stays frozen.  Step
    ``k`` of epoch ``e`` draws its augmentation and ROI sampling seeds from
    ``(config.seed, e, k)``.
    """
    if not train_set:
        raise ValueError("empty training set")
    if config.fusion == Fusion.NONE:
        generator = None
    inputs = SynthesisInputs(config.fusion, generator, cache=config.cache_synthesis)
    gen_digest = param_digest(generator) if generator is not None else None

    boxes = torch.cat([s.boxes for s in train_set]) if train_set else torch.zeros(0, 4)
    cover = anchor_coverage(config.anchor_sizes, boxes)
    if len(boxes) and cover == 0.0:
        warnings.warn(f"anchor sizes {config.anchor_sizes} cover none of the ground-truth box sizes", stacklevel=2)

    out_dir = Path(out_dir) if out_dir is not None else None
    if state is None:
        torch.manual_seed(config.seed)
        spec = instance_spec(config)
        model = build_instance_segmentor(spec)
        opt = torch.optim.SGD(model.parameters(), lr=config.base_lr, momentum=config.momentum, weight_decay=config.weight_decay)
        state = TrainState({"model": model}, {"sgd": opt}, seed=config.seed, config=config_to_dict(config),
                           extra_meta={"network": spec.to_dict(), "anchor_coverage": cover})
    if resume_from is not None:
        state.load(resume_from)
    model, opt = state.modules["model"], state.optimizers["sgd"]
    n = len(train_set)
    total = config.epochs * n
    end = total if stop_at is None else min(stop_at, total)
    log = CsvLog(out_dir / "train_log.csv" if out_dir else None, state.step if resume_from is not None else None)

    while state.step < end:
        epoch, k = divmod(state.step, n)
        state.epoch = epoch
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        model.train()
        lr = lr_schedule(epoch + k / n, config)
        for g in opt.param_groups:
            g["lr"] = lr
        rng = np.random.default_rng([config.seed, epoch, k])
        sample = inputs(train_set[order[k]])
        sample = augment(sample, "segmentation", int(rng.integers(2**32)), scale_jitter=config.scale_jitter, flip=config.flip)
        losses = model.losses(
            sample.image[None], sample.boxes, sample.classes, sample.instance_masks(), seed=int(rng.integers(2**32))
        )
        loss = sum(losses[t] for t in LOSS_TERMS)
        if not torch.isfinite(loss):
            raise TrainingDiverged(state.step, "instance loss", state.checkpoints[-1] if state.checkpoints else None)
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = {"step": state.step, "epoch": epoch + k / n, "lr": lr, "total": float(loss.detach())}
        row.update({t: float(losses[t].detach()) for t in LOSS_TERMS})
        row.update({"num_pos": losses["num_pos"], "num_neg": losses["num_neg"]})
        state.log.append(row)
        log.write(row)
        state.step += 1
        if out_dir is not None and checkpoint_every and state.step % checkpoint_every == 0:
            state.save(out_dir / f"ckpt_{state.step:06d}")
        if state.step % n == 0 and val_set and config.validate_every_epoch:
            from oarseg.evaluation import evaluate_instance

            report = evaluate_instance(InstanceModel(model, inputs), val_set, config.score_threshold)
            state.epoch_log.append({"epoch": state.step // n, **{f"dice_{c}": v for c, v in report.means().items()}})

    if generator is not None and param_digest(generator) != gen_digest:
        raise RuntimeError("frozen generator parameters changed during segmentation training")
    state.epoch = state.step // n
    return state


class InstanceModel:
    """Inference wrapper: applies the fusion input pipeline then ``predict``."""

    def __init__(self, model, inputs: SynthesisInputs | None = None):
        self.model = model
        self.inputs = inputs or SynthesisInputs(Fusion.NONE)

    def predict(self, sample: SliceSample, score_threshold: float = 0.05):
        self.model.eval()
        return self.model.predict(self.inputs(sample).image[None], score_threshold=score_threshold)


# ---------------------------------------------------------------- semantic baseline


def train_semantic(train_set: list[SliceSample], config: SemanticConfig) -> TrainState:
    """UNet on CT with (median-frequency weighted or unweighted) cross-entropy; Adam, mini-batches of slices."""
    torch.manual_seed(config.seed)
    net = UNet(config.in_channels, NUM_CLASSES, config.base_channels, 3)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    weights = class_weights_for(train_set, config.class_weighting).as_tensor(NUM_CLASSES)
    state = TrainState({"model": net}, {"adam": opt}, seed=config.seed, config=config_to_dict(config))
    for step in range(config.steps):
        rng = np.random.default_rng([config.seed, step])
        idx = rng.integers(len(train_set), size=config.batch_size)
        picked = [augment(train_set[i], "synthesis", int(s), pad=0) for i, s in zip(idx, rng.integers(2**32, size=len(idx)))]
        x = torch.stack([p.image[: config.in_channels] for p in picked])
        y = torch.stack([p.labels for p in picked])
        loss = weighted_cross_entropy(net(x), y, weights)
        if not torch.isfinite(loss):
            raise TrainingDiverged(step, "semantic loss", None)
        opt.zero_grad()
        loss.backward()
        opt.step()
        state.log.append({"step": step, "loss": float(loss.detach())})
        state.step = step + 1
    return state


class SemanticModel:
    """Inference wrapper returning an integer label map per slice."""

    def __init__(self, net: nn.Module, in_channels: int = 1):
        self.net = net
        self.in_channels = in_channels

    def predict_labels(self, sample: SliceSample) -> np.ndarray:
        self.net.eval()
        with torch.no_grad():
            logits = self.net(sample.image[None, : self.in_channels])
        return logits.argmax(1)[0].numpy()


def load_instance_model(path) -> tuple[nn.Module, dict]:
    """Rebuild an instance segmentor from its checkpoint; returns ``(model, meta)``."""
    from oarseg.networks.checkpoint import load_checkpoint, load_tensors

    _, meta = load_tensors(path)
    model = build_instance_segmentor(NetworkSpec.from_dict(meta["network"]))
    load_checkpoint(path, {"model": model}, restore_rng=False)
    return model.eval(), meta
