"""Alternating optimization of the organ-mask-regularized cycle GAN with a segmentation task loss.

Each step updates, in order: the MR discriminator ``D_T``, the CT
discriminator ``D_S``, both generators jointly, then the segmentation
subnetwork.  The task loss reaches the generators only through
``G_S->T``'s synthesized MR, so ``G_T->S`` never sees its gradient.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from oarseg.losses import (
    ClassWeights,
    content_consistency_loss,
    discriminator_loss,
    generator_adversarial_loss,
    median_frequency_weights,
    task_loss,
    total_objective,
    weighted_cross_entropy,
)
from oarseg.networks.unet import build_discriminator, build_generator, build_seg_subnetwork
from oarseg.taxonomy import NUM_CLASSES
from oarseg.training.config import SynthesisConfig, config_to_dict
from oarseg.training.preprocess import SliceSample, augment
from oarseg.training.state import CsvLog, TrainingDiverged, TrainState

MODULES = ("G_st", "G_ts", "D_t", "D_s", "subnet")


def build_synthesis_state(config: SynthesisConfig) -> TrainState:
    torch.manual_seed(config.seed)
    modules = {
        "G_st": build_generator(config.generator),
        "G_ts": build_generator(config.generator),
        "D_t": build_discriminator(config.discriminator),
        "D_s": build_discriminator(config.discriminator),
        "subnet": build_seg_subnetwork(config.seg_subnet),
    }
    adam = lambda params: torch.optim.Adam(params, lr=config.lr, betas=tuple(config.betas))  # noqa: E731
    optimizers = {
        "D_t": adam(modules["D_t"].parameters()),
        "D_s": adam(modules["D_s"].parameters()),
        "generators": adam(list(modules["G_st"].parameters()) + list(modules["G_ts"].parameters())),
        "subnet": adam(modules["subnet"].parameters()),
    }
    return TrainState(modules, optimizers, seed=config.seed, config=config_to_dict(config),
                      extra_meta={"networks": {"generator": config.generator.to_dict()}})


def class_weights_for(samples: list[SliceSample], mode: str) -> ClassWeights:
    if mode == "uniform":
        return ClassWeights.uniform(NUM_CLASSES)
    return median_frequency_weights((s.labels.numpy() for s in samples), NUM_CLASSES)


def _batch(samples, idx, seeds, pad):
    picked = [augment(samples[i], "synthesis", int(s), pad=pad) for i, s in zip(idx, seeds)]
    images = torch.stack([p.image for p in picked])
    labels = torch.stack([p.labels for p in picked]) if picked[0].labels is not None else None
    return images, labels


def _finite(step, name, value, state):
    if not math.isfinite(float(value.detach() if torch.is_tensor(value) else value)):
        raise TrainingDiverged(step, name, state.checkpoints[-1] if state.checkpoints else None)


def train_synthesis(
    ct_set: list[SliceSample],
    mr_set: list[SliceSample],
    config: SynthesisConfig,
    out_dir: str | Path | None = None,
    *,
    state: TrainState | None = None,
    resume_from: str | Path | None = None,
    stop_at: int | None = None,
    hook: Callable[[int, str, TrainState], None] | None = None,
) -> TrainState:
    """Train for ``config.steps`` steps (or until ``stop_at``).

    ``ct_set`` carries labels (used for ``M_organ``, the task loss and the
    subnetwork); ``mr_set`` is an unpaired pool without labels.  All per-step
    randomness derives from ``(config.seed, step)``, so resuming from a
    checkpoint continues exactly where an uninterrupted run would be.
    ``hook(step, phase, state)`` runs after each optimizer step, with
    ``phase`` one of ``D_t``, ``D_s``, ``generators``, ``subnet``.
    """
    hook = hook or (lambda *_: None)
    if not ct_set or not mr_set:
        raise ValueError("synthesis training needs non-empty CT and MR sets")
    if any(s.labels is None for s in ct_set):
        raise ValueError("every CT sample needs a label map")
    if {s.case_id for s in ct_set} & {s.case_id for s in mr_set}:
        raise ValueError("CT and MR pools share cases; unpaired training needs disjoint pools")
    out_dir = Path(out_dir) if out_dir is not None else None
    state = state or build_synthesis_state(config)
    if resume_from is not None:
        state.load(resume_from)
    m = state.modules
    opt = state.optimizers
    weights = class_weights_for(ct_set, config.class_weighting)
    wvec = weights.as_tensor(NUM_CLASSES)
    form = config.gan_form
    log = CsvLog(out_dir / "train_log.csv" if out_dir else None, state.step if resume_from is not None else None)
    end = config.steps if stop_at is None else min(stop_at, config.steps)

    while state.step < end:
        step = state.step
        rng = np.random.default_rng([config.seed, step])
        b = config.batch_size
        ct_idx = rng.integers(len(ct_set), size=b)
        mr_idx = rng.integers(len(mr_set), size=b)
        seeds = rng.integers(2**32, size=2 * b)
        x_s, labels = _batch(ct_set, ct_idx, seeds[:b], config.crop_pad)
        x_t, _ = _batch(mr_set, mr_idx, seeds[b:], config.crop_pad)
        organ = (labels > 0).to(x_s.dtype).unsqueeze(1)
        row = {"step": step}

        if step < config.pretrain_subnet_steps:
            with torch.no_grad():
                synth = m["G_st"](x_s)
            opt["subnet"].zero_grad()
            loss = weighted_cross_entropy(m["subnet"](torch.cat([x_s, synth], 1)), labels, wvec)
            _finite(step, "subnet", loss, state)
            loss.backward()
            opt["subnet"].step()
            hook(step, "subnet", state)
            row.update({"phase": "pretrain", "subnet": float(loss.detach())})
        else:
            row["phase"] = "joint"
            # (1) discriminators on detached fakes
            with torch.no_grad():
                fake_t0 = m["G_st"](x_s)
                fake_s0 = m["G_ts"](x_t)
            for name, real, fake in (("D_t", x_t, fake_t0), ("D_s", x_s, fake_s0)):
                opt[name].zero_grad()
                d_loss = discriminator_loss(m[name](real), m[name](fake), form)
                _finite(step, name, d_loss, state)
                d_loss.backward()
                opt[name].step()
                hook(step, name, state)
                row[name] = float(d_loss.detach())

            # (2) both generators jointly
            opt["generators"].zero_grad()
            fake_t = m["G_st"](x_s)
            rec_s = m["G_ts"](fake_t)
            fake_s = m["G_ts"](x_t)
            rec_t = m["G_st"](fake_s)
            _check_outputs(step, state, fake_t, rec_s, fake_s, rec_t)
            try:
                parts = total_objective(
                    generator_adversarial_loss(m["D_t"](fake_t), form),
                    generator_adversarial_loss(m["D_s"](fake_s), form),
                    content_consistency_loss(x_s, rec_s, x_t, rec_t, organ),
                    task_loss(fake_t, x_s, labels, m["subnet"], wvec),
                    config.lambda_content,
                    config.lambda_task,
                )
            except FloatingPointError as exc:
                raise TrainingDiverged(step, str(exc), state.checkpoints[-1] if state.checkpoints else None) from exc
            parts.total.backward()
            opt["generators"].step()
            hook(step, "generators", state)
            row.update(parts.as_row())

            # (3) segmentation subnetwork on the (fixed) synthesized MR
            opt["subnet"].zero_grad()
            sub = weighted_cross_entropy(m["subnet"](torch.cat([x_s, fake_t.detach()], 1)), labels, wvec)
            _finite(step, "subnet", sub, state)
            sub.backward()
            opt["subnet"].step()
            hook(step, "subnet", state)
            row["subnet"] = float(sub.detach())

        state.log.append(row)
        log.write(row)
        state.step += 1
        if out_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            state.save(out_dir / f"ckpt_{state.step:06d}")
    return state


def _check_outputs(step, state, *tensors) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise TrainingDiverged(step, "generator output", state.checkpoints[-1] if state.checkpoints else None)


def moving_average(values, window: int) -> np.ndarray:
    """Trailing mean over up to ``window`` values (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def load_synthesis_generators(path) -> tuple[torch.nn.Module, torch.nn.Module]:
    """``(G_S->T, G_T->S)`` from a synthesis checkpoint, in eval mode."""
    from oarseg.networks.checkpoint import load_checkpoint, load_tensors
    from oarseg.networks.spec import NetworkSpec

    _, meta = load_tensors(path)
    spec = NetworkSpec.from_dict(meta["networks"]["generator"])
    g_st, g_ts = build_generator(spec), build_generator(spec)
    load_checkpoint(path, {"G_st": g_st, "G_ts": g_ts}, restore_rng=False)
    return g_st.eval(), g_ts.eval()
