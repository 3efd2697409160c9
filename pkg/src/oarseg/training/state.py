"""Trainer state, learning-rate schedule and determinism helpers."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from oarseg.networks.checkpoint import load_checkpoint, save_checkpoint
from oarseg.training.config import SegTrainConfig


def deterministic_mode(threads: int = 1) -> None:
    """Single-threaded, deterministic kernels; the reproducibility guarantees only hold under this mode."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def lr_schedule(epoch_fraction: float, config: SegTrainConfig) -> float:
    """Linear warmup from ``base_lr`` to ``peak_lr``, then step decay at each of ``decay_epochs``."""
    if epoch_fraction < 0:
        raise ValueError("epoch_fraction must be >= 0")
    if epoch_fraction < config.warmup_epochs:
        return config.base_lr + (config.peak_lr - config.base_lr) * epoch_fraction / config.warmup_epochs
    n_decays = sum(epoch_fraction >= d for d in config.decay_epochs)
    return config.peak_lr * config.decay_factor**n_decays


def param_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, term: str, last_checkpoint: Path | None):
        self.step, self.term, self.last_checkpoint = step, term, last_checkpoint
        ref = str(last_checkpoint) if last_checkpoint else "none written yet"
        super().__init__(f"non-finite loss at step {step} ({term}); last good checkpoint: {ref}")


@dataclass
class TrainState:
    """Everything needed to continue a run bit-identically."""

    modules: dict[str, nn.Module]
    optimizers: dict[str, torch.optim.Optimizer]
    step: int = 0
    epoch: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)
    epoch_log: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    extra_meta: dict = field(default_factory=dict)

    def save(self, path) -> Path:
        meta = {"step": self.step, "epoch": self.epoch, "seed": self.seed, "config": self.config, **self.extra_meta}
        path = save_checkpoint(path, self.modules, self.optimizers, meta)
        self.checkpoints.append(path)
        return path

    def load(self, path) -> dict:
        meta = load_checkpoint(path, self.modules, self.optimizers)
        self.step, self.epoch = int(meta["step"]), int(meta["epoch"])
        return meta

    def digests(self) -> dict[str, str]:
        return {k: param_digest(m) for k, m in self.modules.items()}


class CsvLog:
    """Append rows to a CSV, writing the header from the first row's keys.

    A fresh run replaces any existing file.  With ``resume_step`` the rows of
    earlier steps are kept and later ones dropped, so a resumed run's log
    reads as one uninterrupted run.
    """

    def __init__(self, path: Path | None, resume_step: int | None = None):
        self.path = path
        self._fields: list[str] | None = None
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        kept: list[dict] = []
        if resume_step is not None and path.exists():
            with open(path, newline="") as fh:
                kept = [r for r in csv.DictReader(fh) if int(r["step"]) < resume_step]
        if path.exists():
            path.unlink()
        for row in kept:
            self.write(row)

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        new = self._fields is None
        if new:
            self._fields = list(row)
        with open(self.path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self._fields, extrasaction="ignore")
            if new:
                w.writeheader()
            w.writerow(row)
