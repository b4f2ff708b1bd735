"""Shared optimisation loop: AdamW, linear warmup + cosine decay, seeded batch order.

Every trainer in the package (teacher pretraining, distillation, baselines,
finetuning) drives its parameters through :func:`run_epochs`.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .backbone import TransformerModel
from .errors import ConfigError, FrozenModelError, NonFiniteGradientError
from .progress import epoch_bar

logger = logging.getLogger(__name__)

SEED_COMPONENTS = ("data", "init", "mask", "order", "decoder", "head", "drop")

StepFn = Callable[[np.ndarray, int, torch.optim.Optimizer, float], dict[str, float | None]]


def derive_seed(root: int, component: str) -> int:
    """Split one root seed into independent per-component seeds."""
    if component not in SEED_COMPONENTS:
        raise ValueError(f"unknown seed component {component!r}")
    seq = np.random.SeedSequence(int(root), spawn_key=(SEED_COMPONENTS.index(component),))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class OptimSettings:
    epochs: int = 50
    batch_size: int = 32
    base_lr: float = 8e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_fraction: float = 0.025
    lr_schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("base_lr and weight_decay must be non-negative")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.lr_schedule != "cosine":
            raise ConfigError(f"only the cosine schedule is supported, got {self.lr_schedule!r}")

    @property
    def peak_lr(self) -> float:
        # linear scaling rule: base_lr is quoted per 256 samples
        return self.base_lr * self.batch_size / 256.0


@dataclass(frozen=True)
class WarmupCosineSchedule:
    peak_lr: float
    total_steps: int
    warmup_fraction: float = 0.0

    def __call__(self, step: int) -> float:
        progress = min(max(step / self.total_steps, 0.0), 1.0)
        if progress < self.warmup_fraction:
            return self.peak_lr * progress / self.warmup_fraction
        tau = (progress - self.warmup_fraction) / (1.0 - self.warmup_fraction)
        return self.peak_lr * 0.5 * (1.0 + math.cos(math.pi * tau))


def build_optimizer(named_modules: Sequence[tuple[str, nn.Module]], settings: OptimSettings) -> torch.optim.AdamW:
    decay: list[nn.Parameter] = []
    no_decay: list[nn.Parameter] = []
    decay_names: list[str] = []
    no_decay_names: list[str] = []
    for prefix, module in named_modules:
        if isinstance(module, TransformerModel) and module.frozen:
            raise FrozenModelError(f"{prefix} is frozen and cannot be optimized")
        skip = module.no_weight_decay() if hasattr(module, "no_weight_decay") else set()
        for name, param in module.named_parameters():
            if not param.requires_grad:
                continue
            full = f"{prefix}.{name}"
            if param.ndim <= 1 or name in skip:
                no_decay.append(param)
                no_decay_names.append(full)
            else:
                decay.append(param)
                decay_names.append(full)
    groups = [
        {"params": decay, "weight_decay": settings.weight_decay, "names": decay_names},
        {"params": no_decay, "weight_decay": 0.0, "names": no_decay_names},
    ]
    return torch.optim.AdamW([g for g in groups if g["params"]], lr=0.0, betas=settings.betas, eps=1e-8)


def optimizer_step(optimizer: torch.optim.Optimizer, lr: float) -> None:
    """Set ``lr`` on every group, refuse non-finite gradients, then step."""
    for group in optimizer.param_groups:
        names = group.get("names") or [f"param{i}" for i in range(len(group["params"]))]
        for name, param in zip(names, group["params"]):
            if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
                raise NonFiniteGradientError(f"non-finite gradient in {name}")
        group["lr"] = lr
    optimizer.step()


def apply_update(optimizer: torch.optim.Optimizer, loss: torch.Tensor, lr: float) -> None:
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer_step(optimizer, lr)


@dataclass
class TrainLog:
    columns: tuple[str, ...] = ("loss",)
    rows: list[dict[str, float | None]] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)

    def epoch_losses(self, column: str | None = None) -> list[float]:
        key = column or self.columns[0]
        return [float(row[key]) for row in self.rows if row[key] is not None]

    def non_monotone_epochs(self, column: str | None = None, window: int = 1) -> int:
        """Number of times the loss rose, comparing means over consecutive ``window``-epoch blocks."""
        if window < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        losses = self.epoch_losses(column)
        blocks = [float(np.mean(losses[i : i + window])) for i in range(0, len(losses) - window + 1, window)]
        return sum(later > earlier for earlier, later in zip(blocks, blocks[1:]))

    def write_csv(self, path: str) -> None:
        header = ["epoch", *self.columns, "lr", "seconds"]
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in self.rows:
                writer.writerow(["" if row.get(k) is None else _fmt(row[k], k) for k in header])


def _fmt(value: float | None, key: str) -> str:
    if key == "epoch":
        return str(int(value))  # type: ignore[arg-type]
    return f"{float(value):.8g}"  # type: ignore[arg-type]


def _mean_or_none(values: list[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def run_epochs(
    named_modules: Sequence[tuple[str, nn.Module]],
    n_items: int,
    settings: OptimSettings,
    step_fn: StepFn,
    *,
    columns: Sequence[str] = ("loss",),
    desc: str = "train",
    after_step: Callable[[int], None] | None = None,
) -> TrainLog:
    """Run ``settings.epochs`` epochs of minibatch AdamW over ``n_items`` examples.

    ``step_fn(batch_indices, step, optimizer, lr)`` performs one update (usually
    through :func:`apply_update`) and returns the values to log for ``columns``;
    the first column is the loss being minimised.
    """
    if n_items < 1:
        raise ConfigError("cannot train on an empty corpus")
    optimizer = build_optimizer(named_modules, settings)
    steps_per_epoch = math.ceil(n_items / settings.batch_size)
    schedule = WarmupCosineSchedule(settings.peak_lr, settings.epochs * steps_per_epoch, settings.warmup_fraction)
    order_rng = np.random.default_rng(derive_seed(settings.seed, "order"))
    log = TrainLog(columns=tuple(columns))
    for _, module in named_modules:
        module.train()

    step = 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(settings.seed, "drop"))
        bar = epoch_bar(range(1, settings.epochs + 1), total=settings.epochs, desc=desc)
        for epoch in bar:
            started = time.perf_counter()
            perm = order_rng.permutation(n_items)
            parts: dict[str, list[float | None]] = {c: [] for c in columns}
            lr = 0.0
            for start in range(0, n_items, settings.batch_size):
                lr = schedule(step)
                logged = step_fn(perm[start : start + settings.batch_size], step, optimizer, lr)
                log.lr_trace.append(lr)
                for c in columns:
                    parts[c].append(logged.get(c))
                step += 1
                if after_step is not None:
                    after_step(step)
            row: dict[str, float | None] = {"epoch": float(epoch)}
            row.update({c: _mean_or_none(v) for c, v in parts.items()})
            row["lr"] = lr
            row["seconds"] = time.perf_counter() - started
            log.rows.append(row)
            bar.set_postfix(loss=f"{row[columns[0]]:.4f}")
            logger.info("%s epoch %d/%d %s=%.4f lr=%.3g", desc, epoch, settings.epochs, columns[0], row[columns[0]], lr)
    for _, module in named_modules:
        module.eval()
    return log
