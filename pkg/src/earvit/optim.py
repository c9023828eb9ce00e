"""AdamW training loop with linear warmup and deterministic seeding.

Weight decay is decoupled: parameters shrink by (1 - lr*wd) before the
bias-corrected Adam update is applied. One seed fixes initialization,
shuffling, and negative-class sampling, so identical (seed, config, data)
reproduce the final checkpoint bit for bit.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingError
from .loss import MarginSpec, cosface_loss, full_subset, sample_classes
from .model import ModelParams, ViTConfig, forward_embeddings, init_params
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    weight_decay: float = 0.1
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if self.base_lr <= 0 or self.eps <= 0 or self.batch_size < 1:
            raise ConfigError("base_lr, eps, and batch_size must be positive")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be non-negative")
        if self.warmup_epochs > self.epochs:
            raise ConfigError(
                f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")


class AdamWState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0

    def buffers_for(self, name: str, shape) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.moments:
            self.moments[name] = (np.zeros(shape), np.zeros(shape))
        return self.moments[name]


def adamw_step(named_params: dict[str, Tensor], state: AdamWState, lr: float,
               cfg: TrainConfig) -> None:
    """One in-place update over all named parameters (missing grads = zero)."""
    if lr < 0:
        raise ConfigError(f"lr must be non-negative, got {lr}")
    beta1, beta2 = cfg.betas
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in named_params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient in parameter block {name!r}")
        m, v = state.buffers_for(name, p.data.shape)
        p.data *= 1.0 - lr * cfg.weight_decay
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def lr_schedule(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp over the warmup epochs, constant base_lr afterward."""
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    if warmup_steps > 0 and step < warmup_steps:
        return cfg.base_lr * (step + 1) / warmup_steps
    return cfg.base_lr


def clip_gradients(named_params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in named_params.values():
        if p.grad is not None:
            total += float((p.grad ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in named_params.values():
            if p.grad is not None:
                p.grad = p.grad * scale  # grad buffers may be borrowed views
    return norm


@dataclass
class TrainResult:
    params: ModelParams
    class_weights: Tensor
    history: list[dict] = field(default_factory=list)  # step, epoch, lr, loss


def write_train_log(path: str, history: list[dict]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "epoch", "lr", "loss"])
        writer.writeheader()
        for row in history:
            writer.writerow({"step": row["step"], "epoch": row["epoch"],
                             "lr": f"{row['lr']:.10g}", "loss": f"{row['loss']:.10g}"})
    os.replace(tmp, path)


def train(model_cfg: ViTConfig, train_cfg: TrainConfig, margin: MarginSpec,
          images: np.ndarray, labels: np.ndarray, num_classes: int,
          loss_seed: int | None = None,
          epoch_callback=None) -> TrainResult:
    """Shuffled mini-batch AdamW training of encoder + class prototypes.

    ``images`` is [n, C, W, W] already preprocessed; ``labels`` holds the
    per-side identity index of each image. ``epoch_callback(epoch, params,
    class_weights)``, when given, runs after every epoch (checkpoint cadence).
    """
    n = len(images)
    if n == 0:
        raise ConfigError("training dataset is empty")
    if num_classes < 2:
        raise ConfigError(
            "training needs at least 2 identities; impostor pairs are impossible otherwise")
    labels = np.asarray(labels, dtype=np.int64)

    init_ss, shuffle_ss, sampler_ss = np.random.SeedSequence(train_cfg.seed).spawn(3)
    params = init_params(model_cfg, np.random.default_rng(init_ss))
    proto_rng = np.random.default_rng(init_ss.spawn(1)[0])
    class_weights = Tensor(proto_rng.standard_normal((num_classes, model_cfg.embed_dim)) * 0.01,
                           requires_grad=True)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    sampler_rng = (np.random.default_rng(loss_seed) if loss_seed is not None
                   else np.random.default_rng(sampler_ss))

    named = dict(params.items())
    named["class_weights"] = class_weights
    state = AdamWState()
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    history: list[dict] = []
    step = 0
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            batch_idx = order[start:start + train_cfg.batch_size]
            batch_labels = labels[batch_idx]
            if margin.sample_rate < 1.0:
                subset = sample_classes(num_classes, batch_labels,
                                        margin.sample_rate, sampler_rng)
            else:
                subset = full_subset(num_classes)
            embeddings = forward_embeddings(Tensor(images[batch_idx]), params)
            loss = cosface_loss(embeddings, batch_labels, class_weights, margin, subset)

            for p in named.values():
                p.zero_grad()
            loss.backward()
            if train_cfg.clip_norm > 0:
                clip_gradients(named, train_cfg.clip_norm)
            lr = lr_schedule(step, steps_per_epoch, train_cfg)
            adamw_step(named, state, lr, train_cfg)

            history.append({"step": step, "epoch": epoch, "lr": lr,
                            "loss": loss.item()})
            step += 1
        if epoch_callback is not None:
            epoch_callback(epoch, params, class_weights)
    return TrainResult(params=params, class_weights=class_weights, history=history)
