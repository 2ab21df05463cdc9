"""Adam with decoupled weight decay, input augmentations, and the training loop."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import InstanceBag
from .errors import ConfigError, TrainingDiverged
from .model import MIGenModel, read_tensor_file, write_tensor_file
from .vocab import Vocab, encode

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 1000
    batch_size: int = 1
    mask_ratio: float = 0.0
    shuffle_instances: bool = False
    seed: int = 0
    checkpoint_interval: int = 0
    log_interval: int = 100

    def validate(self) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.max_steps < 0 or self.batch_size < 1:
            raise ConfigError("max_steps must be >= 0 and batch_size >= 1")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)

    def save(self, path) -> None:
        arrays = {f"m.{k}": a for k, a in self.m.items()}
        arrays.update({f"v.{k}": a for k, a in self.v.items()})
        write_tensor_file(path, {"kind": "adam"}, {"state": {"step": self.step}}, arrays)

    @classmethod
    def load(cls, path) -> "AdamState":
        header, sections, arrays = read_tensor_file(path)
        m = {k[2:]: a for k, a in arrays.items() if k.startswith("m.")}
        v = {k[2:]: a for k, a in arrays.items() if k.startswith("v.")}
        return cls(m, v, int(sections["state"]["step"]))


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """One in-place Adam update; weight decay shrinks parameters before the step."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise TrainingDiverged(f"non-finite gradient in parameter {name} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    t = state.step
    lr, b1, b2 = cfg.learning_rate, cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name].data
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p -= lr * cfg.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def apply_mask_augment(bag: InstanceBag, ratio: float, rng: np.random.Generator) -> InstanceBag:
    """Drop floor(ratio * M) instances at random, keeping survivors in order."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1), got {ratio}")
    M = bag.n_instances
    n_drop = min(int(math.floor(ratio * M)), M - 1)
    if n_drop <= 0:
        return bag
    drop = rng.choice(M, size=n_drop, replace=False)
    keep = np.setdiff1d(np.arange(M), drop)
    return bag.subset(keep)


def apply_shuffle_augment(bag: InstanceBag, rng: np.random.Generator) -> InstanceBag:
    """Randomly permute instance order; coordinates travel with their rows."""
    if bag.n_instances == 1:
        return bag
    return bag.subset(rng.permutation(bag.n_instances))


@dataclass
class TrainResult:
    model: MIGenModel
    state: AdamState
    losses: list


def train(model: MIGenModel, bags: list, vocab: Vocab, cfg: TrainConfig,
          state: Optional[AdamState] = None,
          loss_fn: Optional[Callable] = None,
          on_checkpoint: Optional[Callable[[MIGenModel, AdamState, list], None]] = None,
          start_step: int = 0,
          trainable: Optional[set] = None) -> TrainResult:
    """Teacher-forced training with per-bag gradient accumulation.

    Each optimizer step consumes ``batch_size`` bags drawn from a seeded
    epoch-wise shuffle, applies the configured augmentations, averages the
    per-bag gradients and takes one Adam step. ``loss_fn(model, bag, rng)``
    replaces the report loss (the classification fine-tune uses this);
    ``trainable`` restricts updates to the named parameters.
    """
    cfg.validate()
    if not bags:
        raise ConfigError("no training bags")
    state = state or AdamState.zeros_like(model.params)
    rng = np.random.default_rng([cfg.seed, start_step])
    targets = {b.bag_id: encode(b.report, vocab) for b in bags}
    drop_rng = np.random.default_rng([cfg.seed, start_step, 1]) if model.config.dropout_rate > 0 else None

    def default_loss(m, bag, _rng):
        return m.report_loss(bag.embeddings, targets[bag.bag_id], drop_rng)
    loss_fn = loss_fn or default_loss

    order: list[int] = []
    losses = []
    params = model.params
    for step in range(start_step + 1, start_step + cfg.max_steps + 1):
        total = {k: np.zeros_like(p.data) for k, p in params.items()}
        step_loss = 0.0
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(bags)))
            bag = bags[order.pop()]
            if cfg.shuffle_instances:
                bag = apply_shuffle_augment(bag, rng)
            if cfg.mask_ratio > 0:
                bag = apply_mask_augment(bag, cfg.mask_ratio, rng)
            for p in params.values():
                p.grad = None
            loss = loss_fn(model, bag, rng)
            loss.backward(params=params.values())
            for k, p in params.items():
                total[k] += p.grad
            step_loss += loss.item()
        step_loss /= cfg.batch_size
        if not math.isfinite(step_loss):
            raise TrainingDiverged(f"loss became {step_loss} at step {step}")
        for k in list(total):
            if trainable is not None and k not in trainable:
                del total[k]
            else:
                total[k] /= cfg.batch_size
        adam_step(params, total, state, cfg)
        losses.append((step, step_loss))
        if cfg.log_interval and step % cfg.log_interval == 0:
            logger.info("step %d loss %.6f", step, step_loss)
        if on_checkpoint is not None and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
            on_checkpoint(model, state, losses)
    for p in params.values():
        p.grad = None
    return TrainResult(model, state, losses)


def write_loss_trace(losses, path) -> None:
    Path(path).write_text("step,loss\n" + "".join(f"{s},{l!r}\n" for s, l in losses), encoding="utf-8")
