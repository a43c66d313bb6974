"""Adam training loops: teacher pretraining and dual-channel student distillation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import distill as kd
from .distill import DistillConfig, LossBreakdown
from .taskgen import DatasetError, Sample
from .tensor import Tensor, backward
from .tinylm import TEACHER, ModelParams, embed_text, forward_batch

PRESETS = {
    # lr/epochs as reported for the 7B setting
    "paper-default": {"lr": 5e-6, "epochs": 2},
    # enough signal to move a toy model
    "desk-scale": {"lr": 3e-4, "epochs": 5},
}


class TrainingError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | Mapping[str, float], betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place.

    ``lr`` is either one rate for every parameter or a per-name mapping.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name!r} at step {state.t + 1}")
        if params[name].shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter {params[name].shape}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        rate = lr[name] if isinstance(lr, Mapping) else lr
        params[name] -= rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


@dataclass
class ChannelSpec:
    cfg: DistillConfig
    samples: list[Sample]
    weight: float = 1.0

    @property
    def name(self) -> str:
        return self.cfg.channel


@dataclass
class TrainConfig:
    lr: float = 3e-4
    epochs: int = 5
    batch_size: int = 8
    seed: int = 0
    mix: list[ChannelSpec] = field(default_factory=list)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_grad_norm: float = 1.0
    # the adapter starts from noise while the backbone is already trained
    adapter_lr_scale: float = 30.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        for ch in self.mix:
            if ch.weight <= 0:
                raise ValueError(f"channel weight must be > 0, got {ch.weight}")

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "TrainConfig":
        try:
            base = dict(PRESETS[preset])
        except KeyError:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        lines += [json.dumps({"epoch_eval": s}, sort_keys=True) for s in self.snapshots]
        return "".join(line + "\n" for line in lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()


def _batches(samples: Sequence[Sample], batch_size: int,
             rng: np.random.Generator) -> list[list[Sample]]:
    """Shuffle, then batch within groups of equal question length."""
    order = [samples[int(i)] for i in rng.permutation(len(samples))]
    groups: dict[int, list[Sample]] = {}
    for s in order:
        groups.setdefault(len(s.q), []).append(s)
    out = []
    for k in sorted(groups):
        g = groups[k]
        out += [g[i:i + batch_size] for i in range(0, len(g), batch_size)]
    return out


def interleave(counts: Sequence[int], weights: Sequence[float]) -> list[int]:
    """Smooth weighted round-robin over channels until every channel is drained."""
    left = list(counts)
    current = [0.0] * len(counts)
    order = []
    while any(left):
        active = [i for i, n in enumerate(left) if n]
        total = sum(weights[i] for i in active)
        for i in active:
            current[i] += weights[i]
        pick = max(active, key=lambda i: (current[i], -i))
        current[pick] -= total
        left[pick] -= 1
        order.append(pick)
    return order


def _validate(mix: Sequence[ChannelSpec]) -> None:
    for ch in mix:
        for s in ch.samples:
            if ch.cfg.target_source == kd.TEACHER_LABELS and s.yhat is None:
                raise DatasetError(f"{ch.name} channel: sample {s.id} lacks a teacher label "
                                    f"(yhat), required by the teacher-target variant")
            if ch.cfg.channel == kd.S2T and s.frames is None:
                raise DatasetError(f"{ch.name} channel: sample {s.id} has no speech frames")


def _teacher_cache(teacher: ModelParams, ch: ChannelSpec, chunk: int = 64) -> dict[int, np.ndarray]:
    if not ch.cfg.use_kl:
        return {}
    cache = {}
    groups: dict[int, list[Sample]] = {}
    for s in ch.samples:
        groups.setdefault(len(s.q), []).append(s)
    for k in sorted(groups):
        g = groups[k]
        for i in range(0, len(g), chunk):
            part = g[i:i + chunk]
            targets = kd.targets_for(part, ch.cfg)
            z = kd.teacher_logits(teacher, part, targets)
            for b, s in enumerate(part):
                cache[s.id] = z[b, : len(targets[b])]
    return cache


def _stack_teacher(cache: dict[int, np.ndarray], batch: Sequence[Sample]) -> np.ndarray | None:
    if not cache:
        return None
    L = max(cache[s.id].shape[0] for s in batch)
    V = next(iter(cache.values())).shape[1]
    z = np.zeros((len(batch), L, V))
    for b, s in enumerate(batch):
        row = cache[s.id]
        z[b, : row.shape[0]] = row
    return z


def _fit(model: ModelParams, steps, loss_fn: Callable, cfg: TrainConfig, log: TrainLog,
         state: AdamState, step0: int) -> int:
    names = list(model.tensors)
    values = {n: model.tensors[n].data for n in names}
    rates = {n: cfg.lr * (cfg.adapter_lr_scale if n.startswith("adapter") else 1.0)
             for n in names}
    step = step0
    for label, batch, extra in steps:
        step += 1
        res: LossBreakdown = loss_fn(label, batch, extra)
        if not np.isfinite(res.total):
            raise TrainingError(f"non-finite loss at step {step} ({label})")
        backward(res.loss)
        grads = {n: model.tensors[n].grad for n in names if model.tensors[n].grad is not None}
        clip_grad_norm(grads, cfg.max_grad_norm)
        try:
            adam_step(values, grads, state, rates, cfg.betas, cfg.eps)
        except TrainingError as exc:
            raise TrainingError(f"step {step}: {exc}") from None
        for n in names:
            model.tensors[n].grad = None
        log.records.append({"step": step, "channel": label, "ce": res.ce, "kl": res.kl,
                            "total": res.total})
    return step


def train(teacher: ModelParams, student: ModelParams, config: TrainConfig,
          on_epoch: Callable[[int, ModelParams], dict] | None = None
          ) -> tuple[ModelParams, TrainLog]:
    """Distill into a copy of ``student``; ``teacher`` is never modified.

    Channel batches are interleaved by weighted round-robin within each epoch.
    ``on_epoch`` may return an evaluation snapshot recorded in the log.
    """
    if teacher.role != TEACHER:
        raise ValueError(f"expected teacher params, got role {teacher.role!r}")
    _validate(config.mix)
    model = student.copy().set_trainable(True)
    frozen = teacher.copy().set_trainable(False)
    log = TrainLog()
    if config.epochs == 0 or not config.mix:
        return model.set_trainable(False), log
    caches = [_teacher_cache(frozen, ch) for ch in config.mix]
    state = AdamState()
    loss_fns = {kd.T2T: kd.t2t_loss, kd.S2T: kd.s2t_loss}

    def loss_fn(label, batch, ch_index):
        ch = config.mix[ch_index]
        return loss_fns[ch.cfg.channel](frozen, model, batch, ch.cfg,
                                        z_teacher=_stack_teacher(caches[ch_index], batch))

    step = 0
    for epoch in range(config.epochs):
        per_channel = [_batches(ch.samples, config.batch_size,
                                np.random.default_rng([config.seed, epoch, i]))
                       for i, ch in enumerate(config.mix)]
        order = interleave([len(b) for b in per_channel], [ch.weight for ch in config.mix])
        cursor = [0] * len(per_channel)
        plan = []
        for i in order:
            plan.append((config.mix[i].name, per_channel[i][cursor[i]], i))
            cursor[i] += 1
        step = _fit(model, plan, loss_fn, config, log, state, step)
        if on_epoch is not None:
            log.snapshots.append(on_epoch(epoch + 1, model))
    return model.set_trainable(False), log


@dataclass
class PretrainConfig:
    lr: float = 3e-3
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    max_grad_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8
    # Gaussian noise on question embeddings; keeps fact lookup tolerant of
    # inexact inputs such as adapter outputs
    embed_noise: float = 0.1

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "PretrainConfig":
        try:
            base = dict(PRETRAIN_PRESETS[preset])
        except KeyError:
            raise ValueError(f"unknown pretrain preset {preset!r}; "
                             f"choose from {sorted(PRETRAIN_PRESETS)}") from None
        base.update(overrides)
        return cls(**base)


# the teacher is given, not trained, in the large-scale setting; only a toy profile exists
PRETRAIN_PRESETS = {
    "desk-scale": {"lr": 3e-3, "epochs": 100, "embed_noise": 0.1},
}


def pretrain(teacher: ModelParams, samples: Sequence[Sample], config: PretrainConfig,
             on_epoch: Callable[[int, ModelParams], dict] | None = None
             ) -> tuple[ModelParams, TrainLog]:
    """Plain text cross-entropy on gold answers; returns a trained copy."""
    model = teacher.copy().set_trainable(True)
    tcfg = TrainConfig(lr=config.lr, epochs=max(config.epochs, 0), batch_size=config.batch_size,
                       seed=config.seed, betas=config.betas, eps=config.eps,
                       max_grad_norm=config.max_grad_norm)
    ce_cfg = DistillConfig(target_source=kd.GOLD, use_kl=False, channel=kd.T2T)
    log = TrainLog()
    state = AdamState()

    noise_rng = np.random.default_rng([config.seed, 99])

    def loss_fn(label, batch, _):
        prefix = embed_text(model, kd._question_matrix(batch))
        if config.embed_noise > 0:
            prefix = prefix + Tensor(config.embed_noise * noise_rng.standard_normal(prefix.shape))
        logits, mask = forward_batch(model, prefix, [s.y for s in batch])
        return kd._combine(ce_cfg, logits, mask, [s.y for s in batch], None)

    step = 0
    for epoch in range(tcfg.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        plan = [("pretrain", b, None) for b in _batches(samples, tcfg.batch_size, rng)]
        step = _fit(model, plan, loss_fn, tcfg, log, state, step)
        if on_epoch is not None:
            log.snapshots.append(on_epoch(epoch + 1, model))
    return model.set_trainable(False), log
