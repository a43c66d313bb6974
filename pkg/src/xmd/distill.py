"""Loss kernels for text-to-text and speech-to-text distillation.

Both channels minimize ``ce + lam * tau**2 * kl``: cross-entropy against hard
targets (gold ``y`` or the teacher's greedy ``yhat``) plus a temperature-softened
KL from teacher to student. Teacher and student are teacher-forced on the same
target sequence, so their logit sequences align position by position.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as tn
from .modality import SpeechQuery
from .taskgen import Sample
from .tensor import Tensor, no_grad
from .tinylm import (STUDENT, TEACHER, ModelParams, embed_text, encode_speech, forward_batch,
                     greedy_decode_batch)

T2T = "t2t"
S2T = "s2t"
GOLD = "gold"
TEACHER_LABELS = "teacher"
TEACHER_MAX_LEN = 16

VARIANTS = {
    "ce": (GOLD, False),
    "ce_kl": (GOLD, True),
    "teacher_ce": (TEACHER_LABELS, False),
    "teacher_ce_kl": (TEACHER_LABELS, True),
}


class PairingError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    lam: float = 0.5
    tau: float = 2.0
    target_source: str = TEACHER_LABELS
    use_kl: bool = True
    channel: str = S2T

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"KL weight must be >= 0, got {self.lam}")
        if self.tau <= 0:
            raise ValueError(f"temperature must be > 0, got {self.tau}")
        if self.target_source not in (GOLD, TEACHER_LABELS):
            raise ValueError(f"unknown target source {self.target_source!r}")
        if self.channel not in (T2T, S2T):
            raise ValueError(f"unknown channel {self.channel!r}")

    @classmethod
    def from_variant(cls, variant: str, channel: str, lam: float = 0.5,
                     tau: float = 2.0) -> "DistillConfig":
        try:
            source, use_kl = VARIANTS[variant]
        except KeyError:
            raise ValueError(f"unknown variant {variant!r}; "
                             f"choose from {sorted(VARIANTS)}") from None
        return cls(lam=lam, tau=tau, target_source=source, use_kl=use_kl, channel=channel)

    @property
    def kl_weight(self) -> float:
        return self.lam * self.tau ** 2 if self.use_kl else 0.0


@dataclass
class LossBreakdown:
    ce: float
    kl: float
    total: float
    token_count: int
    loss: Tensor  # differentiable total


def soften(logits, tau: float) -> np.ndarray:
    """Temperature softmax over the last axis."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _mask_for(shape: tuple[int, ...], mask) -> np.ndarray:
    if mask is None:
        return np.ones(shape)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != shape:
        raise ValueError(f"mask shape {m.shape} does not match positions {shape}")
    return m


def ce_loss(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean over unmasked positions of ``-log softmax(logits)[target]``."""
    tgt = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != tgt.shape:
        raise ValueError(f"ce_loss: logits cover positions {logits.shape[:-1]} "
                         f"but targets have shape {tgt.shape}")
    m = _mask_for(tgt.shape, mask)
    count = m.sum()
    if count == 0:
        raise ValueError("ce_loss: no unmasked positions")
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
    picked = tn.masked_sum(tn.log_softmax(logits), onehot * m[..., None])
    return tn.scale(picked, -1.0 / count)


def kl_loss(teacher_logits, student_logits: Tensor, tau: float, mask=None) -> Tensor:
    """Mean over unmasked positions of KL(soften(teacher) || soften(student)).

    The teacher side is treated as a constant: no gradient reaches it.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    zt = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits,
                    dtype=np.float64)
    if zt.shape != student_logits.shape:
        raise ValueError(f"kl_loss: teacher logits {zt.shape} vs student logits "
                         f"{student_logits.shape}; sequences must be aligned")
    m = _mask_for(zt.shape[:-1], mask)
    count = m.sum()
    if count == 0:
        raise ValueError("kl_loss: no unmasked positions")
    log_pt = tn._log_softmax_np(zt / tau)
    pt = np.exp(log_pt)
    weights = pt * m[..., None]
    entropy_part = float((weights * log_pt).sum())
    cross = tn.masked_sum(tn.log_softmax(tn.scale(student_logits, 1.0 / tau)), weights)
    return tn.scale(tn.add(tn.scale(cross, -1.0), entropy_part), 1.0 / count)


def targets_for(samples: Sequence[Sample], cfg: DistillConfig) -> list[tuple[int, ...]]:
    if cfg.target_source == GOLD:
        return [s.y for s in samples]
    missing = [s.id for s in samples if s.yhat is None]
    if missing:
        raise ValueError(f"sample {missing[0]} has no teacher label (yhat); "
                         f"run teacher-labels first")
    return [s.yhat for s in samples]


def _question_matrix(samples: Sequence[Sample]) -> np.ndarray:
    lengths = {len(s.q) for s in samples}
    if len(lengths) != 1:
        raise ValueError(f"batch mixes question lengths {sorted(lengths)}")
    return np.array([s.q for s in samples], dtype=np.int64)


def _frames_matrix(samples: Sequence[Sample]) -> np.ndarray:
    for s in samples:
        if s.frames is None:
            raise PairingError(f"sample {s.id} has no synthesized frames")
    shapes = {s.frames.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"batch mixes frame shapes {sorted(shapes)}")
    return np.stack([s.frames for s in samples])


def teacher_logits(teacher: ModelParams, samples: Sequence[Sample],
                   targets: Sequence[Sequence[int]]) -> np.ndarray:
    """Teacher-forced teacher logits from the text question, as constants."""
    with no_grad():
        prefix = embed_text(teacher, _question_matrix(samples))
        logits, _ = forward_batch(teacher, prefix, targets)
    return logits.data


def _combine(cfg: DistillConfig, student_logits: Tensor, mask: np.ndarray,
             targets: Sequence[Sequence[int]], z_teacher) -> LossBreakdown:
    tgt = np.zeros(mask.shape, dtype=np.int64)
    for b, t in enumerate(targets):
        tgt[b, : len(t)] = t
    ce = ce_loss(student_logits, tgt, mask)
    total = ce
    kl_val = 0.0
    if cfg.use_kl:
        kl = kl_loss(z_teacher, student_logits, cfg.tau, mask)
        kl_val = kl.item()
        if cfg.kl_weight:
            total = tn.add(ce, tn.scale(kl, cfg.kl_weight))
    return LossBreakdown(ce=ce.item(), kl=kl_val, total=total.item(),
                         token_count=int(mask.sum()), loss=total)


def t2t_loss(teacher: ModelParams, student: ModelParams, samples: Sequence[Sample],
             cfg: DistillConfig, z_teacher: np.ndarray | None = None) -> LossBreakdown:
    """Student reads the text question; teacher reads the same text question."""
    if cfg.channel != T2T:
        raise ValueError(f"t2t_loss called with a {cfg.channel} config")
    targets = targets_for(samples, cfg)
    if cfg.use_kl and z_teacher is None:
        z_teacher = teacher_logits(teacher, samples, targets)
    logits, mask = forward_batch(student, embed_text(student, _question_matrix(samples)), targets)
    return _combine(cfg, logits, mask, targets, z_teacher)


def s2t_loss(teacher: ModelParams, student: ModelParams, samples: Sequence[Sample],
             cfg: DistillConfig, z_teacher: np.ndarray | None = None,
             speech: Sequence[SpeechQuery] | None = None) -> LossBreakdown:
    """Student reads synthesized speech; teacher reads the paired text question.

    Frames come from ``speech`` when given (each checked against its sample's
    text question), otherwise from the samples' stored frames.
    """
    if cfg.channel != S2T:
        raise ValueError(f"s2t_loss called with a {cfg.channel} config")
    if student.role != STUDENT:
        raise ValueError("s2t_loss needs student params with a speech adapter")
    if speech is not None:
        if len(speech) != len(samples):
            raise PairingError(f"{len(speech)} speech queries for {len(samples)} samples")
        for s, sq in zip(samples, speech):
            check_pairing(s, sq.source)
        samples = [replace(s, frames=sq.frames) for s, sq in zip(samples, speech)]
    targets = targets_for(samples, cfg)
    frames = _frames_matrix(samples)
    if cfg.use_kl and z_teacher is None:
        z_teacher = teacher_logits(teacher, samples, targets)
    logits, mask = forward_batch(student, encode_speech(student, frames), targets)
    return _combine(cfg, logits, mask, targets, z_teacher)


def check_pairing(sample: Sample, source: Sequence[int]) -> None:
    if tuple(source) != tuple(sample.q):
        raise PairingError(f"sample {sample.id}: speech was synthesized from {tuple(source)}, "
                           f"not from its text question {sample.q}")


def generate_teacher_targets(teacher: ModelParams, samples: Sequence[Sample],
                             max_len: int = TEACHER_MAX_LEN,
                             batch_size: int = 64) -> list[Sample]:
    """Cache the teacher's greedy answer to each text question as ``yhat``."""
    if teacher.role != TEACHER:
        raise ValueError(f"teacher labels need teacher params, got role {teacher.role!r}")
    decoded: dict[int, list[int]] = {}
    for group in _by_question_length(samples):
        for start in range(0, len(group), batch_size):
            chunk = group[start:start + batch_size]
            with no_grad():
                prefix = embed_text(teacher, _question_matrix(chunk))
            for s, ans in zip(chunk, greedy_decode_batch(teacher, prefix, max_len)):
                decoded[s.id] = ans
    return [replace(s, yhat=tuple(decoded[s.id])) for s in samples]


def _by_question_length(samples: Sequence[Sample]) -> list[list[Sample]]:
    groups: dict[int, list[Sample]] = {}
    for s in samples:
        groups.setdefault(len(s.q), []).append(s)
    return [groups[k] for k in sorted(groups)]


def grad_check_losses(teacher: ModelParams, student: ModelParams, samples: Sequence[Sample],
                      lam: float = 0.5, tau: float = 2.0, n_coords: int = 64,
                      epsilon: float = 1e-4, tolerance: float = 1e-4,
                      seed: int = 0, floor: float = 1e-8) -> dict[str, tn.GradCheckReport]:
    """Finite-difference check of both channel losses w.r.t. student weights.

    ``samples`` need frames and teacher labels. The student is copied, so the
    caller's weights are never perturbed.
    """
    reports = {}
    for channel, fn in ((T2T, t2t_loss), (S2T, s2t_loss)):
        cfg = DistillConfig.from_variant("teacher_ce_kl", channel, lam, tau)
        model = student.copy().set_trainable(True)
        z = teacher_logits(teacher, samples, targets_for(samples, cfg))
        reports[channel] = tn.grad_check(lambda: fn(teacher, model, samples, cfg, z).loss,
                                         model.parameters(), epsilon=epsilon,
                                         tolerance=tolerance, n_samples=n_coords, seed=seed,
                                         floor=floor)
    return reports
