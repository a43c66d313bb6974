"""Forgetting and modality-gap measurement.

T1 scores the teacher on text questions, T2 the student on the same text, and
T3 the student on the synthesized speech. The forgetting gap is T1 - T2 and
the modality gap is T2 - T3, both signed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .distill import _frames_matrix, _question_matrix
from .taskgen import Sample
from .tensor import no_grad
from .tinylm import EOS, STUDENT, ModelParams, embed_text, encode_speech, greedy_decode_batch

TEXT = "text"
SPEECH = "speech"
EVAL_MAX_LEN = 16


def _strip(tokens: Sequence[int]) -> tuple[int, ...]:
    return tuple(t for t in tokens if t != EOS)


def decode_answers(params: ModelParams, samples: Sequence[Sample], modality: str,
                   max_len: int = EVAL_MAX_LEN, batch_size: int = 64) -> list[list[int]]:
    if modality not in (TEXT, SPEECH):
        raise ValueError(f"unknown modality {modality!r}")
    if modality == SPEECH and params.role != STUDENT:
        raise ValueError("speech scoring needs student params; the teacher never hears speech")
    out: dict[int, list[int]] = {}
    groups: dict[tuple, list[Sample]] = {}
    for s in samples:
        key = len(s.q) if modality == TEXT else (None if s.frames is None else s.frames.shape)
        groups.setdefault(key, []).append(s)
    for key in sorted(groups, key=repr):
        g = groups[key]
        for i in range(0, len(g), batch_size):
            chunk = g[i:i + batch_size]
            with no_grad():
                if modality == TEXT:
                    prefix = embed_text(params, _question_matrix(chunk))
                else:
                    prefix = encode_speech(params, _frames_matrix(chunk))
            for s, ans in zip(chunk, greedy_decode_batch(params, prefix, max_len)):
                out[s.id] = ans
    return [out[s.id] for s in samples]


def score_detail(params: ModelParams, samples: Sequence[Sample],
                 modality: str) -> tuple[float, list[bool]]:
    if not samples:
        raise ValueError("cannot score an empty dataset")
    answers = decode_answers(params, samples, modality)
    verdicts = [_strip(a) == _strip(s.y) for s, a in zip(samples, answers)]
    return 100.0 * sum(verdicts) / len(verdicts), verdicts


def score(params: ModelParams, samples: Sequence[Sample], modality: str) -> float:
    """Exact-match accuracy (percent) of greedy answers against gold."""
    return score_detail(params, samples, modality)[0]


@dataclass
class EvalReport:
    t1: float
    t2: float
    t3: float
    n_samples: int
    verdicts: list[dict] = field(default_factory=list)

    @property
    def forgetting_gap(self) -> float:
        return forgetting_gap(self.t1, self.t2)

    @property
    def modality_gap(self) -> float:
        return modality_gap(self.t2, self.t3)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["forgetting_gap"] = self.forgetting_gap
        d["modality_gap"] = self.modality_gap
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["t1"], d["t2"], d["t3"], d["n_samples"], list(d.get("verdicts", [])))


def forgetting_gap(t1: float, t2: float) -> float:
    return t1 - t2


def modality_gap(t2: float, t3: float) -> float:
    return t2 - t3


def evaluate_triple(teacher: ModelParams, student: ModelParams, text_samples: Sequence[Sample],
                    speech_samples: Sequence[Sample]) -> EvalReport:
    """T1/T2/T3 on paired text and speech datasets (matched by sample id)."""
    text_ids = [s.id for s in text_samples]
    speech_ids = [s.id for s in speech_samples]
    if sorted(text_ids) != sorted(speech_ids):
        missing = sorted(set(text_ids) ^ set(speech_ids))
        raise ValueError(f"text and speech datasets are not paired; mismatched id {missing[0]}")
    by_id = {s.id: s for s in speech_samples}
    speech_ordered = [by_id[i] for i in text_ids]
    t1, v1 = score_detail(teacher, text_samples, TEXT)
    t2, v2 = score_detail(student, text_samples, TEXT)
    t3, v3 = score_detail(student, speech_ordered, SPEECH)
    verdicts = [{"id": i, "t1": a, "t2": b, "t3": c} for i, a, b, c in zip(text_ids, v1, v2, v3)]
    return EvalReport(t1, t2, t3, len(text_ids), verdicts)


def render_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """Plain-text table in the model x modality layout; scores to 2 decimals."""
    w = max([len("Model")] + [len(name) + len(" student (T->T)") for name, _ in rows]) + 2
    lines = [f"{'Model':<{w}}{'Score':>8}{'Gap':>10}", "-" * (w + 18)]
    for name, r in rows:
        lines.append(f"{name + ' teacher (T->T)':<{w}}{r.t1:>8.2f}{'':>10}")
        lines.append(f"{name + ' student (T->T)':<{w}}{r.t2:>8.2f}{r.forgetting_gap:>10.2f}")
        lines.append(f"{name + ' student (S->T)':<{w}}{r.t3:>8.2f}{r.modality_gap:>10.2f}")
    return "\n".join(lines) + "\n"
