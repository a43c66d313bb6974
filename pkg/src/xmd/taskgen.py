"""Synthetic fact-QA corpora.

A question is ``R k1 k2 ?`` and its answer a single value token followed by
EOS. The teacher memorizes a fact table during pretraining; that memorized
knowledge is what a speech fine-tune can erase and distillation can restore.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tinylm import EOS, Vocab

SPLITS = ("pretrain", "distill", "eval", "naive")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    id: int
    q: tuple[int, ...]
    y: tuple[int, ...]
    split: str
    yhat: tuple[int, ...] | None = None
    frames: np.ndarray | None = field(default=None, compare=False)

    def to_json(self) -> dict:
        rec = {"id": self.id, "q": list(self.q), "y": list(self.y)}
        if self.yhat is not None:
            rec["yhat"] = list(self.yhat)
        if self.frames is not None:
            rec["frames"] = self.frames.tolist()
        rec["split"] = self.split
        return rec


@dataclass(frozen=True)
class TaskSizes:
    n_relations: int = 2
    n_keys: int = 8
    n_values: int = 49
    key_slots: int = 3
    n_facts: int = 512  # known to the teacher
    n_eval: int = 128  # known, held out of every fine-tuning split
    n_distill: int = 1500
    n_naive: int = 128  # unknown facts in the naive speech fine-tune
    n_distill_novel: int = 128  # unknown facts among the distillation prompts


def default_vocab(sizes: TaskSizes = TaskSizes()) -> Vocab:
    return Vocab.build(["?"]
                       + [f"R{i}" for i in range(sizes.n_relations)]
                       + [f"K{i}" for i in range(sizes.n_keys)]
                       + [f"A{i}" for i in range(sizes.n_values)])


@dataclass(frozen=True)
class Fact:
    relation: int
    keys: tuple[int, ...]
    value: int


def _symbol_ids(vocab: Vocab, prefix: str) -> list[int]:
    return [i for i, t in enumerate(vocab.tokens)
            if t.startswith(prefix) and t[len(prefix):].isdigit()]


def _question(vocab: Vocab, f: Fact) -> tuple[int, ...]:
    rel, keys = _symbol_ids(vocab, "R"), _symbol_ids(vocab, "K")
    return (rel[f.relation], *(keys[k] for k in f.keys), vocab.id("?"))


def _answer(vocab: Vocab, f: Fact) -> tuple[int, ...]:
    return (_symbol_ids(vocab, "A")[f.value], EOS)


def generate_facts(seed: int, n_facts: int, vocab: Vocab,
                   key_slots: int = 2) -> tuple[list[Fact], list[Sample]]:
    """Draw ``n_facts`` distinct keys with random values; one QA sample per fact."""
    n_rel, n_key = len(_symbol_ids(vocab, "R")), len(_symbol_ids(vocab, "K"))
    n_val = len(_symbol_ids(vocab, "A"))
    if "?" not in vocab.tokens or not (n_rel and n_key and n_val):
        raise DatasetError("vocab lacks the '?', R*, K* or A* symbols needed for facts")
    space = n_rel * n_key ** key_slots
    if n_facts > space:
        raise DatasetError(f"vocab too small: {n_facts} facts requested, {space} keys expressible")
    rng = np.random.default_rng(seed)
    codes = rng.choice(space, size=n_facts, replace=False) if n_facts else np.zeros(0, int)
    values = rng.integers(0, n_val, size=n_facts)
    facts = []
    for c, v in zip(codes, values):
        r, rest = divmod(int(c), n_key ** key_slots)
        keys = []
        for _ in range(key_slots):
            rest, k = divmod(rest, n_key)
            keys.append(k)
        facts.append(Fact(r, tuple(reversed(keys)), int(v)))
    samples = [Sample(i, _question(vocab, f), _answer(vocab, f), "pretrain")
               for i, f in enumerate(facts)]
    return facts, samples


def build_distill_corpus(samples: Sequence[Sample],
                         ratio: tuple[int, int] = (1, 2)) -> tuple[list[Sample], list[Sample]]:
    """Split prompts into (T2T, S2T) channels; the T2T share is rounded to nearest."""
    a, b = ratio
    if a <= 0 or b <= 0:
        raise ValueError(f"ratio parts must be positive, got {ratio}")
    n_t2t = int(np.floor(len(samples) * a / (a + b) + 0.5))
    return list(samples[:n_t2t]), list(samples[n_t2t:])


@dataclass
class Corpus:
    vocab: Vocab
    facts: list[Fact]
    pretrain: list[Sample]
    eval: list[Sample]
    distill_t2t: list[Sample]
    distill_s2t: list[Sample]
    naive: list[Sample]

    def files(self) -> dict[str, list[Sample]]:
        return {"pretrain.jsonl": self.pretrain, "eval.jsonl": self.eval,
                "distill_t2t.jsonl": self.distill_t2t, "distill_s2t.jsonl": self.distill_s2t,
                "naive.jsonl": self.naive}


def generate_corpus(seed: int, sizes: TaskSizes = TaskSizes()) -> Corpus:
    """Pretrain, eval, distill and naive splits from one fact table.

    Known facts are all pretrained; ``n_eval`` of them are held out of every
    later split. The naive speech fine-tune mixes the remaining known facts
    with unknown ones, which is what erodes the teacher's knowledge. The
    distillation prompts mix known and unknown facts too: on unknown facts the
    gold answer disagrees with what the teacher would say.
    """
    if sizes.n_eval > sizes.n_facts:
        raise DatasetError(f"n_eval ({sizes.n_eval}) exceeds n_facts ({sizes.n_facts})")
    vocab = default_vocab(sizes)
    total = sizes.n_facts + sizes.n_naive + sizes.n_distill_novel
    facts, qa = generate_facts(seed, total, vocab, sizes.key_slots)
    known = qa[: sizes.n_facts]
    novel_naive = qa[sizes.n_facts: sizes.n_facts + sizes.n_naive]
    novel_distill = qa[sizes.n_facts + sizes.n_naive:]
    order = np.random.default_rng([seed, 1]).permutation(sizes.n_facts)
    eval_ids = set(int(i) for i in order[: sizes.n_eval])
    visible = [s for s in known if s.id not in eval_ids]

    evals = [_with(s, split="eval") for s in known if s.id in eval_ids]
    naive = [_with(s, split="naive") for s in novel_naive + visible]

    pool = visible + novel_distill
    pool = [pool[int(i)] for i in np.random.default_rng([seed, 5]).permutation(len(pool))]
    if sizes.n_distill and not pool:
        raise DatasetError("no facts available for distillation prompts")
    pool = (pool * (sizes.n_distill // max(len(pool), 1) + 1))[: sizes.n_distill]
    distill = [Sample(total + k, s.q, s.y, "distill") for k, s in enumerate(pool)]
    t2t, s2t = build_distill_corpus(distill)
    return Corpus(vocab, facts, list(known), evals, t2t, s2t, naive)


def _with(s: Sample, **changes) -> Sample:
    from dataclasses import replace
    return replace(s, **changes)


def save_jsonl(path: str | Path, samples: Iterable[Sample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")


def _ids(value, path, lineno, key) -> tuple[int, ...]:
    if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
        raise DatasetError(f"{path}:{lineno}: field {key!r} must be a list of token ids")
    return tuple(value)


def load_jsonl(path: str | Path) -> list[Sample]:
    out = []
    allowed = {"id", "q", "y", "yhat", "frames", "split"}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            extra = set(rec) - allowed
            if extra:
                raise DatasetError(f"{path}:{lineno}: unexpected field {sorted(extra)[0]!r}")
            for key in ("id", "q", "y", "split"):
                if key not in rec:
                    raise DatasetError(f"{path}:{lineno}: missing field {key!r}")
            if not isinstance(rec["id"], int):
                raise DatasetError(f"{path}:{lineno}: field 'id' must be an integer")
            if rec["split"] not in SPLITS:
                raise DatasetError(f"{path}:{lineno}: field 'split' has unknown value "
                                   f"{rec['split']!r}")
            frames = None
            if "frames" in rec:
                try:
                    frames = np.asarray(rec["frames"], dtype=np.float64)
                except (TypeError, ValueError):
                    frames = None
                if frames is None or frames.ndim != 2:
                    raise DatasetError(f"{path}:{lineno}: field 'frames' must be a 2-D array")
            yhat = _ids(rec["yhat"], path, lineno, "yhat") if "yhat" in rec else None
            out.append(Sample(rec["id"], _ids(rec["q"], path, lineno, "q"),
                              _ids(rec["y"], path, lineno, "y"), rec["split"], yhat, frames))
    ids = [s.id for s in out]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate sample ids")
    return out
