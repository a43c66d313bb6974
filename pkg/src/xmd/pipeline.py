"""End-to-end experiment: degrade a speech student, then repair it five ways.

Artifacts, all written flat under one output directory:

    data/                corpora, vocab and synthesized speech
    teacher.ckpt         pretrained text model
    degraded.ckpt        student after naive CE-only speech fine-tuning
    <run>.ckpt           one per repair run, each started from the degraded student
    <name>.log.jsonl     per-step training logs
    <name>.report.json   T1/T2/T3 and both gaps
    table.txt            rendered score table

Every byte written is a function of the seed and the flags.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from . import distill as kd
from . import evalkit, modality, taskgen, tinylm, trainer
from .evalkit import EvalReport
from .taskgen import Sample
from .tinylm import ModelParams

# name -> (variant, channels); the last row adds the text channel
REPAIR_RUNS = {
    "s2t_ce": ("ce", ("s2t",)),
    "s2t_ce_kl": ("ce_kl", ("s2t",)),
    "s2t_teacher_ce": ("teacher_ce", ("s2t",)),
    "s2t_teacher_ce_kl": ("teacher_ce_kl", ("s2t",)),
    "s2t_t2t_teacher_ce_kl": ("teacher_ce_kl", ("s2t", "t2t")),
}

# T2T : S2T channel weights
CHANNEL_WEIGHTS = {"t2t": 1.0, "s2t": 2.0}


@dataclass
class PipelineConfig:
    seed: int = 7
    preset: str = "desk-scale"
    lam: float = 0.5
    tau: float = 2.0
    sigma: float = modality.DEFAULT_SIGMA
    sizes: taskgen.TaskSizes = field(default_factory=taskgen.TaskSizes)
    pretrain: trainer.PretrainConfig = field(default_factory=trainer.PretrainConfig)
    runs: tuple[str, ...] = tuple(REPAIR_RUNS)


@dataclass
class Data:
    vocab: tinylm.Vocab
    pretrain: list[Sample]
    eval_text: list[Sample]
    eval_speech: list[Sample]
    distill_t2t: list[Sample]
    distill_s2t: list[Sample]
    naive: list[Sample]


@dataclass
class PipelineResult:
    teacher: ModelParams
    degraded: ModelParams
    reports: dict[str, EvalReport]
    students: dict[str, ModelParams]
    out_dir: Path | None = None

    def combined(self, name: str) -> float:
        r = self.reports[name]
        return r.t2 + r.t3


def build_data(seed: int, sizes: taskgen.TaskSizes = taskgen.TaskSizes(),
               sigma: float = modality.DEFAULT_SIGMA) -> Data:
    corpus = taskgen.generate_corpus(seed, sizes)
    book = modality.make_codebook(len(corpus.vocab))
    syn = lambda xs: modality.synthesize_dataset(book, xs, seed, sigma)
    return Data(corpus.vocab, corpus.pretrain, corpus.eval, syn(corpus.eval),
                corpus.distill_t2t, syn(corpus.distill_s2t), syn(corpus.naive))


def repair_config(name: str, data: Data, cfg: PipelineConfig) -> trainer.TrainConfig:
    variant, channels = REPAIR_RUNS[name]
    pools = {"t2t": data.distill_t2t, "s2t": data.distill_s2t}
    mix = [trainer.ChannelSpec(kd.DistillConfig.from_variant(variant, ch, cfg.lam, cfg.tau),
                               pools[ch], CHANNEL_WEIGHTS[ch])
           for ch in sorted(channels, key=lambda c: c != "t2t")]
    return trainer.TrainConfig.from_preset(cfg.preset, seed=cfg.seed, mix=mix)


def naive_config(data: Data, cfg: PipelineConfig) -> trainer.TrainConfig:
    ch = trainer.ChannelSpec(kd.DistillConfig.from_variant("ce", kd.S2T, cfg.lam, cfg.tau),
                             data.naive, 1.0)
    return trainer.TrainConfig.from_preset(cfg.preset, seed=cfg.seed, mix=[ch])


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def save_data(data: Data, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    data.vocab.save(root / "vocab.txt")
    for name, rows in [("pretrain", data.pretrain), ("eval", data.eval_text),
                       ("eval_speech", data.eval_speech), ("distill_t2t", data.distill_t2t),
                       ("distill_s2t", data.distill_s2t), ("naive", data.naive)]:
        taskgen.save_jsonl(root / f"{name}.jsonl", rows)


def run(cfg: PipelineConfig, out_dir: str | Path | None = None,
        log: Callable[[str], None] | None = None) -> PipelineResult:
    """Run every stage; with ``out_dir`` set, also write all artifacts there."""
    say = log or (lambda msg: None)
    out = Path(out_dir) if out_dir is not None else None

    data = build_data(cfg.seed, cfg.sizes, cfg.sigma)
    say(f"data: {len(data.pretrain)} facts, {len(data.eval_text)} eval, "
        f"{len(data.distill_t2t)}+{len(data.distill_s2t)} distill, {len(data.naive)} naive")

    mcfg = tinylm.ModelConfig(vocab_size=len(data.vocab))
    init = tinylm.init_teacher(mcfg, data.vocab, cfg.seed)
    pcfg = trainer.PretrainConfig(**{**asdict(cfg.pretrain), "seed": cfg.seed})
    teacher, pre_log = trainer.pretrain(init, data.pretrain, pcfg)
    data.distill_t2t = kd.generate_teacher_targets(teacher, data.distill_t2t)
    data.distill_s2t = kd.generate_teacher_targets(teacher, data.distill_s2t)

    def evaluate(student: ModelParams) -> EvalReport:
        return evalkit.evaluate_triple(teacher, student, data.eval_text, data.eval_speech)

    fresh = tinylm.init_student_from_teacher(teacher, cfg.seed)
    reports = {"fresh": evaluate(fresh)}
    say(f"teacher: t1={reports['fresh'].t1:.2f}")
    degraded, naive_log = trainer.train(teacher, fresh, naive_config(data, cfg))
    reports["degraded"] = evaluate(degraded)
    say(f"degraded: forgetting={reports['degraded'].forgetting_gap:.2f} "
        f"modality={reports['degraded'].modality_gap:.2f}")

    students = {"fresh": fresh, "degraded": degraded}
    logs = {"teacher": pre_log, "degraded": naive_log}
    for name in cfg.runs:
        student, tlog = trainer.train(teacher, degraded, repair_config(name, data, cfg))
        students[name], logs[name] = student, tlog
        reports[name] = evaluate(student)
        r = reports[name]
        say(f"{name}: t2={r.t2:.2f} t3={r.t3:.2f} forgetting={r.forgetting_gap:.2f} "
            f"modality={r.modality_gap:.2f}")

    if out is not None:
        save_data(data, out / "data")
        teacher.save(out / "teacher.ckpt")
        for name, student in students.items():
            student.save(out / f"{name}.ckpt")
        for name, tlog in logs.items():
            _write(out / f"{name}.log.jsonl", tlog.to_jsonl())
        for name, r in reports.items():
            _write(out / f"{name}.report.json", r.to_json())
        rows = [(name, reports[name]) for name in ["degraded", *cfg.runs]]
        _write(out / "table.txt", evalkit.render_table(rows))
        summary = {name: {k: v for k, v in r.to_dict().items() if k != "verdicts"}
                   for name, r in reports.items()}
        _write(out / "summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return PipelineResult(teacher, degraded, reports, students, out)
