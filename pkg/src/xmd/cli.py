"""Cross-modal distillation toolkit for desk-scale speech LLMs.

Exit codes: 0 success, 2 validation error (bad file, field or flag),
3 numeric failure (non-finite values, failed gradient check).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import distill as kd
from . import evalkit, modality, pipeline, taskgen, tinylm, trainer
from .tensor import GradCheckError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_INVALID):
        super().__init__(msg)
        self.code = code


def _vocab_for(data: str, explicit: str | None) -> tinylm.Vocab:
    path = Path(explicit) if explicit else Path(data).with_name("vocab.txt")
    if not path.exists():
        raise CliError(f"{path}: vocab file not found (pass --vocab)")
    return tinylm.Vocab.load(path)


def _load(path: str) -> list[taskgen.Sample]:
    if not Path(path).exists():
        raise CliError(f"{path}: file not found")
    return taskgen.load_jsonl(path)


def _ckpt(path: str, role: str | None = None) -> tinylm.ModelParams:
    if not Path(path).exists():
        raise CliError(f"{path}: checkpoint not found")
    params = tinylm.ModelParams.load(path)
    if role is not None and params.role != role:
        raise CliError(f"{path}: field 'role': expected {role}, got {params.role}")
    return params


def _parent(path: str) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def cmd_gen(args) -> None:
    corpus = taskgen.generate_corpus(args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(out / "vocab.txt")
    for name, rows in corpus.files().items():
        taskgen.save_jsonl(out / name, rows)
    print(f"wrote {len(corpus.files())} splits and vocab.txt to {out}")


def cmd_synth(args) -> None:
    samples = _load(args.data)
    book = modality.make_codebook(len(_vocab_for(args.data, args.vocab)))
    taskgen.save_jsonl(_parent(args.out), modality.synthesize_dataset(book, samples, args.seed,
                                                                      args.sigma))
    print(f"synthesized {len(samples)} queries -> {args.out}")


def cmd_pretrain(args) -> None:
    samples = _load(args.data)
    vocab = _vocab_for(args.data, args.vocab)
    overrides = {"seed": args.seed}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    cfg = trainer.PretrainConfig.from_preset(args.preset, **overrides)
    init = tinylm.init_teacher(tinylm.ModelConfig(vocab_size=len(vocab)), vocab, args.seed)
    teacher, log = trainer.pretrain(init, samples, cfg)
    teacher.save(_parent(args.out_ckpt))
    if args.log:
        _parent(args.log).write_text(log.to_jsonl(), encoding="utf-8")
    acc = evalkit.score(teacher, samples, evalkit.TEXT)
    print(f"teacher accuracy on training facts: {acc:.2f}")


def cmd_init_student(args) -> None:
    student = tinylm.init_student_from_teacher(_ckpt(args.teacher, tinylm.TEACHER), args.seed)
    student.save(_parent(args.out_ckpt))
    print(f"student {student.digest()[:16]} -> {args.out_ckpt}")


def cmd_teacher_labels(args) -> None:
    teacher = _ckpt(args.ckpt, tinylm.TEACHER)
    labeled = kd.generate_teacher_targets(teacher, _load(args.data))
    taskgen.save_jsonl(_parent(args.out), labeled)
    print(f"labeled {len(labeled)} samples -> {args.out}")


def cmd_distill(args) -> None:
    teacher = _ckpt(args.teacher, tinylm.TEACHER)
    student = _ckpt(args.student_init, tinylm.STUDENT)
    channels = args.channels.split("+")
    paths = {"s2t": args.data_s2t, "t2t": args.data_t2t}
    mix = []
    for ch in sorted(channels, key=lambda c: c != "t2t"):
        if not paths[ch]:
            raise CliError(f"--channels {args.channels} needs --data-{ch}")
        cfg = kd.DistillConfig.from_variant(args.variant, ch, args.lam, args.tau)
        mix.append(trainer.ChannelSpec(cfg, _load(paths[ch]), pipeline.CHANNEL_WEIGHTS[ch]))
    overrides = {"seed": args.seed, "mix": mix}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    tcfg = trainer.TrainConfig.from_preset(args.preset, **overrides)
    out, log = trainer.train(teacher, student, tcfg)
    out.save(_parent(args.out_ckpt))
    if args.log:
        _parent(args.log).write_text(log.to_jsonl(), encoding="utf-8")
    print(f"{len(log.records)} steps; student {out.digest()[:16]} -> {args.out_ckpt}")


def cmd_eval(args) -> None:
    teacher = _ckpt(args.teacher, tinylm.TEACHER)
    student = _ckpt(args.student, tinylm.STUDENT)
    data = _load(args.data)
    speech = _load(args.speech_data) if args.speech_data else data
    report = evalkit.evaluate_triple(teacher, student, data, speech)
    if args.report:
        _parent(args.report).write_text(report.to_json(), encoding="utf-8")
    sys.stdout.write(evalkit.render_table([(args.name, report)]))


def cmd_gradcheck(args) -> None:
    params = _ckpt(args.ckpt)
    if params.role == tinylm.STUDENT:
        teacher = tinylm.ModelParams(params.config, params.vocab, tinylm.TEACHER,
                                     {n: t for n, t in params.tensors.items()
                                      if not n.startswith("adapter")})
        student = params
    else:
        teacher, student = params, tinylm.init_student_from_teacher(params, args.seed)
    samples = probe_samples(teacher, args.batch, args.seed)
    reports = kd.grad_check_losses(teacher, student, samples, args.lam, args.tau,
                                   n_coords=args.samples, epsilon=args.epsilon,
                                   tolerance=args.tolerance, seed=args.seed, floor=args.floor)
    failed = False
    for channel, rep in reports.items():
        verdict = "ok" if rep.passed else "FAIL"
        print(f"{channel}: max relative error {rep.max_rel_error:.3e} over {rep.checked} "
              f"coordinates (tolerance {rep.tolerance:g}, {rep.below_floor} below floor "
              f"{rep.floor:g}) {verdict}")
        failed |= not rep.passed
    if failed:
        raise CliError("gradient check failed", EXIT_NUMERIC)


def probe_samples(teacher: tinylm.ModelParams, n: int, seed: int) -> list[taskgen.Sample]:
    """Random questions with frames and teacher labels, for gradient checks."""
    vocab = teacher.vocab
    rng = np.random.default_rng(seed)
    body = list(range(len(tinylm.RESERVED), len(vocab)))
    samples = [taskgen.Sample(i, tuple(int(t) for t in rng.choice(body, 4)),
                              (int(rng.choice(body)), tinylm.EOS), "eval") for i in range(n)]
    book = modality.make_codebook(len(vocab), teacher.config.frame_dim)
    samples = modality.synthesize_dataset(book, samples, seed)
    return kd.generate_teacher_targets(teacher, samples, max_len=3)


def cmd_pipeline(args) -> None:
    pcfg = trainer.PretrainConfig.from_preset("desk-scale")
    if args.pretrain_epochs is not None:
        pcfg = trainer.PretrainConfig(**{**pcfg.__dict__, "epochs": args.pretrain_epochs})
    cfg = pipeline.PipelineConfig(seed=args.seed, preset=args.preset, lam=args.lam,
                                  tau=args.tau, pretrain=pcfg)
    res = pipeline.run(cfg, args.out_dir, log=print)
    sys.stdout.write((Path(args.out_dir) / "table.txt").read_text(encoding="utf-8"))
    print(json.dumps({n: round(res.combined(n), 2) for n in cfg.runs}, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="generate fact corpora and splits")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(fn=cmd_gen)

    s = sub.add_parser("synth", help="attach synthesized speech frames to a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--sigma", type=float, default=modality.DEFAULT_SIGMA)
    s.add_argument("--vocab", help="defaults to vocab.txt next to --data")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("pretrain", help="train the text teacher on facts")
    s.add_argument("--data", required=True)
    s.add_argument("--out-ckpt", required=True)
    s.add_argument("--preset", default="desk-scale", choices=sorted(trainer.PRETRAIN_PRESETS))
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--epochs", type=int)
    s.add_argument("--vocab")
    s.add_argument("--log")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("init-student", help="copy a teacher and attach a speech adapter")
    s.add_argument("--teacher", required=True)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out-ckpt", required=True)
    s.set_defaults(fn=cmd_init_student)

    s = sub.add_parser("teacher-labels", help="cache the teacher's greedy answers")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_teacher_labels)

    s = sub.add_parser("distill", help="train a student on one or both channels")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student-init", required=True)
    s.add_argument("--variant", required=True, choices=sorted(kd.VARIANTS))
    s.add_argument("--channels", default="s2t", choices=["s2t", "s2t+t2t"])
    s.add_argument("--data-s2t")
    s.add_argument("--data-t2t")
    s.add_argument("--lambda", dest="lam", type=float, default=0.5)
    s.add_argument("--tau", type=float, default=2.0)
    s.add_argument("--preset", default="desk-scale", choices=sorted(trainer.PRESETS))
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out-ckpt", required=True)
    s.add_argument("--log")
    s.set_defaults(fn=cmd_distill)

    s = sub.add_parser("eval", help="score T1/T2/T3 and the two gaps")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--data", required=True, help="eval samples; frames are used for speech")
    s.add_argument("--speech-data", help="separate speech file paired by id")
    s.add_argument("--report")
    s.add_argument("--name", default="model")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of both distillation losses")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--samples", type=int, default=64, help="coordinates to check per loss")
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--epsilon", type=float, default=1e-4)
    s.add_argument("--lambda", dest="lam", type=float, default=0.5)
    s.add_argument("--tau", type=float, default=2.0)
    s.add_argument("--floor", type=float, default=1e-6,
                   help="gradients smaller than this are compared absolutely; finite "
                        "differences cannot resolve them in relative terms")
    s.add_argument("--batch", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("pipeline", help="run every stage end to end")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--preset", default="desk-scale", choices=sorted(trainer.PRESETS))
    s.add_argument("--lambda", dest="lam", type=float, default=0.5)
    s.add_argument("--tau", type=float, default=2.0)
    s.add_argument("--pretrain-epochs", type=int)
    s.set_defaults(fn=cmd_pipeline)
    return p


@contextlib.contextmanager
def _thread_cap():
    raw = os.environ.get("XMD_THREADS")
    if not raw:
        yield
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError(f"XMD_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_cap():
            args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (trainer.TrainingError, GradCheckError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (taskgen.DatasetError, tinylm.CheckpointError, kd.PairingError, ValueError,
            KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
