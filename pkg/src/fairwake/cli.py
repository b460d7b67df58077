"""Command-line entry point: synth, train, distill, evaluate, report, augment, export-logits.

Exit codes: 0 success, 1 configuration/usage error, 2 data/runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from fairwake import augment, config, corpus, dsp, fairness, training
from fairwake.errors import ConfigError, DataError, DimensionError, DomainError, FairwakeError

log = logging.getLogger("fairwake")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, manifest=True):
    if manifest:
        p.add_argument("--manifest", help="JSON Lines manifest")
    p.add_argument("--config", help="YAML/JSON run config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory")
    p.set_defaults(subparser=p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fairwake", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic demographic corpus")
    _common(p, manifest=False)

    p = sub.add_parser("train", help="train the GRU detector from scratch")
    _common(p)

    p = sub.add_parser("distill", help="distill teacher logits into a student checkpoint")
    _common(p)
    p.add_argument("--teacher-logits", help="teacher logits JSON Lines file")
    p.add_argument("--student-init", help="baseline checkpoint to start from")

    p = sub.add_parser("evaluate", help="score evaluation windows")
    _common(p)
    p.add_argument("--checkpoint", help="model checkpoint")
    p.add_argument("--split", default="test")

    p = sub.add_parser("report", help="build a fairness report from predictions")
    _common(p)
    p.add_argument("--predictions", help="predictions JSON Lines file")
    p.add_argument("--baseline-report", help="baseline report.json for RRPD")
    p.add_argument("--attributes", default="sex,age,accent")
    p.add_argument("--min-support", type=int, default=fairness.MIN_SUPPORT)

    p = sub.add_parser("augment", help="apply the augmentation policy to manifest audio")
    _common(p)
    p.add_argument("--split", default="train")

    p = sub.add_parser("export-logits", help="export a checkpoint's logits as a teacher file")
    _common(p)
    p.add_argument("--checkpoint", help="teacher checkpoint")
    return parser


def _need(args, parser, *names):
    missing = [n for n in names if getattr(args, n.replace("-", "_")) is None]
    if missing:
        parser.print_usage(sys.stderr)
        raise UsageError("missing required option(s): " + ", ".join("--" + m for m in missing))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_corpus(path) -> corpus.Corpus:
    if not Path(path).exists():
        raise DataError(f"manifest {path} not found")
    return corpus.Corpus.from_manifest(path)


def cmd_synth(args, parser) -> int:
    _need(args, parser, "out")
    cfg = config.load_config(args.config)
    spec = config.synth_spec(cfg, seed=args.seed)
    path = corpus.synth_corpus(spec, _out(args))
    print(path)
    return EXIT_OK


def _write_run(out: Path, det, hist, seed: int):
    det.save(out / "model.ckpt", seed, {"selected_epoch": hist.selected_epoch})
    (out / "history.jsonl").write_text(hist.to_jsonl(), encoding="utf-8")


def cmd_train(args, parser) -> int:
    _need(args, parser, "manifest", "out")
    cfg = config.load_config(args.config)
    out = _out(args)
    tc = config.train_config(cfg, seed=args.seed, checkpoint_dir=str(out / "checkpoints"))
    policy = config.augmentation_policy(cfg)
    det, hist = training.train(tc, _load_corpus(args.manifest), policy)
    _write_run(out, det, hist, tc.seed)
    log.info("selected epoch %s of %d", hist.selected_epoch, len(hist))
    return EXIT_OK


def cmd_distill(args, parser) -> int:
    _need(args, parser, "manifest", "out", "student_init")
    cfg = config.load_config(args.config)
    out = _out(args)
    kc = config.kd_config(cfg, seed=args.seed, checkpoint_dir=str(out / "checkpoints"),
                          teacher_logits=args.teacher_logits)
    if kc.teacher_logits is None:
        raise UsageError("missing required option: --teacher-logits")
    if not Path(kc.teacher_logits).exists():
        raise DataError(f"teacher logits file {kc.teacher_logits} not found")
    teacher = training.read_teacher_logits(kc.teacher_logits)
    student = training.Detector.load(args.student_init)
    det, hist = training.distill(student, teacher, kc, _load_corpus(args.manifest),
                                 config.augmentation_policy(cfg))
    _write_run(out, det, hist, kc.seed)
    return EXIT_OK


def _load_detector(path) -> training.Detector:
    if not Path(path).exists():
        raise DataError(f"checkpoint {path} not found")
    det = training.Detector.load(path)
    if det.params.input_size != dsp.N_MFCC or det.params.n_classes != 2:
        raise DimensionError(f"checkpoint architecture {det.params.architecture()} does not match "
                             f"{dsp.N_MFCC} MFCC inputs and 2 classes")
    return det


def cmd_evaluate(args, parser) -> int:
    _need(args, parser, "manifest", "checkpoint", "out")
    det = _load_detector(args.checkpoint)
    windows = _load_corpus(args.manifest).windows(args.split)
    if len(windows) == 0:
        raise DataError(f"no {args.split} windows in {args.manifest}")
    preds = training.predict(det, windows)
    (_out(args) / "predictions.jsonl").write_text(training.dump_predictions(preds), encoding="utf-8")
    return EXIT_OK


def cmd_report(args, parser) -> int:
    _need(args, parser, "manifest", "predictions", "out")
    if not Path(args.predictions).exists():
        raise DataError(f"predictions file {args.predictions} not found")
    preds = training.read_predictions(args.predictions)
    rows = _load_corpus(args.manifest).rows
    baseline = None
    if args.baseline_report:
        try:
            baseline = json.loads(Path(args.baseline_report).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read baseline report: {exc}") from exc
    attrs = [a.strip() for a in args.attributes.split(",") if a.strip()]
    for a in attrs:
        if a not in fairness.ATTRIBUTE_FIELDS:
            raise ConfigError(f"unknown attribute {a!r}")
    rep = fairness.build_report(preds, rows, attrs, baseline, args.min_support,
                                baseline_name=args.baseline_report and Path(args.baseline_report).name)
    for a in rep.attributes:
        if a.skipped_reason:
            log.warning("attribute %s skipped: %s", a.attribute, a.skipped_reason)
    out = _out(args)
    (out / "report.json").write_text(rep.to_json(), encoding="utf-8")
    text = rep.render_text()
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_augment(args, parser) -> int:
    _need(args, parser, "manifest", "out")
    cfg = config.load_config(args.config)
    policy = config.augmentation_policy(cfg) or augment.AugmentationPolicy()
    c = _load_corpus(args.manifest)
    if augment.DIR in policy.enabled and not policy.impulse_responses:
        policy.impulse_responses = c.impulse_responses("dir")
    rows = c.examples(args.split)
    if not rows:
        raise DataError(f"no {args.split} rows in {args.manifest}")
    seed = args.seed if args.seed is not None else 0
    batch = [(c.waveform(u), u.target) for u in rows]
    waves, gated = augment.apply_policy(batch, policy, np.random.default_rng(seed), return_mask=True)
    out = _out(args)
    for u, w, g in zip(rows, waves, gated):
        dst = out / u.audio_path
        dst.parent.mkdir(parents=True, exist_ok=True)
        if g:
            dsp.write_wav(dst, w)
        else:
            shutil.copyfile(c.root / u.audio_path, dst)
    corpus.write_manifest(out / "manifest.jsonl", rows)
    log.info("augmented %d of %d files", int(gated.sum()), len(rows))
    return EXIT_OK


def cmd_export_logits(args, parser) -> int:
    _need(args, parser, "manifest", "checkpoint", "out")
    det = _load_detector(args.checkpoint)
    logits = training.export_toy_teacher_logits(det, _load_corpus(args.manifest))
    training.write_teacher_logits(_out(args) / "teacher_logits.jsonl", logits)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "distill": cmd_distill, "evaluate": cmd_evaluate,
    "report": cmd_report, "augment": cmd_augment, "export-logits": cmd_export_logits,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FAIRWAKE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        return COMMANDS[args.command](args, args.subparser)
    except UsageError as exc:
        print(f"fairwake: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, DimensionError, DomainError) as exc:
        print(f"fairwake: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FairwakeError, OSError) as exc:
        print(f"fairwake: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
