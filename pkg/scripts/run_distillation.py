"""Train a large toy teacher, export its logits, and distill students from CE baselines."""
import argparse
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from fairwake import corpus, fairness, training
from fairwake.training import KdConfig, TrainConfig


@dataclass
class DistillConfig:
    out: str = "runs/distill"
    seeds: int = 5
    teacher_hidden: int = 400
    teacher_epochs: int = 40
    student_epochs: int = 40
    kd_epochs: int = 20
    delta: float = 0.2
    tau: float = 2.0
    corpus_seed: int = 2024


def val_f1(det, windows):
    preds = training.predict(det, windows)
    tp = sum(p.predicted_label and p.true_label for p in preds)
    fp = sum(p.predicted_label and not p.true_label for p in preds)
    fn = sum(p.true_label and not p.predicted_label for p in preds)
    return fairness.f1_from_counts(tp, fp, fn)[2]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    for k, v in asdict(DistillConfig()).items():
        ap.add_argument(f"--{k.replace('_', '-')}", type=type(v), default=v)
    cfg = DistillConfig(**vars(ap.parse_args()))
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(cfg.out)
    data = corpus.Corpus.from_manifest(corpus.synth_corpus(corpus.SynthSpec(seed=cfg.corpus_seed), out / "corpus"))
    val = data.windows("validation")

    teacher, _ = training.train(TrainConfig(max_epochs=cfg.teacher_epochs, hidden_size=cfg.teacher_hidden,
                                            seed=1000), data)
    logits = training.export_toy_teacher_logits(teacher, data)
    training.write_teacher_logits(out / "teacher_logits.jsonl", logits)
    rows = []
    for seed in range(cfg.seeds):
        base, _ = training.train(TrainConfig(max_epochs=cfg.student_epochs, seed=seed), data)
        kd, _ = training.distill(base, logits, KdConfig(max_epochs=cfg.kd_epochs, delta=cfg.delta, tau=cfg.tau,
                                                        seed=seed), data)
        ce, _ = training.finetune(base, KdConfig(max_epochs=cfg.kd_epochs, delta=1.0, seed=seed), data)
        rows.append({"seed": seed, "baseline": val_f1(base, val), "ce_finetune": val_f1(ce, val),
                     "distilled": val_f1(kd, val)})
        logging.info("seed %d: %s", seed, rows[-1])
    summary = {"teacher_f1": val_f1(teacher, val), "runs": rows,
               "median": {k: float(np.median([r[k] for r in rows])) for k in ("baseline", "ce_finetune", "distilled")}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary["median"], indent=2))


if __name__ == "__main__":
    main()
