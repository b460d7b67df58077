"""Baseline vs augmented training on the synthetic corpus, several seeds.

    python scripts/run_mitigation.py --out runs/mitigation --seeds 5 --epochs 40

Writes per-run fairness reports plus a summary.json with median PD and F1.
"""
import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from fairwake import augment, corpus, fairness, training
from fairwake.augment import AugmentationPolicy
from fairwake.training import TrainConfig


@dataclass
class MitigationConfig:
    out: str = "runs/mitigation"
    seeds: int = 5
    epochs: int = 40
    hidden_size: int = 200
    corpus_seed: int = 2024
    apply_probability: float = 0.2
    techniques: list = field(default_factory=lambda: [augment.FREQ_MASK])
    attribute: str = "sex"


def overall_f1(preds):
    tp = sum(p.predicted_label and p.true_label for p in preds)
    fp = sum(p.predicted_label and not p.true_label for p in preds)
    fn = sum(p.true_label and not p.predicted_label for p in preds)
    return fairness.f1_from_counts(tp, fp, fn)[2]


def run_arm(name, cfg, data, policy, out):
    test = data.windows("test")
    results = []
    for seed in range(cfg.seeds):
        t0 = time.perf_counter()
        det, hist = training.train(TrainConfig(max_epochs=cfg.epochs, seed=seed, hidden_size=cfg.hidden_size),
                                   data, policy)
        preds = training.predict(det, test)
        rep = fairness.build_report(preds, data.rows, [cfg.attribute])
        run_dir = out / name / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "report.json").write_text(rep.to_json())
        pd = rep.attribute(cfg.attribute).pd
        results.append({"seed": seed, "pd": pd, "f1": overall_f1(preds), "epochs": len(hist.records),
                        "seconds": round(time.perf_counter() - t0, 1)})
        logging.info("%s seed %d: PD %.4f F1 %.4f", name, seed, pd, results[-1]["f1"])
    return results


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for k, v in asdict(MitigationConfig()).items():
        if not isinstance(v, list):
            ap.add_argument(f"--{k.replace('_', '-')}", type=type(v), default=v)
    cfg = MitigationConfig(**vars(ap.parse_args()))
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(cfg.out)
    manifest = corpus.synth_corpus(corpus.SynthSpec(seed=cfg.corpus_seed), out / "corpus")
    data = corpus.Corpus.from_manifest(manifest)
    policy = AugmentationPolicy(apply_probability=cfg.apply_probability, enabled=tuple(cfg.techniques))

    arms = {"baseline": run_arm("baseline", cfg, data, None, out),
            "augmented": run_arm("augmented", cfg, data, policy, out)}
    summary = {"config": asdict(cfg), "runs": arms}
    for name, rs in arms.items():
        summary[name] = {"median_pd": float(np.median([r["pd"] for r in rs])),
                         "median_f1": float(np.median([r["f1"] for r in rs]))}
    base_pd, aug_pd = summary["baseline"]["median_pd"], summary["augmented"]["median_pd"]
    if base_pd > 0:
        summary["rrpd"] = fairness.rrpd(base_pd, aug_pd)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps({k: v for k, v in summary.items() if k not in ("runs", "config")}, indent=2))


if __name__ == "__main__":
    main()
