"""Training loop, checkpoint selection, knowledge distillation and teacher-logit files."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from fairwake import augment, dsp, neural
from fairwake.augment import AugmentationPolicy
from fairwake.corpus import Corpus, WindowSet
from fairwake.dsp import Waveform
from fairwake.errors import ConfigError, DataError, DomainError
from fairwake.fairness import PredictionRecord
from fairwake.neural import ModelParams

log = logging.getLogger(__name__)

TeacherLogits = dict  # (utterance_id, window_index) -> np.ndarray of (z_unknown, z_wuw)


@dataclass
class TrainConfig:
    max_epochs: int = 700
    batch_size: int = 128
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    hidden_size: int = 200
    seed: int = 0
    checkpoint_dir: str | None = None
    patience: int = 10
    plateau_threshold: float = 1e-4
    max_reductions: int = 4
    perturb_validation: bool = True
    snr_db_range: tuple[float, float] = (5.0, 20.0)

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        self.snr_db_range = tuple(self.snr_db_range)


@dataclass
class KdConfig:
    delta: float = 0.2
    tau: float = 2.0
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    max_epochs: int = 700
    batch_size: int = 128
    seed: int = 0
    checkpoint_dir: str | None = None
    patience: int = 10
    plateau_threshold: float = 1e-4
    max_reductions: int = 4
    perturb_validation: bool = True
    snr_db_range: tuple[float, float] = (5.0, 20.0)
    teacher_logits: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise DomainError(f"delta must be in [0, 1], got {self.delta}")
        if not self.tau > 0:
            raise DomainError(f"tau must be > 0, got {self.tau}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")

    def loop_config(self) -> TrainConfig:
        return TrainConfig(max_epochs=self.max_epochs, batch_size=self.batch_size, optimizer="sgd",
                           learning_rate=self.learning_rate, momentum=self.momentum,
                           weight_decay=self.weight_decay, seed=self.seed, checkpoint_dir=self.checkpoint_dir,
                           patience=self.patience, plateau_threshold=self.plateau_threshold,
                           max_reductions=self.max_reductions, perturb_validation=self.perturb_validation,
                           snr_db_range=self.snr_db_range)


# ------------------------------------------------------------------ KD loss

def _log_softmax(z, tau=1.0):
    s = np.asarray(z, dtype=np.float64) / tau
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def kl_divergence(p_log: np.ndarray, q_log: np.ndarray) -> np.ndarray:
    """KL(p || q) from log-probabilities, summed over the last axis."""
    return np.sum(np.exp(p_log) * (p_log - q_log), axis=-1)


def kd_loss(student_z, teacher_z, y: int, delta: float = 0.2, tau: float = 2.0) -> float:
    """delta * CE(softmax(student), y) + (1 - delta) * tau^2 * KL(teacher^tau || student^tau)."""
    if not 0.0 <= delta <= 1.0:
        raise DomainError(f"delta must be in [0, 1], got {delta}")
    if not tau > 0:
        raise DomainError(f"tau must be > 0, got {tau}")
    ce = neural.cross_entropy(neural.softmax(student_z), y)
    kl = float(kl_divergence(_log_softmax(teacher_z, tau), _log_softmax(student_z, tau)))
    return delta * ce + (1.0 - delta) * tau * tau * kl


def batch_kd_loss(student_z: np.ndarray, teacher_z: np.ndarray, y: np.ndarray, delta: float,
                  tau: float) -> tuple[float, np.ndarray]:
    """Mean KD loss over a batch and its gradient w.r.t. the student logits."""
    b = student_z.shape[0]
    ce, ce_grad = neural.batch_cross_entropy(student_z, y)
    t_log = _log_softmax(teacher_z, tau)
    s_log = _log_softmax(student_z, tau)
    kl = float(np.mean(kl_divergence(t_log, s_log)))
    # d/dz tau^2 KL = tau * (p_student^tau - p_teacher^tau)
    kl_grad = tau * (np.exp(s_log) - np.exp(t_log)) / b
    return delta * ce + (1.0 - delta) * tau * tau * kl, delta * ce_grad + (1.0 - delta) * kl_grad


# -------------------------------------------------------------- detector

@dataclass
class Detector:
    """GRU parameters plus the feature standardisation they were trained with."""
    params: ModelParams
    feature_mean: np.ndarray
    feature_std: np.ndarray

    def features(self, audio: np.ndarray) -> np.ndarray:
        return (dsp.mfcc_batch(audio) - self.feature_mean) / self.feature_std

    def logits_from_features(self, feats: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [neural.gru_forward(self.params, feats[i:i + batch_size])[0]
               for i in range(0, feats.shape[0], batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.params.n_classes))

    def logits(self, audio: np.ndarray) -> np.ndarray:
        return self.logits_from_features(self.features(audio))

    def scores(self, audio: np.ndarray) -> np.ndarray:
        return neural.softmax(self.logits(audio))[:, neural.WUW]

    def save(self, path, seed: int, meta: dict | None = None) -> None:
        neural.save_checkpoint(path, self.params, seed,
                               {"feature_mean": self.feature_mean, "feature_std": self.feature_std}, meta)

    @classmethod
    def load(cls, path) -> "Detector":
        ck = neural.load_checkpoint(path)
        try:
            return cls(ck.params, ck.extras["feature_mean"], ck.extras["feature_std"])
        except KeyError as exc:
            raise DataError(f"{path}: checkpoint lacks feature statistics ({exc})") from None


def feature_stats(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = feats.reshape(-1, feats.shape[-1])
    return flat.mean(axis=0), np.maximum(flat.std(axis=0), 1e-6)


# ------------------------------------------------------------------ history

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    validation_loss: float
    learning_rate: float
    checkpoint: str | None = None


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int | None = None

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()


def _best_three(records) -> list:
    # later epochs win ties
    return sorted(records, key=lambda r: (r.validation_loss, -r.epoch))[:3]


def select_checkpoint(history: TrainingHistory | list[EpochRecord]) -> EpochRecord:
    """Among the three lowest validation losses, the epoch nearest their mean (later on ties)."""
    records = history.records if isinstance(history, TrainingHistory) else list(history)
    if not records:
        raise ConfigError("no epochs recorded")
    best = _best_three(records)
    mean = sum(r.validation_loss for r in best) / len(best)
    return min(best, key=lambda r: (abs(r.validation_loss - mean), -r.epoch))


# --------------------------------------------------------------------- loop

LossFn = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[float, np.ndarray]]


@dataclass
class _ValidationData:
    windows: WindowSet
    noises: list
    rirs: list


def _perturbed_validation(val: _ValidationData, cfg: TrainConfig, epoch: int) -> np.ndarray:
    if not (cfg.perturb_validation and val.noises and val.rirs):
        return val.windows.audio
    rng = np.random.default_rng([cfg.seed, 1, epoch])
    out = np.empty_like(val.windows.audio)
    for i, x in enumerate(val.windows.audio):
        noise = val.noises[int(rng.integers(len(val.noises)))]
        rir = val.rirs[int(rng.integers(len(val.rirs)))]
        snr = rng.uniform(*cfg.snr_db_range)
        out[i] = augment.validation_perturb(Waveform(x), noise, rir, snr, rng).samples
    return out


def _validation_loss(det: Detector, feats: np.ndarray, labels: np.ndarray) -> float:
    logits = det.logits_from_features(feats)
    return neural.batch_cross_entropy(logits, labels)[0]


def _fit(det: Detector, train: WindowSet, val: _ValidationData, cfg: TrainConfig, loss_fn: LossFn,
         policy: AugmentationPolicy | None) -> tuple[Detector, TrainingHistory]:
    if cfg.optimizer == "adam":
        opt = neural.adam(cfg.learning_rate)
    else:
        opt = neural.sgd_momentum(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    sched = neural.PlateauState(cfg.learning_rate, cfg.patience, 0.1, cfg.plateau_threshold, cfg.max_reductions)
    ckdir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    clean = det.features(train.audio)
    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    history = TrainingHistory()
    snapshots: dict[int, ModelParams] = {}
    params = det.params
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        policy_rng = np.random.default_rng([cfg.seed, 2, epoch])
        order = shuffle_rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x = clean[idx]
            if policy is not None and policy.apply_probability > 0 and policy.enabled:
                batch = [(Waveform(train.audio[i]), int(train.labels[i])) for i in idx]
                waves, gated = augment.apply_policy(batch, policy, policy_rng, return_mask=True)
                if gated.any():
                    x = x.copy()
                    sel = np.flatnonzero(gated)
                    x[sel] = det.features(np.stack([waves[j].samples for j in sel]))
            logits, cache = neural.gru_forward(params, x)
            loss, grad = loss_fn(logits, train.labels[idx], idx)
            grads = neural.gru_backward(cache, grad)
            params = neural.optimizer_step(opt, params, grads)
            total += loss * idx.shape[0]
        det = Detector(params, det.feature_mean, det.feature_std)
        val_feats = det.features(_perturbed_validation(val, cfg, epoch))
        vloss = _validation_loss(det, val_feats, val.windows.labels)
        rec = EpochRecord(epoch, total / n, vloss, opt.learning_rate)
        history.records.append(rec)
        if any(r is rec for r in _best_three(history.records)):
            snapshots[epoch] = params
            if ckdir:
                path = ckdir / f"epoch_{epoch:04d}.ckpt"
                det.save(path, cfg.seed, {"epoch": epoch})
                rec.checkpoint = path.name
        kept = {r.epoch for r in _best_three(history.records)}
        snapshots = {e: p for e, p in snapshots.items() if e in kept}
        lr, stop = neural.plateau_scheduler_update(sched, vloss)
        opt.learning_rate = lr
        log.info("epoch %d train %.4f val %.4f lr %.1e", epoch, rec.train_loss, vloss, rec.learning_rate)
        if stop:
            break
    chosen = select_checkpoint(history)
    history.selected_epoch = chosen.epoch
    return Detector(snapshots[chosen.epoch], det.feature_mean, det.feature_std), history


def _validation_data(corpus: Corpus) -> _ValidationData:
    val = corpus.windows("validation")
    return _ValidationData(val, corpus.noises(), corpus.impulse_responses("rir"))


def _require(ws: WindowSet, split: str):
    if len(ws) == 0:
        raise ConfigError(f"the {split} split is empty")


def train(config: TrainConfig, corpus: Corpus, policy: AugmentationPolicy | None = None
          ) -> tuple[Detector, TrainingHistory]:
    """Train a GRU detector from scratch with CE; returns the selected checkpoint and history."""
    tr = corpus.windows("train")
    _require(tr, "train")
    val = _validation_data(corpus)
    _require(val.windows, "validation")
    if policy is not None and augment.DIR in policy.enabled and not policy.impulse_responses:
        policy = replace(policy, impulse_responses=corpus.impulse_responses("dir"))
    mean, std = feature_stats(dsp.mfcc_batch(tr.audio))
    params = neural.init_params(np.random.default_rng([config.seed, 3]), hidden_size=config.hidden_size)
    det = Detector(params, mean, std)
    return _fit(det, tr, val, config, lambda z, y, idx: neural.batch_cross_entropy(z, y), policy)


def finetune(student_init: Detector, config: KdConfig, corpus: Corpus,
             policy: AugmentationPolicy | None = None) -> tuple[Detector, TrainingHistory]:
    """CE-only fine-tuning with the distillation optimizer and schedule."""
    tr = corpus.windows("train")
    _require(tr, "train")
    val = _validation_data(corpus)
    _require(val.windows, "validation")
    return _fit(student_init, tr, val, config.loop_config(),
                lambda z, y, idx: neural.batch_cross_entropy(z, y), policy)


def distill(student_init: Detector, teacher: Mapping, config: KdConfig, corpus: Corpus,
            policy: AugmentationPolicy | None = None) -> tuple[Detector, TrainingHistory]:
    """Fine-tune the student on the KD objective with SGD-momentum and plateau scheduling."""
    tr = corpus.windows("train")
    _require(tr, "train")
    missing = [k for k in tr.keys if k not in teacher]
    if missing:
        raise DataError(f"teacher logits missing for window {missing[0][0]}#{missing[0][1]} "
                        f"({len(missing)} of {len(tr)} training windows uncovered)")
    val = _validation_data(corpus)
    _require(val.windows, "validation")
    tz = np.stack([np.asarray(teacher[k], dtype=np.float64) for k in tr.keys])
    delta, tau = config.delta, config.tau

    def loss_fn(z, y, idx):
        return batch_kd_loss(z, tz[idx], y, delta, tau)

    return _fit(student_init, tr, val, config.loop_config(), loss_fn, policy)


# ------------------------------------------------------------- teacher logits

def export_toy_teacher_logits(teacher: Detector, corpus: Corpus,
                              splits=("train", "validation")) -> TeacherLogits:
    out: TeacherLogits = {}
    for split in splits:
        ws = corpus.windows(split)
        if len(ws) == 0:
            continue
        for key, z in zip(ws.keys, teacher.logits(ws.audio)):
            out[key] = z
    return out


def dump_teacher_logits(logits: Mapping) -> str:
    lines = []
    for (uid, widx) in sorted(logits):
        z = [float(v) for v in logits[(uid, widx)]]
        lines.append(json.dumps({"id": uid, "window": int(widx), "z": z}) + "\n")
    return "".join(lines)


def write_teacher_logits(path, logits: Mapping) -> None:
    Path(path).write_text(dump_teacher_logits(logits), encoding="utf-8")


def read_teacher_logits(path) -> TeacherLogits:
    out: TeacherLogits = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = (str(rec["id"]), int(rec["window"]))
                z = np.asarray(rec["z"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path} line {lineno}: malformed teacher record ({exc})") from None
            if z.shape != (2,) or not np.all(np.isfinite(z)):
                raise DataError(f"{path} line {lineno}: logits must be 2 finite values")
            out[key] = z
    return out


# --------------------------------------------------------------- inference

def predict(det: Detector, windows: WindowSet) -> list[PredictionRecord]:
    if len(windows) == 0:
        return []
    scores = det.scores(windows.audio)
    return [PredictionRecord(uid, widx, int(y), float(min(max(s, 0.0), 1.0)))
            for (uid, widx), y, s in zip(windows.keys, windows.labels, scores)]


def dump_predictions(preds) -> str:
    return "".join(json.dumps({"id": p.utterance_id, "window": p.window_index, "score": p.score,
                               "label": "wuw" if p.true_label else "unknown"}) + "\n" for p in preds)


def read_predictions(path) -> list[PredictionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                out.append(PredictionRecord(str(r["id"]), int(r["window"]), int(r["label"] == "wuw"),
                                            float(r["score"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path} line {lineno}: malformed prediction ({exc})") from None
    return out


def accuracy(preds) -> float:
    return float(np.mean([p.predicted_label == p.true_label for p in preds])) if preds else math.nan
