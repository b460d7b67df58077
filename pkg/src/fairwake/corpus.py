"""Demographic manifests, fixed-length evaluation windows and a synthetic biased corpus."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from fairwake import dsp
from fairwake.augment import ImpulseResponse
from fairwake.dsp import SAMPLE_RATE, Waveform
from fairwake.errors import ConfigError, DataError

log = logging.getLogger(__name__)

WINDOW_SECONDS = 1.5
WINDOW_SAMPLES = int(WINDOW_SECONDS * SAMPLE_RATE)
MIN_UTTERANCE_SECONDS = 0.1

LABELS = ("wuw", "unknown")
SOUND_TYPES = ("speech", "noise")
SEXES = ("female", "male")
AGE_GROUPS = ("0-20", "21-30", "31-40", "41-50", "51+")
SPLITS = ("train", "validation", "test")
ROLES = ("noise", "rir", "dir")


class ManifestParseError(DataError):
    pass


@dataclass
class Utterance:
    id: str
    audio_path: str
    split: str
    label: str | None = None
    sound_type: str = "speech"
    speaker_id: str = "unknown"
    sex: str = "unknown"
    age_group: str = "unknown"
    accent: str = "unknown"
    event_start: float | None = None
    event_end: float | None = None
    role: str | None = None  # augmentation resource rows: noise / rir / dir

    @property
    def is_example(self) -> bool:
        return self.role is None

    @property
    def target(self) -> int:
        return int(self.label == "wuw")

    def to_dict(self) -> dict:
        return asdict(self)


_FIELD_NAMES = {f.name for f in fields(Utterance)}


def _normalise(u: Utterance) -> Utterance:
    if u.sex not in SEXES:
        u.sex = "unknown"
    if u.age_group not in AGE_GROUPS:
        u.age_group = "unknown"
    if not u.accent:
        u.accent = "unknown"
    if not u.speaker_id:
        u.speaker_id = "unknown"
    return u


def parse_utterance(record: dict, lineno: int = 0) -> Utterance:
    where = f"line {lineno}: " if lineno else ""
    if not isinstance(record, dict):
        raise ManifestParseError(f"{where}expected a JSON object")
    for req in ("id", "audio_path", "split"):
        if record.get(req) in (None, ""):
            raise ManifestParseError(f"{where}missing required field '{req}'")
    unknown = set(record) - _FIELD_NAMES
    if unknown:
        raise ManifestParseError(f"{where}unknown field(s) {sorted(unknown)}")
    u = Utterance(**record)
    if u.split not in SPLITS:
        raise ManifestParseError(f"{where}split must be one of {SPLITS}, got {u.split!r}")
    if u.sound_type not in SOUND_TYPES:
        raise ManifestParseError(f"{where}sound_type must be one of {SOUND_TYPES}, got {u.sound_type!r}")
    if u.role is not None and u.role not in ROLES:
        raise ManifestParseError(f"{where}role must be one of {ROLES}, got {u.role!r}")
    if u.is_example:
        if u.label is None and u.sound_type == "speech":
            raise ManifestParseError(f"{where}speech row {u.id!r} missing field 'label'")
        if u.label is None:
            u.label = "unknown"
        if u.label not in LABELS:
            raise ManifestParseError(f"{where}label must be one of {LABELS}, got {u.label!r}")
    return _normalise(u)


def load_manifest(path: str | Path) -> list[Utterance]:
    rows: list[Utterance] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"line {lineno}: {exc.msg}") from exc
            u = parse_utterance(record, lineno)
            if u.id in seen:
                raise DataError(f"line {lineno}: duplicate id {u.id!r}")
            seen.add(u.id)
            rows.append(u)
    return rows


def dump_manifest(rows: Sequence[Utterance]) -> str:
    return "".join(json.dumps(u.to_dict(), ensure_ascii=False) + "\n" for u in rows)


def write_manifest(path: str | Path, rows: Sequence[Utterance]) -> None:
    Path(path).write_text(dump_manifest(rows), encoding="utf-8")


# ----------------------------------------------------------------- windows

@dataclass(frozen=True)
class EvalWindow:
    utterance_id: str
    window_index: int
    start: int  # sample offsets; stop may run past the utterance (zero padded)
    stop: int
    label: int

    def extract(self, samples: np.ndarray) -> np.ndarray:
        seg = samples[max(self.start, 0):self.stop]
        return np.pad(seg, (0, (self.stop - self.start) - seg.shape[0]))


def window_utterance(u: Utterance, w: Waveform, window_samples: int = WINDOW_SAMPLES) -> list[EvalWindow]:
    n = len(w)
    if n < MIN_UTTERANCE_SECONDS * w.sample_rate:
        log.warning("skipping %s: %.3f s is shorter than %.1f s", u.id, n / w.sample_rate, MIN_UTTERANCE_SECONDS)
        return []
    y = u.target
    if u.label == "wuw" and u.event_start is not None and u.event_end is not None:
        centre = 0.5 * (u.event_start + u.event_end) * w.sample_rate
        start = int(round(centre)) - window_samples // 2
        start = min(max(start, 0), max(n - window_samples, 0))
        return [EvalWindow(u.id, 0, start, start + window_samples, y)]
    count = int(math.ceil(n / window_samples))
    return [EvalWindow(u.id, k, k * window_samples, (k + 1) * window_samples, y) for k in range(count)]


@dataclass
class WindowSet:
    keys: list[tuple[str, int]]
    audio: np.ndarray  # (N, window_samples)
    labels: np.ndarray  # (N,) int

    def __len__(self):
        return len(self.keys)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=int)
        return WindowSet([self.keys[i] for i in idx], self.audio[idx], self.labels[idx])


@dataclass
class Corpus:
    root: Path
    rows: list[Utterance]
    _audio: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_manifest(cls, path: str | Path) -> "Corpus":
        path = Path(path)
        return cls(path.parent, load_manifest(path))

    def waveform(self, u: Utterance) -> Waveform:
        if u.id not in self._audio:
            self._audio[u.id] = dsp.read_wav(self.root / u.audio_path)
        return self._audio[u.id]

    def examples(self, split: str) -> list[Utterance]:
        return [u for u in self.rows if u.is_example and u.split == split]

    def windows(self, split: str) -> WindowSet:
        keys, audio, labels = [], [], []
        for u in self.examples(split):
            w = self.waveform(u)
            for ew in window_utterance(u, w):
                keys.append((ew.utterance_id, ew.window_index))
                audio.append(ew.extract(w.samples))
                labels.append(ew.label)
        arr = np.stack(audio) if audio else np.zeros((0, WINDOW_SAMPLES))
        return WindowSet(keys, arr, np.asarray(labels, dtype=int))

    def noises(self, split: str | None = None) -> list[Waveform]:
        return [self.waveform(u) for u in self.rows if u.role == "noise" and split in (None, u.split)]

    def impulse_responses(self, role: str, split: str | None = None) -> list[ImpulseResponse]:
        return [ImpulseResponse(self.waveform(u).samples, SAMPLE_RATE, u.id)
                for u in self.rows if u.role == role and split in (None, u.split)]


# ------------------------------------------------------------ synthesis

@dataclass
class SynthGroup:
    label: str
    sex: str = "unknown"
    age_group: str = "unknown"
    accent: str = "unknown"
    f0_hz: float = 150.0
    band_hz: tuple[float, float] = (300.0, 2000.0)
    counts: dict | None = None  # split -> [positives, negatives]; None uses SynthSpec.counts


def _default_groups():
    return [
        SynthGroup("A", "male", "41-50", "central_southern", 120.0, (250.0, 1200.0)),
        SynthGroup("B", "female", "21-30", "northern", 240.0, (600.0, 3000.0)),
    ]


@dataclass
class SynthSpec:
    groups: list[SynthGroup] = field(default_factory=_default_groups)
    counts: dict = field(default_factory=lambda: {"train": [60, 60], "validation": [10, 10], "test": [20, 20]})
    noise_level: float = 0.02
    seed: int = 0
    duration_s: float = 2.0
    speakers_per_group: int = 6
    n_noise: int = 3
    n_rir: int = 3
    n_dir: int = 4

    def __post_init__(self):
        self.groups = [g if isinstance(g, SynthGroup) else SynthGroup(**g) for g in self.groups]
        if len(self.groups) < 2:
            raise ConfigError("synthetic corpus needs at least 2 groups")
        for g in self.groups:
            for split, pn in (g.counts or self.counts).items():
                if split not in SPLITS or len(pn) != 2 or min(pn) < 0:
                    raise ConfigError(f"group {g.label}: bad counts {split}: {pn}")
        if self.duration_s < 1.0:
            raise ConfigError("duration_s must be >= 1.0")


MOTIF_FIRST_S = 0.4
MOTIF_SECOND_S = 0.25
MOTIF_RATIO = 1.5


def harmonic_tone(f0: float, dur: float, band: tuple[float, float], rng: np.random.Generator,
                  sr: int = SAMPLE_RATE) -> np.ndarray:
    """Harmonic complex with unit fundamental; harmonics inside `band` are emphasised."""
    t = np.arange(int(round(dur * sr))) / sr
    out = np.zeros_like(t)
    k = 1
    while k * f0 < 0.45 * sr:
        fk = k * f0
        amp = 1.0 if k == 1 else (0.5 if band[0] <= fk <= band[1] else 0.12 / k)
        out += amp * np.sin(2 * np.pi * fk * t + rng.uniform(0, 2 * np.pi))
        k += 1
    ramp = min(int(0.01 * sr), t.shape[0] // 2)
    env = np.ones_like(t)
    env[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    env[t.shape[0] - ramp:] = env[:ramp][::-1]
    return out * env


def _motif(f0, ratio, band, rng):
    return np.concatenate([harmonic_tone(f0, MOTIF_FIRST_S, band, rng),
                           harmonic_tone(f0 * ratio, MOTIF_SECOND_S, band, rng)])


def _band_noise(dur, lo, hi, rng, sr=SAMPLE_RATE):
    n = int(round(dur * sr))
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / sr)
    spec[(f < lo) | (f > hi)] = 0
    x = np.fft.irfft(spec, n)
    return x / (np.max(np.abs(x)) + 1e-12)


def _place(event: np.ndarray, n: int, rng) -> tuple[np.ndarray, int]:
    margin = int(0.1 * SAMPLE_RATE)
    hi = max(margin, n - event.shape[0] - margin)
    onset = int(rng.integers(margin, hi + 1)) if hi > margin else 0
    buf = np.zeros(n)
    seg = event[: n - onset]
    buf[onset:onset + seg.shape[0]] = seg
    return buf, onset


def synth_utterance(group: SynthGroup, positive: bool, kind: str, f0: float, n: int, noise_level: float,
                    rng: np.random.Generator) -> tuple[np.ndarray, tuple[float, float] | None]:
    if positive:
        event = _motif(f0, MOTIF_RATIO, group.band_hz, rng)
    elif kind == "single":
        event = harmonic_tone(f0, MOTIF_FIRST_S + MOTIF_SECOND_S, group.band_hz, rng)
    elif kind == "near_miss":
        event = _motif(f0, float(rng.choice([1.2, 0.75, 1.0])), group.band_hz, rng)
    else:
        event = _band_noise(0.5, *group.band_hz, rng)
    event = event / np.max(np.abs(event))
    x, onset = _place(event, n, rng)
    x = 0.5 * x + noise_level * rng.standard_normal(n)
    span = (onset / SAMPLE_RATE, (onset + event.shape[0]) / SAMPLE_RATE) if positive else None
    return np.clip(x, -1.0, 1.0), span


def _rir(rng, sr=SAMPLE_RATE):
    rt60 = rng.uniform(0.15, 0.45)
    n = int(0.3 * sr)
    t = np.arange(n) / sr
    h = rng.standard_normal(n) * np.exp(-6.9 * t / rt60)
    h[0] = 1.0
    return h / np.max(np.abs(h))


def _dir(rng, taps=64):
    # random smooth device colouration: windowed-sinc lowpass plus a small resonance
    cutoff = rng.uniform(0.25, 0.45)
    k = np.arange(taps) - (taps - 1) / 2
    h = np.sinc(2 * cutoff * k) * np.hanning(taps)
    h += 0.2 * rng.standard_normal(taps) * np.hanning(taps)
    return h / np.max(np.abs(h))


NEGATIVE_KINDS = ("single", "near_miss", "noise")


def synth_corpus(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write WAVs plus manifest.jsonl under out_dir and return the manifest path."""
    out = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration_s * SAMPLE_RATE))
    rows: list[Utterance] = []
    for split in SPLITS:
        (out / split).mkdir(parents=True, exist_ok=True)
    for g in spec.groups:
        counts = g.counts or spec.counts
        speaker_scale = 1.0 + rng.uniform(-0.04, 0.04, size=spec.speakers_per_group)
        serial = 0
        for split in SPLITS:
            n_pos, n_neg = counts.get(split, (0, 0))
            for positive, count in ((True, n_pos), (False, n_neg)):
                for i in range(count):
                    spk = serial % spec.speakers_per_group
                    serial += 1
                    kind = "wuw" if positive else NEGATIVE_KINDS[i % len(NEGATIVE_KINDS)]
                    f0 = g.f0_hz * speaker_scale[spk] * (1.0 + rng.uniform(-0.02, 0.02))
                    x, span = synth_utterance(g, positive, kind, f0, n, spec.noise_level, rng)
                    uid = f"{split}_{g.label}_{'pos' if positive else 'neg'}_{i:04d}"
                    rel = f"{split}/{uid}.wav"
                    dsp.write_wav(out / rel, Waveform(x))
                    rows.append(Utterance(
                        id=uid, audio_path=rel, split=split, label="wuw" if positive else "unknown",
                        sound_type="noise" if kind == "noise" else "speech",
                        speaker_id=f"{g.label}_spk{spk}", sex=g.sex, age_group=g.age_group, accent=g.accent,
                        event_start=span[0] if span else None, event_end=span[1] if span else None,
                    ))
    (out / "resources").mkdir(exist_ok=True)
    for i in range(spec.n_noise):
        x = 0.3 * _band_noise(3.0, 50.0, rng.uniform(2000.0, 7900.0), rng)
        rows.append(_resource(out, f"noise_{i:02d}", "noise", "validation", x))
    for i in range(spec.n_rir):
        rows.append(_resource(out, f"rir_{i:02d}", "rir", "validation", 0.9 * _rir(rng)))
    for i in range(spec.n_dir):
        rows.append(_resource(out, f"dir_{i:02d}", "dir", "train", 0.9 * _dir(rng)))
    path = out / "manifest.jsonl"
    write_manifest(path, rows)
    return path


def _resource(out: Path, uid: str, role: str, split: str, x: np.ndarray) -> Utterance:
    rel = f"resources/{uid}.wav"
    dsp.write_wav(out / rel, Waveform(x))
    return Utterance(id=uid, audio_path=rel, split=split, sound_type="noise", role=role)
