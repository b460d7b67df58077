"""Spectrum-level and time-domain augmentations plus the probability-gated policy.

Magnitude-domain transforms act on power spectrograms; waveforms are rebuilt with
the untouched analysis phase. DIR convolution runs directly in the time domain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from fairwake import dsp
from fairwake.dsp import FrameConfig, Spectrogram, Waveform
from fairwake.errors import ConfigError, DimensionError

FREQ_MIX_STYLE = "freq_mix_style"
FILTER_AUGMENT = "filter_augment"
FREQ_MASK = "freq_mask"
DIR = "dir"
TECHNIQUES = (FREQ_MIX_STYLE, FILTER_AUGMENT, FREQ_MASK, DIR)


@dataclass
class FreqMixStyleConfig:
    alpha: float = 0.4
    same_label_only: bool = True
    eps: float = 1e-5
    # "log" mixes statistics of ln(X + floor) and maps back, which keeps X' >= 0
    domain: str = "log"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("FreqMixStyle alpha must be > 0")
        if self.domain not in ("log", "power"):
            raise ConfigError(f"FreqMixStyle domain must be 'log' or 'power', got {self.domain!r}")


@dataclass
class FilterAugmentConfig:
    n_bands_range: tuple[int, int] = (3, 9)
    min_bandwidth_hz: float = 187.0
    gain_db_range: tuple[float, float] = (-6.0, 6.0)
    max_attempts: int = 100

    def __post_init__(self):
        lo, hi = self.n_bands_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad n_bands_range {self.n_bands_range}")
        if self.min_bandwidth_hz <= 0:
            raise ConfigError("min_bandwidth_hz must be > 0")
        self.n_bands_range = (int(lo), int(hi))
        self.gain_db_range = tuple(float(g) for g in self.gain_db_range)


@dataclass
class FreqMaskConfig:
    max_width: int = 30
    n_mels: int = 128

    def __post_init__(self):
        if not 0 <= self.max_width <= self.n_mels:
            raise ConfigError(f"need 0 <= max_width <= n_mels, got {self.max_width}, {self.n_mels}")


@dataclass
class ImpulseResponse:
    taps: np.ndarray
    sample_rate: int = dsp.SAMPLE_RATE
    source_id: str = ""

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if not np.any(self.taps != 0):
            raise ConfigError(f"impulse response {self.source_id!r} has no nonzero taps")


@dataclass
class AugmentationPolicy:
    apply_probability: float = 0.2
    enabled: tuple[str, ...] = (FREQ_MASK,)
    freq_mix_style: FreqMixStyleConfig = field(default_factory=FreqMixStyleConfig)
    filter_augment: FilterAugmentConfig = field(default_factory=FilterAugmentConfig)
    freq_mask: FreqMaskConfig = field(default_factory=FreqMaskConfig)
    impulse_responses: list[ImpulseResponse] = field(default_factory=list)
    stack: bool = False
    frame_config: FrameConfig = field(default_factory=FrameConfig)

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ConfigError(f"apply_probability must be in [0, 1], got {self.apply_probability}")
        self.enabled = tuple(self.enabled)
        unknown = set(self.enabled) - set(TECHNIQUES)
        if unknown:
            raise ConfigError(f"unknown augmentation(s): {sorted(unknown)}")


# ---------------------------------------------------------------- FreqMixStyle

def mix_statistics(xi: np.ndarray, xj: np.ndarray, lam: float, eps: float = 1e-5) -> np.ndarray:
    """Renormalise xi per frequency column to Beta-mixed time statistics of (xi, xj)."""
    mu_i, sd_i = xi.mean(axis=0), xi.std(axis=0)
    mu_j, sd_j = xj.mean(axis=0), xj.std(axis=0)
    mu_new = lam * mu_i + (1 - lam) * mu_j
    sd_new = lam * sd_i + (1 - lam) * sd_j
    return mu_new + (xi - mu_i) * (sd_new / np.maximum(sd_i, eps))


def freq_mix_style(x_i: Spectrogram, x_j: Spectrogram, cfg: FreqMixStyleConfig, rng: np.random.Generator,
                   lam: float | None = None) -> Spectrogram:
    a, b = x_i.values, x_j.values
    if a.shape != b.shape:
        raise DimensionError(f"spectrogram shapes differ: {a.shape} vs {b.shape}")
    if lam is None:
        lam = rng.beta(cfg.alpha, cfg.alpha)
    if cfg.domain == "log":
        floor = dsp.LOG_FLOOR
        out = np.exp(mix_statistics(np.log(a + floor), np.log(b + floor), lam, cfg.eps)) - floor
    else:
        out = mix_statistics(a, b, lam, cfg.eps)
    return Spectrogram(np.maximum(out, 0.0), x_i.config)


# --------------------------------------------------------------- FilterAugment

def filter_augment_weights(freqs: np.ndarray, nodes_hz: np.ndarray, gains_db: np.ndarray) -> np.ndarray:
    """Per-bin power weights from gains (dB) linearly interpolated between node frequencies."""
    return 10.0 ** (np.interp(freqs, nodes_hz, gains_db) / 10.0)


def sample_band_nodes(cfg: FilterAugmentConfig, nyquist: float, rng: np.random.Generator) -> np.ndarray:
    """Band boundaries in Hz (including 0 and Nyquist) with at least min_bandwidth spacing."""
    lo, hi = cfg.n_bands_range
    if nyquist < lo * cfg.min_bandwidth_hz:
        raise ConfigError(f"Nyquist {nyquist} Hz cannot hold {lo} bands of {cfg.min_bandwidth_hz} Hz")
    feasible_hi = min(hi, int(nyquist // cfg.min_bandwidth_hz))
    for _ in range(1000):
        n = int(rng.integers(lo, feasible_hi + 1))
        for _ in range(cfg.max_attempts):
            inner = np.sort(rng.uniform(0.0, nyquist, size=n - 1))
            nodes = np.concatenate([[0.0], inner, [nyquist]])
            if np.all(np.diff(nodes) >= cfg.min_bandwidth_hz):
                return nodes
    raise ConfigError("could not place FilterAugment bands with the requested minimum bandwidth")


def filter_augment(x: Spectrogram, cfg: FilterAugmentConfig, rng: np.random.Generator,
                   gains_db: np.ndarray | None = None) -> Spectrogram:
    fc = x.config
    nodes = sample_band_nodes(cfg, fc.sample_rate / 2, rng)
    if gains_db is None:
        gains_db = rng.uniform(*cfg.gain_db_range, size=nodes.shape[0])
    weights = filter_augment_weights(fc.bin_frequencies()[: x.values.shape[1]], nodes, np.asarray(gains_db))
    # time-invariant mask: one weight per frequency column
    return Spectrogram(x.values * weights[None, :], fc)


# ------------------------------------------------------------ Frequency masking

def mel_band_to_bins(f0: int, width: int, cfg: FreqMaskConfig, frame_cfg: FrameConfig) -> np.ndarray:
    """Boolean mask over linear STFT bins whose centre lies in mel channels [f0, f0 + width)."""
    freqs = frame_cfg.bin_frequencies()
    if width <= 0:
        return np.zeros(freqs.shape[0], dtype=bool)
    nyquist = frame_cfg.sample_rate / 2
    step = dsp.hz_to_mel(nyquist) / cfg.n_mels
    lo_hz = dsp.mel_to_hz(f0 * step)
    hi_hz = dsp.mel_to_hz((f0 + width) * step)
    if f0 + width >= cfg.n_mels:
        return freqs >= lo_hz
    return (freqs >= lo_hz) & (freqs < hi_hz)


def draw_mask_band(cfg: FreqMaskConfig, rng: np.random.Generator) -> tuple[int, int]:
    width = int(rng.integers(0, cfg.max_width + 1))
    f0 = int(rng.integers(0, cfg.n_mels - width + 1))
    return f0, width


def freq_mask(x: Spectrogram, cfg: FreqMaskConfig, rng: np.random.Generator,
              band: tuple[int, int] | None = None) -> Spectrogram:
    f0, width = band if band is not None else draw_mask_band(cfg, rng)
    sel = mel_band_to_bins(f0, width, cfg, x.config)[: x.values.shape[1]]
    out = x.values.copy()
    out[:, sel] = 0.0
    return Spectrogram(out, x.config)


# ------------------------------------------------------------------------ DIR

def dir_convolve(w: Waveform, h: ImpulseResponse) -> Waveform:
    if h.sample_rate != w.sample_rate:
        raise ConfigError(f"impulse response at {h.sample_rate} Hz, waveform at {w.sample_rate} Hz")
    taps = h.taps / np.max(np.abs(h.taps))
    n = len(w)
    if taps.shape[0] <= 64:
        y = np.convolve(w.samples, taps)[:n]
    else:
        y = fftconvolve(w.samples, taps)[:n]
    return Waveform(y, w.sample_rate)


# ---------------------------------------------------------------- validation

def validation_perturb(w: Waveform, noise: Waveform, rir: ImpulseResponse, snr_db: float,
                       rng: np.random.Generator) -> Waveform:
    """Reverberate with `rir`, then add `noise` at `snr_db` relative to the reverberated signal."""
    wet = dir_convolve(w, rir).samples
    if math.isinf(snr_db) and snr_db > 0:
        return Waveform(wet, w.sample_rate)
    n = wet.shape[0]
    src = noise.samples
    if src.shape[0] < n:
        src = np.tile(src, int(math.ceil(n / src.shape[0])))
    start = int(rng.integers(0, src.shape[0] - n + 1))
    seg = src[start:start + n]
    p_noise = np.mean(seg * seg)
    if p_noise <= 0:
        raise ConfigError("noise has zero power; cannot reach a finite SNR")
    p_sig = np.mean(wet * wet)
    gain = math.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return Waveform(wet + gain * seg, w.sample_rate)


# -------------------------------------------------------------------- policy

def _analysis(w: Waveform, cfg: FrameConfig):
    """Pad so every original sample is interior, then STFT. Returns (spec, pad)."""
    pad = cfg.win_length
    n = len(w)
    covered = max(n + 2 * pad, cfg.win_length)
    rem = (covered - cfg.win_length) % cfg.hop_length
    tail = (cfg.hop_length - rem) % cfg.hop_length
    x = np.pad(w.samples, (pad, pad + tail))
    return dsp.stft(Waveform(x, w.sample_rate), cfg), pad


def resynthesise(magnitude: np.ndarray, phase: np.ndarray, cfg: FrameConfig, n: int, pad: int) -> np.ndarray:
    y = dsp.istft_from_polar(magnitude, phase, cfg).samples
    return y[pad:pad + n]


def _spectral(w: Waveform, technique: str, policy: AugmentationPolicy, rng: np.random.Generator,
              partner: Waveform | None) -> Waveform:
    cfg = policy.frame_config
    spec, pad = _analysis(w, cfg)
    power = dsp.power_spectrogram(spec)
    if technique == FREQ_MASK:
        out = freq_mask(power, policy.freq_mask, rng)
    elif technique == FILTER_AUGMENT:
        out = filter_augment(power, policy.filter_augment, rng)
    elif technique == FREQ_MIX_STYLE:
        other, _ = _analysis(partner, cfg)
        out = freq_mix_style(power, dsp.power_spectrogram(other), policy.freq_mix_style, rng)
    else:
        raise ConfigError(f"not a spectral technique: {technique}")
    phase = np.angle(spec.frames)
    return Waveform(resynthesise(np.sqrt(out.values), phase, cfg, len(w), pad), w.sample_rate)


def augment_one(w: Waveform, technique: str, policy: AugmentationPolicy, rng: np.random.Generator,
                partner: Waveform | None = None) -> Waveform:
    if technique == DIR:
        if not policy.impulse_responses:
            raise ConfigError("DIR enabled but no impulse responses were supplied")
        h = policy.impulse_responses[int(rng.integers(len(policy.impulse_responses)))]
        return dir_convolve(w, h)
    return _spectral(w, technique, policy, rng, partner)


def apply_policy(batch: Sequence[tuple[Waveform, int]], policy: AugmentationPolicy, rng: np.random.Generator,
                 return_mask: bool = False):
    """Gate each sample with Bernoulli(p) and apply one enabled technique to gated ones.

    Ungated samples are returned as the same objects. Per-sample generators are
    seeded from `rng` up front so results do not depend on processing order.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    n = len(batch)
    gates = rng.random(n) < policy.apply_probability
    seeds = rng.integers(0, 2 ** 63, size=n)
    out: list[Waveform] = []
    labels = np.array([y for _, y in batch])
    for i, (w, y) in enumerate(batch):
        if not gates[i] or not policy.enabled:
            out.append(w)
            continue
        srng = np.random.default_rng(int(seeds[i]))
        if policy.stack:
            chosen = list(policy.enabled)
        else:
            chosen = [policy.enabled[int(srng.integers(len(policy.enabled)))]]
        cur = w
        for tech in chosen:
            partner = None
            if tech == FREQ_MIX_STYLE:
                if policy.freq_mix_style.same_label_only:
                    cands = np.flatnonzero((labels == y) & (np.arange(n) != i))
                else:
                    cands = np.flatnonzero(np.arange(n) != i)
                if cands.size == 0:
                    continue
                partner = batch[int(cands[srng.integers(cands.size)])][0]
            cur = augment_one(cur, tech, policy, srng, partner)
        out.append(cur)
    if return_mask:
        return out, gates
    return out
