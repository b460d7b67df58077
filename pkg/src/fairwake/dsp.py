"""Signal-processing kernels: STFT/ISTFT, power spectrogram, mel filterbank, MFCC."""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct

from fairwake.errors import ConfigError, DataError, LengthError

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
N_MFCC = 13
N_MFCC_MELS = 40


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class FrameConfig:
    window_ms: float = 100.0
    hop_ms: float = 50.0
    fft_size: int = 2048
    window_fn: str = "hann"
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not 0 < self.hop_ms <= self.window_ms:
            raise ConfigError(f"need 0 < hop_ms <= window_ms, got {self.hop_ms}, {self.window_ms}")
        if self.window_fn != "hann":
            raise ConfigError(f"unsupported window {self.window_fn!r}")
        if self.fft_size < self.win_length:
            raise ConfigError(f"fft_size {self.fft_size} shorter than window ({self.win_length} samples)")

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window(self) -> np.ndarray:
        # periodic Hann: sums to a constant at hop = win / k
        n = np.arange(self.win_length)
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / self.win_length)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            raise LengthError(f"signal of {n_samples} samples is shorter than one window ({self.win_length})")
        return (n_samples - self.win_length) // self.hop_length + 1

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.sample_rate / self.fft_size


@dataclass
class ComplexSpectrogram:
    frames: np.ndarray  # T x F complex
    config: FrameConfig
    length: int  # number of input samples analysed

    @property
    def sample_rate(self) -> int:
        return self.config.sample_rate


@dataclass
class Spectrogram:
    values: np.ndarray  # T x F power
    config: FrameConfig = field(default_factory=FrameConfig)

    @property
    def sample_rate(self) -> int:
        return self.config.sample_rate


@dataclass
class MelMatrix:
    weights: np.ndarray  # n_mels x F
    center_freqs: np.ndarray


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _check_rate(w: Waveform, cfg: FrameConfig):
    if w.sample_rate != cfg.sample_rate:
        raise ConfigError(f"waveform at {w.sample_rate} Hz, frame config expects {cfg.sample_rate} Hz")


def frame_signal(x: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Return the (T, win) matrix of raw, unwindowed frames."""
    t = cfg.n_frames(x.shape[-1])
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(t)[:, None]
    return x[..., idx]


def stft(w: Waveform, cfg: FrameConfig | None = None) -> ComplexSpectrogram:
    cfg = cfg or FrameConfig()
    _check_rate(w, cfg)
    frames = frame_signal(w.samples, cfg) * cfg.window()
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=-1)
    return ComplexSpectrogram(spec, cfg, len(w))


def is_cola(cfg: FrameConfig, tol: float = 1e-10) -> bool:
    """True if shifted copies of the analysis window sum to a constant."""
    win, hop = cfg.win_length, cfg.hop_length
    w = cfg.window()
    acc = np.zeros(hop)
    for start in range(0, win, hop):
        seg = w[start:start + hop]
        acc[: seg.shape[0]] += seg
    return bool(np.ptp(acc) <= tol * max(acc.max(), 1.0))


def istft_from_polar(magnitude: np.ndarray, phase: np.ndarray, cfg: FrameConfig, length: int | None = None) -> Waveform:
    """Overlap-add synthesis from a magnitude matrix and an analysis phase matrix."""
    return _overlap_add(magnitude * np.exp(1j * phase), cfg, length)


def istft(s: ComplexSpectrogram, cfg: FrameConfig | None = None) -> Waveform:
    cfg = cfg or s.config
    return _overlap_add(s.frames, cfg, None)


def _overlap_add(frames: np.ndarray, cfg: FrameConfig, length: int | None) -> Waveform:
    if not is_cola(cfg):
        raise ConfigError(f"window/hop ({cfg.win_length}/{cfg.hop_length}) is not COLA-compliant")
    t = frames.shape[0]
    win, hop = cfg.win_length, cfg.hop_length
    span = (t - 1) * hop + win
    w = cfg.window()
    segs = np.fft.irfft(frames, n=cfg.fft_size, axis=-1)[:, :win] * w
    out = np.zeros(span)
    env = np.zeros(span)
    w2 = w * w
    for i in range(t):
        out[i * hop:i * hop + win] += segs[i]
        env[i * hop:i * hop + win] += w2
    nz = env > 1e-12
    out[nz] /= env[nz]
    out[~nz] = 0.0
    if length is not None:
        if length >= span:
            out = np.pad(out, (0, length - span))
        else:
            out = out[:length]
    return Waveform(out, cfg.sample_rate)


def power_spectrogram(s: ComplexSpectrogram) -> Spectrogram:
    z = s.frames
    return Spectrogram(z.real ** 2 + z.imag ** 2, s.config)


def mel_filterbank(fft_size: int, n_mels: int, sample_rate: int = SAMPLE_RATE) -> MelMatrix:
    """Triangular filters with centres equally spaced on the mel scale over [0, Nyquist]."""
    if n_mels < 1:
        raise ConfigError("n_mels must be >= 1")
    nyquist = sample_rate / 2
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges_hz[:-2, None], edges_hz[1:-1, None], edges_hz[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise ConfigError(
            f"{n_mels} mel filters too many for fft_size={fft_size}: filter {int(empty[0])} covers no bins"
        )
    return MelMatrix(weights, edges_hz[1:-1].copy())


_MEL_CACHE: dict[tuple[int, int, int], MelMatrix] = {}


def _cached_bank(fft_size, n_mels, sample_rate):
    key = (fft_size, n_mels, sample_rate)
    if key not in _MEL_CACHE:
        _MEL_CACHE[key] = mel_filterbank(fft_size, n_mels, sample_rate)
    return _MEL_CACHE[key]


def mfcc_features(w: Waveform, cfg: FrameConfig | None = None, n_mfcc: int = N_MFCC,
                  n_mels: int = N_MFCC_MELS, eps: float = LOG_FLOOR) -> np.ndarray:
    """T x n_mfcc cepstra; coefficient 0 holds ln(raw frame energy + eps)."""
    cfg = cfg or FrameConfig()
    _check_rate(w, cfg)
    return mfcc_batch(w.samples[None, :], cfg, n_mfcc, n_mels, eps)[0]


def mfcc_batch(x: np.ndarray, cfg: FrameConfig | None = None, n_mfcc: int = N_MFCC,
               n_mels: int = N_MFCC_MELS, eps: float = LOG_FLOOR) -> np.ndarray:
    """Vectorised MFCC over a (B, N) stack of equal-length signals -> (B, T, n_mfcc)."""
    cfg = cfg or FrameConfig()
    raw = frame_signal(np.asarray(x, dtype=np.float64), cfg)  # B x T x win
    spec = np.fft.rfft(raw * cfg.window(), n=cfg.fft_size, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    bank = _cached_bank(cfg.fft_size, n_mels, cfg.sample_rate)
    log_mel = np.log(power @ bank.weights.T + eps)
    ceps = dct(log_mel, type=2, norm="ortho", axis=-1)[..., :n_mfcc]
    ceps[..., 0] = np.log(np.sum(raw * raw, axis=-1) + eps)
    return ceps


def read_wav(path: str | Path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a 16-bit mono PCM WAV, amplitudes scaled to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                raise DataError(f"{path}: expected 16-bit mono PCM")
            rate = fh.getframerate()
            data = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    if rate != expected_rate:
        raise DataError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (no resampling)")
    pcm = np.frombuffer(data, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32768.0, rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())
