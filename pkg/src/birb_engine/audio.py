"""Audio decoding, resampling and mel-spectrogram front ends.

Two front ends share one STFT + mel filterbank path:

* ``compute_log_melspec``: ``log_scale * log(max(mel, log_floor))``, used by
  the peak finder.
* ``compute_pcen_melspec``: per-channel energy normalization on the same mel
  magnitudes, used by the pooled-melspec embedder.

Frames are not centered: frame ``t`` covers samples
``[t * hop, t * hop + window)``, so a waveform of ``n`` samples yields
``(n - window) // hop + 1`` frames.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.signal

from .errors import UnreadableFile, UnsupportedCodec, WaveformTooShort

DEFAULT_SAMPLE_RATE = 32000

# Frames per FFT block; bounds peak memory on hour-long recordings.
_STFT_BLOCK = 2048


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ValueError("Waveform samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("Waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)

    def segment(self, start: float, length: float) -> "Waveform":
        """Cut ``[start, start + length)`` seconds, zero-padding past the end."""
        n = int(round(length * self.sample_rate))
        i0 = int(round(start * self.sample_rate))
        out = np.zeros(n, dtype=np.float32)
        chunk = self.samples[max(i0, 0):max(i0 + n, 0)]
        offset = max(-i0, 0)
        out[offset:offset + len(chunk)] = chunk[: n - offset]
        return Waveform(out, self.sample_rate)

    def pad_to(self, duration: float) -> "Waveform":
        """Zero-pad at the end up to ``duration`` seconds (never truncates)."""
        n = int(round(duration * self.sample_rate))
        if n <= len(self.samples):
            return self
        return Waveform(np.pad(self.samples, (0, n - len(self.samples))), self.sample_rate)


@dataclass(frozen=True)
class SpectrogramParams:
    """STFT/mel settings. Durations in seconds, frequencies in Hz."""

    window_len: float = 0.08
    hop: float = 0.01
    n_mels: int = 160
    log_floor: float = 0.01
    log_scale: float = 0.1
    fmin: float = 60.0
    fmax: float = 10000.0

    def __post_init__(self):
        if not self.hop > 0 or self.window_len < self.hop:
            raise ValueError("need window_len >= hop > 0")
        if self.n_mels <= 0:
            raise ValueError("n_mels must be positive")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if not 0 <= self.fmin < self.fmax:
            raise ValueError("need 0 <= fmin < fmax")

    @property
    def frame_rate(self) -> float:
        return 1.0 / self.hop

    def frame_sizes(self, sample_rate: int) -> tuple[int, int]:
        """(window, hop) in samples."""
        return int(round(self.window_len * sample_rate)), int(round(self.hop * sample_rate))

    def num_frames(self, num_samples: int, sample_rate: int) -> int:
        win, hop = self.frame_sizes(sample_rate)
        if num_samples < win:
            return 0
        return (num_samples - win) // hop + 1

    @classmethod
    def from_config(cls, cfg: dict) -> "SpectrogramParams":
        """Build from a ``melspec`` config section (``window_ms``, ``hop_ms``, ...)."""
        kw = {}
        if "window_ms" in cfg:
            kw["window_len"] = cfg["window_ms"] / 1000.0
        if "hop_ms" in cfg:
            kw["hop"] = cfg["hop_ms"] / 1000.0
        for key in ("n_mels", "log_floor", "log_scale", "fmin", "fmax"):
            if key in cfg:
                kw[key] = cfg[key]
        return cls(**kw)


@dataclass(frozen=True)
class PcenParams:
    smoothing_coef: float = 0.1
    gain: float = 0.8
    bias: float = 10.0
    exponent: float = 0.25
    eps: float = 1e-6

    def __post_init__(self):
        if not 0 < self.smoothing_coef < 1:
            raise ValueError("smoothing_coef must lie in (0, 1)")
        if self.gain < 0 or self.exponent <= 0 or self.eps <= 0:
            raise ValueError("need gain >= 0, exponent > 0, eps > 0")

    @classmethod
    def from_config(cls, cfg: dict) -> "PcenParams":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in cfg.items() if k in names})


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # (frames, n_mels)
    frame_rate: float
    params: SpectrogramParams = field(default_factory=SpectrogramParams)

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


# -- decoding ----------------------------------------------------------------

def load_waveform(path, target_rate: int = DEFAULT_SAMPLE_RATE, quality: float = 5.0) -> Waveform:
    """Decode a WAV/FLAC file to a mono waveform at ``target_rate``.

    Multichannel audio is averaged across channels. ``quality`` is the Kaiser
    beta of the resampling filter.
    """
    import soundfile as sf

    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such file: {path}")
    try:
        info = sf.info(str(path))
    except Exception as exc:  # soundfile raises its own RuntimeError subclass
        raise UnreadableFile(f"cannot open {path}: {exc}") from exc
    if info.format not in ("WAV", "WAVEX", "FLAC", "RF64"):
        raise UnsupportedCodec(f"{path}: container {info.format} is not supported")
    try:
        data, rate = sf.read(str(path), dtype="float32", always_2d=True)
    except Exception as exc:
        raise UnsupportedCodec(f"cannot decode {path}: {exc}") from exc
    mono = data.mean(axis=1, dtype=np.float64) if data.shape[1] > 1 else data[:, 0]
    return resample(Waveform(mono, rate), target_rate, quality=quality)


def resample(w: Waveform, target_rate: int, quality: float = 5.0) -> Waveform:
    """Polyphase windowed-sinc resampling (Kaiser window of beta ``quality``)."""
    if w.sample_rate == target_rate:
        return w
    ratio = Fraction(target_rate, w.sample_rate)
    out = scipy.signal.resample_poly(
        w.samples.astype(np.float64), ratio.numerator, ratio.denominator,
        window=("kaiser", quality),
    )
    n = int(round(len(w.samples) * target_rate / w.sample_rate))
    return Waveform(out[:n], target_rate)


# -- spectrograms ------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft: int, sample_rate: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular HTK-mel filterbank of shape (n_fft // 2 + 1, n_mels), unit peaks."""
    if fmax > sample_rate / 2:
        raise ValueError(f"fmax {fmax} exceeds Nyquist {sample_rate / 2}")
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    f = freqs[:, None]
    rising = (f - lower) / (center - lower)
    falling = (upper - f) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_magnitudes(w: Waveform, p: SpectrogramParams) -> np.ndarray:
    """Mel-filtered STFT magnitudes, shape (frames, n_mels).

    Magnitudes are normalized by the window sum, so a full-scale sinusoid
    peaks near 0.5.
    """
    win, hop = p.frame_sizes(w.sample_rate)
    if len(w.samples) < win:
        raise WaveformTooShort(
            f"{len(w.samples)} samples is shorter than the {win}-sample analysis window")
    window = scipy.signal.get_window("hann", win)
    fb = mel_filterbank(win, w.sample_rate, p.n_mels, p.fmin, p.fmax)
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, win)[::hop]
    out = np.empty((len(frames), p.n_mels))
    scale = 1.0 / window.sum()
    for i in range(0, len(frames), _STFT_BLOCK):
        block = frames[i:i + _STFT_BLOCK].astype(np.float64) * window
        mag = np.abs(np.fft.rfft(block, axis=1)) * scale
        out[i:i + _STFT_BLOCK] = mag @ fb
    return out


def compute_log_melspec(w: Waveform, p: SpectrogramParams | None = None) -> MelSpectrogram:
    p = p or SpectrogramParams()
    mel = mel_magnitudes(w, p)
    values = p.log_scale * np.log(np.maximum(mel, p.log_floor))
    return MelSpectrogram(values, p.frame_rate, p)


def pcen(mel: np.ndarray, q: PcenParams | None = None) -> np.ndarray:
    """Per-channel energy normalization along axis 0 (time).

    The smoother is a one-pole low-pass seeded with the first frame, so a
    constant input sits at steady state from frame 0.
    """
    q = q or PcenParams()
    mel = np.asarray(mel, dtype=np.float64)
    s = q.smoothing_coef
    zi = (1.0 - s) * mel[:1]
    smoothed, _ = scipy.signal.lfilter([s], [1.0, s - 1.0], mel, axis=0, zi=zi)
    agc = mel / (q.eps + smoothed) ** q.gain
    return (agc + q.bias) ** q.exponent - q.bias ** q.exponent


def compute_pcen_melspec(w: Waveform, p: SpectrogramParams | None = None,
                         q: PcenParams | None = None) -> MelSpectrogram:
    p = p or SpectrogramParams()
    return MelSpectrogram(pcen(mel_magnitudes(w, p), q), p.frame_rate, p)
