"""Peak-finding slice extraction for long focal recordings.

Pipeline per recording: zero-pad to one slice, log-mel spectrogram, two-step
per-bin denoising, sum over mel bins, Ricker-wavelet CWT ridge peaks, energy
filter, then keep the strongest ``max_slices`` peaks as fixed-length slices.
A recording with no surviving peak yields its first slice.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.signal

from .audio import MelSpectrogram, SpectrogramParams, Waveform, compute_log_melspec
from .errors import EmptySpectrogram


@dataclass(frozen=True)
class PeakfindParams:
    slice_len: float = 6.0
    max_slices: int = 5
    outlier_sigma: float = 1.5
    signal_sigma: float = 0.75
    min_peak_width: float = 0.5
    max_peak_width: float = 2.0
    n_widths: int = 10
    peak_window: float = 0.6
    peak_energy_factor: float = 1.5
    literal_energy_filter: bool = False

    def __post_init__(self):
        if not self.min_peak_width < self.max_peak_width:
            raise ValueError("min_peak_width must be below max_peak_width")
        if self.max_slices < 1 or self.n_widths < 1:
            raise ValueError("max_slices and n_widths must be at least 1")
        for name in ("slice_len", "outlier_sigma", "signal_sigma", "min_peak_width",
                     "peak_window", "peak_energy_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def widths(self, frame_rate: float) -> np.ndarray:
        """Wavelet widths in frames, linearly spaced over the peak-width range."""
        return np.linspace(self.min_peak_width * frame_rate,
                           self.max_peak_width * frame_rate, self.n_widths)


@dataclass(frozen=True)
class RidgeParams:
    """Ridge-line settings; ``None`` picks the width-derived default."""

    max_distances: tuple | None = None  # per row, default width / 4
    gap_thresh: float | None = None  # default ceil(smallest width)
    min_length: int | None = None  # default ceil(n_widths / 4)
    min_snr: float = 1.0
    noise_perc: float = 10.0
    window_size: int | None = None  # default ceil(n_frames / 20)


@dataclass(frozen=True)
class Slice:
    recording_id: str
    start: float
    length: float
    peak_score: float

    @property
    def end(self) -> float:
        return self.start + self.length

    def to_json(self) -> dict:
        return {"recording_id": self.recording_id, "start_s": self.start,
                "length_s": self.length, "peak_score": self.peak_score}

    @classmethod
    def from_json(cls, d: dict) -> "Slice":
        return cls(str(d["recording_id"]), float(d["start_s"]), float(d["length_s"]),
                   float(d["peak_score"]))


def denoise(m: MelSpectrogram, outlier_sigma: float = 1.5, signal_sigma: float = 0.75) -> MelSpectrogram:
    """Two-step per-bin denoising.

    Statistics are taken over time for each mel bin. Cells above
    ``mean + outlier_sigma * std`` are dropped before re-estimating the
    statistics; cells above ``mean2 + signal_sigma * std2`` are kept, shifted
    down by ``mean2``, and everything else becomes 0.
    """
    v = np.asarray(m.values, dtype=np.float64)
    if v.size == 0:
        raise EmptySpectrogram("cannot denoise an empty spectrogram")
    # means are clamped to the data range so rounding cannot push a constant
    # bin's mean off its value
    lo, hi = v.min(axis=0), v.max(axis=0)
    mu1 = np.clip(v.mean(axis=0), lo, hi)
    sd1 = v.std(axis=0)
    inliers = v <= mu1 + outlier_sigma * sd1
    # every bin keeps at least its minimum, so counts are never zero
    counts = inliers.sum(axis=0)
    mu2 = np.where(inliers, v, 0.0).sum(axis=0) / counts
    mu2 = np.clip(mu2, lo, np.where(inliers, v, -np.inf).max(axis=0))
    sd2 = np.sqrt(np.where(inliers, (v - mu2) ** 2, 0.0).sum(axis=0) / counts)
    out = np.where(v > mu2 + signal_sigma * sd2, v - mu2, 0.0)
    return MelSpectrogram(out, m.frame_rate, m.params)


def ricker(points: float, width: float) -> np.ndarray:
    """Ricker (Mexican-hat) wavelet centred on ``(points - 1) / 2``.

    A fractional ``points`` gives ``ceil(points)`` samples with the centre
    still at ``(points - 1) / 2``.
    """
    amp = 2.0 / (np.sqrt(3.0 * width) * np.pi ** 0.25)
    t = np.arange(points) - (points - 1.0) / 2.0
    tsq = (t / width) ** 2
    return amp * (1.0 - tsq) * np.exp(-tsq / 2.0)


def cwt_ricker(signal, widths) -> np.ndarray:
    """Continuous wavelet transform with Ricker wavelets, shape (widths, frames).

    Each row is a same-length convolution (zero boundaries) with a kernel
    spanning ``min(10 * width, len(signal))`` frames.
    """
    signal = np.asarray(signal, dtype=np.float64)
    widths = np.atleast_1d(np.asarray(widths, dtype=np.float64))
    out = np.empty((len(widths), len(signal)))
    x_norm = np.linalg.norm(signal)
    for i, width in enumerate(widths):
        n = min(10 * width, len(signal))
        kernel = ricker(n, width)[::-1]
        row = scipy.signal.fftconvolve(signal, kernel, mode="same")
        # below the FFT roundoff bound a value is noise; direct convolution would give
        # smooth (or zero) output there, so flatten it rather than let it seed ridges
        tol = 8 * np.finfo(float).eps * np.log2(len(signal) + len(kernel)) \
            * x_norm * np.linalg.norm(kernel)
        row[np.abs(row) < tol] = 0.0
        out[i] = row
    return out


def _local_maxima(row: np.ndarray) -> np.ndarray:
    """Indices strictly greater than both neighbours; the two ends never qualify."""
    inner = (row[1:-1] > row[:-2]) & (row[1:-1] > row[2:])
    return np.flatnonzero(inner) + 1


def _ridge_lines(cwt: np.ndarray, max_distances: np.ndarray, gap_thresh: float) -> list:
    """Chain per-row local maxima from the widest row down to the narrowest.

    Returns ridges as ``(rows, cols)`` arrays ordered by increasing row.
    """
    maxima = [_local_maxima(r) for r in cwt]
    rows_with = [i for i, m in enumerate(maxima) if len(m)]
    if not rows_with:
        return []
    top = rows_with[-1]
    # each active ridge: [rows, cols, gap]
    active = [[[top], [c], 0] for c in maxima[top]]
    finished = []
    for row in range(top - 1, -1, -1):
        for ridge in active:
            ridge[2] += 1
        tails = np.array([ridge[1][-1] for ridge in active])
        for col in maxima[row]:
            target = None
            if len(tails):
                diffs = np.abs(col - tails)
                j = int(np.argmin(diffs))
                if diffs[j] <= max_distances[row]:
                    target = active[j]
            if target is None:
                active.append([[row], [col], 0])
            else:
                target[0].append(row)
                target[1].append(col)
                target[2] = 0
        for j in range(len(active) - 1, -1, -1):
            if active[j][2] > gap_thresh:
                finished.append(active.pop(j))
    return [(np.array(r[::-1]), np.array(c[::-1])) for r, c, _ in finished + active]


def find_ridge_peaks(cwt: np.ndarray, widths=None, ridge: RidgeParams | None = None) -> np.ndarray:
    """Frame indices of CWT ridge lines that are long and strong enough.

    A ridge survives when it spans at least ``min_length`` rows and the CWT
    value where it reaches its narrowest row, divided by the local
    ``noise_perc`` percentile of ``cwt[0]``, is at least ``min_snr``.
    Returned indices are the ridge positions at that narrowest row, sorted.
    """
    ridge = ridge or RidgeParams()
    cwt = np.asarray(cwt, dtype=np.float64)
    n_rows, n_frames = cwt.shape
    if widths is None:
        widths = np.arange(1, n_rows + 1, dtype=np.float64)
    widths = np.asarray(widths, dtype=np.float64)
    max_distances = (np.asarray(ridge.max_distances, dtype=np.float64)
                     if ridge.max_distances is not None else widths / 4.0)
    gap_thresh = ridge.gap_thresh if ridge.gap_thresh is not None else math.ceil(widths[0])
    min_length = ridge.min_length if ridge.min_length is not None else math.ceil(n_rows / 4)
    window = int(ridge.window_size if ridge.window_size is not None else math.ceil(n_frames / 20))

    lines = _ridge_lines(cwt, max_distances, gap_thresh)
    if not lines:
        return np.array([], dtype=int)

    half, odd = divmod(window, 2)
    base = cwt[0]
    peaks = []
    for rows, cols in lines:
        if len(rows) < min_length:
            continue
        c = cols[0]
        lo, hi = max(c - half, 0), min(c + half + odd, n_frames)
        noise = np.percentile(base[lo:hi], ridge.noise_perc)
        with np.errstate(divide="ignore", invalid="ignore"):
            snr = abs(cwt[rows[0], c] / noise)
        # a 0/0 ratio is NaN and, like any incomparable value, is not rejected
        if snr < ridge.min_snr:
            continue
        peaks.append(c)
    return np.sort(np.array(peaks, dtype=int))


def frame_energy(m: MelSpectrogram, p: PeakfindParams | None = None) -> np.ndarray:
    """Denoised magnitudes summed over mel bins, one value per frame."""
    p = p or PeakfindParams()
    return denoise(m, p.outlier_sigma, p.signal_sigma).values.sum(axis=1)


def filter_peaks(energy: np.ndarray, peaks, frame_rate: float, p: PeakfindParams) -> list[int]:
    """Drop peaks whose surrounding window carries too little energy.

    The window spans ``peak_window`` seconds centred on the peak. By default
    the window's per-frame mean is compared with ``peak_energy_factor`` times
    the recording's per-frame mean; with ``literal_energy_filter`` the
    window's total is compared instead.
    """
    half = int(round(p.peak_window * frame_rate / 2))
    threshold = p.peak_energy_factor * energy.mean()
    kept = []
    for t in peaks:
        seg = energy[max(t - half, 0):t + half]
        value = seg.sum() if p.literal_energy_filter else seg.mean()
        if value >= threshold:
            kept.append(int(t))
    return kept


def extract_slices(w: Waveform, p: PeakfindParams | None = None,
                   sp: SpectrogramParams | None = None, recording_id: str = "",
                   ridge: RidgeParams | None = None) -> list[Slice]:
    """Up to ``max_slices`` peak-centred slices, sorted by descending peak score."""
    p = p or PeakfindParams()
    sp = sp or SpectrogramParams()
    padded = w.pad_to(p.slice_len)
    m = compute_log_melspec(padded, sp)
    energy = frame_energy(m, p)
    widths = p.widths(m.frame_rate)
    peaks = find_ridge_peaks(cwt_ricker(energy, widths), widths, ridge)
    peaks = filter_peaks(energy, peaks, m.frame_rate, p)
    if not peaks:
        return [Slice(recording_id, 0.0, p.slice_len, 0.0)]

    latest = max(padded.duration - p.slice_len, 0.0)
    slices = []
    for t in peaks:
        centre = t * sp.hop + sp.window_len / 2
        start = min(round(max(centre - p.slice_len / 2, 0.0), 6), latest)
        slices.append(Slice(recording_id, start, p.slice_len, float(energy[t])))
    slices.sort(key=lambda s: (-s.peak_score, s.start))
    return slices[:p.max_slices]
