"""Independent reference implementations used as test oracles.

These are deliberately naive (explicit loops, textbook formulas) and share
no code with the engine beyond numpy/scipy.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import scipy.signal


def auc_brute_force(pos, neg) -> float:
    """Enumerate every (positive, negative) pair; ties count one half."""
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def geometric_mean(values) -> float:
    return math.exp(sum(math.log(v) for v in values) / len(values))


def htk_mel(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)


def htk_hz(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_matrix(n_fft, sr, n_mels, fmin, fmax):
    """Triangle filters built one at a time."""
    lo, hi = htk_mel(fmin), htk_mel(fmax)
    edges = [htk_hz(lo + (hi - lo) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    bins = n_fft // 2 + 1
    out = np.zeros((bins, n_mels))
    for m in range(n_mels):
        a, b, c = edges[m], edges[m + 1], edges[m + 2]
        for k in range(bins):
            f = k * sr / n_fft
            if a < f <= b:
                out[k, m] = (f - a) / (b - a)
            elif b < f < c:
                out[k, m] = (c - f) / (c - b)
    return out


def log_melspec(x, sr, win_s=0.08, hop_s=0.01, n_mels=160, fmin=60.0, fmax=10000.0,
                floor=0.01, scale=0.1):
    """Frame-by-frame STFT magnitude, window-sum normalised, HTK mel, scaled log."""
    win, hop = int(round(win_s * sr)), int(round(hop_s * sr))
    w = np.hanning(win + 1)[:-1]  # periodic Hann
    fb = mel_matrix(win, sr, n_mels, fmin, fmax)
    frames = []
    t = 0
    while t + win <= len(x):
        spec = np.abs(np.fft.rfft(x[t:t + win] * w)) / w.sum()
        frames.append(spec @ fb)
        t += hop
    mel = np.array(frames)
    return scale * np.log(np.maximum(mel, floor))


def denoise_literal(v, k1=1.5, k2=0.75):
    """Two-step per-bin denoising, one mel bin at a time."""
    out = np.zeros_like(v)
    for j in range(v.shape[1]):
        col = v[:, j]
        mu1, sd1 = col.mean(), col.std()
        kept = col[col <= mu1 + k1 * sd1]
        mu2, sd2 = kept.mean(), kept.std()
        loud = col > mu2 + k2 * sd2
        out[loud, j] = col[loud] - mu2
    return out


def peak_slices_oracle(x, sr, literal_energy=False, slice_len=6.0, top=5):
    """Straightforward slice finder built on scipy.signal.find_peaks_cwt.

    Returns slice start times (s) in descending score order.
    """
    n = int(round(slice_len * sr))
    if len(x) < n:
        x = np.concatenate([x, np.zeros(n - len(x))])
    spec = log_melspec(x, sr)
    energy = denoise_literal(spec).sum(axis=1)
    frame_rate = 100.0
    widths = np.linspace(0.5 * frame_rate, 2.0 * frame_rate, 10)
    with np.errstate(divide="ignore", invalid="ignore"):
        peaks = scipy.signal.find_peaks_cwt(energy, widths)
    half = 30
    mean = energy.mean()
    kept = []
    for p in peaks:
        seg = energy[max(p - half, 0):p + half]
        stat = seg.sum() if literal_energy else seg.mean()
        if stat >= 1.5 * mean:
            kept.append(p)
    if not kept:
        return [0.0]
    duration = len(x) / sr
    found = []
    for p in kept:
        centre = p * 0.01 + 0.04
        start = min(max(centre - slice_len / 2, 0.0), duration - slice_len)
        found.append((-energy[p], start))
    found.sort()
    return [s for _, s in found[:top]]


def pool_naive(values, pt, pm, st, sm):
    frames, mels = values.shape
    out = []
    for i in range(0, frames - pt + 1, st):
        for j in range(0, mels - pm + 1, sm):
            out.append(values[i:i + pt, j:j + pm].mean())
    return np.array(out)


def pcen_literal(mel, s=0.1, gain=0.8, bias=10.0, r=0.25, eps=1e-6):
    out = np.empty_like(mel, dtype=np.float64)
    m = mel[0].astype(np.float64)
    for t in range(mel.shape[0]):
        m = (1 - s) * m + s * mel[t]
        out[t] = (mel[t] / (eps + m) ** gain + bias) ** r - bias ** r
    return out
