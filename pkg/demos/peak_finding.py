"""
Finding vocalizations in a long recording
=========================================

Long focal recordings are cut into 6 s slices around their loudest events.
Here we build a 40 s recording with a few chirps of different loudness and
look at what the slicer keeps.
"""

import numpy as np

from birb_engine import Waveform, compute_log_melspec, extract_slices
from birb_engine.peakfind import PeakfindParams, frame_energy

sr = 32000
rng = np.random.default_rng(0)
x = rng.normal(0, 0.005, 40 * sr)

# a rising chirp, 0.8 s long
t = np.arange(int(0.8 * sr)) / sr
chirp = np.sin(2 * np.pi * (2000 * t + 1500 * t ** 2)) * np.hanning(len(t))

onsets = [3.0, 11.0, 19.5, 27.0, 34.0, 37.5]
levels = [0.6, 0.2, 0.5, 0.1, 0.4, 0.3]
for onset, level in zip(onsets, levels):
    i = int(onset * sr)
    x[i:i + len(chirp)] += level * chirp

w = Waveform(x, sr)

# The slicer works on the denoised log-mel energy: per-bin background is
# subtracted, then summed across mel bins.
energy = frame_energy(compute_log_melspec(w))
print(f"{len(energy)} frames, energy max {energy.max():.2f} at {energy.argmax() / 100:.2f} s")

# At most five slices survive, strongest first.
for s in extract_slices(w, recording_id="demo"):
    print(f"  slice [{s.start:6.2f}, {s.end:6.2f})  score {s.peak_score:.3f}")

# The energy filter compares each peak's neighbourhood with the whole
# recording. By default it compares per-frame means; the window-sum variant
# is a much looser threshold, which matters once the background is busy.
literal = extract_slices(w, PeakfindParams(literal_energy_filter=True), recording_id="demo")
print("window-sum filter starts:", [round(s.start, 2) for s in literal])

# Silence has no peaks, so the first 6 s are used.
print(extract_slices(Waveform(np.zeros(10 * sr), sr), recording_id="quiet"))
