import math

import numpy as np
import pytest
import soundfile as sf
from hypothesis import given, settings
from hypothesis import strategies as st

from birb_engine.audio import (MelSpectrogram, PcenParams, SpectrogramParams, Waveform,
                               compute_log_melspec, compute_pcen_melspec, load_waveform,
                               mel_filterbank, pcen)
from birb_engine.errors import UnreadableFile, UnsupportedCodec, WaveformTooShort
from oracles import log_melspec, mel_matrix, pcen_literal

SR = 32000


def tone(freq, duration=1.0, sr=SR, amp=0.5):
    return amp * np.sin(2 * np.pi * freq * np.arange(int(duration * sr)) / sr)


def test_load_identity(tmp_path):
    x = tone(440)
    sf.write(tmp_path / "a.wav", x, SR, subtype="FLOAT")
    w = load_waveform(tmp_path / "a.wav", SR)
    assert len(w) == SR and w.sample_rate == SR
    assert np.array_equal(w.samples, x.astype(np.float32))


def test_load_stereo_averages(tmp_path):
    rng = np.random.default_rng(0)
    st2 = rng.uniform(-0.5, 0.5, (SR, 2)).astype(np.float32)
    sf.write(tmp_path / "s.wav", st2, SR, subtype="FLOAT")
    w = load_waveform(tmp_path / "s.wav", SR)
    assert np.allclose(w.samples, st2.mean(axis=1), atol=1e-7)


def test_load_resamples_preserving_frequency(tmp_path):
    sf.write(tmp_path / "lo.wav", tone(1000, sr=16000), 16000, subtype="FLOAT")
    w = load_waveform(tmp_path / "lo.wav", SR)
    assert len(w) == SR
    spectrum = np.abs(np.fft.rfft(w.samples))
    peak = np.argmax(spectrum) * SR / len(w)
    assert abs(peak - 1000) / 1000 < 0.01


def test_load_flac(tmp_path):
    sf.write(tmp_path / "a.flac", tone(300), SR, subtype="PCM_16")
    assert len(load_waveform(tmp_path / "a.flac")) == SR


def test_load_errors(tmp_path):
    with pytest.raises(UnreadableFile):
        load_waveform(tmp_path / "missing.wav")
    (tmp_path / "junk.wav").write_bytes(b"not audio at all")
    with pytest.raises(UnreadableFile):
        load_waveform(tmp_path / "junk.wav")
    sf.write(tmp_path / "a.ogg", tone(300), SR, format="OGG", subtype="VORBIS")
    with pytest.raises(UnsupportedCodec):
        load_waveform(tmp_path / "a.ogg")


def test_frame_count_one_second():
    m = compute_log_melspec(Waveform(np.zeros(SR), SR))
    assert m.values.shape == (93, 160)


@settings(max_examples=40, deadline=None)
@given(st.integers(2560, 3 * SR))
def test_frame_count_formula(n):
    p = SpectrogramParams()
    m = compute_log_melspec(Waveform(np.zeros(n), SR), p)
    assert m.num_frames == (n - 2560) // 320 + 1 == p.num_frames(n, SR)


def test_too_short():
    with pytest.raises(WaveformTooShort):
        compute_log_melspec(Waveform(np.zeros(100), SR))


def test_silence_hits_floor():
    m = compute_log_melspec(Waveform(np.zeros(SR), SR))
    assert np.all(m.values == 0.1 * math.log(0.01))


def test_log_melspec_matches_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(0, 0.2, SR).astype(np.float32)
    ours = compute_log_melspec(Waveform(x, SR)).values
    assert np.allclose(ours, log_melspec(x.astype(np.float64), SR), atol=1e-12)


def test_filterbank_matches_oracle():
    assert np.allclose(mel_filterbank(2560, SR, 160, 60, 10000), mel_matrix(2560, SR, 160, 60, 10000),
                       atol=1e-12)


def test_tone_argmax_constant_and_at_right_band():
    m = compute_log_melspec(Waveform(tone(1000), SR)).values
    top = np.argmax(m, axis=1)
    assert len(set(top)) == 1
    fb = mel_filterbank(2560, SR, 160, 60, 10000)
    assert top[0] == np.argmax(fb[1000 * 2560 // SR])


@settings(max_examples=30)
@given(st.floats(0.0, 1.0), st.floats(1.0, 4.0))
def test_log_mel_monotone_in_magnitude(a, gain):
    x = tone(2000, 0.2, amp=a)
    lo = compute_log_melspec(Waveform(x, SR)).values
    hi = compute_log_melspec(Waveform(x * gain, SR)).values
    assert np.all(hi >= lo - 1e-12)


def test_pcen_zero_input():
    assert np.all(pcen(np.zeros((20, 5))) == 0.0)


def test_pcen_identity_parameterization():
    rng = np.random.default_rng(0)
    mel = rng.random((30, 7))
    out = pcen(mel, PcenParams(gain=0.0, bias=0.0, exponent=1.0))
    assert np.array_equal(out, mel)


def test_pcen_steady_state():
    q = PcenParams()
    m = 0.37
    out = pcen(np.full((200, 3), m), q)
    expected = (m / (q.eps + m) ** q.gain + q.bias) ** q.exponent - q.bias ** q.exponent
    assert np.allclose(out[-1], expected, rtol=1e-12)


def test_pcen_matches_recursive_oracle():
    rng = np.random.default_rng(4)
    mel = rng.random((80, 6)) * 3
    assert np.allclose(pcen(mel), pcen_literal(mel), rtol=1e-12, atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_features_finite(seed):
    rng = np.random.default_rng(seed)
    w = Waveform(rng.uniform(-1, 1, SR // 2), SR)
    assert np.all(np.isfinite(compute_log_melspec(w).values))
    assert np.all(np.isfinite(compute_pcen_melspec(w).values))


def test_waveform_segment_pads():
    w = Waveform(np.ones(SR), SR)
    seg = w.segment(0.5, 1.0)
    assert len(seg) == SR and seg.samples[: SR // 2].sum() == SR // 2
    assert np.all(seg.samples[SR // 2:] == 0)
    assert w.pad_to(2.0).duration == 2.0
    assert w.pad_to(0.5) is w
