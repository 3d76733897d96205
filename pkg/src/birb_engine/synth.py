"""Synthetic bird-like corpora for desk-scale verification.

Each pseudo-species has its own frequency band and call shape, so species
are separable by construction. Focal recordings repeat calls of one species
over mild noise; soundscapes scatter quieter calls of all species over
louder noise, sometimes overlapping.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import DEFAULT_SAMPLE_RATE
from .corpus import Annotation, Recording, write_annotations, write_manifest


@dataclass(frozen=True)
class CallSpec:
    """A pseudo-species call: ``pips`` sweeps from ``f_start`` to ``f_end`` Hz."""

    code: str
    f_start: float
    f_end: float
    duration: float = 0.8
    pips: int = 1


DEFAULT_SPECIES = (
    CallSpec("synlow", 1500.0, 2500.0, 0.8, 1),
    CallSpec("synhigh", 6000.0, 5000.0, 0.9, 3),
)


def render_call(spec: CallSpec, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """One call with slight random pitch jitter, peak amplitude 1."""
    n = int(spec.duration * sample_rate)
    out = np.zeros(n)
    jitter = rng.uniform(0.97, 1.03)
    pip_len = n // spec.pips
    gap = pip_len // 5
    for i in range(spec.pips):
        m = pip_len - gap
        t = np.arange(m) / sample_rate
        f0, f1 = spec.f_start * jitter, spec.f_end * jitter
        phase = 2 * np.pi * (f0 * t + (f1 - f0) * t ** 2 / (2 * t[-1]))
        out[i * pip_len:i * pip_len + m] = np.sin(phase) * np.hanning(m)
    return out


def _place(signal, call, onset, sample_rate, amp):
    i = int(onset * sample_rate)
    seg = signal[i:i + len(call)]
    seg += amp * call[:len(seg)]


def _write_wav(path: Path, x: np.ndarray, sample_rate: int) -> None:
    import soundfile as sf

    sf.write(str(path), np.clip(x, -1.0, 1.0), sample_rate, subtype="PCM_16")


def generate_synthetic_corpus(out_dir, species=DEFAULT_SPECIES, n_focal: int = 20,
                              n_soundscapes: int = 6, soundscape_duration: float = 60.0,
                              overlap_prob: float = 0.3, background_prob: float = 0.0,
                              focal_noise: float = 0.01, soundscape_noise: float = 0.03,
                              soundscape_amp: float = 0.15, seed: int = 0,
                              sample_rate: int = DEFAULT_SAMPLE_RATE) -> dict:
    """Write WAVs, manifests and annotations under ``out_dir``.

    Focal recordings of each species are split evenly (by index parity)
    into ``focal_queries.jsonl`` and ``focal_corpus.jsonl``; ``focal.jsonl``
    lists all of them. Returns the written paths plus the event log.
    """
    if len(species) < 2:
        raise ValueError("need at least two pseudo-species")
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    focal, annotations, events = [], [], []

    for sp in species:
        others = [o for o in species if o.code != sp.code]
        for i in range(n_focal):
            rid = f"{sp.code}_{i:03d}"
            duration = round(float(rng.uniform(7.0, 14.0)), 2)
            x = rng.normal(0.0, focal_noise, int(duration * sample_rate))
            t = float(rng.uniform(0.2, 1.0))
            while t + sp.duration < duration:
                amp = rng.uniform(0.3, 0.6)
                _place(x, render_call(sp, sample_rate, rng), t, sample_rate, amp)
                annotations.append(Annotation(rid, sp.code, round(t, 3), round(t + sp.duration, 3)))
                events.append({"recording_id": rid, "species": sp.code, "start": t,
                               "end": t + sp.duration})
                t += sp.duration + float(rng.uniform(0.6, 1.6))
            background = set()
            if rng.random() < background_prob:
                bg = others[int(rng.integers(len(others)))]
                onset = float(rng.uniform(0, max(duration - bg.duration, 0.1)))
                _place(x, render_call(bg, sample_rate, rng), onset, sample_rate, 0.05)
                background.add(bg.code)
                annotations.append(Annotation(rid, bg.code, round(onset, 3),
                                              round(min(onset + bg.duration, duration), 3)))
            _write_wav(out / "audio" / f"{rid}.wav", x, sample_rate)
            focal.append(Recording(rid, f"audio/{rid}.wav", sp.code, frozenset(background),
                                   duration, "focal"))

    soundscapes, sc_annotations = [], []
    for j in range(n_soundscapes):
        rid = f"soundscape_{j:03d}"
        x = rng.normal(0.0, soundscape_noise, int(soundscape_duration * sample_rate))
        t = float(rng.uniform(0.5, 3.0))
        while t + 2.0 < soundscape_duration:
            group = [species[int(rng.integers(len(species)))]]
            if rng.random() < overlap_prob:
                group.append(species[int(rng.integers(len(species)))])
            for k, sp in enumerate(group):
                onset = t + (0.0 if k == 0 else float(rng.uniform(0.0, 0.5)))
                if onset + sp.duration >= soundscape_duration:
                    continue
                amp = soundscape_amp * rng.uniform(0.7, 1.3)
                _place(x, render_call(sp, sample_rate, rng), onset, sample_rate, amp)
                sc_annotations.append(Annotation(rid, sp.code, round(onset, 3),
                                                 round(onset + sp.duration, 3)))
                events.append({"recording_id": rid, "species": sp.code, "start": onset,
                               "end": onset + sp.duration})
            t += float(rng.uniform(3.0, 9.0))
        _write_wav(out / "audio" / f"{rid}.wav", x, sample_rate)
        soundscapes.append(Recording(rid, f"audio/{rid}.wav", "", frozenset(),
                                     soundscape_duration, "soundscape"))

    paths = {
        "focal": out / "focal.jsonl",
        "focal_queries": out / "focal_queries.jsonl",
        "focal_corpus": out / "focal_corpus.jsonl",
        "focal_annotations": out / "focal_annotations.csv",
        "soundscape": out / "soundscape.jsonl",
        "soundscape_annotations": out / "soundscape_annotations.csv",
        "events": out / "events.jsonl",
        "config": out / "config.json",
    }
    write_manifest(paths["focal"], focal)
    write_manifest(paths["focal_queries"], [r for r in focal if int(r.id[-3:]) % 2 == 0])
    write_manifest(paths["focal_corpus"], [r for r in focal if int(r.id[-3:]) % 2 == 1])
    write_annotations(paths["focal_annotations"], annotations)
    write_manifest(paths["soundscape"], soundscapes)
    write_annotations(paths["soundscape_annotations"], sc_annotations)
    with open(paths["events"], "w") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    config = {
        "seed": seed,
        "work_dir": "work",
        "output_dir": "out",
        "audio": {"sample_rate": sample_rate},
        "provider": "pooled",
        "queries": {"manifest": "focal_queries.jsonl"},
        "corpora": [
            {"name": "focal", "kind": "focal", "manifest": "focal_corpus.jsonl",
             "exclude_background": True},
            {"name": "soundscape", "kind": "soundscape", "manifest": "soundscape.jsonl",
             "annotations": "soundscape_annotations.csv"},
        ],
    }
    paths["config"].write_text(json.dumps(config, indent=2) + "\n")
    return {"paths": {k: str(v) for k, v in paths.items()}, "events": events,
            "focal": focal, "soundscapes": soundscapes}
