"""
Plugging in an external embedding model
=======================================

Any program that reads ``request.jsonl`` and writes ``response.f32le`` plus
``response.json`` can act as an embedder. This one computes a tiny
hand-made feature (RMS level and spectral centroid) per window.
"""

import sys
import tempfile
import textwrap
from pathlib import Path

import numpy as np

from birb_engine import AudioSource, generate_synthetic_corpus
from birb_engine.corpus import read_manifest, window_xc_recording
from birb_engine.embed import external_embed

EMBEDDER = textwrap.dedent('''
    import json, sys, zlib
    from pathlib import Path
    import numpy as np
    import soundfile as sf

    root = Path(sys.argv[1])
    reqs = [json.loads(l) for l in (root / "request.jsonl").read_text().splitlines()]
    rows = []
    for r in reqs:
        x, sr = sf.read(root / r["wav_path"], dtype="float32")
        spec = np.abs(np.fft.rfft(x))
        freqs = np.fft.rfftfreq(len(x), 1 / sr)
        rows.append([np.sqrt(np.mean(x ** 2)), (spec * freqs).sum() / spec.sum() / 1000])
    data = np.asarray(rows, dtype="<f4").tobytes()
    (root / "response.f32le").write_bytes(data + zlib.crc32(data).to_bytes(4, "little"))
    (root / "response.json").write_text(json.dumps(
        {"n": len(rows), "d": 2, "provider_tag": "rms_centroid", "ids": [r["id"] for r in reqs]}))
''')

root = Path(tempfile.mkdtemp(prefix="birb_ext_"))
generate_synthetic_corpus(root, n_focal=3, n_soundscapes=1, seed=2)
script = root / "embedder.py"
script.write_text(EMBEDDER)

recordings = read_manifest(root / "focal.jsonl")
windows = [w for r in recordings for w in window_xc_recording(r)]
matrix = external_embed(windows, AudioSource.from_recordings(recordings), root / "protocol",
                        [sys.executable, str(script), "{protocol_dir}"], expected_dim=2)

# Centroids in kHz separate the two pseudo-species cleanly.
for wid, (rms, centroid) in zip(matrix.ids[:8], matrix.vectors[:8]):
    print(f"{wid:22s} rms {rms:.3f}  centroid {centroid:.2f} kHz")
by_species = {}
for w, v in zip(windows, matrix.vectors):
    by_species.setdefault(next(iter(w.labels)), []).append(v[1])
print({sp: round(float(np.mean(v)), 2) for sp, v in by_species.items()})
