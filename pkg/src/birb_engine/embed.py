"""Embedding providers and the on-disk embedding store.

Store layout, shared by the persistent store and the external embedder's
response: a data file of little-endian float32 rows followed by a 4-byte
little-endian CRC32 of those rows, and a JSON header next to it (same stem,
``.json`` suffix) holding ``{n, d, provider_tag, ids}``.
"""
from __future__ import annotations

import json
import logging
import os
import shlex
import subprocess
import zlib
from collections import OrderedDict, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import (DEFAULT_SAMPLE_RATE, MelSpectrogram, PcenParams, SpectrogramParams, Waveform,
                    compute_log_melspec, compute_pcen_melspec, load_waveform)
from .corpus import Window
from .errors import (CorruptStore, DimensionMismatch, EmbedderFailure, ProtocolViolation,
                     SpeciesNotFound, SpectrogramTooSmall)

log = logging.getLogger(__name__)

_TRAILER = 4


def worker_count() -> int:
    """Thread cap from ``BIRB_ENGINE_THREADS`` (default: CPU count)."""
    env = os.environ.get("BIRB_ENGINE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class EmbeddingMatrix:
    ids: list
    vectors: np.ndarray
    provider_tag: str = ""

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError(f"{len(self.ids)} ids for vectors of shape {self.vectors.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("embedding ids must be unique")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding vectors must be finite")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def index(self) -> dict:
        return {i: k for k, i in enumerate(self.ids)}

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        idx = self.index()
        return self.vectors[[idx[i] for i in ids]]

    def subset(self, ids: Sequence[str]) -> "EmbeddingMatrix":
        return EmbeddingMatrix(list(ids), self.rows(ids), self.provider_tag)

    @classmethod
    def concat(cls, parts: Sequence["EmbeddingMatrix"]) -> "EmbeddingMatrix":
        tag = parts[0].provider_tag if parts else ""
        ids = [i for p in parts for i in p.ids]
        d = parts[0].d if parts else 0
        vectors = np.concatenate([p.vectors for p in parts]) if parts else np.zeros((0, d))
        return cls(ids, vectors, tag)


# -- store -------------------------------------------------------------------

def header_path(data_path) -> Path:
    return Path(data_path).with_suffix(".json")


def embed_store_write(matrix: EmbeddingMatrix, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(matrix.vectors, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(data)
        fh.write(zlib.crc32(data).to_bytes(_TRAILER, "little"))
    header = {"n": matrix.n, "d": int(matrix.vectors.shape[1]),
              "provider_tag": matrix.provider_tag, "ids": matrix.ids}
    header_path(path).write_text(json.dumps(header) + "\n")
    return path


def _read_header(path: Path) -> dict:
    try:
        header = json.loads(header_path(path).read_text())
        n, d = int(header["n"]), int(header["d"])
        ids = [str(i) for i in header["ids"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorruptStore(f"bad or missing header for {path}: {exc}") from exc
    if len(ids) != n:
        raise CorruptStore(f"{path}: header lists {len(ids)} ids but n={n}")
    expected = n * d * 4 + _TRAILER
    size = path.stat().st_size if path.exists() else -1
    if size != expected:
        raise CorruptStore(f"{path}: size {size} bytes, expected {expected}")
    return {"n": n, "d": d, "ids": ids, "provider_tag": str(header.get("provider_tag", ""))}


def embed_store_read(path, rows: slice | None = None, verify: bool = False) -> EmbeddingMatrix:
    """Read a store; ``rows`` reads a contiguous id range through a memory map.

    The checksum is always verified on full reads. Ranged reads only check
    the file size unless ``verify`` is set, which costs a pass over the file.
    """
    path = Path(path)
    h = _read_header(path)
    n, d = h["n"], h["d"]
    if rows is None or verify:
        raw = path.read_bytes()
        data, trailer = raw[:-_TRAILER], raw[-_TRAILER:]
        if zlib.crc32(data) != int.from_bytes(trailer, "little"):
            raise CorruptStore(f"{path}: checksum mismatch")
    if rows is None:
        vectors = np.frombuffer(data, dtype="<f4").reshape(n, d)
        return EmbeddingMatrix(h["ids"], vectors.astype(np.float32), h["provider_tag"])
    start, stop, step = rows.indices(n)
    if step != 1:
        raise ValueError("ranged reads need a unit step")
    mm = np.memmap(path, dtype="<f4", mode="r", offset=start * d * 4, shape=(stop - start, d))
    vectors = np.array(mm, dtype=np.float32)
    del mm
    return EmbeddingMatrix(h["ids"][start:stop], vectors, h["provider_tag"])


# -- pooled melspecs ---------------------------------------------------------

@dataclass(frozen=True)
class PoolParams:
    """Average-pooling kernel over (time frames, mel bins).

    ``pool_time=None`` pools over every frame, giving one time cell per
    window. Strides default to the pool sizes (non-overlapping cells).
    """

    pool_time: int | None = None
    pool_mels: int = 4
    stride_time: int | None = None
    stride_mels: int | None = None

    def __post_init__(self):
        if self.stride_time is None:
            object.__setattr__(self, "stride_time", self.pool_time)
        if self.stride_mels is None:
            object.__setattr__(self, "stride_mels", self.pool_mels)
        sizes = [v for v in (self.pool_time, self.pool_mels, self.stride_time, self.stride_mels)
                 if v is not None]
        if min(sizes) <= 0:
            raise ValueError("pool sizes and strides must be positive")
        if self.pool_time is not None and self.stride_time > self.pool_time:
            raise ValueError("strides may not exceed pool sizes")
        if self.stride_mels > self.pool_mels:
            raise ValueError("strides may not exceed pool sizes")

    def resolve(self, frames: int) -> "PoolParams":
        """Concrete kernel for a spectrogram with ``frames`` frames."""
        if self.pool_time is not None:
            return self
        return PoolParams(frames, self.pool_mels, frames, self.stride_mels)

    def output_shape(self, frames: int, mels: int) -> tuple[int, int]:
        p = self.resolve(frames)
        return ((frames - p.pool_time) // p.stride_time + 1,
                (mels - p.pool_mels) // p.stride_mels + 1)


def pooled_melspec_embed(m: MelSpectrogram | np.ndarray, p: PoolParams | None = None) -> np.ndarray:
    """2-D average pooling over (time, mel), flattened row-major."""
    values = np.asarray(getattr(m, "values", m), dtype=np.float64)
    frames, mels = values.shape
    p = (p or PoolParams()).resolve(frames)
    if frames < p.pool_time or mels < p.pool_mels or frames == 0:
        raise SpectrogramTooSmall(
            f"spectrogram {frames}x{mels} is smaller than the {p.pool_time}x{p.pool_mels} pool")
    views = np.lib.stride_tricks.sliding_window_view(values, (p.pool_time, p.pool_mels))
    pooled = views[::p.stride_time, ::p.stride_mels].mean(axis=(-2, -1))
    return pooled.reshape(-1)


class AudioSource:
    """Resolves recording ids to decoded audio, keeping a few files in memory."""

    def __init__(self, paths: dict, sample_rate: int = DEFAULT_SAMPLE_RATE, cache_size: int = 8):
        self.paths = dict(paths)
        self.sample_rate = sample_rate
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size

    @classmethod
    def from_recordings(cls, recordings, sample_rate: int = DEFAULT_SAMPLE_RATE) -> "AudioSource":
        return cls({r.id: r.audio_path for r in recordings}, sample_rate)

    def waveform(self, recording_id: str) -> Waveform:
        if recording_id in self._cache:
            self._cache.move_to_end(recording_id)
            return self._cache[recording_id]
        w = load_waveform(self.paths[recording_id], self.sample_rate)
        self._cache[recording_id] = w
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return w

    def window_audio(self, window: Window) -> Waveform:
        return self.waveform(window.recording_id).segment(window.start, window.length)


@dataclass(frozen=True)
class PooledMelspecEmbedder:
    spec: SpectrogramParams = field(default_factory=SpectrogramParams)
    pcen: PcenParams = field(default_factory=PcenParams)
    pool: PoolParams = field(default_factory=PoolParams)
    frontend: str = "pcen"
    tag: str = "pooled_melspecs"

    def __post_init__(self):
        if self.frontend not in ("pcen", "log"):
            raise ValueError(f"unknown frontend {self.frontend!r}")

    def embed_waveform(self, w: Waveform) -> np.ndarray:
        if self.frontend == "pcen":
            m = compute_pcen_melspec(w, self.spec, self.pcen)
        else:
            m = compute_log_melspec(w, self.spec)
        return pooled_melspec_embed(m, self.pool)

    def embed_windows(self, windows: Sequence[Window], source: AudioSource,
                      threads: int | None = None) -> EmbeddingMatrix:
        """Embed windows; rows follow the input order."""
        by_recording = defaultdict(list)
        for i, w in enumerate(windows):
            by_recording[w.recording_id].append(i)

        def work(rid):
            # separate decode per task keeps threads independent of the shared cache
            full = load_waveform(source.paths[rid], source.sample_rate)
            return [(i, self.embed_waveform(full.segment(windows[i].start, windows[i].length)))
                    for i in by_recording[rid]]

        rows: list = [None] * len(windows)
        with ThreadPoolExecutor(max_workers=threads or worker_count()) as pool:
            for result in pool.map(work, sorted(by_recording)):
                for i, vec in result:
                    rows[i] = vec
        d = len(rows[0]) if rows else 0
        vectors = np.array(rows, dtype=np.float32).reshape(len(windows), d)
        return EmbeddingMatrix([w.id for w in windows], vectors, self.tag)


# -- external embedders ------------------------------------------------------

def write_protocol_request(windows: Sequence[Window], source: AudioSource, protocol_dir) -> list:
    """Materialize windows as mono float WAVs plus ``request.jsonl``.

    ``wav_path`` entries are relative to the protocol directory.
    """
    import soundfile as sf

    protocol_dir = Path(protocol_dir)
    (protocol_dir / "windows").mkdir(parents=True, exist_ok=True)
    rows = []
    for k, w in enumerate(windows):
        rel = f"windows/{k:07d}.wav"
        audio = source.window_audio(w)
        sf.write(str(protocol_dir / rel), audio.samples, audio.sample_rate, subtype="FLOAT")
        rows.append({"id": w.id, "wav_path": rel})
    with open(protocol_dir / "request.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return [r["id"] for r in rows]


def read_protocol_response(protocol_dir, expected_ids: Sequence[str],
                           expected_dim: int | None = None) -> EmbeddingMatrix:
    path = Path(protocol_dir) / "response.f32le"
    try:
        h = _read_header(path)
    except CorruptStore as exc:
        raise ProtocolViolation(str(exc)) from exc
    missing = [i for i in expected_ids if i not in set(h["ids"])]
    if missing:
        raise ProtocolViolation(f"response is missing {len(missing)} ids, e.g. {missing[:3]}")
    if h["ids"] != list(expected_ids):
        raise ProtocolViolation("response ids are not in request order")
    if expected_dim is not None and h["d"] != expected_dim:
        raise ProtocolViolation(f"response dimension {h['d']}, expected {expected_dim}")
    raw = path.read_bytes()
    if zlib.crc32(raw[:-_TRAILER]) != int.from_bytes(raw[-_TRAILER:], "little"):
        raise ProtocolViolation("response checksum mismatch")
    vectors = np.frombuffer(raw[:-_TRAILER], dtype="<f4").reshape(h["n"], h["d"])
    if not np.all(np.isfinite(vectors)):
        raise ProtocolViolation("response contains non-finite values")
    return EmbeddingMatrix(h["ids"], vectors.astype(np.float32), h["provider_tag"])


def external_embed(windows: Sequence[Window], source: AudioSource, protocol_dir, command,
                   expected_dim: int | None = None, timeout: float | None = None,
                   provider_tag: str | None = None) -> EmbeddingMatrix:
    """Embed windows with an out-of-process embedder.

    ``command`` is an argv list (or shell-style string). Occurrences of
    ``{protocol_dir}`` are substituted; without one, the directory is
    appended as the final argument.
    """
    protocol_dir = Path(protocol_dir)
    for stale in ("response.f32le", "response.json"):
        (protocol_dir / stale).unlink(missing_ok=True)
    ids = write_protocol_request(windows, source, protocol_dir)
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    if any("{protocol_dir}" in a for a in argv):
        argv = [a.replace("{protocol_dir}", str(protocol_dir)) for a in argv]
    else:
        argv.append(str(protocol_dir))
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise EmbedderFailure(f"could not run embedder {argv[0]}: {exc}") from exc
    if proc.returncode != 0:
        raise EmbedderFailure(
            f"embedder exited with status {proc.returncode}: {proc.stderr.strip()[-500:]}")
    matrix = read_protocol_response(protocol_dir, ids, expected_dim)
    if provider_tag is not None:
        matrix.provider_tag = provider_tag
    return matrix


# -- learned representations -------------------------------------------------

def load_learned_representation(path, species: str, expected_dim: int | None = None) -> np.ndarray:
    """Per-species weight vector from a JSON ``{species: [floats]}`` or ``.npz`` file."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as data:
            table = {k: data[k] for k in data.files}
    else:
        table = json.loads(path.read_text())
    if species not in table:
        raise SpeciesNotFound(f"{species} has no learned representation in {path}")
    vec = np.asarray(table[species], dtype=np.float64).reshape(-1)
    if expected_dim is not None and len(vec) != expected_dim:
        raise DimensionMismatch(f"{species}: learned vector has d={len(vec)}, corpus d={expected_dim}")
    return vec
