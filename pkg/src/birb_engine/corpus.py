"""Corpus data model, windowing and dataset split constructions."""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (BadSliceLength, DataError, InsufficientWindows, SpeciesUnavailable,
                     UnknownSpecies)
from .peakfind import Slice

log = logging.getLogger(__name__)

WINDOW_LEN = 5.0
WINDOW_STRIDE = 2.5
UPSTREAM_RECORDINGS = 10
AR_WINDOW_CAP = 50
DEFAULT_IGNORED = frozenset({"reevir1", "gnwtea", "grnjay", "butwoo1"})

_CODE_RE = re.compile(r"^[a-z0-9]+$")

# Start times are rounded to this many decimals to keep ids and grids exact.
_TIME_DECIMALS = 6


def check_species_code(code: str) -> str:
    if not isinstance(code, str) or not _CODE_RE.match(code):
        raise DataError(f"invalid species code {code!r}: expected lowercase alphanumeric")
    return code


class _IgnoredType:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Ignored"

    def __bool__(self):
        return False


Ignored = _IgnoredType()


@dataclass(frozen=True)
class Recording:
    id: str
    audio_path: str
    foreground: str
    background: frozenset = frozenset()
    duration: float = 0.0
    source_kind: str = "focal"

    def __post_init__(self):
        object.__setattr__(self, "background", frozenset(self.background))
        if self.source_kind not in ("focal", "soundscape"):
            raise DataError(f"{self.id}: unknown source_kind {self.source_kind!r}")
        if self.foreground in self.background:
            raise DataError(f"{self.id}: foreground {self.foreground} also listed as background")
        if not self.duration > 0:
            raise DataError(f"{self.id}: duration must be positive")

    @property
    def species(self) -> frozenset:
        return self.background | {self.foreground} if self.foreground else self.background

    def to_json(self) -> dict:
        return {"id": self.id, "audio_path": self.audio_path, "foreground": self.foreground,
                "background": sorted(self.background), "duration_s": self.duration,
                "source_kind": self.source_kind}

    @classmethod
    def from_json(cls, d: dict) -> "Recording":
        return cls(str(d["id"]), str(d["audio_path"]), d.get("foreground") or "",
                   frozenset(d.get("background") or ()), float(d["duration_s"]),
                   d.get("source_kind", "focal"))


@dataclass(frozen=True)
class Annotation:
    recording_id: str
    species: str
    start: float
    end: float

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise DataError(f"annotation on {self.recording_id}: need 0 <= start < end")


@dataclass(frozen=True)
class Window:
    """A fixed-length labelled span of a recording.

    ``background`` holds species heard only in the background of the source
    recording; focal corpora can use it to drop such windows per query.
    """

    recording_id: str
    start: float
    length: float = WINDOW_LEN
    labels: frozenset = frozenset()
    background: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "labels", frozenset(self.labels))
        object.__setattr__(self, "background", frozenset(self.background))

    @property
    def id(self) -> str:
        return f"{self.recording_id}@{self.start:.3f}"

    def to_json(self) -> dict:
        return {"id": self.id, "recording_id": self.recording_id, "start_s": self.start,
                "length_s": self.length, "labels": sorted(self.labels),
                "background": sorted(self.background)}

    @classmethod
    def from_json(cls, d: dict) -> "Window":
        return cls(str(d["recording_id"]), float(d["start_s"]), float(d["length_s"]),
                   frozenset(d.get("labels") or ()), frozenset(d.get("background") or ()))


@dataclass
class TaxonomyMap:
    entries: dict = field(default_factory=dict)
    ignored: frozenset = DEFAULT_IGNORED

    def __post_init__(self):
        self.ignored = frozenset(self.ignored)
        clash = self.ignored & set(self.entries)
        if clash:
            raise DataError(f"species both mapped and ignored: {sorted(clash)}")

    @classmethod
    def load(cls, path) -> "TaxonomyMap":
        with open(path) as fh:
            d = json.load(fh)
        return cls(dict(d.get("entries", {})), frozenset(d.get("ignored", DEFAULT_IGNORED)))


@dataclass(frozen=True)
class SplitSpec:
    ar_species: frozenset = frozenset()
    heldout_species: frozenset = frozenset()
    seed: int = 0
    upstream_recordings: int = UPSTREAM_RECORDINGS

    def __post_init__(self):
        object.__setattr__(self, "ar_species", frozenset(self.ar_species))
        object.__setattr__(self, "heldout_species", frozenset(self.heldout_species))
        if self.ar_species & self.heldout_species:
            raise DataError("a species cannot be both artificially rare and heldout")


def resolve_taxonomy(code: str, taxonomy: TaxonomyMap):
    """Map a source species code to its target code, or ``Ignored``."""
    if code in taxonomy.ignored:
        return Ignored
    try:
        return taxonomy.entries[code]
    except KeyError:
        raise UnknownSpecies(f"species {code!r} is not in the taxonomy map") from None


def remap_recording(r: Recording, taxonomy: TaxonomyMap) -> Recording | None:
    """Apply the taxonomy to a recording. Ignored foregrounds drop the recording."""
    fg = resolve_taxonomy(r.foreground, taxonomy) if r.foreground else ""
    if fg is Ignored:
        return None
    bg = {resolve_taxonomy(c, taxonomy) for c in r.background}
    bg = frozenset(c for c in bg if c is not Ignored and c != fg)
    return Recording(r.id, r.audio_path, fg, bg, r.duration, r.source_kind)


# -- windowing ---------------------------------------------------------------

def window_starts(duration: float, win: float = WINDOW_LEN, stride: float = WINDOW_STRIDE) -> list[float]:
    """Start grid ``0, stride, 2*stride, ...`` over the zero-padded duration."""
    padded = max(duration, win)
    count = math.floor((padded - win) / stride) + 1
    return [round(i * stride, _TIME_DECIMALS) for i in range(count)]


def build_windows(duration: float, annotations: Iterable[Annotation] = (), win: float = WINDOW_LEN,
                  stride: float = WINDOW_STRIDE, recording_id: str = "") -> list[Window]:
    """Strided windows labelled with every annotation overlapping them by > 0 s."""
    if not duration > 0:
        raise DataError("duration must be positive")
    annotations = list(annotations)
    out = []
    for start in window_starts(duration, win, stride):
        end = start + win
        labels = frozenset(a.species for a in annotations if a.start < end and a.end > start)
        out.append(Window(recording_id, start, win, labels))
    return out


def window_xc_recording(r: Recording, win: float = WINDOW_LEN, stride: float = WINDOW_STRIDE,
                        mode: str = "focal") -> list[Window]:
    """Window a focal recording, propagating its recording-level labels.

    ``mode="focal"`` labels every window with the foreground species (and
    carries the background set along); ``mode="background"`` labels windows
    with the background species and returns nothing when there are none.
    """
    if r.source_kind != "focal":
        raise DataError(f"{r.id}: window_xc_recording expects a focal recording")
    if mode == "focal":
        labels, background = frozenset({r.foreground}), r.background
    elif mode == "background":
        if not r.background:
            return []
        labels, background = r.background, frozenset()
    else:
        raise ValueError(f"unknown corpus mode {mode!r}")
    return [Window(r.id, s, win, labels, background) for s in window_starts(r.duration, win, stride)]


def middle_crop(s: Slice, target: float = WINDOW_LEN, labels=frozenset(),
                slice_len: float = 6.0) -> Window:
    """Keep the middle ``target`` seconds of a peak-found slice."""
    if abs(s.length - slice_len) > 1e-9:
        raise BadSliceLength(f"slice of {s.recording_id} has length {s.length}, expected {slice_len}")
    offset = (slice_len - target) / 2
    return Window(s.recording_id, round(s.start + offset, _TIME_DECIMALS), target, labels)


def cap_slices_per_species(slices: Iterable[Slice], species_of: dict, species: Iterable[str],
                           cap: int = AR_WINDOW_CAP) -> list[Slice]:
    """Keep at most ``cap`` slices per listed species, dropping the weakest first.

    ``species_of`` maps recording id to foreground species; slices of other
    species pass through untouched.
    """
    species = set(species)
    grouped = defaultdict(list)
    out = []
    for s in slices:
        sp = species_of.get(s.recording_id)
        (grouped[sp] if sp in species else out).append(s)
    for sp in sorted(grouped):
        ranked = sorted(grouped[sp], key=lambda s: (-s.peak_score, s.recording_id, s.start))
        out.extend(ranked[:cap])
    return out


# -- splits ------------------------------------------------------------------

def construct_splits(recordings: list[Recording], spec: SplitSpec) -> dict:
    """Split recordings into ``upstream`` and ``eval_reserved``.

    * Any recording labelled (foreground or background) with a heldout
      species is reserved.
    * For each artificially rare species, ``upstream_recordings`` of its
      eligible focal recordings are sampled upstream; its remaining
      recordings, including background-only appearances, are reserved.
    * Everything else goes upstream.
    """
    rng = np.random.default_rng(spec.seed)
    ordered = sorted(recordings, key=lambda r: r.id)
    reserved, chosen = set(), set()
    for r in ordered:
        if r.species & spec.heldout_species:
            reserved.add(r.id)
    for sp in sorted(spec.ar_species):
        pool = [r.id for r in ordered
                if r.source_kind == "focal" and r.foreground == sp and r.id not in reserved]
        n = min(spec.upstream_recordings, len(pool))
        if n < spec.upstream_recordings:
            log.warning("artificially rare species %s has only %d eligible recordings; "
                        "all go upstream", sp, len(pool))
        picked = rng.choice(len(pool), size=n, replace=False) if n else []
        chosen.update(pool[i] for i in sorted(picked))
    for r in ordered:
        if r.id not in chosen and r.species & spec.ar_species:
            reserved.add(r.id)
    upstream = [r for r in ordered if r.id not in reserved]
    eval_reserved = [r for r in ordered if r.id in reserved]
    return {"upstream": upstream, "eval_reserved": eval_reserved}


def largest_remainder(target: dict, n: int) -> dict:
    """Integer counts summing to ``n`` proportional to ``target`` (Hamilton's method)."""
    keys = sorted(target)
    exact = np.array([target[k] * n for k in keys], dtype=np.float64)
    counts = np.floor(exact).astype(int)
    short = n - counts.sum()
    # stable sort: equal remainders go to the alphabetically earlier species
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:short]] += 1
    return dict(zip(keys, counts.tolist()))


def resample_to_distribution(windows: list[Window], target: dict, n: int, seed: int = 0) -> list[Window]:
    """Sample ``n`` windows without replacement matching a class distribution.

    A window counts towards the first class (in sorted species order) that
    draws it.
    """
    total = sum(target.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"target probabilities sum to {total}, not 1")
    available = set().union(*(w.labels for w in windows)) if windows else set()
    missing = sorted(set(sp for sp, p in target.items() if p > 0) - available)
    if missing:
        raise SpeciesUnavailable(f"species absent from the corpus: {missing}")
    if n > len(windows):
        raise InsufficientWindows(f"requested {n} windows from a corpus of {len(windows)}")
    rng = np.random.default_rng(seed)
    counts = largest_remainder(target, n)
    taken = set()
    picked = []
    for sp in sorted(counts):
        pool = [i for i, w in enumerate(windows) if sp in w.labels and i not in taken]
        if counts[sp] > len(pool):
            raise InsufficientWindows(f"{sp}: need {counts[sp]} windows, {len(pool)} available")
        for j in rng.choice(len(pool), size=counts[sp], replace=False):
            taken.add(pool[j])
            picked.append(pool[j])
    order = rng.permutation(len(picked))
    return [windows[picked[i]] for i in order]


def empirical_distribution(windows: list[Window]) -> dict:
    """Per-species share of all window labels."""
    counts = defaultdict(int)
    for w in windows:
        for sp in w.labels:
            counts[sp] += 1
    total = sum(counts.values())
    return {sp: c / total for sp, c in sorted(counts.items())}


# -- file formats ------------------------------------------------------------

def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path, rows: Iterable[dict]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path) -> list[Recording]:
    base = Path(path).parent
    out = []
    for d in read_jsonl(path):
        r = Recording.from_json(d)
        audio = Path(r.audio_path)
        if not audio.is_absolute():
            r = Recording(r.id, str(base / audio), r.foreground, r.background, r.duration,
                          r.source_kind)
        out.append(r)
    return out


def write_manifest(path, recordings: Iterable[Recording]) -> None:
    write_jsonl(path, (r.to_json() for r in recordings))


def read_annotations(path) -> list[Annotation]:
    with open(path, newline="") as fh:
        return [Annotation(row["recording_id"], row["species"], float(row["start_s"]),
                           float(row["end_s"])) for row in csv.DictReader(fh)]


def write_annotations(path, annotations: Iterable[Annotation]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recording_id", "species", "start_s", "end_s"])
        for a in annotations:
            writer.writerow([a.recording_id, a.species, f"{a.start:.6f}", f"{a.end:.6f}"])


def write_splits(path, splits: dict) -> None:
    rows = []
    for name in ("upstream", "eval_reserved"):
        for r in splits[name]:
            rows.append({**r.to_json(), "split": name})
    write_jsonl(path, rows)


def read_windows(path) -> list[Window]:
    return [Window.from_json(d) for d in read_jsonl(path)]


def write_windows(path, windows: Iterable[Window]) -> None:
    write_jsonl(path, (w.to_json() for w in windows))
