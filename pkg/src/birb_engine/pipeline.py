"""Config-driven end-to-end run: split, slice, window, embed, eval, report.

Every stage output is cached under ``work_dir/cache`` keyed by a hash of the
stage parameters and the content of its inputs, so a warm run reuses work
without changing any result.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import platform
import shutil
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .audio import DEFAULT_SAMPLE_RATE, PcenParams, SpectrogramParams, load_waveform
from .corpus import (AR_WINDOW_CAP, Annotation, Ignored, Recording, SplitSpec, TaxonomyMap, Window, build_windows,
                     cap_slices_per_species, construct_splits, middle_crop, read_annotations,
                     read_jsonl, read_manifest, remap_recording, resolve_taxonomy, window_xc_recording,
                     write_jsonl, write_splits, write_windows)
from .embed import (AudioSource, EmbeddingMatrix, PooledMelspecEmbedder, PoolParams,
                    embed_store_read, embed_store_write, external_embed, worker_count)
from .errors import BirbError, ConfigInvalid, StageError
from .evaluation import EvalSettings, evaluate_corpus, exemplar_pools
from .metrics import AucRecord, build_report
from .peakfind import PeakfindParams, Slice, extract_slices

log = logging.getLogger(__name__)

DEFAULTS = {
    "seed": 0,
    "work_dir": "work",
    "output_dir": "out",
    "audio": {"sample_rate": DEFAULT_SAMPLE_RATE, "resample_quality": 5.0},
    "melspec": {"window_ms": 80.0, "hop_ms": 10.0, "n_mels": 160, "log_floor": 0.01,
                "log_scale": 0.1, "fmin": 60.0, "fmax": 10000.0},
    "pcen": {"smoothing_coef": 0.1, "gain": 0.8, "bias": 10.0, "exponent": 0.25, "eps": 1e-6},
    "peakfind": {"slice_len": 6.0, "max_slices": 5, "outlier_sigma": 1.5, "signal_sigma": 0.75,
                 "min_peak_width": 0.5, "max_peak_width": 2.0, "n_widths": 10,
                 "peak_window": 0.6, "peak_energy_factor": 1.5, "literal_energy_filter": False},
    "pool": {"pool_time": None, "pool_mels": 4, "stride_time": None, "stride_mels": None,
             "frontend": "pcen"},
    "windows": {"length": 5.0, "stride": 2.5},
    "retrieval": {"ks": [1, 2, 4, 8, 16], "n_samples": 5, "normalize_first": False,
                  "exclude_exemplars": True},
    "provider": "pooled",
    "providers": {"external": {}},
    "taxonomy": None,
    "learned_representations": None,
    "split": None,
    "queries": None,
    "corpora": [],
}

_CORPUS_KINDS = ("focal", "background", "soundscape")
_CACHE_VERSION = 1


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_override(cfg: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` to a nested config; value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigInvalid(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigInvalid(f"cannot set {key}: {part} is not a section")
    node[parts[-1]] = value


@dataclass
class RunConfig:
    """Merged run configuration.

    Processing parameters are always validated. ``check_inputs`` also
    requires the query/corpus sections and that every referenced file exists;
    single-stage CLI commands turn it off.
    """

    raw: dict
    base_dir: Path
    check_inputs: bool = True
    spec: SpectrogramParams = field(init=False)
    pcen: PcenParams = field(init=False)
    peakfind: PeakfindParams = field(init=False)
    pool: PoolParams = field(init=False)

    def __post_init__(self):
        self.validate_params()
        if self.check_inputs:
            self.validate_inputs()

    @classmethod
    def load(cls, path, overrides=(), check_inputs: bool = True) -> "RunConfig":
        path = Path(path)
        try:
            user = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(user, path.parent, overrides, check_inputs)

    @classmethod
    def from_dict(cls, user: dict, base_dir=".", overrides=(),
                  check_inputs: bool = True) -> "RunConfig":
        raw = _merge(DEFAULTS, user)
        for o in overrides:
            set_override(raw, o)
        return cls(raw, Path(base_dir).resolve(), check_inputs)

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def sample_rate(self) -> int:
        return int(self.raw["audio"]["sample_rate"])

    @property
    def work_dir(self) -> Path:
        return self.path(self.raw["work_dir"])

    @property
    def output_dir(self) -> Path:
        return self.path(self.raw["output_dir"])

    def eval_settings(self) -> EvalSettings:
        r = self.raw["retrieval"]
        return EvalSettings(tuple(int(k) for k in r["ks"]), int(r["n_samples"]), self.seed,
                            bool(r["normalize_first"]), bool(r["exclude_exemplars"]))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def validate_params(self) -> None:
        raw = self.raw
        try:
            self.spec = SpectrogramParams.from_config(raw["melspec"])
            self.pcen = PcenParams.from_config(raw["pcen"])
            self.peakfind = PeakfindParams(**raw["peakfind"])
            pool = {k: v for k, v in raw["pool"].items() if k != "frontend"}
            self.pool = PoolParams(**pool)
            if raw["pool"].get("frontend", "pcen") not in ("pcen", "log"):
                raise ValueError(f"unknown pool frontend {raw['pool']['frontend']!r}")
            if self.spec.fmax > self.sample_rate / 2:
                raise ValueError("melspec.fmax exceeds the Nyquist frequency")
            settings = self.eval_settings()
            if not settings.ks or min(settings.ks) < 1 or settings.n_samples < 1:
                raise ValueError("retrieval.ks must be positive and n_samples >= 1")
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigInvalid(f"invalid parameters: {exc}") from exc

        provider = raw["provider"]
        if provider != "pooled":
            if not isinstance(provider, str) or not provider.startswith("external:"):
                raise ConfigInvalid(f"unknown provider {provider!r}")
            name = provider.split(":", 1)[1]
            ext = raw["providers"].get("external", {}).get(name)
            if not ext or "command" not in ext:
                raise ConfigInvalid(f"external provider {name!r} has no command configured")

    def validate_inputs(self) -> None:
        raw = self.raw
        queries = raw["queries"]
        if not queries or "manifest" not in queries:
            raise ConfigInvalid("queries.manifest is required")
        split_refs = {"@upstream", "@eval_reserved"}
        manifests = [queries["manifest"]]
        names = set()
        for c in raw["corpora"]:
            if c.get("kind") not in _CORPUS_KINDS:
                raise ConfigInvalid(f"corpus {c.get('name')!r}: kind must be one of {_CORPUS_KINDS}")
            if not c.get("name") or c["name"] in names:
                raise ConfigInvalid(f"corpus names must be unique and non-empty: {c.get('name')!r}")
            names.add(c["name"])
            if "manifest" not in c:
                raise ConfigInvalid(f"corpus {c['name']!r} has no manifest")
            if c["manifest"] in split_refs and not raw["split"]:
                raise ConfigInvalid(f"corpus {c['name']!r} references a split but none is configured")
            if c["manifest"] not in split_refs:
                manifests.append(c["manifest"])
            if c["kind"] == "soundscape":
                if "annotations" not in c:
                    raise ConfigInvalid(f"soundscape corpus {c['name']!r} needs annotations")
                manifests.append(c["annotations"])
        if not raw["corpora"]:
            raise ConfigInvalid("at least one corpus is required")
        for key in ("taxonomy", "learned_representations"):
            if raw[key]:
                manifests.append(raw[key])
        for m in manifests:
            if not self.path(m).is_file():
                raise ConfigInvalid(f"referenced file does not exist: {m}")
        if raw["split"]:
            try:
                SplitSpec(frozenset(raw["split"].get("ar_species", ())),
                          frozenset(raw["split"].get("heldout_species", ())), self.seed)
            except BirbError as exc:
                raise ConfigInvalid(str(exc)) from exc


# -- caching -----------------------------------------------------------------

class StageCache:
    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self._file_hashes: dict = {}
        self.hits: list = []
        self.misses: list = []

    def file_hash(self, path) -> str:
        path = str(Path(path).resolve())
        if path not in self._file_hashes:
            h = hashlib.sha256()
            with open(path, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    h.update(chunk)
            self._file_hashes[path] = h.hexdigest()
        return self._file_hashes[path]

    def key(self, stage: str, payload) -> str:
        blob = json.dumps({"stage": stage, "v": _CACHE_VERSION, "payload": payload},
                          sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:24]

    def path(self, stage: str, key: str, suffix: str) -> Path:
        return self.root / f"{stage}-{key}{suffix}"

    def lookup(self, stage, key, suffix) -> Path | None:
        p = self.path(stage, key, suffix)
        if p.exists():
            self.hits.append(stage)
            return p
        self.misses.append(stage)
        return None


def _recordings_fingerprint(cache: StageCache, recordings) -> list:
    return [[r.to_json(), cache.file_hash(r.audio_path)] for r in recordings]


def _atomic_jsonl(path: Path, rows) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    write_jsonl(tmp, rows)
    tmp.replace(path)


# -- stages ------------------------------------------------------------------

def _load_recordings(cfg: RunConfig, manifest, taxonomy) -> list[Recording]:
    recs = read_manifest(cfg.path(manifest))
    if taxonomy is None:
        return recs
    mapped = [remap_recording(r, taxonomy) for r in recs]
    return [r for r in mapped if r is not None]


def stage_split(cfg: RunConfig, cache: StageCache, recordings) -> dict | None:
    if not cfg.raw["split"]:
        return None
    s = cfg.raw["split"]
    spec = SplitSpec(frozenset(s.get("ar_species", ())), frozenset(s.get("heldout_species", ())),
                     cfg.seed, int(s.get("upstream_recordings", 10)))
    key = cache.key("split", {"spec": [sorted(spec.ar_species), sorted(spec.heldout_species),
                                       spec.seed, spec.upstream_recordings],
                              "recordings": [r.to_json() for r in recordings]})
    hit = cache.lookup("split", key, ".jsonl")
    if hit:
        rows = read_jsonl(hit)
        by_id = {r.id: r for r in recordings}
        return {name: [by_id[d["id"]] for d in rows if d["split"] == name]
                for name in ("upstream", "eval_reserved")}
    splits = construct_splits(recordings, spec)
    out = cache.path("split", key, ".jsonl")
    write_splits(out.with_suffix(".tmp"), splits)
    out.with_suffix(".tmp").replace(out)
    return splits


def exemplar_recordings(cfg: RunConfig, recordings, splits) -> list[Recording]:
    """Focal recordings whose slices feed the query exemplar pools.

    Without a split every focal recording is used. With one, heldout species
    draw exemplars from the reserved split and all others from upstream.
    """
    focal = [r for r in recordings if r.source_kind == "focal"]
    if splits is None:
        return focal
    heldout = set(cfg.raw["split"].get("heldout_species", ()))
    upstream = {r.id for r in splits["upstream"]}
    return [r for r in focal
            if (r.foreground in heldout) != (r.id in upstream)]


def stage_slice(cfg: RunConfig, cache: StageCache, recordings) -> list[Slice]:
    params = cfg.raw["peakfind"], cfg.raw["melspec"], cfg.sample_rate
    key = cache.key("slice", {"params": params,
                              "recordings": _recordings_fingerprint(cache, recordings)})
    hit = cache.lookup("slice", key, ".jsonl")
    if hit:
        return [Slice.from_json(d) for d in read_jsonl(hit)]

    def work(r):
        w = load_waveform(r.audio_path, cfg.sample_rate)
        return extract_slices(w, cfg.peakfind, cfg.spec, recording_id=r.id)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        slices = [s for group in pool.map(work, recordings) for s in group]
    if cfg.raw["split"]:
        ar = cfg.raw["split"].get("ar_species", ())
        slices = cap_slices_per_species(slices, {r.id: r.foreground for r in recordings}, ar,
                                        AR_WINDOW_CAP)
    slices.sort(key=lambda s: (s.recording_id, -s.peak_score, s.start))
    _atomic_jsonl(cache.path("slice", key, ".jsonl"), (s.to_json() for s in slices))
    return slices


def query_windows(cfg: RunConfig, slices, recordings) -> list[Window]:
    """Middle crops of the peak-found slices, labelled with the foreground species.

    Peaks clamped to the same start give identical windows; only the first
    (strongest) is kept.
    """
    species_of = {r.id: r.foreground for r in recordings}
    wanted = cfg.raw["queries"].get("species")
    out, seen = [], set()
    for s in slices:
        sp = species_of[s.recording_id]
        if wanted and sp not in wanted:
            continue
        w = middle_crop(s, cfg.raw["windows"]["length"], frozenset({sp}), cfg.peakfind.slice_len)
        if w.id not in seen:
            seen.add(w.id)
            out.append(w)
    return out


def corpus_windows(cfg: RunConfig, corpus: dict, recordings, taxonomy=None) -> list[Window]:
    win, stride = cfg.raw["windows"]["length"], cfg.raw["windows"]["stride"]
    kind = corpus["kind"]
    out = []
    if kind == "soundscape":
        anns = defaultdict(list)
        for a in read_annotations(cfg.path(corpus["annotations"])):
            if taxonomy is not None:
                code = resolve_taxonomy(a.species, taxonomy)
                if code is Ignored:
                    continue
                a = Annotation(a.recording_id, code, a.start, a.end)
            anns[a.recording_id].append(a)
        for r in recordings:
            out.extend(build_windows(r.duration, anns[r.id], win, stride, recording_id=r.id))
    else:
        for r in recordings:
            if r.source_kind != "focal":
                continue
            out.extend(window_xc_recording(r, win, stride, mode=kind))
    return out


def _embedder(cfg: RunConfig) -> PooledMelspecEmbedder:
    return PooledMelspecEmbedder(cfg.spec, cfg.pcen, cfg.pool, cfg.raw["pool"]["frontend"])


def stage_embed(cfg: RunConfig, cache: StageCache, name: str, windows, recordings) -> EmbeddingMatrix:
    provider = cfg.raw["provider"]
    ext = None
    if provider.startswith("external:"):
        ext = cfg.raw["providers"]["external"][provider.split(":", 1)[1]]
    used = {w.recording_id for w in windows}
    recs = [r for r in recordings if r.id in used]
    params = {"provider": provider, "external": ext, "melspec": cfg.raw["melspec"],
              "pcen": cfg.raw["pcen"], "pool": cfg.raw["pool"], "sr": cfg.sample_rate}
    key = cache.key("embed", {"params": params, "windows": [w.to_json() for w in windows],
                              "recordings": _recordings_fingerprint(cache, recs)})
    hit = cache.lookup("embed", key, ".f32le")
    if hit:
        return embed_store_read(hit)
    source = AudioSource.from_recordings(recs, cfg.sample_rate)
    if ext is None:
        matrix = _embedder(cfg).embed_windows(windows, source)
    else:
        protocol_dir = cfg.work_dir / "protocol" / f"{name}-{key}"
        if protocol_dir.exists():
            shutil.rmtree(protocol_dir)
        matrix = external_embed(windows, source, protocol_dir, ext["command"], ext.get("dim"),
                                ext.get("timeout"), provider_tag=ext.get("tag", provider))
        shutil.rmtree(protocol_dir, ignore_errors=True)
    embed_store_write(matrix, cache.path("embed", key, ".f32le"))
    return matrix


def _load_learned(cfg: RunConfig, species) -> dict | None:
    path = cfg.raw["learned_representations"]
    if not path:
        return None
    table = json.loads(cfg.path(path).read_text())
    return {sp: np.asarray(table[sp], dtype=np.float64) for sp in species if sp in table}


def _run_stage(name, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except BirbError as exc:
        raise StageError(name, exc) from exc


def run_pipeline(cfg: RunConfig):
    """Execute all stages; returns the EvalReport and writes outputs to ``output_dir``."""
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = StageCache(cfg.work_dir / "cache")
    taxonomy = TaxonomyMap.load(cfg.path(cfg.raw["taxonomy"])) if cfg.raw["taxonomy"] else None

    query_recs = _run_stage("split", _load_recordings, cfg, cfg.raw["queries"]["manifest"], taxonomy)
    splits = _run_stage("split", stage_split, cfg, cache, query_recs)
    ex_recs = exemplar_recordings(cfg, query_recs, splits)
    slices = _run_stage("slice", stage_slice, cfg, cache, ex_recs)
    write_jsonl(out_dir / "slices.jsonl", (s.to_json() for s in slices))
    if splits is not None:
        write_splits(out_dir / "split.jsonl", splits)

    q_windows = _run_stage("windows", query_windows, cfg, slices, ex_recs)
    write_windows(out_dir / "query_windows.jsonl", q_windows)
    q_matrix = _run_stage("embed", stage_embed, cfg, cache, "queries", q_windows, ex_recs)
    pools = exemplar_pools(q_windows)
    learned = _load_learned(cfg, pools)
    settings = cfg.eval_settings()

    records, skipped = [], []
    for corpus in cfg.raw["corpora"]:
        m = corpus["manifest"]
        if m in ("@upstream", "@eval_reserved"):
            recs = splits[m[1:]]
        else:
            recs = _run_stage("windows", _load_recordings, cfg, m, taxonomy)
        c_windows = _run_stage("windows", corpus_windows, cfg, corpus, recs, taxonomy)
        write_windows(out_dir / f"windows_{corpus['name']}.jsonl", c_windows)
        c_matrix = _run_stage("embed", stage_embed, cfg, cache, corpus["name"], c_windows, recs)
        recs_, skipped_ = _run_stage("eval", evaluate_corpus, q_matrix, pools, c_matrix, c_windows,
                                     corpus["name"], settings,
                                     bool(corpus.get("exclude_background", False)), learned)
        records.extend(recs_)
        skipped.extend(skipped_)

    write_jsonl(out_dir / "results.jsonl", (r.to_json() for r in records))
    report = _run_stage("report", build_report, records, skipped)
    (out_dir / "report.json").write_text(report.dumps())
    (out_dir / "report.csv").write_text(report.to_csv())
    meta = {
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.raw,
        "versions": {"birb_engine": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }
    log.info("stage cache: %d hits, %d misses", cache.hits, cache.misses)
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return report


def read_records(path) -> list[AucRecord]:
    return [AucRecord.from_json(d) for d in read_jsonl(path)]
