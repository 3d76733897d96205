"""Command-line entry point: ``birb-engine <subcommand>``.

Exit codes: 0 success, 2 config error, 3 data error, 4 protocol error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

from .audio import load_waveform
from .corpus import (Recording, SplitSpec, Window, build_windows, construct_splits, middle_crop,
                     read_annotations, read_jsonl, read_manifest, window_xc_recording,
                     write_jsonl, write_splits)
from .embed import AudioSource, embed_store_read, embed_store_write, external_embed
from .errors import BirbError, ConfigInvalid
from .evaluation import EvalSettings, evaluate_corpus, exemplar_pools
from .metrics import build_report
from .peakfind import Slice, extract_slices
from .pipeline import RunConfig, _embedder, read_records, run_pipeline
from .synth import generate_synthetic_corpus

log = logging.getLogger("birb_engine")

_AUDIO_SUFFIXES = {".wav", ".flac"}


def _config(args, check_inputs=False) -> RunConfig:
    if args.config:
        return RunConfig.load(args.config, args.set or (), check_inputs=check_inputs)
    return RunConfig.from_dict({}, Path.cwd(), args.set or (), check_inputs=check_inputs)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _codes(text: str) -> frozenset:
    return frozenset(x.strip() for x in (text or "").split(",") if x.strip())


def _input_recordings(path: Path) -> list[Recording]:
    """A manifest, or a directory of audio files (ids from file stems)."""
    if path.is_dir():
        import soundfile as sf
        out = []
        for f in sorted(path.iterdir()):
            if f.suffix.lower() in _AUDIO_SUFFIXES:
                out.append(Recording(f.stem, str(f), "", frozenset(), sf.info(str(f)).duration))
        return out
    return read_manifest(path)


def _windows_with_audio(path) -> tuple[list[Window], dict]:
    rows = read_jsonl(path)
    base = Path(path).parent
    audio = {}
    for d in rows:
        if "audio_path" in d:
            p = Path(d["audio_path"])
            audio[d["recording_id"]] = str(p if p.is_absolute() else base / p)
    return [Window.from_json(d) for d in rows], audio


def cmd_slice(args) -> None:
    cfg = _config(args)
    rows = []
    for r in _input_recordings(Path(args.input)):
        w = load_waveform(r.audio_path, cfg.sample_rate)
        rows.extend(s.to_json() for s in extract_slices(w, cfg.peakfind, cfg.spec, r.id))
    write_jsonl(args.out, rows)


def cmd_windows(args) -> None:
    cfg = _config(args)
    win, stride = cfg.raw["windows"]["length"], cfg.raw["windows"]["stride"]
    recs = read_manifest(args.manifest)
    by_id = {r.id: r for r in recs}
    windows: list[Window] = []
    if args.kind == "query":
        if not args.slices:
            raise ConfigInvalid("--slices is required for query windows")
        seen = set()
        for d in read_jsonl(args.slices):
            s = Slice.from_json(d)
            w = middle_crop(s, win, frozenset({by_id[s.recording_id].foreground}),
                            cfg.peakfind.slice_len)
            if w.id not in seen:
                seen.add(w.id)
                windows.append(w)
    elif args.kind == "soundscape":
        if not args.annotations:
            raise ConfigInvalid("--annotations is required for soundscape windows")
        anns = defaultdict(list)
        for a in read_annotations(args.annotations):
            anns[a.recording_id].append(a)
        for r in recs:
            windows.extend(build_windows(r.duration, anns[r.id], win, stride, recording_id=r.id))
    else:
        for r in recs:
            windows.extend(window_xc_recording(r, win, stride, mode=args.kind))
    audio = {r.id: str(Path(r.audio_path).resolve()) for r in recs}
    write_jsonl(args.out, ({**w.to_json(), "audio_path": audio[w.recording_id]} for w in windows))


def cmd_split(args) -> None:
    spec = SplitSpec(_codes(args.ar), _codes(args.heldout), args.seed, args.upstream_recordings)
    write_splits(args.out, construct_splits(read_manifest(args.manifest), spec))


def cmd_embed(args) -> None:
    cfg = _config(args)
    windows, audio = _windows_with_audio(args.corpus)
    missing = sorted({w.recording_id for w in windows} - set(audio))
    if missing:
        raise ConfigInvalid(f"windows file lacks audio_path for {len(missing)} recordings")
    source = AudioSource(audio, cfg.sample_rate)
    provider = args.provider or cfg.raw["provider"]
    if provider == "pooled":
        matrix = _embedder(cfg).embed_windows(windows, source)
    elif provider.startswith("external:"):
        name = provider.split(":", 1)[1]
        ext = cfg.raw["providers"].get("external", {}).get(name)
        if not ext or "command" not in ext:
            raise ConfigInvalid(f"external provider {name!r} has no command configured")
        protocol_dir = Path(args.protocol_dir or Path(args.out).with_suffix(".protocol"))
        matrix = external_embed(windows, source, protocol_dir, ext["command"], ext.get("dim"),
                                ext.get("timeout"), provider_tag=ext.get("tag", provider))
    else:
        raise ConfigInvalid(f"unknown provider {provider!r}")
    embed_store_write(matrix, args.out)


def cmd_eval(args) -> None:
    q_windows = [Window.from_json(d) for d in read_jsonl(args.queries)]
    c_windows = [Window.from_json(d) for d in read_jsonl(args.corpus_windows)]
    learned = json.loads(Path(args.learned).read_text()) if args.learned else None
    settings = EvalSettings(tuple(args.ks), args.samples, args.seed)
    records, skipped = evaluate_corpus(
        embed_store_read(args.exemplar_store), exemplar_pools(q_windows),
        embed_store_read(args.corpus_store), c_windows, args.corpus_name, settings,
        args.exclude_background, learned)
    for s in skipped:
        log.warning("skipped %s on %s: %s", s["species"], s["corpus"], s["reason"])
    write_jsonl(args.out, (r.to_json() for r in records))


def cmd_report(args) -> None:
    report = build_report(read_records(args.input))
    text = report.dumps() if args.format == "json" else report.to_csv()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)


def cmd_synth(args) -> None:
    info = generate_synthetic_corpus(args.out, n_focal=args.recordings,
                                     n_soundscapes=args.soundscapes,
                                     overlap_prob=args.overlap, seed=args.seed)
    print(json.dumps(info["paths"], indent=2))


def cmd_run(args) -> None:
    report = run_pipeline(RunConfig.load(args.config, args.set or ()))
    for (provider, corpus, k), v in sorted(report.croc_auc.items()):
        print(f"{provider}\t{corpus}\tk={k}\tcROC-AUC={v:.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="birb-engine", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON run config supplying processing parameters")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. melspec.n_mels=128")
        return p

    p = with_config(sub.add_parser("slice", help="peak-find slices from recordings"))
    p.add_argument("--input", required=True, help="directory of audio files or a manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slice)

    p = with_config(sub.add_parser("windows", help="build labelled windows"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", choices=["focal", "background", "soundscape", "query"],
                   default="focal")
    p.add_argument("--annotations", help="annotation CSV (soundscape)")
    p.add_argument("--slices", help="slices JSONL (query)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_windows)

    p = sub.add_parser("split", help="construct upstream / eval_reserved splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ar", default="", help="comma-separated artificially rare species")
    p.add_argument("--heldout", default="", help="comma-separated heldout species")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--upstream-recordings", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = with_config(sub.add_parser("embed", help="embed windows into a store"))
    p.add_argument("--provider", help="pooled or external:<name>")
    p.add_argument("--corpus", required=True, help="windows JSONL carrying audio_path")
    p.add_argument("--protocol-dir", help="scratch directory for external embedders")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="score retrieval tasks")
    p.add_argument("--queries", required=True, help="query windows JSONL (exemplar pools)")
    p.add_argument("--exemplar-store", required=True)
    p.add_argument("--corpus-store", required=True)
    p.add_argument("--corpus-windows", required=True)
    p.add_argument("--corpus-name", default="corpus")
    p.add_argument("--ks", type=_int_list, default=[1, 2, 4, 8, 16])
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exclude-background", action="store_true")
    p.add_argument("--learned", help="JSON of learned-representation vectors")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate results into a report")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--recordings", type=int, default=20, help="focal recordings per species")
    p.add_argument("--soundscapes", type=int, default=6)
    p.add_argument("--overlap", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run the whole pipeline from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except BirbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
