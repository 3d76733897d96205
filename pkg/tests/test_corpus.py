import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birb_engine.corpus import (Annotation, Ignored, Recording, SplitSpec, TaxonomyMap, Window,
                                build_windows, cap_slices_per_species, construct_splits,
                                empirical_distribution, largest_remainder, middle_crop,
                                read_annotations, read_manifest, remap_recording,
                                resample_to_distribution, resolve_taxonomy, window_starts,
                                window_xc_recording, write_annotations, write_manifest)
from birb_engine.errors import (BadSliceLength, DataError, InsufficientWindows,
                                SpeciesUnavailable, UnknownSpecies)
from birb_engine.peakfind import Slice
from manifests import random_manifest, species_codes


def test_taxonomy():
    tax = TaxonomyMap({"amecro": "amecro", "oldname": "newname"})
    assert resolve_taxonomy("reevir1", tax) is Ignored
    assert resolve_taxonomy("amecro", tax) == "amecro"
    assert resolve_taxonomy("oldname", tax) == "newname"
    with pytest.raises(UnknownSpecies):
        resolve_taxonomy("zzz", tax)


def test_remap_recording_drops_ignored():
    tax = TaxonomyMap({"amecro": "amecro", "norcar": "norcar"})
    r = Recording("a", "a.wav", "amecro", frozenset({"gnwtea", "norcar"}), 5.0)
    assert remap_recording(r, tax).background == {"norcar"}
    assert remap_recording(Recording("b", "b.wav", "grnjay", frozenset(), 5.0), tax) is None


def test_window_grid_examples():
    assert window_starts(10.0) == [0.0, 2.5, 5.0]
    assert window_starts(5.0) == [0.0]
    assert window_starts(2.0) == [0.0]
    assert window_starts(7.49) == [0.0]
    assert window_starts(7.5) == [0.0, 2.5]


@given(st.floats(0.01, 3600.0))
def test_window_count_formula(d):
    starts = window_starts(d)
    assert len(starts) == math.floor((max(d, 5.0) - 5.0) / 2.5) + 1
    assert np.allclose(np.diff(starts), 2.5)
    assert starts[0] == 0.0


def test_overlapping_annotation_labels_all_windows():
    ws = build_windows(10.0, [Annotation("r", "sss", 4.9, 5.1)], recording_id="r")
    assert [w.start for w in ws if "sss" in w.labels] == [0.0, 2.5, 5.0]


def test_touching_annotation_does_not_count():
    ws = build_windows(10.0, [Annotation("r", "sss", 7.5, 8.0)], recording_id="r")
    assert [w.start for w in ws if "sss" in w.labels] == [5.0]


def test_focal_window_propagation():
    r = Recording("x", "x.wav", "amecro", frozenset({"blujay"}), 6.0)
    ws = window_xc_recording(r)
    assert len(ws) == 1 and ws[0].labels == {"amecro"} and ws[0].background == {"blujay"}
    assert window_xc_recording(r, mode="background")[0].labels == {"blujay"}
    bare = Recording("y", "y.wav", "amecro", frozenset(), 12.0)
    assert window_xc_recording(bare, mode="background") == []


def test_middle_crop():
    assert middle_crop(Slice("r", 12.0, 6.0, 1.0)).start == 12.5
    w = middle_crop(Slice("r", 0.0, 6.0, 1.0), labels={"a"})
    assert (w.start, w.length, w.labels) == (0.5, 5.0, {"a"})
    with pytest.raises(BadSliceLength):
        middle_crop(Slice("r", 0.0, 5.0, 1.0))


def test_window_id_and_json():
    w = Window("xc1", 2.5, 5.0, frozenset({"b", "a"}))
    assert w.id == "xc1@2.500"
    assert Window.from_json(w.to_json()) == w


def _focal(sp, n, start=0):
    return [Recording(f"{sp}_{i:03d}", "a.wav", sp, frozenset(), 10.0) for i in range(start, start + n)]


def test_ar_species_counts():
    recs = _focal("rare", 25) + _focal("common", 30)
    s = construct_splits(recs, SplitSpec({"rare"}, set(), seed=1))
    up = Counter(r.foreground for r in s["upstream"])
    assert up["rare"] == 10 and up["common"] == 30
    assert sum(r.foreground == "rare" for r in s["eval_reserved"]) == 15


def test_ar_species_with_few_recordings(caplog):
    s = construct_splits(_focal("rare", 7), SplitSpec({"rare"}, set()))
    assert len(s["upstream"]) == 7 and s["eval_reserved"] == []
    assert "only 7" in caplog.text


def test_heldout_background_excludes_recording():
    r = Recording("a", "a.wav", "xxx", frozenset({"held"}), 5.0)
    s = construct_splits([r] + _focal("yyy", 3), SplitSpec(set(), {"held"}))
    assert [x.id for x in s["eval_reserved"]] == ["a"]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(20, 300))
def test_split_invariants(seed, n):
    recs = random_manifest(n, 12, seed=seed)
    codes = species_codes(12)
    spec = SplitSpec(set(codes[:3]), set(codes[3:6]), seed=seed)
    s = construct_splits(recs, spec)
    up, res = s["upstream"], s["eval_reserved"]
    assert sorted(r.id for r in up + res) == sorted(r.id for r in recs)
    assert not {r.id for r in up} & {r.id for r in res}
    assert all(not (r.species & spec.heldout_species) for r in up)
    for sp in spec.ar_species:
        eligible = [r for r in recs if r.foreground == sp and not r.species & spec.heldout_species]
        assert sum(r.foreground == sp for r in up) == min(10, len(eligible))
    assert construct_splits(list(reversed(recs)), spec) == s


def test_largest_remainder():
    assert largest_remainder({"a": 0.5, "b": 0.5}, 20) == {"a": 10, "b": 10}
    assert largest_remainder({"a": 1 / 3, "b": 1 / 3, "c": 1 / 3}, 10) == {"a": 4, "b": 3, "c": 3}
    assert sum(largest_remainder({"a": 0.123, "b": 0.877}, 17).values()) == 17


def _single_label(n_a, n_b):
    return ([Window(f"a{i}", 0.0, 5.0, {"aaa"}) for i in range(n_a)]
            + [Window(f"b{i}", 0.0, 5.0, {"bbb"}) for i in range(n_b)])


def test_resample_uniform_target():
    ws = _single_label(90, 10)
    out = resample_to_distribution(ws, {"aaa": 0.5, "bbb": 0.5}, 20, seed=3)
    assert Counter(next(iter(w.labels)) for w in out) == {"aaa": 10, "bbb": 10}
    assert len(set(w.id for w in out)) == 20


def test_resample_identity_is_permutation():
    ws = _single_label(30, 12)
    out = resample_to_distribution(ws, empirical_distribution(ws), len(ws), seed=0)
    assert sorted(w.id for w in out) == sorted(w.id for w in ws)


def test_resample_errors():
    ws = _single_label(5, 5)
    with pytest.raises(SpeciesUnavailable):
        resample_to_distribution(ws, {"aaa": 0.5, "zzz": 0.5}, 4)
    with pytest.raises(InsufficientWindows):
        resample_to_distribution(ws, {"aaa": 1.0}, 8)


def test_cap_slices():
    slices = [Slice(f"r{i}", 0.0, 6.0, float(i)) for i in range(80)]
    species = {f"r{i}": ("rare" if i < 60 else "common") for i in range(80)}
    kept = cap_slices_per_species(slices, species, {"rare"}, cap=50)
    assert sum(species[s.recording_id] == "rare" for s in kept) == 50
    assert sum(species[s.recording_id] == "common" for s in kept) == 20
    assert min(s.peak_score for s in kept if species[s.recording_id] == "rare") == 10.0


def test_manifest_round_trip(tmp_path):
    recs = random_manifest(20, 4)
    write_manifest(tmp_path / "m.jsonl", recs)
    back = read_manifest(tmp_path / "m.jsonl")
    assert [r.audio_path for r in back] == [str(tmp_path / r.audio_path) for r in recs]
    assert [(r.id, r.foreground, r.background, r.duration) for r in back] == \
        [(r.id, r.foreground, r.background, r.duration) for r in recs]


def test_annotations_round_trip(tmp_path):
    anns = [Annotation("r", "aaa", 0.25, 1.5), Annotation("s", "bbb", 3.0, 4.125)]
    write_annotations(tmp_path / "a.csv", anns)
    assert read_annotations(tmp_path / "a.csv") == anns


def test_validation():
    with pytest.raises(DataError):
        Recording("a", "a.wav", "x", frozenset({"x"}), 5.0)
    with pytest.raises(DataError):
        Annotation("a", "x", 2.0, 1.0)
    with pytest.raises(DataError):
        SplitSpec({"x"}, {"x"})
