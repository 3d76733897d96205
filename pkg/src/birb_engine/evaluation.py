"""Run retrieval tasks over a corpus and collect per-sample ROC-AUC records."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import Window
from .embed import EmbeddingMatrix
from .errors import DimensionMismatch
from .metrics import AucRecord, roc_auc
from .retrieval import (DEFAULT_KS, DEFAULT_SAMPLES, Query, build_centroid_query, rank_candidates,
                        sample_exemplar_sets)


@dataclass(frozen=True)
class EvalSettings:
    ks: tuple = DEFAULT_KS
    n_samples: int = DEFAULT_SAMPLES
    seed: int = 0
    normalize_first: bool = False
    exclude_exemplars: bool = True


def exemplar_pools(windows: Iterable[Window]) -> dict:
    """Species -> sorted exemplar window ids, from the windows' labels."""
    pools = defaultdict(set)
    for w in windows:
        for sp in w.labels:
            pools[sp].add(w.id)
    return {sp: sorted(ids) for sp, ids in sorted(pools.items())}


def _candidates(corpus: EmbeddingMatrix, windows: dict, species: str, exclude_background: bool):
    keep, flags = [], []
    for wid in corpus.ids:
        w = windows[wid]
        positive = species in w.labels
        if exclude_background and not positive and species in w.background:
            continue
        keep.append(wid)
        flags.append(positive)
    return keep, np.array(flags, dtype=bool)


def _score(query: Query, corpus: EmbeddingMatrix, windows: dict, exclude: Sequence[str]):
    ranked = rank_candidates(query, corpus, lambda wid: query.species in windows[wid].labels,
                             exclude=exclude)
    pos, neg = ranked.split_scores()
    return pos, neg


def evaluate_corpus(exemplars: EmbeddingMatrix, pools: dict, corpus: EmbeddingMatrix,
                    corpus_windows: Iterable[Window], corpus_name: str,
                    settings: EvalSettings | None = None, exclude_background: bool = False,
                    learned: dict | None = None) -> tuple[list, list]:
    """Evaluate every species in ``pools`` against one candidate corpus.

    Returns ``(records, skipped)``. Species without positives (or negatives)
    among the candidates are skipped with a reason instead of failing.
    ``learned`` maps species to learned-representation vectors; those
    queries are recorded with ``k = 0``.
    """
    settings = settings or EvalSettings()
    windows = {w.id: w for w in corpus_windows}
    if exemplars.n and corpus.n and exemplars.d != corpus.d:
        raise DimensionMismatch(f"exemplar d={exemplars.d}, corpus d={corpus.d}")
    tag = corpus.provider_tag
    records, skipped = [], []
    for species in sorted(set(pools) | set(learned or {})):
        keep, flags = _candidates(corpus, windows, species, exclude_background)
        n_pos, n_neg = int(flags.sum()), int((~flags).sum())
        if n_pos == 0 or n_neg == 0:
            skipped.append({"provider_tag": tag, "corpus": corpus_name, "species": species,
                            "reason": "no_positives" if n_pos == 0 else "no_negatives"})
            continue
        sub = corpus.subset(keep)
        if species in pools and pools[species]:
            sets = sample_exemplar_sets(pools[species], settings.ks, settings.n_samples,
                                        settings.seed, species)
            for es in sets:
                q = build_centroid_query(exemplars.rows(es.window_ids), species,
                                         settings.normalize_first, es.window_ids)
                excl = es.window_ids if settings.exclude_exemplars else ()
                pos, neg = _score(q, sub, windows, excl)
                if len(pos) == 0 or len(neg) == 0:
                    continue
                records.append(AucRecord(species, corpus_name, es.k, es.sample_index,
                                         roc_auc(pos, neg), len(pos), len(neg),
                                         es.effective_k, tag))
        if learned and species in learned:
            vec = np.asarray(learned[species], dtype=np.float64)
            if len(vec) != corpus.d:
                raise DimensionMismatch(f"{species}: learned d={len(vec)}, corpus d={corpus.d}")
            q = Query(species, vec, "learned_representation")
            pos, neg = _score(q, sub, windows, ())
            records.append(AucRecord(species, corpus_name, 0, 0, roc_auc(pos, neg),
                                     len(pos), len(neg), 0, tag))
    return records, skipped
