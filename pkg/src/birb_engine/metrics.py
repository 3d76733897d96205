"""ROC-AUC per ranked list and geometric-mean class averaging (cROC-AUC)."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.stats import rankdata

from .errors import AllSpeciesSkipped, EmptySide


@dataclass(frozen=True)
class AucRecord:
    species: str
    corpus: str
    k: int
    sample_index: int
    roc_auc: float
    n_pos: int
    n_neg: int
    effective_k: int = 0
    provider_tag: str = ""

    def to_json(self) -> dict:
        return {"species": self.species, "k": self.k, "effective_k": self.effective_k,
                "sample": self.sample_index, "corpus": self.corpus, "roc_auc": self.roc_auc,
                "n_pos": self.n_pos, "n_neg": self.n_neg, "provider_tag": self.provider_tag}

    @classmethod
    def from_json(cls, d: dict) -> "AucRecord":
        return cls(d["species"], d["corpus"], int(d["k"]), int(d["sample"]), float(d["roc_auc"]),
                   int(d.get("n_pos", 1)), int(d.get("n_neg", 1)),
                   int(d.get("effective_k", d["k"])), d.get("provider_tag", ""))


def roc_auc(positive_scores, negative_scores) -> float:
    """P(positive outranks negative), ties counting one half.

    Computed from mid-ranks of the pooled scores (Mann-Whitney U / (P * N)).
    """
    pos = np.asarray(positive_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(negative_scores, dtype=np.float64).reshape(-1)
    if len(pos) == 0 or len(neg) == 0:
        raise EmptySide(f"ROC-AUC needs both sides: {len(pos)} positives, {len(neg)} negatives")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def average_over_samples(records: Iterable[AucRecord]) -> float:
    values = [r.roc_auc for r in records]
    if not values:
        raise ValueError("no records to average")
    return float(np.mean(values))


def geometric_croc_auc(per_species: dict, skipped: list | None = None) -> float:
    """Geometric mean of per-species ROC-AUC.

    Species whose value is missing, non-finite or not positive are left out;
    when ``skipped`` is given they are appended to it as (species, reason).
    """
    logs = []
    for sp in sorted(per_species):
        v = per_species[sp]
        if v is None or not math.isfinite(v):
            reason = "undefined"
        elif v <= 0:
            reason = "zero_auc"
        else:
            logs.append(math.log(v))
            continue
        if skipped is not None:
            skipped.append((sp, reason))
    if not logs:
        raise AllSpeciesSkipped("no species has a defined, positive ROC-AUC")
    return math.exp(math.fsum(logs) / len(logs))


@dataclass
class EvalReport:
    records: list = field(default_factory=list)
    per_species_mean: dict = field(default_factory=dict)  # (provider, corpus, k) -> {species: auc}
    croc_auc: dict = field(default_factory=dict)  # (provider, corpus, k) -> float
    skipped_species: list = field(default_factory=list)  # dicts with a reason

    def to_json(self) -> dict:
        def key(t):
            return "|".join(str(x) for x in t)
        return {
            "records": [r.to_json() for r in self.records],
            "per_species_mean": {key(t): v for t, v in sorted(self.per_species_mean.items())},
            "croc_auc": {key(t): v for t, v in sorted(self.croc_auc.items())},
            "skipped_species": self.skipped_species,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """cROC-AUC table: one row per provider, one column per corpus and k."""
        columns = sorted({(c, k) for _, c, k in self.croc_auc}, key=lambda t: (t[0], t[1]))
        providers = sorted({p for p, _, _ in self.croc_auc})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["provider"] + [f"{c}/k={k}" for c, k in columns])
        for p in providers:
            row = [p]
            for c, k in columns:
                v = self.croc_auc.get((p, c, k))
                row.append("" if v is None else f"{v:.6f}")
            writer.writerow(row)
        return buf.getvalue()


def build_report(records: Iterable[AucRecord], skipped: Iterable[dict] = ()) -> EvalReport:
    """Reduce per-sample records to per-species means and cROC-AUC per (provider, corpus, k)."""
    records = sorted(records, key=lambda r: (r.provider_tag, r.corpus, r.k, r.species,
                                             r.sample_index))
    grouped = defaultdict(lambda: defaultdict(list))
    for r in records:
        grouped[(r.provider_tag, r.corpus, r.k)][r.species].append(r)
    report = EvalReport(records=records, skipped_species=list(skipped))
    for key in sorted(grouped):
        means = {sp: average_over_samples(rs) for sp, rs in sorted(grouped[key].items())}
        report.per_species_mean[key] = means
        dropped = []
        try:
            report.croc_auc[key] = geometric_croc_auc(means, dropped)
        except AllSpeciesSkipped:
            pass
        provider, corpus, k = key
        for sp, reason in dropped:
            report.skipped_species.append({"provider_tag": provider, "corpus": corpus, "k": k,
                                           "species": sp, "reason": reason})
    report.skipped_species.sort(key=lambda d: json.dumps(d, sort_keys=True))
    return report


def records_from_jsonl(lines: Iterable[str]) -> list[AucRecord]:
    return [AucRecord.from_json(json.loads(line)) for line in lines if line.strip()]
