"""Evaluation against human labels: relevance, precision/recall, agreement.

Given per-subject binary labels over the decoded corpus, this module scores
the cleaned result set and two baselines:

  - Google: the cue-less subsearch (the basic term alone);
  - SumGoogle: the union of all subsearch images.

precision = |A n B| / |A| and recall = |A n B| / |B|, where A is the retrieved
set and B one subject's positive set. Undefined ratios (empty A or B) are
reported as None, never coerced to zero, and poison the aggregate they would
have entered.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import LabelsError
from .matching import ResultSet
from .util import atomic_write_text

log = logging.getLogger(__name__)

METHOD_SIMSEA = "SIMSEA"
METHOD_GOOGLE = "Google"
METHOD_SUMGOOGLE = "SumGoogle"
METHODS = (METHOD_SIMSEA, METHOD_GOOGLE, METHOD_SUMGOOGLE)

_MISSING_LIST_LIMIT = 20


@dataclass
class GroundTruthLabels:
    subjects: list[str]
    image_ids: list[str]
    labels: dict[tuple[str, str], bool]   # (subject_id, image_id) -> member?

    def positives(self, subject_id: str) -> set[str]:
        return {
            image_id for image_id in self.image_ids
            if self.labels[(subject_id, image_id)]
        }


@dataclass
class RelevanceScore:
    """Per image, how many subjects called it a category member (0..S)."""

    scores: dict[str, int]
    n_subjects: int

    def histogram(self) -> list[tuple[int, int]]:
        counts = [0] * (self.n_subjects + 1)
        for score in self.scores.values():
            counts[score] += 1
        return list(enumerate(counts))


def load_labels(path: Path | str, corpus_ids: Iterable[str]) -> GroundTruthLabels:
    """Read the labels CSV (header image_id,subject_id,label with label 0/1)
    and require a complete (subject, image) matrix over the given corpus."""
    path = Path(path)
    corpus_list = list(corpus_ids)
    corpus_set = set(corpus_list)
    labels: dict[tuple[str, str], bool] = {}
    subjects: set[str] = set()
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise LabelsError(f"cannot read labels file {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        expected = {"image_id", "subject_id", "label"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise LabelsError(
                f"{path}: header must be image_id,subject_id,label, "
                f"got {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, start=2):
            image_id = row["image_id"]
            subject_id = row["subject_id"]
            value = row["label"]
            if image_id not in corpus_set:
                raise LabelsError(
                    f"{path}:{lineno}: unknown image id {image_id!r}"
                )
            if value not in ("0", "1"):
                raise LabelsError(
                    f"{path}:{lineno}: label must be 0 or 1, got {value!r}"
                )
            key = (subject_id, image_id)
            if key in labels:
                raise LabelsError(
                    f"{path}:{lineno}: duplicate cell subject={subject_id!r} "
                    f"image={image_id!r}"
                )
            labels[key] = value == "1"
            subjects.add(subject_id)

    if not subjects:
        raise LabelsError(f"{path}: no label rows found")
    missing = [
        (s, i) for s in sorted(subjects) for i in corpus_list
        if (s, i) not in labels
    ]
    if missing:
        shown = ", ".join(f"({s},{i})" for s, i in missing[:_MISSING_LIST_LIMIT])
        more = "" if len(missing) <= _MISSING_LIST_LIMIT else f" and {len(missing) - _MISSING_LIST_LIMIT} more"
        raise LabelsError(f"{path}: missing label cells: {shown}{more}")
    return GroundTruthLabels(
        subjects=sorted(subjects), image_ids=corpus_list, labels=labels
    )


def relevance_scores(labels: GroundTruthLabels) -> RelevanceScore:
    scores = {
        image_id: sum(
            1 for s in labels.subjects if labels.labels[(s, image_id)]
        )
        for image_id in labels.image_ids
    }
    return RelevanceScore(scores=scores, n_subjects=len(labels.subjects))


def precision_recall(a: set, b: set) -> tuple[float | None, float | None]:
    """(|A n B| / |A|, |A n B| / |B|); None marks an undefined ratio."""
    hits = len(a & b)
    precision = hits / len(a) if a else None
    recall = hits / len(b) if b else None
    return precision, recall


def _mean_var(values: list[float | None]) -> tuple[float | None, float | None]:
    if not values or any(v is None for v in values):
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.var())


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j < len(x) and sorted_x[j] == sorted_x[i]:
            j += 1
        ranks[order[i:j]] = (i + j - 1) / 2.0 + 1.0
        i = j
    return ranks


def rank_relevance_agreement(result: ResultSet, relevance: RelevanceScore) -> float | None:
    """Spearman rank correlation between ranking factors and human relevance
    over the result set. None when either side is constant (undefined)."""
    if not result.items:
        raise ValueError("agreement requires a non-empty result set")
    x = np.array([r for _, r in result.items], dtype=np.float64)
    y = np.array([relevance.scores[image_id] for image_id, _ in result.items],
                 dtype=np.float64)
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    denom = np.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return None
    return float((dx @ dy) / denom)


@dataclass
class EvalReport:
    """Per-method, per-subject precision/recall plus aggregates and the
    relevance summary."""

    methods: dict[str, dict[str, tuple[float | None, float | None]]]
    aggregates: dict[str, dict[str, float | None]]
    relevance_histogram: list[tuple[int, int]]
    rank_relevance_agreement: float | None
    google_label: str | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "methods": {
                method: {
                    subject: {"precision": p, "recall": r}
                    for subject, (p, r) in rows.items()
                }
                for method, rows in self.methods.items()
            },
            "aggregates": self.aggregates,
            "relevance_histogram": [
                {"count": c, "frequency": f} for c, f in self.relevance_histogram
            ],
            "rank_relevance_agreement": self.rank_relevance_agreement,
            "google_baseline_label": self.google_label,
            "notes": self.notes,
        }


def evaluate_methods(
    simsea: ResultSet,
    google: set[str] | None,
    subsearch_union: set[str],
    labels: GroundTruthLabels,
    *,
    google_label: str | None = None,
) -> EvalReport:
    """Score the cleaned set and both baselines against every subject.

    google is the image set of the cue-less subsearch (None when the manifest
    has no bare-term subsearch, which marks the Google rows undefined);
    subsearch_union is every decoded image. Whenever a subject's positive set
    is contained in the union, SumGoogle recall is exactly 1 and asserted so.
    """
    relevance = relevance_scores(labels)
    simsea_set = set(simsea.image_ids)
    method_sets: dict[str, set[str] | None] = {
        METHOD_SIMSEA: simsea_set,
        METHOD_GOOGLE: google,
        METHOD_SUMGOOGLE: subsearch_union,
    }
    methods: dict[str, dict[str, tuple[float | None, float | None]]] = {}
    for method, a in method_sets.items():
        rows: dict[str, tuple[float | None, float | None]] = {}
        for subject in labels.subjects:
            b = labels.positives(subject)
            if a is None:
                rows[subject] = (None, None)
                continue
            precision, recall = precision_recall(a, b)
            if method == METHOD_SUMGOOGLE and b and b <= subsearch_union:
                assert recall == 1.0, "recall must be exactly 1 when B is drawn from the pooled images"
            rows[subject] = (precision, recall)
        methods[method] = rows

    aggregates: dict[str, dict[str, float | None]] = {}
    for method, rows in methods.items():
        precisions = [p for p, _ in rows.values()]
        recalls = [r for _, r in rows.values()]
        mean_p, var_p = _mean_var(precisions)
        mean_r, var_r = _mean_var(recalls)
        aggregates[method] = {
            "mean_precision": mean_p,
            "var_precision": var_p,
            "mean_recall": mean_r,
            "var_recall": var_r,
        }

    agreement = rank_relevance_agreement(simsea, relevance) if simsea.items else None
    notes = []
    if google_label is not None:
        notes.append(
            f"Google baseline taken as the cue-less subsearch {google_label!r} "
            "from the manifest (assumption: the bare-term query stands in for "
            "a plain search)"
        )
    elif google is None:
        notes.append(
            "no cue-less subsearch in the manifest; Google baseline undefined"
        )
    return EvalReport(
        methods=methods,
        aggregates=aggregates,
        relevance_histogram=relevance.histogram(),
        rank_relevance_agreement=agreement,
        google_label=google_label,
        notes=notes,
    )


def write_report_csv(report: EvalReport, path: Path | str) -> None:
    lines = ["method,subject,precision,recall"]
    for method in METHODS:
        rows = report.methods.get(method, {})
        for subject, (p, r) in rows.items():
            ptxt = "" if p is None else repr(p)
            rtxt = "" if r is None else repr(r)
            lines.append(f"{method},{subject},{ptxt},{rtxt}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_relevance_histogram_csv(report: EvalReport, path: Path | str) -> None:
    lines = ["count,frequency"]
    lines.extend(f"{c},{f}" for c, f in report.relevance_histogram)
    atomic_write_text(path, "\n".join(lines) + "\n")
