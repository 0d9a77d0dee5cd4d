"""Cross-subsearch similarity, match counting, and result selection.

Images from different subsearches are compared pairwise with the Hellinger
distance between their visual-word histograms:

    H(P, Q) = sqrt(1 - BC(P, Q)),   BC(P, Q) = sum_x sqrt(P(x) Q(x))

H lies in [0, 1]; 0 means identical distributions, 1 disjoint support. Images
from the same subsearch are never compared: a topic that floods a single
subsearch must not look relevant. Every image's ranking factor r is the count
of its cross-subsearch matches (distance at or below the match threshold), and
the result set keeps images with r above a selection threshold, ordered by
descending r.
"""
from __future__ import annotations

import json
import logging
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .codebook import BowVector
from .errors import DegenerateVectorError, MatchingError
from .util import atomic_write_text

log = logging.getLogger(__name__)

METRIC_HELLINGER = "hellinger"
METRIC_CHI_SQUARE = "chi_square"
METRICS = (METRIC_HELLINGER, METRIC_CHI_SQUARE)

DEFAULT_MATCH_THRESHOLD = 0.15
DEFAULT_MIN_RANKING_FACTOR = 1


def _check_pair(p: BowVector, q: BowVector) -> None:
    if p.degenerate or q.degenerate:
        raise DegenerateVectorError(
            "distance undefined for degenerate (zero-descriptor) histograms; "
            "callers must filter them out"
        )
    if p.bins.shape != q.bins.shape:
        raise ValueError(
            f"histograms differ in size: {p.bins.shape} vs {q.bins.shape}"
        )


def _hellinger_from_sqrt(sp: np.ndarray, sq: np.ndarray) -> float:
    # 1 - sum(sqrt(p q)) == 0.5 * ||sqrt(p) - sqrt(q)||^2 for unit-mass
    # histograms; the difference form is exactly zero for identical inputs,
    # which the naive form is not under floating point.
    d = sp - sq
    return float(np.sqrt(min(1.0, 0.5 * float(d @ d))))


def _chi_square_from_bins(p: np.ndarray, q: np.ndarray) -> float:
    s = p + q
    d = p - q
    mask = s > 0.0
    # halved so the range is [0, 1] for distributions, matching the matrix contract
    val = 0.5 * float(np.sum(d[mask] * d[mask] / s[mask]))
    return min(max(val, 0.0), 1.0)


def bhattacharyya(p: BowVector, q: BowVector) -> float:
    """Overlap coefficient sum_x sqrt(P(x) Q(x)), clamped into [0, 1]."""
    _check_pair(p, q)
    bc = float(np.sqrt(p.bins * q.bins).sum())
    return min(max(bc, 0.0), 1.0)


def hellinger(p: BowVector, q: BowVector) -> float:
    """Hellinger distance sqrt(1 - BC(P, Q)), in [0, 1]."""
    _check_pair(p, q)
    return _hellinger_from_sqrt(np.sqrt(p.bins), np.sqrt(q.bins))


def chi_square_distance(p: BowVector, q: BowVector) -> float:
    """Halved chi-square histogram distance, in [0, 1] for distributions."""
    _check_pair(p, q)
    return _chi_square_from_bins(p.bins, q.bins)


def comparison_count(sizes: Iterable[int]) -> int:
    """Number of cross-subsearch pairs for the given subsearch sizes:
    C(N, 2) minus the within-subsearch pairs."""
    try:
        sizes = [operator.index(s) for s in sizes]
    except TypeError as exc:
        raise ValueError("sizes must be integers") from exc
    if any(s < 0 for s in sizes):
        raise ValueError("sizes must be non-negative")
    total = sum(sizes)
    return math.comb(total, 2) - sum(math.comb(s, 2) for s in sizes)


@dataclass
class SimilarityMatrix:
    """Sparse upper-triangular store of cross-subsearch distances.

    image_ids is the fixed global comparison order (subsearch declaration
    order, then original rank) over non-degenerate images only; entries are
    keyed (id_i, id_j) with i before j in that order.
    """

    image_ids: list[str]
    labels: dict[str, str]
    entries: dict[tuple[str, str], float]
    excluded_degenerate: list[str] = field(default_factory=list)
    metric: str = METRIC_HELLINGER
    _order: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._order = {image_id: i for i, image_id in enumerate(self.image_ids)}

    def order_index(self, image_id: str) -> int:
        return self._order[image_id]

    def distance(self, a: str, b: str) -> float | None:
        i, j = self._order[a], self._order[b]
        if i > j:
            a, b = b, a
        return self.entries.get((a, b))

    @property
    def n_entries(self) -> int:
        return len(self.entries)

    def to_json_obj(self) -> dict:
        return {
            "metric": self.metric,
            "image_ids": self.image_ids,
            "labels": self.labels,
            "excluded_degenerate": self.excluded_degenerate,
            "entries": [[a, b, d] for (a, b), d in self.entries.items()],
        }

    @classmethod
    def from_json_obj(cls, doc: Mapping) -> "SimilarityMatrix":
        return cls(
            image_ids=list(doc["image_ids"]),
            labels=dict(doc["labels"]),
            entries={(a, b): float(d) for a, b, d in doc["entries"]},
            excluded_degenerate=list(doc["excluded_degenerate"]),
            metric=doc["metric"],
        )


def build_similarity_matrix(
    vectors: Sequence[BowVector],
    subsearch_of: Mapping[str, str],
    metric: str = METRIC_HELLINGER,
) -> SimilarityMatrix:
    """One distance entry per unordered cross-subsearch pair of non-degenerate
    histograms, in the order the vectors are given (which callers make the
    global subsearch-then-rank order).

    Degenerate vectors are excluded and logged; the entry count equals
    comparison_count over the per-subsearch counts of what remains.
    """
    if metric not in METRICS:
        raise MatchingError(f"unknown metric {metric!r}, expected one of {METRICS}")
    live: list[BowVector] = []
    excluded: list[str] = []
    for v in vectors:
        if v.image_id not in subsearch_of:
            raise MatchingError(f"no subsearch label for image {v.image_id!r}")
        if v.degenerate:
            excluded.append(v.image_id)
        else:
            live.append(v)
    if excluded:
        log.info("excluding %d degenerate histogram(s) from matching: %s",
                 len(excluded), ", ".join(excluded))
    labels = {v.image_id: subsearch_of[v.image_id] for v in live}
    if len(set(labels.values())) < 2:
        raise MatchingError(
            "matching requires non-degenerate images from at least 2 subsearches"
        )

    ids = [v.image_id for v in live]
    bins = np.stack([v.bins for v in live])
    label_arr = [labels[i] for i in ids]
    if metric == METRIC_HELLINGER:
        support = np.sqrt(bins)
        kernel = _hellinger_from_sqrt
    else:
        support = bins
        kernel = _chi_square_from_bins

    entries: dict[tuple[str, str], float] = {}
    n = len(ids)
    for i in range(n):
        si = support[i]
        for j in range(i + 1, n):
            if label_arr[i] == label_arr[j]:
                continue
            entries[(ids[i], ids[j])] = kernel(si, support[j])

    return SimilarityMatrix(
        image_ids=ids,
        labels=labels,
        entries=entries,
        excluded_degenerate=excluded,
        metric=metric,
    )


@dataclass
class RankingTable:
    """Per-image match lists; the ranking factor r is the match-list length."""

    image_ids: list[str]
    matches: dict[str, list[str]]
    labels: dict[str, str]

    def ranking_factor(self, image_id: str) -> int:
        return len(self.matches[image_id])


def compute_ranking_factors(
    matrix: SimilarityMatrix,
    match_threshold: float = DEFAULT_MATCH_THRESHOLD,
) -> RankingTable:
    """Count matches: images from different subsearches match when their
    distance is at or below the threshold (boundary inclusive)."""
    if not (0.0 <= match_threshold <= 1.0):
        raise ValueError("match_threshold must be in [0, 1]")
    matches: dict[str, list[str]] = {image_id: [] for image_id in matrix.image_ids}
    for (a, b), dist in matrix.entries.items():
        if dist <= match_threshold:
            matches[a].append(b)
            matches[b].append(a)
    return RankingTable(
        image_ids=list(matrix.image_ids),
        matches=matches,
        labels=dict(matrix.labels),
    )


@dataclass
class ResultSet:
    """Images whose ranking factor exceeds the selection threshold, ordered by
    descending r; ties broken by global comparison order for determinism."""

    items: list[tuple[str, int]]
    selection_threshold: int

    @property
    def image_ids(self) -> list[str]:
        return [image_id for image_id, _ in self.items]

    def to_json_obj(self) -> list[dict]:
        return [{"image_id": image_id, "r": r} for image_id, r in self.items]


def select_result_set(ranking: RankingTable, min_r: int = DEFAULT_MIN_RANKING_FACTOR) -> ResultSet:
    if min_r < 0:
        raise ValueError("min_r must be >= 0")
    order = {image_id: i for i, image_id in enumerate(ranking.image_ids)}
    kept = [
        (image_id, len(ranking.matches[image_id]))
        for image_id in ranking.image_ids
        if len(ranking.matches[image_id]) > min_r
    ]
    kept.sort(key=lambda item: (-item[1], order[item[0]]))
    return ResultSet(items=kept, selection_threshold=min_r)


def write_matrix_csv(matrix: SimilarityMatrix, path: Path | str) -> None:
    lines = ["image_id_i,image_id_j,distance"]
    lines.extend(f"{a},{b},{d!r}" for (a, b), d in matrix.entries.items())
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_ranking_csv(ranking: RankingTable, path: Path | str) -> None:
    lines = ["image_id,subsearch,r"]
    lines.extend(
        f"{image_id},{ranking.labels[image_id]},{len(ranking.matches[image_id])}"
        for image_id in ranking.image_ids
    )
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_result_set_json(result: ResultSet, path: Path | str) -> None:
    """The exported result set is a bare ordered JSON array."""
    atomic_write_text(
        path, json.dumps(result.to_json_obj(), sort_keys=True, separators=(",", ":"))
    )


def read_result_set_json(path: Path | str, selection_threshold: int = DEFAULT_MIN_RANKING_FACTOR) -> ResultSet:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return ResultSet(
        items=[(row["image_id"], int(row["r"])) for row in doc],
        selection_threshold=selection_threshold,
    )
