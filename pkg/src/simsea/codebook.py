"""Visual-word codebooks: training-image sampling, k-means, histogram encoding.

The codebook is a set of k centroid vectors in descriptor space. Training is
k-means++ seeded Lloyd iteration; encoding an image counts which centroid each
of its descriptors falls nearest to and L1-normalizes the counts into a
distribution.
"""
from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import ImageRecord
from .errors import CodebookError
from .features import DescriptorSet
from .util import atomic_write_text

log = logging.getLogger(__name__)


@dataclass
class Codebook:
    k: int
    dim: int
    centroids: np.ndarray          # (k, dim) float64
    seed: int
    training_image_ids: list[str] = field(default_factory=list)
    params_digest: str = ""
    distortion_history: list[float] = field(default_factory=list)


@dataclass
class BowVector:
    """L1-normalized histogram of visual-word occurrences for one image."""

    image_id: str
    bins: np.ndarray               # (k,) float64
    descriptor_count: int

    @property
    def degenerate(self) -> bool:
        return self.descriptor_count == 0


def sample_training_images(
    corpus_by_category: Mapping[str, Sequence[ImageRecord]],
    per_category: int,
    seed: int,
) -> list[ImageRecord]:
    """Uniform sample without replacement of decodable records per category.

    Deterministic given the seed and record order; categories are visited in
    sorted order so dict insertion order cannot change the draw.
    """
    if per_category < 1:
        raise ValueError("per_category must be >= 1")
    rng = np.random.default_rng(seed)
    sampled: list[ImageRecord] = []
    for category in sorted(corpus_by_category):
        pool = [r for r in corpus_by_category[category] if r.ok]
        if not pool:
            raise CodebookError(f"category {category!r} has no decodable images")
        take = min(per_category, len(pool))
        if take < per_category:
            log.warning(
                "category %r has only %d decodable images, requested %d; taking all",
                category, len(pool), per_category,
            )
        idx = rng.choice(len(pool), size=take, replace=False)
        sampled.extend(pool[i] for i in idx)
    return sampled


def _sqdist_to_point(X: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = X - c
    return np.einsum("nd,nd->n", d, d)


def _sqdist_matrix(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """(n, k) squared Euclidean distances via the expansion trick; values may
    carry small negative rounding noise, fine for argmin."""
    x2 = np.einsum("nd,nd->n", X, X)[:, None]
    c2 = np.einsum("kd,kd->k", C, C)[None, :]
    return x2 + c2 - 2.0 * (X @ C.T)


def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.clip(_sqdist_to_point(X, X[chosen[0]]), 0.0, None)
    while len(chosen) < k:
        total = float(d2.sum())
        if total <= 0.0:
            # fewer distinct descriptors than k: pin the surplus to data points
            log.warning(
                "k=%d exceeds the number of distinct descriptors; "
                "pinning %d surplus centroid(s) to duplicate points",
                k, k - len(chosen),
            )
            i = 0
            while len(chosen) < k:
                chosen.append(i % n)
                i += 1
            break
        j = int(rng.choice(n, p=d2 / total))
        chosen.append(j)
        d2 = np.minimum(d2, np.clip(_sqdist_to_point(X, X[j]), 0.0, None))
    return X[chosen].copy()


def train_codebook(
    descriptors: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 100,
    tol: float = 1e-4,
    *,
    training_image_ids: Sequence[str] = (),
    params_digest: str = "",
) -> Codebook:
    """k-means++ initialized Lloyd iteration over pooled descriptors.

    Stops when the largest centroid displacement drops below tol or after
    max_iters. Empty clusters are reseeded to the descriptor farthest from
    their current centroid unless the centroid already sits exactly on a data
    point (the pinned-duplicate case when k exceeds the distinct descriptor
    count). Mean squared distance to the assigned centroid is recorded at
    every assignment step; the sequence never increases.
    """
    X = np.ascontiguousarray(descriptors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise CodebookError("training requires at least one descriptor")
    if k < 1:
        raise CodebookError("k must be >= 1")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(X, k, rng)
    history: list[float] = []

    n = X.shape[0]
    rows = np.arange(n)
    x2 = np.einsum("nd,nd->n", X, X)
    scores = np.empty((n, k))
    for _ in range(max_iters):
        # argmin of ||x - c||^2 over c ignores the per-point ||x||^2 term,
        # which is added back only for the recorded distortion
        np.dot(X, centroids.T, out=scores)
        scores *= -2.0
        scores += np.einsum("kd,kd->k", centroids, centroids)[None, :]
        assign = np.argmin(scores, axis=1)
        history.append(float(np.clip(scores[rows, assign] + x2, 0.0, None).mean()))

        counts = np.bincount(assign, minlength=k)
        new_centroids = centroids.copy()
        nonempty = np.flatnonzero(counts)
        order = np.argsort(assign, kind="stable")
        boundaries = np.concatenate(([0], np.cumsum(counts[nonempty])[:-1]))
        sums = np.add.reduceat(X[order], boundaries, axis=0)
        new_centroids[nonempty] = sums / counts[nonempty, None]

        for j in np.flatnonzero(counts == 0):
            d2 = _sqdist_to_point(X, new_centroids[j])
            if float(d2.min()) == 0.0:
                continue  # pinned on a duplicate point, leave it
            new_centroids[j] = X[int(d2.argmax())]

        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break

    return Codebook(
        k=k,
        dim=X.shape[1],
        centroids=centroids,
        seed=seed,
        training_image_ids=list(training_image_ids),
        params_digest=params_digest,
        distortion_history=history,
    )


def quantize(descriptor: np.ndarray, codebook: Codebook) -> int:
    """Index of the nearest centroid by squared Euclidean distance.

    Ties break toward the lowest index. Distances are computed exactly
    (difference form), so the tie rule is honored bit-for-bit.
    """
    x = np.asarray(descriptor, dtype=np.float64)
    if x.shape != (codebook.dim,):
        raise CodebookError(
            f"descriptor dimension {x.shape} does not match codebook dim {codebook.dim}"
        )
    d2 = ((codebook.centroids - x) ** 2).sum(axis=1)
    return int(d2.argmin())


def quantize_batch(vectors: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Vectorized nearest-centroid assignment for an (n, dim) array, chunked
    to bound the distance-matrix allocation."""
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != codebook.dim:
        raise CodebookError(
            f"descriptor array shape {X.shape} does not match codebook dim {codebook.dim}"
        )
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    chunk = max(1, 4_000_000 // codebook.k)
    out = np.empty(X.shape[0], dtype=np.int64)
    for start in range(0, X.shape[0], chunk):
        stop = start + chunk
        out[start:stop] = np.argmin(
            _sqdist_matrix(X[start:stop], codebook.centroids), axis=1
        )
    return out


def bow_vector(descriptor_set: DescriptorSet, codebook: Codebook) -> BowVector:
    """Histogram of visual-word occurrences, L1-normalized to a distribution.

    An image with zero descriptors yields the all-zero vector, flagged
    degenerate; a distance over it is undefined and callers must filter.
    """
    n = descriptor_set.n
    if n == 0:
        return BowVector(
            image_id=descriptor_set.image_id,
            bins=np.zeros(codebook.k),
            descriptor_count=0,
        )
    assign = quantize_batch(descriptor_set.vectors, codebook)
    bins = np.bincount(assign, minlength=codebook.k).astype(np.float64) / n
    return BowVector(
        image_id=descriptor_set.image_id,
        bins=bins,
        descriptor_count=n,
    )


def save_codebook(codebook: Codebook, path: Path | str, extra: dict | None = None) -> None:
    """JSON header plus base64 blob of k x dim little-endian float32 centroids."""
    doc = {
        "k": codebook.k,
        "dim": codebook.dim,
        "seed": codebook.seed,
        "training_image_ids": codebook.training_image_ids,
        "params_digest": codebook.params_digest,
        "distortion_history": codebook.distortion_history,
        "centroids_b64": base64.b64encode(
            codebook.centroids.astype("<f4").tobytes()
        ).decode("ascii"),
    }
    if extra:
        doc.update(extra)
    atomic_write_text(path, json.dumps(doc, sort_keys=True))


def load_codebook(path: Path | str) -> Codebook:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    k, dim = doc["k"], doc["dim"]
    blob = base64.b64decode(doc["centroids_b64"])
    centroids = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(k, dim)
    return Codebook(
        k=k,
        dim=dim,
        centroids=centroids,
        seed=doc["seed"],
        training_image_ids=list(doc["training_image_ids"]),
        params_digest=doc.get("params_digest", ""),
        distortion_history=list(doc.get("distortion_history", [])),
    )
