"""Deterministic synthetic corpus generator for tests and demos.

Builds a polysemous-search stand-in on disk: one shared texture family (the
"category members") appears in every subsearch, each subsearch adds a
distractor texture family unique to it, and one small "near miss" family also
recurs across subsearches but is labeled a non-member by every subject. The
near misses exercise the known failure mode of cross-subsearch matching
(junk that happens to recur in many subsearches enters the result set) and
keep the rank/relevance comparison non-degenerate. Everything derives from one
seed, so a given call signature always produces byte-identical files.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .corpus import record_id
from .util import canonical_json

DEFAULT_CATEGORY = "mug"
DEFAULT_CUES = ("", "coffee", "tea", "travel", "office", "camping")

MEMBER_FREQ = (0.1197, 0.1203)

# one stripe angle per subsearch; 67.5 is reserved for the near-miss family
_DISTRACTOR_ANGLES = (0.0, 90.0, 45.0, 135.0, 22.5)
_NEAR_MISS_ANGLE = 67.5


@dataclass
class SyntheticCorpus:
    root: Path
    manifest_path: Path
    labels_path: Path
    category: str
    subsearch_labels: list[str]
    member_ids: set[str]
    near_miss_ids: set[str]
    ids_by_subsearch: dict[str, list[str]] = field(default_factory=dict)

    @property
    def image_ids(self) -> list[str]:
        return [i for ids in self.ids_by_subsearch.values() for i in ids]


def _rings(rng: np.random.Generator, size: int, freq_lo: float, freq_hi: float) -> np.ndarray:
    """Concentric rings around a jittered center; the shared member texture."""
    cx = size / 2 + rng.uniform(-0.01, 0.01) * size
    cy = size / 2 + rng.uniform(-0.01, 0.01) * size
    freq = rng.uniform(freq_lo, freq_hi)
    phase = rng.uniform(0, 2 * np.pi)
    y, x = np.mgrid[0:size, 0:size]
    radius = np.hypot(x - cx, y - cy)
    return 0.5 + 0.45 * np.sin(2 * np.pi * freq * radius + phase)


def _stripes(
    rng: np.random.Generator,
    size: int,
    angle_deg: float,
    freq_lo: float = 0.115,
    freq_hi: float = 0.125,
) -> np.ndarray:
    freq = rng.uniform(freq_lo, freq_hi)
    phase = rng.uniform(0, 2 * np.pi)
    theta = np.deg2rad(angle_deg)
    y, x = np.mgrid[0:size, 0:size]
    t = x * np.cos(theta) + y * np.sin(theta)
    return 0.5 + 0.45 * np.sin(2 * np.pi * freq * t + phase)


def _checker(rng: np.random.Generator, size: int) -> np.ndarray:
    freq = rng.uniform(0.115, 0.125)
    px = rng.uniform(0, 2 * np.pi)
    py = rng.uniform(0, 2 * np.pi)
    y, x = np.mgrid[0:size, 0:size]
    return 0.5 + 0.45 * np.sin(2 * np.pi * freq * x + px) * np.sin(2 * np.pi * freq * y + py)


def _distractor(rng: np.random.Generator, size: int, family: int) -> np.ndarray:
    if family < len(_DISTRACTOR_ANGLES):
        return _stripes(rng, size, _DISTRACTOR_ANGLES[family])
    return _checker(rng, size)


def _near_miss(rng: np.random.Generator, size: int) -> np.ndarray:
    return _stripes(rng, size, _NEAR_MISS_ANGLE, *MEMBER_FREQ)


def _finish(rng: np.random.Generator, tex: np.ndarray, noise: float) -> np.ndarray:
    noisy = tex + rng.normal(0.0, noise, tex.shape)
    return np.clip(noisy, 0.0, 1.0)


def _save_png(path: Path, tex: np.ndarray) -> None:
    img = Image.fromarray(np.round(tex * 255.0).astype(np.uint8), mode="L")
    img.save(path, format="PNG")


def generate_synthetic_corpus(
    root: Path | str,
    *,
    category: str = DEFAULT_CATEGORY,
    n_subsearches: int = 4,
    members_per: int = 20,
    distractors_per: int = 19,
    near_miss_per: int = 1,
    size: int = 112,
    n_subjects: int = 5,
    seed: int = 20130911,
    noise: float = 0.008,
) -> SyntheticCorpus:
    """Write images, manifest, and labels under root; return their metadata.

    The first subsearch is the bare category term, so it doubles as the plain
    search baseline. Member/distractor/near-miss order inside a subsearch is a
    seeded shuffle standing in for the original search rank.
    """
    if n_subsearches < 2:
        raise ValueError("need at least 2 subsearches")
    if n_subsearches > len(DEFAULT_CUES):
        raise ValueError(f"at most {len(DEFAULT_CUES)} subsearches supported")
    root = Path(root)
    images_dir = root / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    labels = [
        category if cue == "" else f"{cue} {category}"
        for cue in DEFAULT_CUES[:n_subsearches]
    ]
    member_ids: set[str] = set()
    near_miss_ids: set[str] = set()
    ids_by_subsearch: dict[str, list[str]] = {}
    subsearch_docs = []
    for sub_index, label in enumerate(labels):
        kinds = (
            ["member"] * members_per
            + ["distractor"] * distractors_per
            + ["nearmiss"] * near_miss_per
        )
        kinds = [kinds[i] for i in rng.permutation(len(kinds))]
        sources = []
        ids = []
        slug = label.replace(" ", "-")
        for rank, kind in enumerate(kinds):
            if kind == "member":
                tex = _rings(rng, size, *MEMBER_FREQ)
            elif kind == "distractor":
                tex = _distractor(rng, size, sub_index)
            else:
                tex = _near_miss(rng, size)
            tex = _finish(rng, tex, noise)
            name = f"{slug}_{rank:03d}_{kind}.png"
            _save_png(images_dir / name, tex)
            source = f"images/{name}"
            sources.append(source)
            image_id = record_id(label, source)
            ids.append(image_id)
            if kind == "member":
                member_ids.add(image_id)
            elif kind == "nearmiss":
                near_miss_ids.add(image_id)
        ids_by_subsearch[label] = ids
        subsearch_docs.append({"label": label, "sources": sources})

    manifest_path = root / "manifest.json"
    manifest_path.write_text(canonical_json({
        "category": category,
        "version": 1,
        "subsearches": subsearch_docs,
    }), encoding="utf-8")

    labels_path = root / "labels.csv"
    lines = ["image_id,subject_id,label"]
    subjects = [f"tp{i + 1}" for i in range(n_subjects)]
    for label in labels:
        for image_id in ids_by_subsearch[label]:
            member = "1" if image_id in member_ids else "0"
            for subject in subjects:
                lines.append(f"{image_id},{subject},{member}")
    labels_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    return SyntheticCorpus(
        root=root,
        manifest_path=manifest_path,
        labels_path=labels_path,
        category=category,
        subsearch_labels=labels,
        member_ids=member_ids,
        near_miss_ids=near_miss_ids,
        ids_by_subsearch=ids_by_subsearch,
    )
