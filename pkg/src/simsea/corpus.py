"""Corpus handling: manifests, cached image fetching, grayscale decoding.

A corpus is described by a JSON manifest: one category (the basic search
term) and two or more subsearches, each pairing a label (cue + basic term)
with an ordered list of image sources. Sources are http(s) URLs or paths
relative to the manifest file. Fetched bytes land in a content-addressed
cache so reruns are free of network traffic.
"""
from __future__ import annotations

import io
import json
import logging
import time
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, ManifestError
from .util import atomic_write_bytes, atomic_write_json, sha256_hex

log = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_FETCH_ERROR = "fetch_error"
STATUS_DECODE_ERROR = "decode_error"

SUPPORTED_FORMATS = {"JPEG", "PNG"}

# ITU-R BT.601 luma weights
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

_CACHE_INDEX_NAME = "index.json"
_FETCH_TIMEOUT = 20.0
_USER_AGENT = "simsea/0.1"


@dataclass
class SubsearchSpec:
    """One subsearch: its label and the sources in original search order."""

    label: str
    sources: list[str]


@dataclass
class CorpusManifest:
    category: str
    version: int
    subsearches: list[SubsearchSpec]
    base_dir: Path = field(default_factory=Path)

    @property
    def subsearch_labels(self) -> list[str]:
        return [s.label for s in self.subsearches]


@dataclass
class ImageRecord:
    """One fetched image: identity, subsearch membership, fetch/decode outcome."""

    id: str
    subsearch_label: str
    original_rank: int
    source: str
    status: str
    content_hash: str | None = None
    width: int | None = None
    height: int | None = None

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "subsearch_label": self.subsearch_label,
            "original_rank": self.original_rank,
            "source": self.source,
            "status": self.status,
            "content_hash": self.content_hash,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ImageRecord":
        return cls(
            id=d["id"],
            subsearch_label=d["subsearch_label"],
            original_rank=d["original_rank"],
            source=d["source"],
            status=d["status"],
            content_hash=d.get("content_hash"),
            width=d.get("width"),
            height=d.get("height"),
        )


@dataclass
class GrayRaster:
    """Row-major luminance raster, values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.size == 0:
            raise ValueError("raster must be a non-empty 2-D array")
        if float(self.values.min()) < 0.0 or float(self.values.max()) > 1.0:
            raise ValueError("raster values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def record_id(subsearch_label: str, source: str) -> str:
    """Stable image id derived from manifest content, never from run time.

    (subsearch_label, source) is unique corpus-wide once within-subsearch
    duplicates are collapsed, and exists even for images that fail to fetch.
    """
    return sha256_hex(f"{subsearch_label}\x1f{source}".encode("utf-8"))[:16]


def load_manifest(path: Path | str) -> CorpusManifest:
    """Parse and validate a corpus manifest file.

    Within-subsearch duplicate sources are collapsed to the first occurrence
    (each collapse logged); duplicates across subsearches are preserved, they
    are the matching signal.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ManifestError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc

    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest root must be an object")
    category = doc.get("category")
    if not isinstance(category, str) or not category.strip():
        raise ManifestError(f"{path}: field 'category' must be a non-empty string")
    version = doc.get("version")
    if isinstance(version, bool) or not isinstance(version, int):
        raise ManifestError(f"{path}: field 'version' must be an integer")
    subs_raw = doc.get("subsearches")
    if not isinstance(subs_raw, list):
        raise ManifestError(f"{path}: field 'subsearches' must be a list")
    if len(subs_raw) < 2:
        raise ManifestError(
            f"{path}: at least 2 subsearches are required, got {len(subs_raw)}"
        )

    subsearches: list[SubsearchSpec] = []
    seen_labels: set[str] = set()
    for i, sub in enumerate(subs_raw):
        where = f"subsearches[{i}]"
        if not isinstance(sub, dict):
            raise ManifestError(f"{path}: {where} must be an object")
        label = sub.get("label")
        if not isinstance(label, str) or not label.strip():
            raise ManifestError(f"{path}: {where}.label must be a non-empty string")
        if label in seen_labels:
            raise ManifestError(f"{path}: duplicate subsearch label {label!r}")
        seen_labels.add(label)
        sources_raw = sub.get("sources")
        if not isinstance(sources_raw, list):
            raise ManifestError(f"{path}: {where}.sources must be a list")
        sources: list[str] = []
        seen_sources: set[str] = set()
        for j, src in enumerate(sources_raw):
            if not isinstance(src, str) or not src.strip():
                raise ManifestError(
                    f"{path}: {where}.sources[{j}] must be a non-empty string"
                )
            if src in seen_sources:
                log.warning(
                    "manifest %s: duplicate source %r within subsearch %r collapsed",
                    path, src, label,
                )
                continue
            seen_sources.add(src)
            sources.append(src)
        subsearches.append(SubsearchSpec(label=label, sources=sources))

    return CorpusManifest(
        category=category,
        version=version,
        subsearches=subsearches,
        base_dir=path.parent,
    )


def blob_path(cache_dir: Path | str, content_hash: str) -> Path:
    return Path(cache_dir) / content_hash


def load_cached_bytes(cache_dir: Path | str, content_hash: str) -> bytes:
    return blob_path(cache_dir, content_hash).read_bytes()


def _is_url(source: str) -> bool:
    return source.startswith(("http://", "https://"))


def _read_source(source: str, base_dir: Path, timeout: float) -> bytes:
    if _is_url(source):
        req = urllib.request.Request(source, headers={"User-Agent": _USER_AGENT})
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.read()
    p = Path(source)
    if not p.is_absolute():
        p = base_dir / p
    return p.read_bytes()


def _probe_image(data: bytes) -> tuple[int, int]:
    """Return (width, height); raise DecodeError for unsupported or broken bytes."""
    try:
        img = Image.open(io.BytesIO(data))
        if img.format not in SUPPORTED_FORMATS:
            raise DecodeError(f"unsupported image format {img.format!r}")
        width, height = img.size
        img.load()
    except DecodeError:
        raise
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image bytes: {exc}") from exc
    return width, height


def _load_index(cache_dir: Path) -> dict:
    index_path = cache_dir / _CACHE_INDEX_NAME
    if not index_path.exists():
        return {}
    try:
        doc = json.loads(index_path.read_text(encoding="utf-8"))
        entries = doc.get("entries", {})
        return entries if isinstance(entries, dict) else {}
    except (json.JSONDecodeError, OSError):
        log.warning("cache index %s unreadable, starting fresh", index_path)
        return {}


def _entry_usable(cache_dir: Path, entry: Mapping) -> bool:
    if entry.get("status") == STATUS_FETCH_ERROR:
        return True
    h = entry.get("hash")
    return bool(h) and blob_path(cache_dir, h).exists()


def _fetch_one(source: str, base_dir: Path, cache_dir: Path, timeout: float) -> dict:
    try:
        data = _read_source(source, base_dir, timeout)
    except Exception as exc:
        log.warning("fetch failed for %s: %s", source, exc)
        return {"hash": None, "status": STATUS_FETCH_ERROR,
                "width": None, "height": None, "timestamp": time.time()}
    content_hash = sha256_hex(data)
    blob = blob_path(cache_dir, content_hash)
    if not blob.exists():
        atomic_write_bytes(blob, data)
    try:
        width, height = _probe_image(data)
    except DecodeError as exc:
        log.warning("decode failed for %s: %s", source, exc)
        return {"hash": content_hash, "status": STATUS_DECODE_ERROR,
                "width": None, "height": None, "timestamp": time.time()}
    return {"hash": content_hash, "status": STATUS_OK,
            "width": width, "height": height, "timestamp": time.time()}


def fetch_images(
    manifest: CorpusManifest,
    cache_dir: Path | str,
    *,
    max_workers: int = 8,
    timeout: float = _FETCH_TIMEOUT,
) -> list[ImageRecord]:
    """Fetch every manifest source into the cache and return one record each.

    Failures never abort the run; they come back as records with status
    fetch_error or decode_error. A warm cache is authoritative: previously
    seen sources (including failed ones) are not retried, which keeps two
    runs over the same manifest and cache byte-identical.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    index = _load_index(cache_dir)

    pending: list[str] = []
    seen: set[str] = set()
    for sub in manifest.subsearches:
        for source in sub.sources:
            if source in seen:
                continue
            seen.add(source)
            entry = index.get(source)
            if entry is None or not _entry_usable(cache_dir, entry):
                pending.append(source)

    if pending:
        log.info("fetching %d source(s), %d already cached",
                 len(pending), len(seen) - len(pending))
        with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
            results = pool.map(
                lambda s: _fetch_one(s, manifest.base_dir, cache_dir, timeout),
                pending,
            )
            for source, entry in zip(pending, results):
                index[source] = entry
        atomic_write_json(cache_dir / _CACHE_INDEX_NAME,
                          {"version": 1, "entries": index})
    else:
        log.info("all %d source(s) cached, no transfers", len(seen))

    records: list[ImageRecord] = []
    for sub in manifest.subsearches:
        for rank, source in enumerate(sub.sources):
            entry = index[source]
            ok = entry["status"] == STATUS_OK
            records.append(ImageRecord(
                id=record_id(sub.label, source),
                subsearch_label=sub.label,
                original_rank=rank,
                source=source,
                status=entry["status"],
                content_hash=entry["hash"] if ok else None,
                width=entry["width"] if ok else None,
                height=entry["height"] if ok else None,
            ))
    return records


def decode_to_gray(data: bytes, max_dim: int = 640) -> GrayRaster:
    """Decode image bytes to a luminance raster, downscaled to fit max_dim.

    Luminance is 0.299 R + 0.587 G + 0.114 B on [0, 1] channels. Images whose
    longer side exceeds max_dim are downscaled with bilinear interpolation,
    preserving aspect ratio, so the longer side equals max_dim exactly.
    """
    if max_dim < 1:
        raise ValueError("max_dim must be >= 1")
    try:
        img = Image.open(io.BytesIO(data))
        fmt = img.format
        if fmt not in SUPPORTED_FORMATS:
            raise DecodeError(f"unsupported image format {fmt!r}")
        rgb = img.convert("RGB")
    except DecodeError:
        raise
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode image bytes: {exc}") from exc

    arr = np.asarray(rgb, dtype=np.float64) / 255.0
    gray = arr @ _LUMA_WEIGHTS
    height, width = gray.shape
    longest = max(width, height)
    if longest > max_dim:
        if width >= height:
            new_w = max_dim
            new_h = max(1, round(height * max_dim / width))
        else:
            new_h = max_dim
            new_w = max(1, round(width * max_dim / height))
        resized = Image.fromarray(gray.astype(np.float32), mode="F").resize(
            (new_w, new_h), Image.Resampling.BILINEAR
        )
        gray = np.clip(np.asarray(resized, dtype=np.float64), 0.0, 1.0)
    return GrayRaster(values=gray)
