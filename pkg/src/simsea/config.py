"""Pipeline configuration: file loading, flag overrides, semantic digest."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .features import DescriptorParams
from .matching import METRICS
from .util import canonical_json, file_sha256, sha256_hex

_PATH_KEYS = ("manifest", "cache_dir", "work_dir", "labels")
_KNOWN_KEYS = set(_PATH_KEYS) | {
    "descriptor", "k", "seed", "match_threshold", "min_r", "per_category",
    "metric", "max_dim", "fetch_workers",
}


@dataclass
class PipelineConfig:
    manifest: Path
    cache_dir: Path
    work_dir: Path
    descriptor: DescriptorParams = field(default_factory=DescriptorParams)
    k: int = 200
    seed: int = 0
    match_threshold: float = 0.15
    min_r: int = 1
    per_category: int = 40
    metric: str = "hellinger"
    labels: Path | None = None
    max_dim: int = 640
    fetch_workers: int = 8

    def __post_init__(self):
        self.manifest = Path(self.manifest)
        self.cache_dir = Path(self.cache_dir)
        self.work_dir = Path(self.work_dir)
        if self.labels is not None:
            self.labels = Path(self.labels)
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not (0.0 <= self.match_threshold <= 1.0):
            raise ConfigError("match_threshold must be in [0, 1]")
        if self.min_r < 0:
            raise ConfigError("min_r must be >= 0")
        if self.per_category < 1:
            raise ConfigError("per_category must be >= 1")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.max_dim < 1:
            raise ConfigError("max_dim must be >= 1")
        if self.fetch_workers < 1:
            raise ConfigError("fetch_workers must be >= 1")

    def digest(self) -> str:
        """Digest of everything that can change pipeline output.

        Input files enter as content hashes; storage locations and concurrency
        knobs are excluded because they must not affect results.
        """
        try:
            manifest_hash = file_sha256(self.manifest)
        except OSError as exc:
            raise ConfigError(f"cannot hash manifest {self.manifest}: {exc}") from exc
        labels_hash = None
        if self.labels is not None and self.labels.exists():
            labels_hash = file_sha256(self.labels)
        semantic = {
            "descriptor": self.descriptor.to_dict(),
            "k": self.k,
            "seed": self.seed,
            "match_threshold": self.match_threshold,
            "min_r": self.min_r,
            "per_category": self.per_category,
            "metric": self.metric,
            "max_dim": self.max_dim,
            "manifest_sha256": manifest_hash,
            "labels_sha256": labels_hash,
        }
        return sha256_hex(canonical_json(semantic).encode())


def load_config(path: Path | str, overrides: dict | None = None) -> PipelineConfig:
    """Load a JSON config file; non-None override values win over file values.

    Relative paths in the file are taken relative to the file's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config root must be an object")
    unknown = set(doc) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {sorted(unknown)}")
    if "manifest" not in doc:
        raise ConfigError(f"{path}: 'manifest' is required")

    base = path.parent
    kwargs: dict = {}
    for key, value in doc.items():
        if key in _PATH_KEYS and value is not None:
            p = Path(value)
            kwargs[key] = p if p.is_absolute() else base / p
        elif key == "descriptor":
            try:
                kwargs[key] = DescriptorParams.from_dict(value)
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{path}: bad descriptor params: {exc}") from exc
        else:
            kwargs[key] = value
    kwargs.setdefault("cache_dir", base / "cache")
    kwargs.setdefault("work_dir", base / "work")
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                kwargs[key] = value
    try:
        return PipelineConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
