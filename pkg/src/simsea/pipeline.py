"""Staged pipeline orchestration with cached, digest-stamped artifacts.

Stages run in a fixed order, each reading the previous stage's on-disk
artifact and writing its own atomically (temp file + rename). Every stage
leaves a marker embedding the config digest it was built under: a re-run with
an unchanged digest is a no-op, a digest mismatch refuses to overwrite unless
forced, and a missing upstream marker is a prerequisite error.
"""
from __future__ import annotations

import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import codebook as cb
from . import corpus as cp
from . import evaluation as ev
from . import features as ft
from . import matching as mt
from .config import PipelineConfig
from .errors import (
    CodebookError,
    ConfigError,
    MissingPrerequisiteError,
    PipelineLockedError,
    StaleArtifactError,
)
from .util import atomic_write_json, canonical_json

log = logging.getLogger(__name__)

STAGES = ("fetch", "features", "codebook", "vectorize", "match", "rank",
          "clean", "evaluate")

_PREREQ = {
    "fetch": None,
    "features": "fetch",
    "codebook": "features",
    "vectorize": "codebook",
    "match": "vectorize",
    "rank": "match",
    "clean": "rank",
    "evaluate": "clean",
}


class Pipeline:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.work_dir = Path(config.work_dir)
        self.digest = config.digest()

    # ---- artifact paths -------------------------------------------------

    def marker_path(self, stage: str) -> Path:
        return self.work_dir / f"{stage}.meta.json"

    @property
    def records_path(self) -> Path:
        return self.work_dir / "records.json"

    @property
    def descriptors_dir(self) -> Path:
        return self.work_dir / "descriptors"

    @property
    def codebook_path(self) -> Path:
        return self.work_dir / "codebook.json"

    @property
    def vectors_path(self) -> Path:
        return self.work_dir / "vectors.json"

    @property
    def matrix_csv_path(self) -> Path:
        return self.work_dir / "matrix.csv"

    @property
    def match_json_path(self) -> Path:
        return self.work_dir / "match.json"

    @property
    def ranking_csv_path(self) -> Path:
        return self.work_dir / "ranking.csv"

    @property
    def ranking_json_path(self) -> Path:
        return self.work_dir / "ranking.json"

    @property
    def result_set_path(self) -> Path:
        return self.work_dir / "result_set.json"

    @property
    def report_json_path(self) -> Path:
        return self.work_dir / "report.json"

    @property
    def report_csv_path(self) -> Path:
        return self.work_dir / "report.csv"

    @property
    def relevance_csv_path(self) -> Path:
        return self.work_dir / "relevance_histogram.csv"

    # ---- locking and stage bookkeeping ----------------------------------

    @contextmanager
    def lock(self):
        """One pipeline instance per work directory."""
        self.work_dir.mkdir(parents=True, exist_ok=True)
        lock_path = self.work_dir / ".lock"
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PipelineLockedError(
                f"work directory is locked by another run ({lock_path}); "
                "remove the file if that run is dead"
            ) from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            try:
                lock_path.unlink()
            except OSError:
                pass

    def stage_state(self, stage: str) -> str:
        """'fresh' (marker matches current digest), 'stale', or 'missing'."""
        marker = self.marker_path(stage)
        if not marker.exists():
            return "missing"
        try:
            doc = json.loads(marker.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return "missing"
        if doc.get("config_digest") != self.digest:
            return "stale"
        for rel in doc.get("outputs", []):
            if not (self.work_dir / rel).exists():
                return "missing"
        return "fresh"

    def _write_marker(self, stage: str, outputs: list[Path], meta: dict | None = None) -> None:
        doc = {
            "stage": stage,
            "config_digest": self.digest,
            "outputs": sorted(str(p.relative_to(self.work_dir)) for p in outputs),
        }
        if meta:
            doc["meta"] = meta
        atomic_write_json(self.marker_path(stage), doc)

    def run_stage(self, stage: str, force: bool = False) -> bool:
        """Run one stage; returns False when it was already up to date."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}, expected one of {STAGES}")
        state = self.stage_state(stage)
        if state == "fresh" and not force:
            log.info("stage %s: up to date (digest %s), no-op", stage, self.digest[:12])
            return False
        if state == "stale" and not force:
            raise StaleArtifactError(
                f"stage '{stage}' artifacts were built under a different config "
                "digest; pass --force to rebuild"
            )
        prereq = _PREREQ[stage]
        if prereq is not None and self.stage_state(prereq) != "fresh":
            raise MissingPrerequisiteError(stage, prereq)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        log.info("stage %s: running", stage)
        getattr(self, f"_run_{stage}")()
        return True

    def run_all(self, force: bool = False) -> list[str]:
        """Run every stage in order; evaluate is skipped without a labels path."""
        executed = []
        for stage in STAGES:
            if stage == "evaluate" and self.config.labels is None:
                log.info("no labels path configured, skipping evaluate stage")
                continue
            if self.run_stage(stage, force=force):
                executed.append(stage)
        return executed

    # ---- shared readers --------------------------------------------------

    def load_records(self) -> list[cp.ImageRecord]:
        doc = json.loads(self.records_path.read_text(encoding="utf-8"))
        return [cp.ImageRecord.from_dict(d) for d in doc["records"]]

    def load_vectors(self) -> tuple[list[str], dict[str, cb.BowVector]]:
        doc = json.loads(self.vectors_path.read_text(encoding="utf-8"))
        vectors = {
            image_id: cb.BowVector(
                image_id=image_id,
                bins=np.asarray(entry["bins"], dtype=np.float64),
                descriptor_count=entry["descriptor_count"],
            )
            for image_id, entry in doc["vectors"].items()
        }
        return list(doc["order"]), vectors

    # ---- stages ----------------------------------------------------------

    def _run_fetch(self) -> None:
        manifest = cp.load_manifest(self.config.manifest)
        records = cp.fetch_images(
            manifest, self.config.cache_dir, max_workers=self.config.fetch_workers
        )
        n_ok = sum(1 for r in records if r.ok)
        log.info("fetched %d record(s), %d ok", len(records), n_ok)
        atomic_write_json(self.records_path, {
            "config_digest": self.digest,
            "category": manifest.category,
            "subsearch_order": manifest.subsearch_labels,
            "records": [r.to_dict() for r in records],
        })
        self._write_marker("fetch", [self.records_path],
                           {"n_records": len(records), "n_ok": n_ok})

    def _run_features(self) -> None:
        records = self.load_records()
        self.descriptors_dir.mkdir(parents=True, exist_ok=True)
        per_image = {}
        skipped = {}
        outputs = []
        for rec in records:
            if not rec.ok:
                skipped[rec.id] = rec.status
                continue
            data = cp.load_cached_bytes(self.config.cache_dir, rec.content_hash)
            raster = cp.decode_to_gray(data, self.config.max_dim)
            dset = ft.extract_dense_descriptors(
                raster, self.config.descriptor, image_id=rec.id
            )
            path = self.descriptors_dir / f"{rec.id}.bin"
            ft.write_descriptor_dump(path, dset)
            per_image[rec.id] = {"count": dset.n}
            outputs.append(path)
        log.info("extracted descriptors for %d image(s), skipped %d",
                 len(per_image), len(skipped))
        self._write_marker("features", outputs,
                           {"dim": self.config.descriptor.dim,
                            "per_image": per_image, "skipped": skipped})

    def _run_codebook(self) -> None:
        records = self.load_records()
        doc = json.loads(self.records_path.read_text(encoding="utf-8"))
        category = doc["category"]
        groups = {category: [r for r in records if r.ok]}
        sampled = cb.sample_training_images(
            groups, self.config.per_category, self.config.seed
        )
        pools = []
        for rec in sampled:
            dset = ft.read_descriptor_dump(
                self.descriptors_dir / f"{rec.id}.bin", image_id=rec.id
            )
            if dset.n:
                pools.append(dset.vectors)
        if not pools:
            raise CodebookError("no descriptors available for codebook training")
        pooled = np.concatenate(pools, axis=0)
        log.info("training codebook: k=%d over %d descriptors from %d image(s)",
                 self.config.k, pooled.shape[0], len(sampled))
        book = cb.train_codebook(
            pooled,
            self.config.k,
            self.config.seed,
            training_image_ids=[r.id for r in sampled],
            params_digest=self.config.descriptor.digest(),
        )
        cb.save_codebook(book, self.codebook_path, extra={"config_digest": self.digest})
        self._write_marker("codebook", [self.codebook_path],
                           {"n_training_descriptors": int(pooled.shape[0]),
                            "iterations": len(book.distortion_history)})

    def _run_vectorize(self) -> None:
        records = self.load_records()
        book = cb.load_codebook(self.codebook_path)
        order = []
        vectors = {}
        for rec in records:
            if not rec.ok:
                continue
            dset = ft.read_descriptor_dump(
                self.descriptors_dir / f"{rec.id}.bin", image_id=rec.id
            )
            bow = cb.bow_vector(dset, book)
            order.append(rec.id)
            vectors[rec.id] = {
                "bins": bow.bins.tolist(),
                "descriptor_count": bow.descriptor_count,
            }
        n_degenerate = sum(1 for v in vectors.values() if v["descriptor_count"] == 0)
        log.info("encoded %d image(s), %d degenerate", len(order), n_degenerate)
        atomic_write_json(self.vectors_path, {
            "config_digest": self.digest,
            "k": book.k,
            "order": order,
            "vectors": vectors,
        })
        self._write_marker("vectorize", [self.vectors_path],
                           {"n_images": len(order), "n_degenerate": n_degenerate})

    def _run_match(self) -> None:
        records = self.load_records()
        order, vectors = self.load_vectors()
        labels = {rec.id: rec.subsearch_label for rec in records}
        matrix = mt.build_similarity_matrix(
            [vectors[image_id] for image_id in order],
            labels,
            metric=self.config.metric,
        )
        mt.write_matrix_csv(matrix, self.matrix_csv_path)
        obj = matrix.to_json_obj()
        obj["config_digest"] = self.digest
        atomic_write_json(self.match_json_path, obj)
        log.info("similarity matrix: %d entries over %d image(s)",
                 matrix.n_entries, len(matrix.image_ids))
        self._write_marker("match", [self.matrix_csv_path, self.match_json_path],
                           {"n_entries": matrix.n_entries,
                            "excluded_degenerate": matrix.excluded_degenerate})

    def _load_matrix(self) -> mt.SimilarityMatrix:
        doc = json.loads(self.match_json_path.read_text(encoding="utf-8"))
        return mt.SimilarityMatrix.from_json_obj(doc)

    def _run_rank(self) -> None:
        matrix = self._load_matrix()
        table = mt.compute_ranking_factors(matrix, self.config.match_threshold)
        mt.write_ranking_csv(table, self.ranking_csv_path)
        atomic_write_json(self.ranking_json_path, {
            "config_digest": self.digest,
            "image_ids": table.image_ids,
            "labels": table.labels,
            "matches": table.matches,
        })
        matched = sum(1 for m in table.matches.values() if m)
        log.info("ranking factors computed: %d image(s) with at least one match",
                 matched)
        self._write_marker("rank", [self.ranking_csv_path, self.ranking_json_path],
                           {"n_matched": matched})

    def _run_clean(self) -> None:
        doc = json.loads(self.ranking_json_path.read_text(encoding="utf-8"))
        table = mt.RankingTable(
            image_ids=list(doc["image_ids"]),
            matches={k: list(v) for k, v in doc["matches"].items()},
            labels=dict(doc["labels"]),
        )
        result = mt.select_result_set(table, self.config.min_r)
        mt.write_result_set_json(result, self.result_set_path)
        log.info("result set: %d image(s) with r > %d",
                 len(result.items), self.config.min_r)
        self._write_marker("clean", [self.result_set_path],
                           {"n_selected": len(result.items),
                            "min_r": self.config.min_r})

    def _run_evaluate(self) -> None:
        if self.config.labels is None:
            raise ConfigError("evaluate requires a labels path in the config")
        records = self.load_records()
        doc = json.loads(self.records_path.read_text(encoding="utf-8"))
        category = doc["category"]
        ok_records = [r for r in records if r.ok]
        ok_ids = [r.id for r in ok_records]
        labels = ev.load_labels(self.config.labels, ok_ids)
        union = set(ok_ids)
        google_label = next(
            (lbl for lbl in doc["subsearch_order"] if lbl == category), None
        )
        google = (
            {r.id for r in ok_records if r.subsearch_label == google_label}
            if google_label is not None else None
        )
        result = mt.read_result_set_json(self.result_set_path, self.config.min_r)
        report = ev.evaluate_methods(
            result, google, union, labels, google_label=google_label
        )
        _, vectors = self.load_vectors()
        degenerate = sorted(i for i, v in vectors.items() if v.degenerate)
        failed = {
            cp.STATUS_FETCH_ERROR: sorted(
                r.id for r in records if r.status == cp.STATUS_FETCH_ERROR
            ),
            cp.STATUS_DECODE_ERROR: sorted(
                r.id for r in records if r.status == cp.STATUS_DECODE_ERROR
            ),
        }
        out = report.to_dict()
        out.update({
            "config_digest": self.digest,
            "category": category,
            "degenerate_images": degenerate,
            "failed_images": failed,
            "counts": {
                "images_total": len(records),
                "images_ok": len(ok_ids),
                "result_set": len(result.items),
                "subjects": len(labels.subjects),
            },
        })
        atomic_write_json(self.report_json_path, out)
        ev.write_report_csv(report, self.report_csv_path)
        ev.write_relevance_histogram_csv(report, self.relevance_csv_path)
        log.info("evaluation written for %d subject(s)", len(labels.subjects))
        self._write_marker(
            "evaluate",
            [self.report_json_path, self.report_csv_path, self.relevance_csv_path],
        )

    # ---- report rendering -------------------------------------------------

    def report_payload(self, top: int = 10) -> dict:
        if self.stage_state("evaluate") != "fresh":
            raise MissingPrerequisiteError("report", "evaluate")
        report = json.loads(self.report_json_path.read_text(encoding="utf-8"))
        result = json.loads(self.result_set_path.read_text(encoding="utf-8"))
        source_of = {r.id: r.source for r in self.load_records()}
        report["top"] = [
            {"image_id": row["image_id"], "r": row["r"],
             "source": source_of.get(row["image_id"])}
            for row in result[:max(0, top)]
        ]
        return report


def _fmt(value) -> str:
    return "undef" if value is None else f"{value:.3f}"


def render_report_table(payload: dict) -> str:
    lines = []
    lines.append(f"category: {payload.get('category', '?')}")
    counts = payload.get("counts", {})
    lines.append(
        "images: {images_ok}/{images_total} decoded, result set {result_set}".format(
            **{k: counts.get(k, "?") for k in
               ("images_ok", "images_total", "result_set")}
        )
    )
    lines.append("")
    lines.append(f"{'method':<10} {'subject':<12} {'precision':>9} {'recall':>9}")
    for method in ev.METHODS:
        rows = payload["methods"].get(method, {})
        for subject in sorted(rows):
            row = rows[subject]
            lines.append(
                f"{method:<10} {subject:<12} "
                f"{_fmt(row['precision']):>9} {_fmt(row['recall']):>9}"
            )
    lines.append("")
    lines.append(f"{'method':<10} {'mean_p':>7} {'var_p':>7} {'mean_r':>7} {'var_r':>7}")
    for method in ev.METHODS:
        agg = payload["aggregates"].get(method, {})
        lines.append(
            f"{method:<10} {_fmt(agg.get('mean_precision')):>7} "
            f"{_fmt(agg.get('var_precision')):>7} "
            f"{_fmt(agg.get('mean_recall')):>7} {_fmt(agg.get('var_recall')):>7}"
        )
    lines.append("")
    hist = " ".join(
        f"{row['count']}:{row['frequency']}"
        for row in payload["relevance_histogram"]
    )
    lines.append(f"relevance histogram (votes:images): {hist}")
    lines.append(
        f"rank/relevance agreement: {_fmt(payload['rank_relevance_agreement'])}"
    )
    if payload.get("top"):
        lines.append("")
        lines.append(f"top {len(payload['top'])} by ranking factor:")
        for row in payload["top"]:
            lines.append(f"  r={row['r']:<4d} {row['image_id']}  {row['source']}")
    for note in payload.get("notes", []):
        lines.append(f"note: {note}")
    return "\n".join(lines)


def render_report_csv(payload: dict) -> str:
    lines = ["method,subject,precision,recall"]
    for method in ev.METHODS:
        rows = payload["methods"].get(method, {})
        for subject in sorted(rows):
            row = rows[subject]
            p = "" if row["precision"] is None else repr(row["precision"])
            r = "" if row["recall"] is None else repr(row["recall"])
            lines.append(f"{method},{subject},{p},{r}")
    return "\n".join(lines) + "\n"


def render_report_json(payload: dict) -> str:
    return canonical_json(payload)
