import json
import logging
import urllib.request

import numpy as np
import pytest

from simsea.corpus import (
    GrayRaster,
    decode_to_gray,
    fetch_images,
    load_manifest,
    record_id,
)
from simsea.errors import DecodeError, ManifestError

from conftest import gif_bytes, jpeg_bytes, png_bytes, solid_rgb_png


def write_manifest(path, category="cup", subsearches=None, version=1):
    doc = {"category": category, "version": version,
           "subsearches": subsearches or []}
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


class TestLoadManifest:
    def test_three_subsearches(self, tmp_path):
        path = write_manifest(tmp_path / "m.json", subsearches=[
            {"label": "coffee cup", "sources": ["a.png"]},
            {"label": "tea cup", "sources": ["b.png"]},
            {"label": "cup", "sources": ["c.png"]},
        ])
        manifest = load_manifest(path)
        assert len(manifest.subsearches) == 3
        assert manifest.subsearch_labels == ["coffee cup", "tea cup", "cup"]
        assert manifest.base_dir == tmp_path

    def test_single_subsearch_rejected(self, tmp_path):
        path = write_manifest(tmp_path / "m.json", subsearches=[
            {"label": "cup", "sources": ["a.png"]},
        ])
        with pytest.raises(ManifestError, match="at least 2"):
            load_manifest(path)

    def test_duplicate_source_collapsed_with_warning(self, tmp_path, caplog):
        path = write_manifest(tmp_path / "m.json", subsearches=[
            {"label": "cup", "sources": ["a.png", "a.png", "b.png"]},
            {"label": "tea cup", "sources": ["a.png"]},
        ])
        with caplog.at_level(logging.WARNING, logger="simsea.corpus"):
            manifest = load_manifest(path)
        assert manifest.subsearches[0].sources == ["a.png", "b.png"]
        assert any("duplicate source" in rec.message for rec in caplog.records)
        # the same source in a different subsearch survives
        assert manifest.subsearches[1].sources == ["a.png"]

    def test_parse_error_reports_line(self, tmp_path):
        bad = tmp_path / "m.json"
        bad.write_text('{"category": "cup",\n  "version": oops}')
        with pytest.raises(ManifestError, match="line 2"):
            load_manifest(bad)

    def test_duplicate_label_rejected(self, tmp_path):
        path = write_manifest(tmp_path / "m.json", subsearches=[
            {"label": "cup", "sources": ["a.png"]},
            {"label": "cup", "sources": ["b.png"]},
        ])
        with pytest.raises(ManifestError, match="duplicate subsearch label"):
            load_manifest(path)

    def test_empty_source_rejected(self, tmp_path):
        path = write_manifest(tmp_path / "m.json", subsearches=[
            {"label": "cup", "sources": [""]},
            {"label": "tea cup", "sources": ["b.png"]},
        ])
        with pytest.raises(ManifestError, match="sources\\[0\\]"):
            load_manifest(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError, match="cannot read"):
            load_manifest(tmp_path / "nope.json")


def make_corpus(tmp_path, entries):
    """entries: {label: [(filename, bytes or None-for-missing), ...]}"""
    subsearches = []
    for label, files in entries.items():
        sources = []
        for name, data in files:
            if data is not None:
                (tmp_path / name).write_bytes(data)
            sources.append(name)
        subsearches.append({"label": label, "sources": sources})
    return write_manifest(tmp_path / "manifest.json", subsearches=subsearches)


class TestFetchImages:
    def test_local_fetch_ok(self, tmp_path):
        manifest = load_manifest(make_corpus(tmp_path, {
            "cup": [("a.png", solid_rgb_png(10, 20, 30))],
            "tea cup": [("b.png", solid_rgb_png(40, 50, 60))],
        }))
        records = fetch_images(manifest, tmp_path / "cache")
        assert [r.status for r in records] == ["ok", "ok"]
        assert all(r.content_hash and r.width == 8 and r.height == 8 for r in records)
        assert len({r.id for r in records}) == 2

    def test_failures_do_not_abort(self, tmp_path):
        manifest = load_manifest(make_corpus(tmp_path, {
            "cup": [("a.png", solid_rgb_png(1, 2, 3)), ("missing.png", None)],
            "tea cup": [("anim.gif", gif_bytes())],
        }))
        records = fetch_images(manifest, tmp_path / "cache")
        by_source = {r.source: r for r in records}
        assert by_source["a.png"].status == "ok"
        assert by_source["missing.png"].status == "fetch_error"
        assert by_source["missing.png"].content_hash is None
        assert by_source["anim.gif"].status == "decode_error"
        assert by_source["anim.gif"].content_hash is None

    def test_warm_cache_idempotent_and_offline(self, tmp_path, monkeypatch):
        calls = {"n": 0}
        payload = solid_rgb_png(9, 9, 9)

        class FakeResponse:
            def __enter__(self):
                return self

            def __exit__(self, *args):
                return False

            def read(self):
                return payload

        def fake_urlopen(req, timeout=None):
            calls["n"] += 1
            return FakeResponse()

        monkeypatch.setattr(urllib.request, "urlopen", fake_urlopen)
        manifest = load_manifest(make_corpus(tmp_path, {
            "cup": [("http://example.test/a.png", None)],
            "tea cup": [("http://example.test/b.png", None)],
        }))
        cache = tmp_path / "cache"
        first = fetch_images(manifest, cache)
        assert calls["n"] == 2
        second = fetch_images(manifest, cache)
        assert calls["n"] == 2, "warm cache must perform no network transfer"
        assert first == second

    def test_dead_url_is_fetch_error(self, tmp_path):
        manifest = load_manifest(make_corpus(tmp_path, {
            "cup": [("http://127.0.0.1:9/unreachable.png", None)],
            "tea cup": [("b.png", solid_rgb_png(7, 7, 7))],
        }))
        records = fetch_images(manifest, tmp_path / "cache", timeout=0.5)
        statuses = {r.source: r.status for r in records}
        assert statuses["http://127.0.0.1:9/unreachable.png"] == "fetch_error"
        assert statuses["b.png"] == "ok"

    def test_cross_subsearch_duplicates_stay_distinct_records(self, tmp_path):
        manifest = load_manifest(make_corpus(tmp_path, {
            "cup": [("shared.png", solid_rgb_png(5, 5, 5))],
            "tea cup": [("shared.png", None)],
        }))
        records = fetch_images(manifest, tmp_path / "cache")
        assert len(records) == 2
        assert records[0].content_hash == records[1].content_hash
        assert records[0].id != records[1].id

    def test_record_id_is_content_derived(self):
        assert record_id("cup", "a.png") == record_id("cup", "a.png")
        assert record_id("cup", "a.png") != record_id("tea cup", "a.png")


class TestDecodeToGray:
    def test_uniform_gray(self):
        raster = decode_to_gray(solid_rgb_png(128, 128, 128))
        assert raster.width == 8 and raster.height == 8
        assert np.ptp(raster.values) == 0.0
        assert raster.values[0, 0] == pytest.approx(128 / 255, abs=1e-12)

    def test_pure_red_luma(self):
        raster = decode_to_gray(solid_rgb_png(255, 0, 0))
        # derived by direct evaluation: 0.299 * 1.0 + 0.587 * 0 + 0.114 * 0
        assert np.allclose(raster.values, 0.299, atol=1e-12)

    def test_downscale_preserves_aspect(self):
        big = np.zeros((960, 1280, 3), dtype=np.uint8)
        big[..., 1] = 200
        raster = decode_to_gray(png_bytes(big), max_dim=640)
        assert (raster.width, raster.height) == (640, 480)

    def test_tall_image_downscale(self):
        tall = np.full((1000, 250, 3), 90, dtype=np.uint8)
        raster = decode_to_gray(png_bytes(tall), max_dim=500)
        assert raster.height == 500
        assert raster.width == 125

    def test_no_upscale(self):
        raster = decode_to_gray(solid_rgb_png(1, 2, 3, width=12, height=5), max_dim=640)
        assert (raster.width, raster.height) == (12, 5)

    def test_jpeg_supported(self, rng):
        arr = np.full((24, 16, 3), 128, dtype=np.uint8)
        raster = decode_to_gray(jpeg_bytes(arr))
        assert (raster.width, raster.height) == (16, 24)
        assert np.allclose(raster.values, 128 / 255, atol=0.02)

    def test_unsupported_format(self):
        with pytest.raises(DecodeError, match="unsupported"):
            decode_to_gray(gif_bytes())

    def test_garbage_bytes(self):
        with pytest.raises(DecodeError):
            decode_to_gray(b"not an image at all")

    def test_values_always_in_range(self, rng):
        arr = rng.integers(0, 256, size=(33, 47, 3))
        raster = decode_to_gray(png_bytes(arr), max_dim=30)
        assert raster.values.min() >= 0.0
        assert raster.values.max() <= 1.0
        assert (raster.height, raster.width) == (21, 30)

    def test_raster_invariants_enforced(self):
        with pytest.raises(ValueError):
            GrayRaster(values=np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            GrayRaster(values=np.array([[1.5]]))
