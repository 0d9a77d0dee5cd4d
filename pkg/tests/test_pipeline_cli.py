import json

import pytest

from simsea.cli import main
from simsea.config import PipelineConfig, load_config
from simsea.errors import (
    ConfigError,
    MissingPrerequisiteError,
    PipelineLockedError,
    StaleArtifactError,
)
from simsea.pipeline import Pipeline, STAGES
from simsea.synth import generate_synthetic_corpus
from simsea.util import canonical_json


def small_config_doc(corp, k=16, seed=3, **extra):
    doc = {
        "manifest": str(corp.manifest_path),
        "cache_dir": "cache",
        "work_dir": "work",
        "k": k,
        "seed": seed,
        "per_category": 6,
        "labels": str(corp.labels_path),
    }
    doc.update(extra)
    return doc


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_corpus")
    return generate_synthetic_corpus(
        root, n_subsearches=2, members_per=5, distractors_per=3,
        near_miss_per=0, size=48, seed=77,
    )


@pytest.fixture()
def small_config(small_corpus, tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(canonical_json(small_config_doc(small_corpus)))
    return cfg_path


class TestConfig:
    def test_load_with_defaults(self, small_config):
        config = load_config(small_config)
        assert config.k == 16
        assert config.match_threshold == 0.15
        assert config.min_r == 1
        assert config.metric == "hellinger"
        assert config.work_dir == small_config.parent / "work"

    def test_overrides_win(self, small_config):
        config = load_config(small_config, overrides={"seed": 99, "min_r": None})
        assert config.seed == 99
        assert config.min_r == 1

    def test_unknown_key_rejected(self, tmp_path, small_corpus):
        path = tmp_path / "config.json"
        path.write_text(canonical_json(
            small_config_doc(small_corpus, banana=2)))
        with pytest.raises(ConfigError, match="banana"):
            load_config(path)

    def test_range_validation(self, small_corpus, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(canonical_json(
            small_config_doc(small_corpus, match_threshold=1.5)))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_digest_ignores_locations_and_workers(self, small_corpus, tmp_path):
        base = PipelineConfig(manifest=small_corpus.manifest_path,
                              cache_dir=tmp_path / "c1", work_dir=tmp_path / "w1",
                              k=16, seed=3)
        moved = PipelineConfig(manifest=small_corpus.manifest_path,
                               cache_dir=tmp_path / "c2", work_dir=tmp_path / "w2",
                               k=16, seed=3, fetch_workers=1)
        assert base.digest() == moved.digest()

    def test_digest_tracks_semantics(self, small_corpus, tmp_path):
        a = PipelineConfig(manifest=small_corpus.manifest_path,
                           cache_dir=tmp_path, work_dir=tmp_path, k=16, seed=3)
        b = PipelineConfig(manifest=small_corpus.manifest_path,
                           cache_dir=tmp_path, work_dir=tmp_path, k=17, seed=3)
        assert a.digest() != b.digest()


class TestPipelineStages:
    def test_run_all_produces_artifacts_with_digest(self, small_config):
        config = load_config(small_config)
        pipe = Pipeline(config)
        executed = pipe.run_all()
        assert executed == list(STAGES)
        digest = config.digest()
        for stage in STAGES:
            marker = json.loads(pipe.marker_path(stage).read_text())
            assert marker["config_digest"] == digest
        for name in ("records.json", "vectors.json", "match.json",
                     "ranking.json", "report.json"):
            doc = json.loads((pipe.work_dir / name).read_text())
            assert doc["config_digest"] == digest
        result = json.loads(pipe.result_set_path.read_text())
        assert isinstance(result, list) and result
        assert (pipe.work_dir / "matrix.csv").exists()
        assert (pipe.work_dir / "ranking.csv").exists()
        assert (pipe.work_dir / "report.csv").exists()
        assert (pipe.work_dir / "relevance_histogram.csv").exists()

    def test_rerun_is_noop(self, small_config):
        pipe = Pipeline(load_config(small_config))
        pipe.run_all()
        before = pipe.codebook_path.stat().st_mtime_ns
        assert pipe.run_stage("codebook") is False
        assert pipe.codebook_path.stat().st_mtime_ns == before
        assert pipe.run_all() == []

    def test_missing_prerequisite_names_stage(self, small_config):
        pipe = Pipeline(load_config(small_config))
        with pytest.raises(MissingPrerequisiteError) as err:
            pipe.run_stage("match")
        assert err.value.missing == "vectorize"

    def test_stale_artifact_requires_force(self, small_config, small_corpus, tmp_path):
        pipe = Pipeline(load_config(small_config))
        pipe.run_all()
        changed = tmp_path / "changed.json"
        changed.write_text(canonical_json(
            small_config_doc(small_corpus, seed=4)))
        pipe2 = Pipeline(load_config(changed))
        # same work dir, different digest
        pipe2.work_dir = pipe.work_dir
        with pytest.raises(StaleArtifactError):
            pipe2.run_stage("fetch")
        assert pipe2.run_stage("fetch", force=True) is True

    def test_lock_excludes_second_instance(self, small_config):
        pipe = Pipeline(load_config(small_config))
        with pipe.lock():
            with pytest.raises(PipelineLockedError):
                with pipe.lock():
                    pass
        # released on exit
        with pipe.lock():
            pass

    def test_evaluate_requires_labels(self, small_corpus, tmp_path):
        doc = small_config_doc(small_corpus)
        del doc["labels"]
        path = tmp_path / "config.json"
        path.write_text(canonical_json(doc))
        pipe = Pipeline(load_config(path))
        executed = pipe.run_all()
        assert "evaluate" not in executed
        assert not pipe.report_json_path.exists()

    def test_chi_square_metric_end_to_end(self, small_corpus, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(canonical_json(
            small_config_doc(small_corpus, metric="chi_square")))
        pipe = Pipeline(load_config(path))
        pipe.run_all()
        match = json.loads(pipe.match_json_path.read_text())
        assert match["metric"] == "chi_square"
        assert all(0.0 <= d <= 1.0 for _, _, d in match["entries"])
        result = json.loads(pipe.result_set_path.read_text())
        selected = {row["image_id"] for row in result}
        # the alternative metric still separates the shared family
        assert selected == small_corpus.member_ids


class TestCli:
    def test_run_all_and_report(self, small_config, capsys):
        assert main(["run", "--all", "-c", str(small_config)]) == 0
        assert main(["report", "-c", str(small_config), "--top", "3"]) == 0
        out = capsys.readouterr().out
        assert "SIMSEA" in out and "SumGoogle" in out
        assert "top 3" in out

    def test_report_formats(self, small_config, capsys):
        main(["run", "--all", "-c", str(small_config)])
        capsys.readouterr()
        assert main(["report", "-c", str(small_config), "--format", "json"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert "methods" in doc and "top" in doc
        assert main(["report", "-c", str(small_config), "--format", "csv"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "method,subject,precision,recall"

    def test_missing_prerequisite_exit_code(self, small_config):
        assert main(["match", "-c", str(small_config)]) == 2

    def test_validation_exit_code(self, tmp_path):
        bad = tmp_path / "config.json"
        bad.write_text("{not json")
        assert main(["fetch", "-c", str(bad)]) == 1

    def test_run_without_all_is_usage_error(self, small_config):
        assert main(["run", "-c", str(small_config)]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["fetch", "-c", str(tmp_path / "none.json")]) == 1

    def test_stage_sequence_via_cli(self, small_config):
        for stage in ("fetch", "features", "codebook", "vectorize",
                      "match", "rank", "clean", "evaluate"):
            assert main([stage, "-c", str(small_config)]) == 0

    def test_locked_workdir_exit_code(self, small_config):
        pipe = Pipeline(load_config(small_config))
        pipe.work_dir.mkdir(parents=True, exist_ok=True)
        lock = pipe.work_dir / ".lock"
        lock.write_text("held")
        try:
            assert main(["fetch", "-c", str(small_config)]) == 3
        finally:
            lock.unlink()


class TestDeterminism:
    def test_two_runs_byte_identical(self, small_corpus, tmp_path):
        outputs = []
        for name, workers in (("one", 1), ("two", 8)):
            cfg = PipelineConfig(
                manifest=small_corpus.manifest_path,
                cache_dir=tmp_path / name / "cache",
                work_dir=tmp_path / name / "work",
                k=16, seed=3, per_category=6,
                labels=small_corpus.labels_path,
                fetch_workers=workers,
            )
            pipe = Pipeline(cfg)
            pipe.run_all()
            outputs.append((
                pipe.result_set_path.read_bytes(),
                pipe.report_json_path.read_bytes(),
            ))
        assert outputs[0][0] == outputs[1][0]
        assert outputs[0][1] == outputs[1][1]
