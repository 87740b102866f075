from __future__ import annotations

import json
import re
from pathlib import Path

import pytest

from litsurvey.config import PipelineConfig, default_config, dump_config, load_config
from litsurvey.errors import ConfigError
from litsurvey.evaluation import extract_claims
from litsurvey.model import Granularity
from litsurvey.pipeline import Checkpoint, build_backends, evaluate_run, run_pipeline
from litsurvey.substrate import substrate_load
from litsurvey.writing import check_evidence_locality

from e2e_fixture import TOPIC, enable_code_analysis, make_config


def fresh_run(tmp_path: Path, **kwargs):
    config = make_config(tmp_path)
    backends = build_backends(config)
    result = run_pipeline(config, backends=backends, **kwargs)
    return config, backends, result


class TestEndToEnd:
    def test_full_run_produces_survey_and_substrate(self, tmp_path):
        config, backends, result = fresh_run(tmp_path)
        assert result.survey_path is not None and result.survey_path.exists()
        assert config.sidecar_path.exists()
        substrate = substrate_load(config.substrate_dir)
        assert len(substrate.papers) == 12
        assert len(substrate.keynotes) == 12
        assert len(substrate.clusters) == 3
        assert substrate.outline is not None
        assert substrate.inter_cluster

    def test_valid_citation_closure(self, tmp_path):
        config, _, result = fresh_run(tmp_path)
        document = result.survey_path.read_text()
        sidecar = json.loads(config.sidecar_path.read_text())
        numbers = {e["number"] for e in sidecar["entries"]}
        body = document.split("## References")[0]
        cited = {int(n) for n in re.findall(r"\[(\d+)\]", body)}
        assert cited, "survey must cite something"
        assert cited <= numbers, "every in-text mark resolves to a bibliography entry"
        listed = {
            int(m.group(1))
            for m in re.finditer(r"^\[(\d+)\]", document.split("## References")[1], re.M)
        }
        assert numbers == listed, "bibliography matches the sidecar"
        assert cited == numbers, "no orphan bibliography entries"

    def test_evidence_locality_holds_for_every_unit(self, tmp_path):
        config, _, result = fresh_run(tmp_path)
        substrate = result.substrate
        units = [d for d in substrate.drafts if d.granularity is not Granularity.SURVEY]
        assert units
        assert check_evidence_locality(substrate.outline, units) == []

    def test_substrate_round_trips_after_run(self, tmp_path):
        config, _, result = fresh_run(tmp_path)
        loaded = substrate_load(config.substrate_dir)
        assert loaded == result.substrate

    def test_manifest_records_run_facts(self, tmp_path):
        config, backends, result = fresh_run(tmp_path)
        manifest = json.loads(config.manifest_path.read_text())
        assert manifest["topic"] == TOPIC
        assert manifest["config_hash"] == config.config_hash()
        assert manifest["transport_calls"] > 0
        assert set(manifest["completed_stages"]) == {
            "retrieval", "understanding", "analysis", "writing", "refinement",
        }

    def test_comparison_tables_exported_per_cluster(self, tmp_path):
        config, _, _ = fresh_run(tmp_path)
        tables = sorted((Path(config.workdir) / "tables").glob("cluster_*.tsv"))
        assert len(tables) == 3
        body = tables[0].read_text()
        assert body.startswith("paper\t")

    def test_skill_loop_fallback_replaces_the_planner(self, tmp_path):
        config = make_config(tmp_path)
        config.use_skill_loop_fallback = True
        backends = build_backends(config)
        result = run_pipeline(config, backends=backends)
        assert result.survey_path is not None
        transport = backends.gateway.transport
        assert not [c for c in transport.calls if "coordinate refinement" in c.prompt]
        assert [c for c in transport.calls if "Review this" in c.prompt]

    def test_bounded_workers_match_serial_output(self, tmp_path):
        serial_cfg = make_config(tmp_path / "serial")
        serial = run_pipeline(serial_cfg, backends=build_backends(serial_cfg))
        parallel_cfg = make_config(tmp_path / "parallel")
        parallel_cfg.stage_workers = 4
        parallel = run_pipeline(parallel_cfg, backends=build_backends(parallel_cfg))
        assert parallel.substrate.keynotes == serial.substrate.keynotes
        assert parallel.substrate.analyses == serial.substrate.analyses


class TestCodeAnalysisVariant:
    def test_disabled_by_default(self, tmp_path):
        config = make_config(tmp_path)
        assert "code_analysis" not in config.enabled_stages()

    def test_enabled_run_adds_reports_and_writer_context(self, tmp_path):
        config = enable_code_analysis(make_config(tmp_path), tmp_path)
        assert "code_analysis" in config.enabled_stages()
        backends = build_backends(config)
        result = run_pipeline(config, backends=backends)
        substrate = result.substrate
        assert "2406.10001" in substrate.code_reports
        pair = substrate.code_reports["2406.10001"]
        assert "pipeline class" in pair.code_report
        assert "requirements.txt" in pair.environment_report
        assert "integrated code report" in substrate.code_overview
        assert substrate.environment_overview
        assert "code_analysis" in result.checkpoint.completed_stages
        # repository findings reach the writer context
        transport = backends.gateway.transport
        draft_calls = [c for c in transport.calls if "Write the body of subsection" in c.prompt]
        assert draft_calls and all("Repository findings" in c.prompt for c in draft_calls)
        # reports persist through the substrate round trip
        assert substrate_load(config.substrate_dir).code_reports["2406.10001"] == pair


class TestCheckpointResume:
    def test_interrupt_after_analysis_then_resume_skips_stages(self, tmp_path):
        config = make_config(tmp_path)
        backends = build_backends(config)
        partial = run_pipeline(config, backends=backends, stop_after="analysis")
        assert partial.checkpoint.completed_stages == [
            "retrieval", "understanding", "analysis",
        ]
        assert partial.survey_path is None

        resumed_backends = build_backends(config)  # fresh transport, no cache reuse?
        result = run_pipeline(config, backends=resumed_backends, resume=True)
        assert result.survey_path is not None
        transport = resumed_backends.gateway.transport
        early_stage_patterns = (
            "seed_filter", "rerank", "structured keynote",
            "thematic clusters", "one or more clusters", "technical lineage",
        )
        for pattern in early_stage_patterns:
            assert not [c for c in transport.calls if pattern in c.prompt], (
                f"resume must not re-run stage work matching {pattern!r}"
            )
        assert [c for c in transport.calls if "outline of a survey" in c.prompt]

    def test_resume_after_completion_is_zero_backend_work(self, tmp_path):
        config = make_config(tmp_path)
        run_pipeline(config, backends=build_backends(config))
        backends = build_backends(config)
        result = run_pipeline(config, backends=backends, resume=True)
        assert backends.gateway.transport_calls == 0
        assert result.survey_path is not None

    def test_resume_with_changed_config_refused(self, tmp_path):
        config = make_config(tmp_path)
        run_pipeline(config, backends=build_backends(config), stop_after="retrieval")
        changed = make_config(tmp_path)
        changed.retrieval.max_seed_papers = 7
        with pytest.raises(ConfigError) as err:
            run_pipeline(changed, backends=build_backends(changed), resume=True)
        assert "configuration changed" in str(err.value)

    def test_resumed_run_is_byte_identical_to_straight_run(self, tmp_path):
        straight_cfg, _, straight = fresh_run(tmp_path / "straight")
        interrupted_cfg = make_config(tmp_path / "resumed")
        run_pipeline(
            interrupted_cfg,
            backends=build_backends(interrupted_cfg),
            stop_after="analysis",
        )
        resumed = run_pipeline(
            interrupted_cfg, backends=build_backends(interrupted_cfg), resume=True
        )
        straight_doc = straight.survey_path.read_text()
        resumed_doc = resumed.survey_path.read_text()
        # Front matter differs by run identity (timestamp, path-bearing
        # config hash); the survey content must match exactly.
        strip = lambda s: "\n".join(  # noqa: E731
            l
            for l in s.splitlines()
            if not l.startswith(("generated:", "config:"))
        )
        assert strip(straight_doc) == strip(resumed_doc)

    def test_checkpoint_file_shape(self, tmp_path):
        config = make_config(tmp_path)
        run_pipeline(config, backends=build_backends(config), stop_after="retrieval")
        checkpoint = Checkpoint.from_file(config.checkpoint_path)
        assert checkpoint.completed_stages == ["retrieval"]
        assert checkpoint.config_hash == config.config_hash()
        assert checkpoint.topic == TOPIC


class TestEvaluateRun:
    def test_report_files_written(self, tmp_path):
        config, backends, result = fresh_run(tmp_path)
        report = evaluate_run(config, result.survey_path, backends=backends)
        assert report.valid_ratio == 1.0
        assert report.recall == 1.0  # constant-true NLI backend
        assert report.weighted_total is not None
        base = str(result.survey_path).removesuffix(".md")
        assert Path(f"{base}.report.json").exists()
        assert Path(f"{base}.report.tsv").exists()

    def test_missing_sidecar_is_error(self, tmp_path):
        config, backends, result = fresh_run(tmp_path)
        config.sidecar_path.unlink()
        with pytest.raises(ConfigError):
            evaluate_run(config, result.survey_path, backends=backends)

    def test_claims_extracted_from_generated_survey(self, tmp_path):
        config, _, result = fresh_run(tmp_path)
        sidecar = json.loads(config.sidecar_path.read_text())
        claims = extract_claims(result.survey_path.read_text(), sidecar)
        assert claims, "generated survey carries citation-bearing claims"


class TestConfig:
    def test_yaml_round_trip_preserves_hash(self, tmp_path):
        config = make_config(tmp_path)
        path = tmp_path / "cfg.yaml"
        dump_config(config, path)
        loaded = load_config(path)
        assert loaded.config_hash() == config.config_hash()
        assert loaded.retrieval.max_seed_papers == config.retrieval.max_seed_papers

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("topic: x\nnot_a_field: 1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_hash_changes_with_behavioral_fields(self):
        a = default_config("t")
        b = default_config("t")
        assert a.config_hash() == b.config_hash()
        b.retrieval.per_seed_cap = 21
        assert a.config_hash() != b.config_hash()

    def test_system_parameter_defaults(self):
        config = default_config("t")
        assert config.backend.context_window == 512_000
        assert config.backend.max_attempts == 10
        assert (config.backend.backoff_min, config.backend.backoff_max) == (1.0, 300.0)
        assert config.retrieval.max_seed_papers == 15
        assert config.retrieval.expansion_depth == 1
        assert config.retrieval.per_seed_cap == 20
        assert config.writing.outline_temperature == 0.5
        assert config.writing.subsection_temperature == 0.7
        assert config.writing.section_temperature == 0.3
        assert config.code_analysis.max_rounds == 10
        assert config.code_analysis.planner_temperature == 0.0
        assert config.code_analysis.reviewer_temperature == 0.0
        assert config.code_analysis.reviser_temperature == 0.0
        assert config.code_analysis.creator_temperature == 0.3
        assert config.code_analysis.report_batch_size == 5
        assert config.refinement.survey.max_rounds == 5
        assert config.refinement.survey.planner_temperature == 0.7
        assert config.refinement.survey.reviewer_temperature == 1.0
        assert config.refinement.survey.reviser_temperature == 0.5
        assert config.refinement.subsection.planner_temperature == 0.1
        assert config.code_analysis_enabled is False

    def test_empty_topic_rejected_at_run(self, tmp_path):
        config = PipelineConfig(topic="", workdir=str(tmp_path))
        with pytest.raises(ConfigError):
            run_pipeline(config)

    def test_secrets_only_via_environment(self, tmp_path):
        config = default_config("t")
        dumped = tmp_path / "cfg.yaml"
        dump_config(config, dumped)
        text = dumped.read_text()
        assert "api_key_env" in text
        assert "api_key:" not in text
