"""Five-stage pipeline driver with checkpoint/resume and the run manifest.

Each completed stage persists the substrate and advances the checkpoint,
so an interrupted run resumes from the last completed stage without
re-issuing any backend call for finished work. A resume under a different
configuration is refused (config hash mismatch).
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import analysis as analysis_mod
from . import code_analysis as code_mod
from . import refinement as refinement_mod
from . import retrieval as retrieval_mod
from . import understanding as understanding_mod
from . import writing as writing_mod
from .config import PipelineConfig
from .errors import ConfigError, StageError, SurveyError
from .evaluation import EvaluationReport, evaluate_survey
from .gateway import (
    BackendProfile,
    Gateway,
    HashEmbedder,
    HttpChatTransport,
    HttpEmbedder,
    map_bounded,
)
from .model import (
    CodeReportPair,
    DraftUnit,
    Granularity,
    KnowledgeSubstrate,
)
from .runlog import RunLog
from .scripted import ConstantNli, HashNli, ScriptedTransport
from .sources import AcademicGraphSource, FixtureSource, PaperSource, PreprintSource
from .substrate import substrate_load, substrate_save
from .understanding import ParsedDocument


@dataclass
class Checkpoint:
    completed_stages: list[str]
    substrate_dir: str
    config_hash: str
    topic: str
    created_at: str

    def to_dict(self) -> dict:
        return {
            "completed_stages": list(self.completed_stages),
            "substrate_dir": self.substrate_dir,
            "config_hash": self.config_hash,
            "topic": self.topic,
            "created_at": self.created_at,
        }

    @classmethod
    def from_file(cls, path: Path) -> "Checkpoint":
        doc = json.loads(path.read_text(encoding="utf-8"))
        return cls(**doc)

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


@dataclass
class Backends:
    gateway: Gateway
    source: PaperSource
    fallback: Optional[PaperSource] = None
    nli: object = None


def build_backends(config: PipelineConfig) -> Backends:
    backend_cfg = config.backend
    profile = BackendProfile(
        context_window=backend_cfg.context_window,
        max_attempts=backend_cfg.max_attempts,
        backoff_bounds=(backend_cfg.backoff_min, backend_cfg.backoff_max),
    )
    if backend_cfg.kind == "scripted":
        if not backend_cfg.rules_path:
            raise ConfigError("scripted backend needs rules_path")
        try:
            transport = ScriptedTransport.from_rules_file(backend_cfg.rules_path)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load scripted rules: {exc}") from exc
    elif backend_cfg.kind == "http":
        if not backend_cfg.url:
            raise ConfigError("http backend needs a url")
        transport = HttpChatTransport(
            backend_cfg.url,
            backend_cfg.model,
            api_key=backend_cfg.api_key(),
            timeout=backend_cfg.request_timeout,
        )
    else:
        raise ConfigError(f"unknown backend kind '{backend_cfg.kind}'")

    if config.embedding.kind == "hashed":
        embedder = HashEmbedder()
    elif config.embedding.kind == "http":
        embedder = HttpEmbedder(
            config.embedding.url,
            config.embedding.model,
            api_key=os.environ.get(config.embedding.api_key_env, ""),
        )
    else:
        raise ConfigError(f"unknown embedding kind '{config.embedding.kind}'")

    gateway = Gateway(
        transport,
        embedder=embedder,
        profile=profile,
        cache_dir=str(config.cache_dir),
        cache_expiry=config.cache_expiry_seconds,
        embed_batch_size=config.embedding.batch_size,
    )

    if config.source.kind == "fixture":
        if not config.source.fixture_path:
            raise ConfigError("fixture source needs fixture_path")
        try:
            source: PaperSource = FixtureSource.from_file(config.source.fixture_path)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load paper fixture: {exc}") from exc
        fallback: Optional[PaperSource] = None
    elif config.source.kind == "academic-graph":
        source = AcademicGraphSource(
            config.source.base_url,
            api_key=os.environ.get(config.source.api_key_env, ""),
        )
        fallback = PreprintSource(config.source.preprint_url) if config.source.preprint_fallback else None
    else:
        raise ConfigError(f"unknown source kind '{config.source.kind}'")

    if config.evaluation.nli_kind == "constant":
        nli = ConstantNli(config.evaluation.nli_default)
    elif config.evaluation.nli_kind == "hash":
        nli = HashNli(seed=0)
    else:
        raise ConfigError(f"unknown nli kind '{config.evaluation.nli_kind}'")

    return Backends(gateway=gateway, source=source, fallback=fallback, nli=nli)


@dataclass
class RunResult:
    survey_path: Optional[Path]
    substrate: KnowledgeSubstrate
    checkpoint: Checkpoint
    manifest: dict
    runlog: RunLog = field(default_factory=RunLog)


def _discover_docs(config: PipelineConfig, substrate: KnowledgeSubstrate) -> dict[str, ParsedDocument]:
    docs: dict[str, ParsedDocument] = {}
    if not config.parsed_docs_dir:
        return docs
    root = Path(config.parsed_docs_dir)
    for canonical, record in substrate.papers.items():
        paper_dir = root / canonical
        if not paper_dir.is_dir():
            continue
        md_files = sorted(paper_dir.glob("*.md"))
        if not md_files:
            continue
        docs[canonical] = ParsedDocument(
            paper_id=record.id,
            markdown=md_files[0].read_text(encoding="utf-8"),
            source_path=str(md_files[0]),
        )
    return docs


def _stage_retrieval(config, substrate, backends, runlog):
    papers = retrieval_mod.run_retrieval(
        config.topic,
        config.retrieval,
        backends.source,
        backends.gateway,
        fallback=backends.fallback,
        runlog=runlog,
    )
    substrate.papers = {p.id.canonical: p for p in papers}
    substrate.log_event("stage_completed", stage="retrieval", papers=len(papers))


def _stage_understanding(config, substrate, backends, runlog):
    docs = _discover_docs(config, substrate)
    substrate.keynotes = understanding_mod.run_understanding(
        substrate.papers, docs, backends.gateway, runlog, workers=config.stage_workers
    )
    substrate.log_event(
        "stage_completed", stage="understanding", keynotes=len(substrate.keynotes)
    )


def _stage_analysis(config, substrate, backends, runlog):
    proposal = analysis_mod.design_clusters(
        substrate.keynotes, backends.gateway, config.analysis, runlog=runlog
    )
    clusters, _ = analysis_mod.assign_papers(
        proposal, substrate.keynotes, backends.gateway, config.analysis, runlog
    )
    clusters = analysis_mod.verify_and_repair(
        clusters, substrate.keynotes, backends.gateway, config.analysis, runlog=runlog
    )
    substrate.clusters = clusters
    populated = [c for c in clusters if c.members]
    substrate.analyses = map_bounded(
        lambda cluster: analysis_mod.analyze_cluster(
            cluster, substrate.keynotes, substrate.papers, backends.gateway,
            config.analysis, runlog,
        ),
        populated,
        config.stage_workers,
    )
    if len(clusters) >= 2:
        substrate.inter_cluster = analysis_mod.inter_cluster_analysis(
            clusters, substrate.analyses, substrate.papers, backends.gateway,
            config.analysis, runlog,
        )
    tables_dir = Path(config.workdir) / "tables"
    tables_dir.mkdir(parents=True, exist_ok=True)
    for item in substrate.analyses:
        if item.comparison_table is not None:
            (tables_dir / f"cluster_{item.cluster_id}.tsv").write_text(
                item.comparison_table.to_delimited(substrate.papers), encoding="utf-8"
            )
    substrate.log_event("stage_completed", stage="analysis", clusters=len(clusters))


def _stage_code_analysis(config, substrate, backends, runlog):
    repos = []
    if config.repos_dir:
        root = Path(config.repos_dir)
        for canonical in sorted(substrate.papers):
            repo_dir = root / canonical
            if repo_dir.is_dir():
                repos.append(
                    code_mod.RepoSnapshot.from_directory(
                        substrate.papers[canonical].id, repo_dir
                    )
                )
    pseudocodes = []
    for repo in repos:
        pseudocode, _trace = code_mod.run_pseudocode_loop(
            repo, backends.gateway, config.code_analysis, runlog=runlog
        )
        config_listing = ", ".join(sorted(repo.config_files)) or "no configuration found"
        substrate.code_reports[repo.paper_id.canonical] = CodeReportPair(
            code_report=pseudocode,
            environment_report=f"configuration files: {config_listing}",
        )
        if pseudocode:
            pseudocodes.append((repo.paper_id.canonical, pseudocode))
    if pseudocodes:
        substrate.code_overview = code_mod.batch_code_report(
            pseudocodes, config.topic, backends.gateway, config.code_analysis, runlog
        )
        substrate.environment_overview = code_mod.environment_report(
            repos, backends.gateway, config.code_analysis, runlog
        )
    substrate.log_event("stage_completed", stage="code_analysis", repos=len(repos))


def _writing_context(config, substrate, backends, runlog) -> writing_mod.WritingContext:
    extra = ""
    if config.code_analysis_enabled and (substrate.code_overview or substrate.environment_overview):
        extra = f"{substrate.code_overview}\n{substrate.environment_overview}".strip()
    return writing_mod.WritingContext(
        papers=substrate.papers,
        keynotes=substrate.keynotes,
        clusters=substrate.clusters,
        analyses=substrate.analyses,
        cfg=config.writing,
        gateway=backends.gateway,
        runlog=runlog,
        extra_context=extra,
    )


def _stage_writing(config, substrate, backends, runlog):
    ctx = _writing_context(config, substrate, backends, runlog)
    outline = writing_mod.draft_outline(ctx, config.topic)
    mapping = writing_mod.assign_citations(ctx, outline)
    writing_mod.apply_assignment(outline, mapping)
    substrate.outline = outline
    substrate.drafts = writing_mod.draft_all_units(ctx, outline)
    substrate.log_event("stage_completed", stage="writing", drafts=len(substrate.drafts))


def _stage_refinement(config, substrate, backends, runlog):
    ctx = refinement_mod.RefinementContext.from_substrate(
        substrate,
        backends.gateway,
        cfg=config.refinement,
        style=config.writing.citation_style,
        runlog=runlog,
    )
    body = writing_mod.compose_body(substrate.outline, substrate.drafts)
    survey_unit = DraftUnit(
        node_path=(substrate.outline.title,),
        text=body,
        citations=[],
        granularity=Granularity.SURVEY,
    )
    units, survey_unit = refinement_mod.refine_all(
        substrate.drafts,
        ctx,
        survey_unit=survey_unit,
        use_fallback_loop=config.use_skill_loop_fallback,
    )
    substrate.drafts = units
    if survey_unit is not None:
        # Re-extract the survey body's marks so the stored unit validates.
        from .marks import verify_citations

        verdict = verify_citations(
            survey_unit.text,
            substrate.papers.values(),
            config.writing.citation_style,
        )
        survey_unit = DraftUnit(
            node_path=survey_unit.node_path,
            text=survey_unit.text,
            citations=verdict.marks,
            granularity=Granularity.SURVEY,
        )
        substrate.drafts = units + [survey_unit]
    substrate.log_event("stage_completed", stage="refinement")


_STAGE_FUNCTIONS = {
    "retrieval": _stage_retrieval,
    "understanding": _stage_understanding,
    "analysis": _stage_analysis,
    "code_analysis": _stage_code_analysis,
    "writing": _stage_writing,
    "refinement": _stage_refinement,
}


def assemble_from_substrate(
    substrate: KnowledgeSubstrate, config: PipelineConfig, generated_at: str
) -> writing_mod.AssembledSurvey:
    survey_units = [d for d in substrate.drafts if d.granularity is Granularity.SURVEY]
    body = survey_units[-1].text if survey_units else None
    units = [d for d in substrate.drafts if d.granularity is not Granularity.SURVEY]
    return writing_mod.assemble_survey(
        substrate.outline,
        units,
        substrate.papers,
        config.writing.citation_style,
        topic=config.topic,
        generated_at=generated_at,
        config_hash=config.config_hash(),
        body=body,
    )


def run_pipeline(
    config: PipelineConfig,
    backends: Optional[Backends] = None,
    resume: bool = False,
    stop_after: Optional[str] = None,
    runlog: Optional[RunLog] = None,
) -> RunResult:
    """Execute the enabled stages, checkpointing after each.

    ``stop_after`` ends the run early (simulating interruption); ``resume``
    picks up from the checkpoint, refusing on a config-hash mismatch.
    """
    if not config.topic:
        raise ConfigError("config.topic must be non-empty")
    runlog = runlog or RunLog()
    backends = backends or build_backends(config)
    workdir = Path(config.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    config_hash = config.config_hash()

    checkpoint: Optional[Checkpoint] = None
    substrate = KnowledgeSubstrate()
    if resume and config.checkpoint_path.exists():
        checkpoint = Checkpoint.from_file(config.checkpoint_path)
        if checkpoint.config_hash != config_hash:
            raise ConfigError(
                "refusing to resume: the configuration changed since the "
                f"checkpoint was written (was {checkpoint.config_hash}, now {config_hash})"
            )
        substrate = substrate_load(checkpoint.substrate_dir)
        runlog.add("resumed", completed=list(checkpoint.completed_stages))
    if checkpoint is None:
        checkpoint = Checkpoint(
            completed_stages=[],
            substrate_dir=str(config.substrate_dir),
            config_hash=config_hash,
            topic=config.topic,
            created_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        )

    stage_timings: dict[str, float] = {}
    for stage in config.enabled_stages():
        if stage in checkpoint.completed_stages:
            runlog.add("stage_skipped", stage=stage)
            continue
        started = time.monotonic()
        try:
            _STAGE_FUNCTIONS[stage](config, substrate, backends, runlog)
        except SurveyError as exc:
            checkpoint.save(config.checkpoint_path)
            raise StageError(stage, exc) from exc
        stage_timings[stage] = round(time.monotonic() - started, 3)
        substrate_save(substrate, config.substrate_dir)
        checkpoint.completed_stages.append(stage)
        checkpoint.save(config.checkpoint_path)
        if stop_after == stage:
            break

    survey_path: Optional[Path] = None
    all_done = all(s in checkpoint.completed_stages for s in config.enabled_stages())
    if all_done and substrate.outline is not None:
        assembled = assemble_from_substrate(substrate, config, checkpoint.created_at)
        config.survey_path.write_text(assembled.document, encoding="utf-8")
        config.sidecar_path.write_text(assembled.sidecar_json(), encoding="utf-8")
        survey_path = config.survey_path

    manifest = {
        "topic": config.topic,
        "config_hash": config_hash,
        "backend": {"kind": config.backend.kind, "model": config.backend.model},
        "embedding": config.embedding.kind,
        "source": config.source.kind,
        "completed_stages": list(checkpoint.completed_stages),
        "stage_seconds": stage_timings,
        "transport_calls": backends.gateway.transport_calls,
        "cache_hits": backends.gateway.cache_hits,
        "attribution_events": len(runlog.attribution_events()),
    }
    config.manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return RunResult(
        survey_path=survey_path,
        substrate=substrate,
        checkpoint=checkpoint,
        manifest=manifest,
        runlog=runlog,
    )


def evaluate_run(
    config: PipelineConfig,
    survey_path: Path,
    backends: Optional[Backends] = None,
) -> EvaluationReport:
    """Score an assembled survey: citation metrics against the sidecar plus
    judge content scoring. Writes report.json and report.tsv next to it."""
    survey_path = Path(survey_path)
    sidecar_path = survey_path.with_suffix(".citations.json")
    if not sidecar_path.exists():
        sidecar_path = Path(str(survey_path).removesuffix(".md") + ".citations.json")
    if not survey_path.exists():
        raise ConfigError(f"survey not found: {survey_path}")
    if not sidecar_path.exists():
        raise ConfigError(f"citation sidecar not found: {sidecar_path}")
    backends = backends or build_backends(config)
    survey_text = survey_path.read_text(encoding="utf-8")
    citation_map = json.loads(sidecar_path.read_text(encoding="utf-8"))

    premises: dict[str, str] = {}
    universe: set[str] = {str(e["paper_id"]) for e in citation_map.get("entries", [])}
    if config.substrate_dir.exists():
        substrate = substrate_load(config.substrate_dir)
        universe = set(substrate.papers)
        source_kind = config.evaluation.premise_source
        for canonical, record in substrate.papers.items():
            keynote = substrate.keynotes.get(canonical)
            if source_kind == "keynote" and keynote is not None:
                premises[canonical] = keynote.tldr
            elif source_kind == "tldr":
                premises[canonical] = record.tldr or record.abstract
            else:
                premises[canonical] = record.abstract or record.tldr
    else:
        premises = {str(e["paper_id"]): str(e["title"]) for e in citation_map.get("entries", [])}

    report = evaluate_survey(
        survey_text,
        citation_map,
        nli=backends.nli,
        premises=premises,
        universe=universe,
        gateway=backends.gateway,
        judge_rounds=config.evaluation.judge_rounds,
        explanations=config.evaluation.explanations,
    )
    base = survey_path.with_suffix("")
    Path(f"{base}.report.json").write_text(
        json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
    )
    Path(f"{base}.report.tsv").write_text(report.to_table(), encoding="utf-8")
    return report
