"""Pipeline configuration with the full system-parameter defaults.

Config files are YAML; secrets never live in them (only the names of the
environment variables that hold them). The config hash covers everything
that changes pipeline behavior, so checkpoints can refuse a resume under a
different configuration.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

import yaml

from .analysis import AnalysisConfig
from .code_analysis import CodeAnalysisConfig
from .errors import ConfigError
from .model import CitationStyle
from .refinement import LevelConfig, RefinementConfig
from .retrieval import RetrievalConfig
from .writing import WritingConfig

STAGES = ("retrieval", "understanding", "analysis", "code_analysis", "writing", "refinement")


@dataclass
class BackendConfig:
    kind: str = "http"  # http | scripted
    url: str = ""
    model: str = ""
    api_key_env: str = "LITSURVEY_API_KEY"
    rules_path: str = ""  # scripted transport rules file
    context_window: int = 512_000
    max_attempts: int = 10
    backoff_min: float = 1.0
    backoff_max: float = 300.0
    request_timeout: float = 120.0

    def api_key(self) -> str:
        return os.environ.get(self.api_key_env, "")


@dataclass
class EmbeddingConfig:
    kind: str = "hashed"  # hashed | http
    url: str = ""
    model: str = ""
    api_key_env: str = "LITSURVEY_EMBED_KEY"
    batch_size: int = 32


@dataclass
class SourceConfig:
    kind: str = "academic-graph"  # academic-graph | fixture
    base_url: str = "https://api.semanticscholar.org/graph/v1"
    api_key_env: str = "LITSURVEY_S2_KEY"
    fixture_path: str = ""
    preprint_fallback: bool = True
    preprint_url: str = "http://export.arxiv.org/api/query"


@dataclass
class EvaluationRunConfig:
    judge_rounds: int = 1
    explanations: bool = False
    nli_kind: str = "constant"  # constant | hash
    nli_default: bool = True
    premise_source: str = "abstract"  # abstract | keynote | tldr


@dataclass
class PipelineConfig:
    topic: str = ""
    workdir: str = "litsurvey-run"
    stages: tuple[str, ...] = STAGES
    code_analysis_enabled: bool = False
    use_skill_loop_fallback: bool = False
    stage_workers: int = 1  # bounded pool width for per-paper/per-cluster work
    parsed_docs_dir: str = ""
    repos_dir: str = ""
    backend: BackendConfig = field(default_factory=BackendConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    code_analysis: CodeAnalysisConfig = field(default_factory=CodeAnalysisConfig)
    writing: WritingConfig = field(default_factory=WritingConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    evaluation: EvaluationRunConfig = field(default_factory=EvaluationRunConfig)
    cache_expiry_seconds: Optional[float] = None

    def __post_init__(self):
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ConfigError(f"unknown stages: {unknown}")
        self.stages = tuple(self.stages)

    # Paths all hang off the workdir unless overridden by the caller.
    @property
    def substrate_dir(self) -> Path:
        return Path(self.workdir) / "substrate"

    @property
    def cache_dir(self) -> Path:
        return Path(self.workdir) / "cache"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.workdir) / "checkpoint.json"

    @property
    def survey_path(self) -> Path:
        return Path(self.workdir) / "survey.md"

    @property
    def sidecar_path(self) -> Path:
        return Path(self.workdir) / "survey.citations.json"

    @property
    def manifest_path(self) -> Path:
        return Path(self.workdir) / "manifest.json"

    def enabled_stages(self) -> list[str]:
        out = []
        for stage in self.stages:
            if stage == "code_analysis" and not self.code_analysis_enabled:
                continue
            out.append(stage)
        return out

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(_plain(self), sort_keys=True).encode("utf-8")
        ).hexdigest()[:16]


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (CitationStyle,)):
        return obj.value
    if isinstance(obj, frozenset):
        return sorted(obj)
    return obj


_NESTED = {
    PipelineConfig: {
        "backend": BackendConfig,
        "embedding": EmbeddingConfig,
        "source": SourceConfig,
        "retrieval": RetrievalConfig,
        "analysis": AnalysisConfig,
        "code_analysis": CodeAnalysisConfig,
        "writing": WritingConfig,
        "refinement": RefinementConfig,
        "evaluation": EvaluationRunConfig,
    },
    RefinementConfig: {
        "section": LevelConfig,
        "subsection": LevelConfig,
        "survey": LevelConfig,
    },
}

_TUPLE_FIELDS = {"stages", "order", "enabled", "backoff_bounds"}


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    nested = _NESTED.get(cls, {})
    kwargs = {}
    for name, value in data.items():
        if name in nested and isinstance(value, dict):
            kwargs[name] = _build(nested[name], value)
        elif name in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    try:
        return _build(PipelineConfig, data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc


def dump_config(config: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(
        yaml.safe_dump(_plain(config), sort_keys=False), encoding="utf-8"
    )


def default_config(topic: str, workdir: str = "litsurvey-run") -> PipelineConfig:
    return PipelineConfig(topic=topic, workdir=workdir)
