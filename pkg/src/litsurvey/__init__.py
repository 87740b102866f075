"""litsurvey: agentic literature-survey pipeline with a citation-grounded
writing stage and a built-in evaluation engine."""

from .errors import SurveyError
from .model import (
    CitationMark,
    CitationStyle,
    Cluster,
    ClusterAnalysis,
    DraftUnit,
    ErrorMemory,
    Granularity,
    IdSource,
    Keynote,
    KnowledgeSubstrate,
    OutlineNode,
    PaperId,
    PaperRecord,
    Provenance,
    RelationEdge,
    unify_paper_id,
)
from .substrate import substrate_load, substrate_save
from .tokens import compress_context, estimate_tokens

__version__ = "0.1.0"

__all__ = [
    "CitationMark",
    "CitationStyle",
    "Cluster",
    "ClusterAnalysis",
    "DraftUnit",
    "ErrorMemory",
    "Granularity",
    "IdSource",
    "Keynote",
    "KnowledgeSubstrate",
    "OutlineNode",
    "PaperId",
    "PaperRecord",
    "Provenance",
    "RelationEdge",
    "SurveyError",
    "compress_context",
    "estimate_tokens",
    "substrate_load",
    "substrate_save",
    "unify_paper_id",
    "__version__",
]
